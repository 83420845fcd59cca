import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from ovtad import tensor as tc
from ovtad.data import Segment
from ovtad.encoder import level_lengths
from ovtad.losses import (
    LossWeights, assign_target_arrays, assign_targets, diou_loss, focal_loss, mva_loss,
    regression_ranges, total_loss,
)
from ovtad.tensor import Tensor, gradcheck


def seg(s, e, vid="v"):
    return Segment(vid, float(s), float(e), "a")


# ---------------------------------------------------------------------------
# assignment: brute-force enumeration oracle
# ---------------------------------------------------------------------------

def oracle_assign(T, L, gts):
    bounds = [0, 4, 8, 16, 32, 64, math.inf] if L == 6 else \
        [0] + [2 ** (l + 1) for l in range(1, L)] + [math.inf]
    out = {}
    n = T
    for l in range(1, L + 1):
        n = max(1, -(-n // 2))
        for t in range(n):
            c = t * 2 ** l
            best = None
            for gi, g in enumerate(gts):
                if not (g.start <= c <= g.end):
                    continue
                reach = max(c - g.start, g.end - c)
                if bounds[l - 1] < reach <= bounds[l]:
                    if best is None or g.end - g.start < gts[best].end - gts[best].start:
                        best = gi
            if best is not None:
                g = gts[best]
                out[(l, t)] = (best, (c - g.start) / 2 ** l, (g.end - c) / 2 ** l)
    return out


def positives(frames):
    return {(f.level, f.index): (f.gt_index, f.target_d_start, f.target_d_end)
            for f in frames if f.is_positive}


def test_regression_ranges_l6():
    assert regression_ranges(6) == [0, 4, 8, 16, 32, 64, math.inf]


def test_no_gt_all_negative():
    frames = assign_targets(level_lengths(128, 6), [], 128)
    assert len(frames) == 126 and not any(f.is_positive for f in frames)


def test_whole_video_gt_lands_on_coarse_levels():
    gts = [seg(0, 128)]
    got = positives(assign_targets(level_lengths(128, 6), gts, 128))
    assert got == oracle_assign(128, 6, gts)
    levels = {l for l, _ in got}
    assert levels <= {5, 6} and levels
    assert 1 not in levels


def test_four_frame_action_only_on_level_one():
    gts = [seg(10, 14)]
    got = positives(assign_targets(level_lengths(128, 6), gts, 128))
    assert got == oracle_assign(128, 6, gts)
    assert {l for l, _ in got} == {1}
    assert all(10 <= t * 2 <= 14 for _, t in got)


def test_assignment_matches_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        T = int(rng.integers(16, 300))
        L = int(rng.integers(1, 7))
        gts = []
        for _ in range(int(rng.integers(0, 5))):
            s = float(rng.integers(0, T - 1))
            e = float(rng.integers(s + 1, T + 1))
            gts.append(seg(s, e))
        got = positives(assign_targets(level_lengths(T, L), gts, T))
        want = oracle_assign(T, L, gts)
        assert got.keys() == want.keys()
        for k in got:
            assert got[k][0] == want[k][0]
            assert got[k][1:] == pytest.approx(want[k][1:])


def test_malformed_gt_names_video():
    with pytest.raises(ValueError, match="vid42"):
        assign_targets([4, 2], [Segment("vid42", 0.0, 20.0, "a")], T=8)


# ---------------------------------------------------------------------------
# DIoU
# ---------------------------------------------------------------------------

def test_diou_identical_is_zero():
    assert diou_loss((1.0, 3.0), (1.0, 3.0)).item() == 0.0


def test_diou_overlap_value():
    assert diou_loss((1.0, 3.0), (0.0, 2.0)).item() == pytest.approx(1 - 1 / 3 + 1 / 9, abs=1e-12)
    assert diou_loss((1.0, 3.0), (0.0, 2.0)).item() == pytest.approx(0.7778, abs=1e-4)


def test_diou_disjoint_value():
    assert diou_loss((10.0, 12.0), (0.0, 2.0)).item() == pytest.approx(1 + 100 / 144, abs=1e-12)
    assert diou_loss((10.0, 12.0), (0.0, 2.0)).item() == pytest.approx(1.6944, abs=1e-4)


def test_diou_rejects_degenerate():
    with pytest.raises(ValueError):
        diou_loss((2.0, 2.0), (0.0, 1.0))


interval = st.tuples(st.floats(-50, 50), st.floats(0.01, 30)).map(lambda t: (t[0], t[0] + t[1]))


@given(interval, interval, st.floats(-20, 20), st.floats(0.1, 10))
def test_diou_invariances(p, g, shift, k):
    base = diou_loss(p, g).item()
    assert base >= 0
    assert base < 2
    moved = diou_loss((p[0] + shift, p[1] + shift), (g[0] + shift, g[1] + shift)).item()
    scaled = diou_loss((p[0] * k, p[1] * k), (g[0] * k, g[1] * k)).item()
    assert moved == pytest.approx(base, abs=1e-6)
    assert scaled == pytest.approx(base, abs=1e-6)


@given(interval, interval)
def test_diou_zero_iff_equal(p, g):
    assume(abs(p[0] - g[0]) > 1e-3 or abs(p[1] - g[1]) > 1e-3)
    assert diou_loss(p, g).item() > 0


# ---------------------------------------------------------------------------
# focal
# ---------------------------------------------------------------------------

def test_focal_confident_positive():
    assert focal_loss(1 - 1e-7, True).item() == pytest.approx(0.0, abs=1e-15)


def test_focal_value():
    # 0.25 * (0.1)^2 * -ln(0.9)
    assert focal_loss(0.9, True, 0.25, 2.0).item() == pytest.approx(2.634e-4, abs=1e-7)
    assert focal_loss(0.9, True, 0.25, 2.0).item() == pytest.approx(
        0.25 * 0.01 * -math.log(0.9), rel=1e-12)


@pytest.mark.parametrize("p,pos", [(0.3, True), (0.3, False), (0.8, False)])
def test_focal_gamma_zero_is_half_ce(p, pos):
    ce = -math.log(p if pos else 1 - p)
    assert focal_loss(p, pos, 0.5, 0.0).item() == pytest.approx(0.5 * ce, rel=1e-12)


def test_focal_clamps_extremes():
    assert np.isfinite(focal_loss(0.0, True).item())
    assert np.isfinite(focal_loss(1.0, False).item())


@given(st.floats(0.001, 0.998), st.floats(0.0005, 0.001))
def test_focal_monotone(p, dp):
    assert focal_loss(p + dp, True).item() < focal_loss(p, True).item()
    assert focal_loss(p + dp, False).item() > focal_loss(p, False).item()


# ---------------------------------------------------------------------------
# MVA and total loss
# ---------------------------------------------------------------------------

def scalar_mva(offsets, logits, targets, w):
    """Plain-Python reference, one frame at a time."""
    br_sum, n_pos, bc_sum = 0.0, 0, 0.0
    for off, lg, tg in zip(offsets, logits, targets):
        for t in range(len(lg)):
            p = 1 / (1 + math.exp(-lg[t]))
            pos = bool(tg.positive[t])
            pt = p if pos else 1 - p
            pt = min(max(pt, 1e-7), 1 - 1e-7)
            a = w.focal_alpha if pos else 1 - w.focal_alpha
            bc_sum += -a * (1 - pt) ** w.focal_gamma * math.log(pt)
            if pos:
                n_pos += 1
                ps, pe = -off[t][0], off[t][1]
                gs, ge = -tg.d_start[t], tg.d_end[t]
                inter = max(0.0, min(pe, ge) - max(ps, gs))
                union = (pe - ps) + (ge - gs) - inter
                enc = max(pe, ge) - min(ps, gs)
                dist = (ps + pe) / 2 - (gs + ge) / 2
                br_sum += 1 - inter / union + dist * dist / (enc * enc)
    br = br_sum / n_pos if n_pos else 0.0
    return br + w.lambda1 * bc_sum / max(1, n_pos)


def random_case(seed, T=20, L=4):
    rng = np.random.default_rng(seed)
    lengths = level_lengths(T, L)
    gts = [seg(2, 5), seg(6, 17), seg(0, 20)][: int(rng.integers(0, 4))]
    targets = assign_target_arrays(lengths, gts, T)
    offsets = [Tensor(rng.uniform(0.1, 3.0, size=(n, 2)), requires_grad=True) for n in lengths]
    logits = [Tensor(rng.uniform(-2, 2, size=n), requires_grad=True) for n in lengths]
    return offsets, logits, targets


@pytest.mark.parametrize("seed", range(10))
def test_mva_matches_scalar_reference(seed):
    offsets, logits, targets = random_case(seed)
    w = LossWeights(lambda1=0.7)
    got = mva_loss(offsets, logits, targets, w).item()
    want = scalar_mva([o.data for o in offsets], [g.data for g in logits], targets, w)
    assert got == pytest.approx(want, abs=1e-9)


def test_mva_no_positives_is_background_focal():
    lengths = level_lengths(16, 3)
    targets = assign_target_arrays(lengths, [], 16)
    logits = [Tensor(np.zeros(n)) for n in lengths]
    offsets = [Tensor(np.ones((n, 2))) for n in lengths]
    got = mva_loss(offsets, logits, targets, LossWeights()).item()
    per_frame = 0.75 * 0.25 * math.log(2)
    assert got == pytest.approx(sum(lengths) * per_frame, rel=1e-12)


def test_mva_perfect_predictions_near_zero():
    lengths = level_lengths(32, 3)
    targets = assign_target_arrays(lengths, [seg(4, 8), seg(10, 30)], 32)
    offsets, logits = [], []
    for tg in targets:
        off = np.where(tg.positive[:, None], np.stack([tg.d_start, tg.d_end], 1), 1.0)
        offsets.append(Tensor(np.nan_to_num(off, nan=1.0)))
        logits.append(Tensor(np.where(tg.positive, 30.0, -30.0)))
    assert mva_loss(offsets, logits, targets, LossWeights()).item() < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_mva_gradcheck(seed):
    offsets, logits, targets = random_case(seed)
    n = len(offsets)
    err = gradcheck(lambda *xs: mva_loss(list(xs[:n]), list(xs[n:]), targets, LossWeights()),
                    offsets + logits)
    assert err < 1e-4


def test_total_loss():
    assert total_loss(Tensor(1.5), Tensor(4.0), LossWeights(lambda3=0.0)).item() == 1.5
    assert total_loss(Tensor(1.0), Tensor(1.0), LossWeights(lambda3=1.0)).item() == 2.0
    sweep = [total_loss(Tensor(0.8), Tensor(0.3), LossWeights(lambda3=l)).item()
             for l in (0.2, 0.5, 1.0, 1.5, 2.0)]
    assert sweep == sorted(sweep)


def test_weights_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1)


def test_every_synthetic_action_gets_a_positive():
    from ovtad.synthetic import SyntheticSpec, generate_synthetic
    ds, _ = generate_synthetic(SyntheticSpec(n_videos=40, T=128, seed=7,
                                             actions_per_video=(1, 4)))
    for v in ds.videos:
        gts = ds.annotations[v.video_id]
        targets = assign_target_arrays(level_lengths(v.length, 6), gts, v.length)
        hit = set()
        for tg in targets:
            hit |= set(tg.gt_index[tg.positive].tolist())
        assert hit == set(range(len(gts)))
