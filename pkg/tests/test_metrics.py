import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppap.errors import InvalidArgument, InvalidState
from ppap.metrics import OKS_THRESHOLDS, average_precision, evaluate_predictions, oks, pck


def _random_set(n, k, seed):
    rng = np.random.default_rng(seed)
    gts = np.concatenate([rng.uniform(0, 100, (n, k, 2)), rng.integers(0, 3, (n, k, 1))], axis=-1)
    preds = gts[..., :2] + rng.normal(0, 4, (n, k, 2))
    bboxes = np.concatenate([rng.uniform(0, 10, (n, 2)), rng.uniform(5, 120, (n, 2))], axis=1)
    return preds, gts, bboxes


def _pck_loop(preds, gts, bboxes, alpha):
    correct = total = 0
    for i in range(len(gts)):
        thr = alpha * max(bboxes[i][2], bboxes[i][3])
        for j in range(len(gts[i])):
            if gts[i][j][2] <= 0:
                continue
            total += 1
            d = math.sqrt((preds[i][j][0] - gts[i][j][0]) ** 2 + (preds[i][j][1] - gts[i][j][1]) ** 2)
            correct += d <= thr
    return correct / total


def _oks_loop(pred, gt, area, kappa):
    num = den = 0.0
    for j in range(len(gt)):
        if gt[j][2] > 0:
            d2 = (pred[j][0] - gt[j][0]) ** 2 + (pred[j][1] - gt[j][1]) ** 2
            num += math.exp(-d2 / (2 * area * kappa**2))
            den += 1
    return num / den


class TestPCK:
    def test_exact_prediction(self):
        gt = np.array([[[3.0, 4.0, 2]]])
        assert pck(gt[..., :2], gt, [[0, 0, 10, 10]]) == 1.0

    def test_inclusive_boundary(self):
        gt = np.array([[[10.0, 10.0, 2]]])
        pred = np.array([[[13.0, 14.0]]])  # distance exactly 5
        assert pck(pred, gt, [[0, 0, 100, 50]], alpha=0.05) == 1.0
        assert pck(pred + [[[0.0, 1e-9]]], gt, [[0, 0, 100, 50]], alpha=0.05) == 0.0

    def test_invisible_ignored_and_empty_nan(self):
        gt = np.array([[[0.0, 0.0, 0], [5.0, 5.0, 1]]])
        pred = np.array([[[99.0, 99.0], [5.0, 5.0]]])
        assert pck(pred, gt, [[0, 0, 10, 10]]) == 1.0
        assert math.isnan(pck(pred[:, :1], gt[:, :1], [[0, 0, 10, 10]]))

    def test_alpha_positive(self):
        with pytest.raises(InvalidArgument):
            pck(np.zeros((1, 1, 2)), np.ones((1, 1, 3)), [[0, 0, 1, 1]], alpha=0.0)

    def test_matches_loop_oracle(self):
        preds, gts, bboxes = _random_set(1000, 5, 0)
        for alpha in (0.05, 0.1):
            assert pck(preds, gts, bboxes, alpha) == _pck_loop(preds.tolist(), gts.tolist(), bboxes.tolist(), alpha)

    def test_translation_invariant(self):
        preds, gts, bboxes = _random_set(50, 5, 1)
        shift = np.array([17.0, -3.0])
        moved = gts.copy()
        moved[..., :2] += shift
        assert pck(preds + shift, moved, bboxes) == pck(preds, gts, bboxes)


class TestOKS:
    def test_identity(self):
        gt = np.array([[1.0, 2.0, 2], [3.0, 4.0, 1]])
        assert oks(gt[:, :2], gt, 100.0, 0.08) == 1.0

    def test_e_inverse(self):
        area, kappa = 400.0, 0.08
        d = math.sqrt(2 * area * kappa**2)
        value = oks([[d, 0.0]], [[0.0, 0.0, 2]], area, kappa)
        assert value == pytest.approx(math.exp(-1), abs=1e-12)

    def test_no_visible(self):
        with pytest.raises(InvalidState):
            oks([[0.0, 0.0]], [[0.0, 0.0, 0]], 1.0, 0.08)

    def test_matches_loop_oracle(self):
        preds, gts, bboxes = _random_set(1000, 5, 2)
        kappas = np.array([0.026, 0.079, 0.079, 0.107, 0.107])
        for p, g, b in zip(preds, gts, bboxes):
            if (g[:, 2] > 0).any():
                area = b[2] * b[3]
                expected = sum(math.exp(-((p[j, 0] - g[j, 0]) ** 2 + (p[j, 1] - g[j, 1]) ** 2)
                                        / (2 * area * kappas[j] ** 2)) for j in range(5) if g[j, 2] > 0)
                expected /= (g[:, 2] > 0).sum()
                assert oks(p, g, area, kappas) == pytest.approx(expected, rel=1e-12)
                assert oks(p, g, area, 0.08) == pytest.approx(_oks_loop(p, g, area, 0.08), rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 50.0), st.floats(0.0, 50.0), st.floats(1.0, 1e4))
    def test_monotone_in_distance(self, d1, d2, area):
        lo, hi = sorted((d1, d2))
        gt = [[0.0, 0.0, 2]]
        assert oks([[hi, 0.0]], gt, area, 0.08) <= oks([[lo, 0.0]], gt, area, 0.08)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 10.0), st.integers(0, 1000))
    def test_scale_and_translation_invariance(self, scale, seed):
        preds, gts, bboxes = _random_set(1, 5, seed)
        gts[..., 2] = 2
        area = bboxes[0, 2] * bboxes[0, 3]
        base = oks(preds[0], gts[0], area, 0.08)
        scaled_gt = gts[0].copy()
        scaled_gt[:, :2] = scaled_gt[:, :2] * scale + 7.0
        assert oks(preds[0] * scale + 7.0, scaled_gt, area * scale**2, 0.08) == pytest.approx(base, rel=1e-9,
                                                                                             abs=1e-300)


class TestAP:
    def test_perfect(self):
        r = average_precision([1.0, 1.0, 1.0])
        assert (r.ap, r.ap50, r.ap75, r.ar) == (1.0, 1.0, 1.0, 1.0)

    def test_hand_example(self):
        assert average_precision([0.6, 0.6], thresholds=[0.5, 0.75]).ap == 0.5

    def test_empty(self):
        r = average_precision([])
        assert r.count == 0 and math.isnan(r.ap)

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(3)
        values = rng.uniform(0, 1, 1000)
        values[:20] = OKS_THRESHOLDS[rng.integers(0, 10, 20)]  # exact threshold hits
        fractions = []
        for t in [0.5 + 0.05 * i for i in range(10)]:
            fractions.append(sum(1 for v in values if v >= t - 1e-12) / len(values))
        r = average_precision(values)
        assert r.ap == pytest.approx(sum(fractions) / 10, abs=1e-12)
        assert r.ar == r.ap
        assert r.ap50 == sum(1 for v in values if v >= 0.5) / 1000

    def test_monotone_in_threshold(self):
        values = np.random.default_rng(4).uniform(0, 1, 200)
        fr = [average_precision(values, thresholds=[t]).ap for t in OKS_THRESHOLDS]
        assert all(a >= b for a, b in zip(fr, fr[1:]))


class TestEvaluate:
    def test_report_schema_and_bounds(self):
        preds, gts, bboxes = _random_set(100, 5, 5)
        res = evaluate_predictions(preds, gts, bboxes)
        d = res.to_dict()
        assert {"pck", "ap", "ap50", "ap75", "ar", "per_keypoint_pck", "counts"} <= set(d)
        for key in ("pck", "ap", "ap50", "ap75", "ar"):
            assert 0.0 <= d[key] <= 1.0
        assert len(d["per_keypoint_pck"]) == 5
        assert d["counts"]["visible_keypoints"] == int((gts[..., 2] > 0).sum())

    def test_area_bins_only_when_both_present(self):
        gts = np.array([[[5.0, 5.0, 2]], [[5.0, 5.0, 2]]])
        small = evaluate_predictions(gts[..., :2], gts, [[0, 0, 40, 40], [0, 0, 50, 50]])
        assert small.ap_m is None and "ap_m" not in small.to_dict()
        both = evaluate_predictions(gts[..., :2], gts, [[0, 0, 40, 40], [0, 0, 100, 100]])
        assert both.ap_m == 1.0 and both.ap_l == 1.0
