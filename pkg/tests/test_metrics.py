import numpy as np
import pytest
from hypothesis import given, strategies as st

from geosod.metrics import (
    CURVE_COLUMNS,
    aggregate,
    default_thresholds,
    e_measure,
    evaluate_sample,
    f_measure,
    iou,
    mae,
    precision_recall,
    read_curve_csv,
    read_report,
    threshold_sweep,
    write_curve_csv,
    write_report,
)

# --- scalar loop oracles ----------------------------------------------------


def o_mae(s, g):
    return sum(abs(float(a) - float(b)) for a, b in zip(s, g)) / len(s)


def o_counts(p, g):
    tp = fp = fn = tn = 0
    for a, b in zip(p, g):
        a, b = bool(a), bool(b)
        tp += a and b
        fp += a and not b
        fn += (not a) and b
        tn += (not a) and (not b)
    return tp, fp, fn, tn


def o_pr(p, g):
    tp, fp, fn, _ = o_counts(p, g)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 1.0
    return prec, rec


def o_f(prec, rec, b2=0.3):
    den = b2 * prec + rec
    return (1 + b2) * prec * rec / den if den > 0 else 0.0


def o_e(p, g):
    n = len(p)
    p = [float(x) for x in p]
    g = [float(x) for x in g]
    if all(x == g[0] for x in g):
        return 1.0 - sum(abs(a - b) for a, b in zip(p, g)) / n
    mp, mg = sum(p) / n, sum(g) / n
    total = 0.0
    for a, b in zip(p, g):
        x, y = a - mp, b - mg
        xi = 2 * x * y / (x * x + y * y + 1e-12)
        total += (1 + xi) ** 2 / 4
    return total / n


def o_iou(p, g):
    tp, fp, fn, _ = o_counts(p, g)
    return tp / (tp + fp + fn) if tp + fp + fn else 1.0


def instance(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 300))
    g = (rng.random(n) < rng.uniform(0, 1)).astype(np.uint8)
    s = rng.random(n)
    p = (rng.random(n) < rng.uniform(0, 1)).astype(np.uint8)
    return s, g, p


class TestScalars:
    def test_mae(self):
        assert mae([1, 0], [1, 0]) == 0
        assert mae([0.8, 0.4], [1, 0]) == pytest.approx(0.3, abs=1e-15)
        with pytest.raises(ValueError):
            mae([0.1], [1, 0])

    def test_precision_recall(self):
        assert precision_recall([1, 0, 1], [1, 0, 1]) == (1.0, 1.0)
        assert precision_recall([1, 1, 1, 1], [1, 1, 0, 0]) == (0.5, 1.0)
        assert precision_recall([0, 0], [1, 0]) == (0.0, 0.0)
        assert precision_recall([0, 1], [0, 0]) == (0.0, 1.0)

    def test_f_measure(self):
        assert f_measure(1, 1) == 1
        assert f_measure(0.5, 1) == pytest.approx(0.65 / 1.15, abs=1e-15)
        assert f_measure(0.7, 0.4, beta_sq=1e-9) == pytest.approx(0.7, abs=1e-6)
        assert f_measure(0, 0) == 0

    def test_e_measure(self):
        g = np.array([1, 0, 1, 0, 0, 1])
        # epsilon in the alignment denominator keeps these a hair inside the bounds
        assert e_measure(g, g) == pytest.approx(1.0, abs=1e-10)
        assert e_measure(1 - g, g) == pytest.approx(0.0, abs=1e-10)
        assert e_measure([1, 1, 0], [1, 1, 1]) == pytest.approx(2 / 3)

    def test_iou(self):
        assert iou([1, 0, 1], [1, 0, 1]) == 1
        assert iou([1, 0, 0], [0, 1, 0]) == 0
        assert iou([1, 1, 1, 1], [1, 1, 0, 0]) == 0.5
        assert iou([0, 0], [0, 0]) == 1

    @pytest.mark.parametrize("seed", range(100))
    def test_loop_oracles(self, seed):
        s, g, p = instance(seed)
        assert mae(s, g) == pytest.approx(o_mae(s, g), rel=0, abs=1e-15)
        assert precision_recall(p, g) == o_pr(p, g)
        prec, rec = o_pr(p, g)
        assert f_measure(prec, rec) == pytest.approx(o_f(prec, rec), rel=0, abs=1e-12)
        assert e_measure(p, g) == pytest.approx(o_e(p, g), rel=0, abs=1e-12)
        assert iou(p, g) == o_iou(p, g)

    @given(st.integers(0, 100_000))
    def test_ranges_and_symmetry(self, seed):
        s, g, p = instance(seed)
        for v in (mae(s, g), *precision_recall(p, g), e_measure(p, g), iou(p, g)):
            assert 0.0 <= v <= 1.0
        assert mae(s, g) == pytest.approx(mae(1 - s, 1 - g), abs=1e-12)

    @given(st.integers(0, 100_000))
    def test_perfect_prediction(self, seed):
        _, g, _ = instance(seed)
        if g.min() == g.max():
            # both classes present
            g = np.append(g, 1 - g[0]).astype(np.uint8)
        rep = evaluate_sample(g.astype(float), g)
        assert (rep.mae, rep.iou, rep.f_measure) == (0.0, 1.0, 1.0)
        assert rep.e_measure == pytest.approx(1.0, abs=1e-6)


class TestSweep:
    def test_default_grid(self):
        t = default_thresholds()
        assert len(t) == 255 and t[0] > 0 and t[-1] < 1 and np.all(np.diff(t) > 0)

    def test_binary_saliency(self):
        g = np.array([1, 0, 1, 1, 0])
        c = threshold_sweep(g.astype(float), g)
        assert np.all(c.precision == 1) and np.all(c.recall == 1) and np.all(c.f_measure == 1)

    def test_unsorted(self):
        with pytest.raises(ValueError):
            threshold_sweep([0.1, 0.2], [0, 1], [0.5, 0.2])

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_per_threshold_oracle(self, seed):
        s, g, _ = instance(seed)
        c = threshold_sweep(s, g)
        tp_fn = None
        for i, t in enumerate(c.thresholds):
            p = (s >= t).astype(np.uint8)
            prec, rec = o_pr(p, g)
            assert (c.precision[i], c.recall[i]) == (prec, rec)
            assert c.f_measure[i] == o_f(prec, rec)
            assert c.e_measure[i] == pytest.approx(o_e(p, g), rel=0, abs=1e-12)
            tp, _, fn, _ = o_counts(p, g)
            assert tp_fn is None or tp + fn == tp_fn
            tp_fn = tp + fn
        assert np.all(np.diff(c.recall) <= 0)

    @given(st.integers(0, 100_000))
    def test_recall_monotone(self, seed):
        s, g, _ = instance(seed)
        assert np.all(np.diff(threshold_sweep(s, g).recall) <= 0)


class TestAggregate:
    def test_single_identity(self):
        s, g, _ = instance(1)
        r = evaluate_sample(s, g, "a")
        agg = aggregate([r])
        assert agg.mae == r.mae and agg.iou == r.iou and agg.f_measure == r.f_measure
        assert np.array_equal(agg.curve.rows(), r.curve.rows())

    def test_iou_mean(self):
        g = np.array([1, 1, 0, 0, 0])
        a = evaluate_sample(np.array([1, 1, 1, 0, 0.0]), g)    # 2/3
        b = evaluate_sample(np.array([1, 0, 0, 0, 0.0]), g)    # 1/2
        assert aggregate([a, b]).iou == pytest.approx((2 / 3 + 1 / 2) / 2)

    def test_mean_curve_rows(self):
        reps = [evaluate_sample(*instance(s)[:2]) for s in range(5)]
        agg = aggregate(reps)
        for i in range(255):
            for col in range(1, 5):
                assert agg.curve.rows()[i, col] == pytest.approx(np.mean([r.curve.rows()[i, col] for r in reps]), abs=1e-15)
        assert agg.f_measure == agg.curve.f_measure.max()

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestExport:
    def test_curve_csv_round_trip(self, tmp_path):
        s, g, _ = instance(2)
        c = threshold_sweep(s, g)
        write_curve_csv(c, tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == ",".join(CURVE_COLUMNS)
        assert len(lines) == 256
        back = read_curve_csv(tmp_path / "c.csv")
        assert np.array_equal(back.rows(), c.rows())

    def test_report_round_trip(self, tmp_path):
        reps = [evaluate_sample(*instance(s)[:2], name=f"s{s}") for s in range(3)]
        agg = aggregate(reps)
        write_report(agg, tmp_path / "r.txt")
        back = read_report(tmp_path / "r.txt")
        assert back["mae"] == agg.mae and back["iou"] == agg.iou
        assert back["sample.s1.f_measure"] == reps[1].f_measure
