import numpy as np
import pytest
from oracles import ap_oracle, greedy_match_oracle, tp_errors_oracle

from bevkit.fusion import DetectionBox
from bevkit.metrics import (
    AP_THRESHOLDS,
    DETECTION_CLASSES,
    aggregate_summary,
    average_precision,
    class_mean_ap,
    compose_nds,
    evaluate_class,
    evaluate_detections,
    load_boxes,
    match_center_distance,
    render_summary_table,
    save_boxes,
    tp_errors,
)


def box(cx, cy, score=0.5, yaw=0.0, vx=0.0, vy=0.0, size=(2.0, 4.0, 1.5),
        cls=0, attr=0):
    return DetectionBox(center=(cx, cy, 0.75), size=size, yaw=yaw,
                        velocity=(vx, vy), class_id=cls, score=score,
                        attribute_id=attr)


class TestMatchCenterDistance:
    def test_perfect_predictions_all_matched(self):
        gts = [box(0, 0), box(5, 5), box(-3, 2)]
        preds = [box(g.center[0], g.center[1], score=0.9) for g in gts]
        m = match_center_distance(preds, gts, 2.0)
        assert m.n_matched == 3

    def test_empty_predictions(self):
        m = match_center_distance([], [box(0, 0)], 2.0)
        assert m.n_matched == 0
        assert m.n_gt == 1

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(91)
        for case in range(100):
            n_p, n_g = rng.integers(0, 16, 2)
            preds = [box(*rng.uniform(-10, 10, 2), score=float(rng.uniform()))
                     for _ in range(n_p)]
            gts = [box(*rng.uniform(-10, 10, 2)) for _ in range(n_g)]
            thr = float(rng.choice(AP_THRESHOLDS))
            m = match_center_distance(preds, gts, thr)
            order, assign = greedy_match_oracle(preds, gts, thr)
            assert m.ranked_pred.tolist() == order
            for rank, pi in enumerate(order):
                expected = assign.get(pi, -1)
                assert m.ranked_gt[rank] == expected

    def test_matched_count_bounded(self):
        rng = np.random.default_rng(92)
        for _ in range(50):
            preds = [box(*rng.uniform(-5, 5, 2), score=float(rng.uniform()))
                     for _ in range(int(rng.integers(0, 10)))]
            gts = [box(*rng.uniform(-5, 5, 2)) for _ in range(int(rng.integers(0, 10)))]
            m = match_center_distance(preds, gts, 4.0)
            assert m.n_matched <= min(len(preds), len(gts))

    def test_tie_prefers_lower_gt_index(self):
        gts = [box(1.0, 0.0), box(-1.0, 0.0)]  # equidistant from origin
        preds = [box(0.0, 0.0, score=0.9)]
        m = match_center_distance(preds, gts, 2.0)
        assert m.ranked_gt[0] == 0


class TestAveragePrecision:
    def test_perfect_cover(self):
        gts = [box(i, 0) for i in range(4)]
        preds = [box(i, 0, score=0.9 - 0.1 * i) for i in range(4)]
        ap = average_precision(match_center_distance(preds, gts, 1.0))
        assert abs(ap - 1.0) < 1e-12

    def test_unmatchable_is_not_evaluable(self):
        preds = [box(50, 50, score=0.9)]
        gts = [box(0, 0)]
        assert average_precision(match_center_distance(preds, gts, 1.0)) is None

    def test_no_ground_truth_not_evaluable(self):
        assert average_precision(match_center_distance([box(0, 0, score=0.5)], [], 1.0)) is None

    def test_matches_all_ranks_oracle(self):
        rng = np.random.default_rng(93)
        for case in range(100):
            n_p, n_g = int(rng.integers(1, 15)), int(rng.integers(1, 15))
            preds = [box(*rng.uniform(-8, 8, 2), score=float(rng.uniform()))
                     for _ in range(n_p)]
            gts = [box(*rng.uniform(-8, 8, 2)) for _ in range(n_g)]
            m = match_center_distance(preds, gts, 2.0)
            got = average_precision(m)
            expect = ap_oracle(m.tp_flags.tolist(), m.n_gt)
            if expect is None:
                assert got is None
            else:
                assert abs(got - expect) < 1e-12

    def test_adding_correct_top_prediction_never_decreases(self):
        from bevkit.metrics import MatchResult

        def ap_from_flags(flags, n_gt):
            ranked_gt = np.where(np.asarray(flags, dtype=bool), 0, -1)
            return average_precision(MatchResult(np.arange(len(flags)), ranked_gt,
                                                 np.full(len(flags), np.nan), n_gt))

        rng = np.random.default_rng(94)
        for _ in range(50):
            flags = (rng.uniform(0, 1, int(rng.integers(1, 12))) > 0.5).tolist()
            n_gt = int(sum(flags) + rng.integers(1, 5))
            base = ap_from_flags(flags, n_gt)
            grown = ap_from_flags([True] + flags, n_gt)
            if base is not None:
                assert grown >= base - 1e-12


class TestClassMeanAp:
    def test_nan_counts_as_zero_trailer(self):
        # published fusion-model trailer row
        got = class_mean_ap((None, 0.063, 0.316, 0.444))
        assert abs(got - 0.206) <= 5e-4

    def test_full_row_car(self):
        got = class_mean_ap((0.320, 0.622, 0.761, 0.809))
        assert abs(got - 0.628) <= 5e-4

    def test_constant_row(self):
        assert class_mean_ap((0.4, 0.4, 0.4, 0.4)) == pytest.approx(0.4)

    def test_all_absent(self):
        assert class_mean_ap((None, None, None, None)) is None


class TestTpErrors:
    def test_identical_pairs_zero(self):
        b = box(1, 2, yaw=0.3, vx=1.0, vy=-2.0)
        out = tp_errors([(b, b)])
        for m in ("ate", "ase", "aoe", "ave", "aae"):
            assert out[m] == 0.0

    def test_quarter_turn_orientation(self):
        a = box(0, 0, yaw=0.0)
        b = box(0, 0, yaw=np.pi / 2)
        assert abs(tp_errors([(a, b)])["aoe"] - np.pi / 2) < 1e-12

    def test_yaw_wraps_to_pi(self):
        a = box(0, 0, yaw=-np.pi + 0.1)
        b = box(0, 0, yaw=np.pi - 0.1)
        assert abs(tp_errors([(a, b)])["aoe"] - 0.2) < 1e-12

    def test_matches_definitional_oracle(self):
        rng = np.random.default_rng(95)
        pairs = []
        for _ in range(12):
            p = box(*rng.uniform(-5, 5, 2), yaw=float(rng.uniform(-np.pi, np.pi)),
                    vx=float(rng.normal()), vy=float(rng.normal()),
                    size=tuple(rng.uniform(0.5, 4, 3)), attr=int(rng.integers(0, 3)))
            g = box(*rng.uniform(-5, 5, 2), yaw=float(rng.uniform(-np.pi, np.pi)),
                    vx=float(rng.normal()), vy=float(rng.normal()),
                    size=tuple(rng.uniform(0.5, 4, 3)), attr=int(rng.integers(0, 3)))
            pairs.append((p, g))
        got = tp_errors(pairs)
        expect = tp_errors_oracle(pairs)
        for name in expect:
            assert abs(got[name] - expect[name]) < 1e-10

    def test_class_applicability(self):
        b = box(0, 0)
        cone = tp_errors([(b, b)], "traffic_cone")
        assert cone["aoe"] is None and cone["ave"] is None and cone["aae"] is None
        assert cone["ate"] == 0.0
        barrier = tp_errors([(b, b)], "barrier")
        assert barrier["aoe"] == 0.0 and barrier["ave"] is None

    def test_no_matches_all_absent(self):
        assert all(v is None for v in tp_errors([]).values())


class TestAggregation:
    def test_published_column_means(self):
        # fusion-model TP columns: translation over all ten classes, velocity
        # over the eight classes that carry it
        from bevkit.tables import FUSION_TP, CLASS_ORDER
        from bevkit.metrics import ClassEval, TP_METRICS

        evals = [ClassEval(n, [0.5, 0.5, 0.5, 0.5], dict(zip(TP_METRICS, FUSION_TP[n])))
                 for n in CLASS_ORDER]
        agg = aggregate_summary(evals)
        assert abs(agg.mtp["ate"] - 0.6044) <= 5e-4
        assert abs(agg.mtp["ave"] - 0.4244) <= 5e-4

    def test_single_class_passthrough(self):
        ce = evaluate_class([box(0, 0, score=0.9)], [box(0, 0)], "car")
        agg = aggregate_summary([ce])
        assert agg.mean_ap == pytest.approx(ce.mean_ap)
        assert agg.mtp["ate"] == pytest.approx(ce.tp["ate"])
        agg.check()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_summary([])


class TestComposeNds:
    def test_published_fusion_row(self):
        nds = compose_nds(0.3891, [0.6044, 0.2780, 0.5830, 0.4244, 0.2129])
        assert abs(nds - 0.4845) <= 5e-4

    def test_published_baseline_row(self):
        nds = compose_nds(0.3160, [0.7014, 0.2855, 0.6310, 0.5919, 0.2199])
        assert abs(nds - 0.4150) <= 5e-4

    def test_perfect_score(self):
        assert compose_nds(1.0, [0.0] * 5) == 1.0

    def test_monotone_properties(self):
        rng = np.random.default_rng(96)
        for _ in range(1000):
            m = float(rng.uniform(0, 0.99))
            tps = rng.uniform(0, 2, 5).tolist()
            base = compose_nds(m, tps)
            assert compose_nds(m + 0.01, tps) > base
            i = int(rng.integers(0, 5))
            bumped = list(tps)
            if tps[i] < 0.95:
                bumped[i] = tps[i] + 0.05
                assert compose_nds(m, bumped) < base
            elif tps[i] > 1.0:
                bumped[i] = tps[i] + 0.5
                assert compose_nds(m, bumped) == pytest.approx(base)

    def test_validation(self):
        with pytest.raises(ValueError):
            compose_nds(1.2, [0.0] * 5)
        with pytest.raises(ValueError):
            compose_nds(0.5, [0.0] * 4)


class TestEvaluateDetections:
    def test_perfect_predictions_score_one(self):
        gts = {
            "s0": [box(0, 0, cls=0, attr=1), box(5, 5, cls=1, attr=2)],
            "s1": [box(-4, 2, cls=0, attr=1)],
        }
        preds = {tok: [DetectionBox(b.center, b.size, b.yaw, b.velocity,
                                    b.class_id, 0.9, b.attribute_id)
                       for b in boxes]
                 for tok, boxes in gts.items()}
        summary = evaluate_detections(preds, gts)
        assert summary.mean_ap == pytest.approx(1.0)
        assert summary.nds == pytest.approx(1.0)
        summary.check()

    def test_empty_predictions_zero_map(self):
        gts = {"s0": [box(0, 0, cls=0)]}
        preds = {"s0": []}
        summary = evaluate_detections(preds, gts)
        assert summary.mean_ap == 0.0

    def test_token_mismatch_rejected(self):
        with pytest.raises(ValueError, match="token"):
            evaluate_detections({"a": []}, {"b": []})


class TestBoxJson:
    def test_roundtrip(self, tmp_path):
        boxes = {"s0": [box(1.5, -2.0, score=0.7, yaw=0.3, vx=1.0, cls=3, attr=2)]}
        path = tmp_path / "boxes.json"
        save_boxes(path, boxes)
        back = load_boxes(path)
        b0, b1 = boxes["s0"][0], back["s0"][0]
        assert b1.center == b0.center
        assert b1.class_id == b0.class_id
        assert b1.score == b0.score
        assert b1.attribute_id == b0.attribute_id

    def test_table_rendering(self):
        ce = evaluate_class([box(0, 0, score=0.9)], [box(0, 0)], "car")
        text = render_summary_table({"demo": aggregate_summary([ce])})
        assert "demo" in text and "NDS" in text


def test_class_list_is_the_ten_class_benchmark():
    assert len(DETECTION_CLASSES) == 10
    assert "car" in DETECTION_CLASSES and "barrier" in DETECTION_CLASSES
