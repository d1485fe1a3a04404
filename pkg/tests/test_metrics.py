import numpy as np

from r2ground.heads import PyramidMeta
from r2ground.metrics import (
    MAP_THRESHOLDS,
    MomentPrediction,
    average_precision_101,
    decode_moments,
    hit_at_1,
    mean_ap,
    mean_iou,
    nms,
    ranking_ap,
    recall_at_1,
    temporal_iou,
    top5_map,
)


def make_meta(centers, strides):
    centers = np.asarray(centers, dtype=float)
    strides = np.asarray(strides, dtype=float)
    return PyramidMeta(
        level=np.ones_like(centers, dtype=int),
        stride=strides,
        center=centers,
        level_sizes=[len(centers)],
    )


def random_predictions(rng, n, t=30.0):
    preds = []
    for _ in range(n):
        a = rng.uniform(0, t - 1)
        b = a + rng.uniform(0.5, t - a)
        preds.append(MomentPrediction(a, min(b, t), float(rng.uniform(0, 1))))
    return preds


def random_gts(rng, n, t=30.0):
    gts = []
    for _ in range(n):
        a = rng.uniform(0, t - 2)
        gts.append((a, a + rng.uniform(1.0, t - a)))
    return gts


# -- independent oracles ---------------------------------------------------


def nms_oracle(preds, threshold):
    """Quadratic suppression table, written independently of the main path."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].start))
    suppressed = [False] * len(preds)
    kept = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(preds[i])
        for j in order[pos + 1 :]:
            if temporal_iou(preds[i].interval(), preds[j].interval()) > threshold:
                suppressed[j] = True
    return kept


def iou_oracle(a, b):
    lo = max(a[0], b[0])
    hi = min(a[1], b[1])
    inter = hi - lo if hi > lo else 0.0
    union = max(a[1], b[1]) - min(a[0], b[0])
    overlap_gap = max(0.0, max(a[0], b[0]) - min(a[1], b[1]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def ap_oracle(preds, gts, threshold):
    """Greedy matching plus explicit 101-point interpolation, from scratch."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].start))
    used = set()
    rels = []
    for i in order:
        cand = [
            (temporal_iou(preds[i].interval(), g), j)
            for j, g in enumerate(gts)
            if j not in used
        ]
        cand = [(v, j) for v, j in cand if v >= threshold]
        if cand:
            best = max(cand)
            used.add(best[1])
            rels.append(1)
        else:
            rels.append(0)
    if not gts or not rels:
        return 0.0
    precisions, recalls = [], []
    hits = 0
    for rank, r in enumerate(rels, start=1):
        hits += r
        precisions.append(hits / rank)
        recalls.append(hits / len(gts))
    total = 0.0
    for grid in np.linspace(0, 1, 101):
        best = 0.0
        for p, rc in zip(precisions, recalls):
            if rc >= grid - 1e-12 and p > best:
                best = p
        total += best
    return total / 101.0


class TestDecode:
    def test_basic_arithmetic(self):
        meta = make_meta([5.0], [1.0])
        preds = decode_moments([0.7], [[2.0, 3.0]], meta, num_frames=20)
        assert preds[0].start == 3.0 and preds[0].end == 8.0
        assert preds[0].confidence == 0.7

    def test_zero_displacement_degenerate_retained(self):
        meta = make_meta([4.0], [1.0])
        preds = decode_moments([0.5], [[0.0, 0.0]], meta, num_frames=10)
        assert preds[0].start == preds[0].end == 4.0
        assert temporal_iou(preds[0].interval(), (2.0, 6.0)) == 0.0

    def test_overshoot_clamped(self):
        meta = make_meta([1.0], [1.0])
        preds = decode_moments([0.5], [[5.0, 100.0]], meta, num_frames=10)
        assert preds[0].start == 0.0
        assert preds[0].end == 10.0

    def test_sorted_by_confidence(self):
        meta = make_meta([2.0, 5.0, 8.0], [1.0, 1.0, 1.0])
        preds = decode_moments([0.2, 0.9, 0.5], np.ones((3, 2)), meta, 10)
        assert [p.confidence for p in preds] == [0.9, 0.5, 0.2]

    def test_stride_scales_displacements(self):
        meta = make_meta([6.0], [2.0])
        preds = decode_moments([0.5], [[1.0, 2.0]], meta, num_frames=20)
        assert preds[0].start == 4.0 and preds[0].end == 10.0


class TestIou:
    def test_identical(self):
        assert temporal_iou((2.0, 6.0), (2.0, 6.0)) == 1.0

    def test_disjoint(self):
        assert temporal_iou((0.0, 1.0), (2.0, 3.0)) == 0.0

    def test_hand_case(self):
        assert abs(temporal_iou((2.0, 6.0), (4.0, 8.0)) - 1.0 / 3.0) < 1e-15

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = tuple(sorted(rng.uniform(0, 10, 2)))
            b = tuple(sorted(rng.uniform(0, 10, 2)))
            assert temporal_iou(a, b) == temporal_iou(b, a)
            assert abs(temporal_iou(a, b) - iou_oracle(a, b)) < 1e-15


class TestNms:
    def test_identical_pair_keeps_strongest(self):
        a = MomentPrediction(1.0, 5.0, 0.9)
        b = MomentPrediction(1.0, 5.0, 0.8)
        kept = nms([b, a])
        assert kept == [a]

    def test_disjoint_all_survive(self):
        preds = [
            MomentPrediction(0.0, 1.0, 0.9),
            MomentPrediction(2.0, 3.0, 0.7),
            MomentPrediction(4.0, 5.0, 0.8),
        ]
        assert len(nms(preds)) == 3

    def test_matches_bruteforce_on_random_fixtures(self):
        rng = np.random.default_rng(1)
        for trial in range(50):
            preds = random_predictions(rng, int(rng.integers(1, 21)))
            got = nms(preds, 0.7)
            want = nms_oracle(preds, 0.7)
            assert [(p.start, p.end, p.confidence) for p in got] == [
                (p.start, p.end, p.confidence) for p in want
            ]

    def test_output_invariants(self):
        rng = np.random.default_rng(2)
        preds = random_predictions(rng, 20)
        kept = nms(preds, 0.7)
        confs = [p.confidence for p in kept]
        assert confs == sorted(confs, reverse=True)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert temporal_iou(kept[i].interval(), kept[j].interval()) <= 0.7


class TestRecallAndMiou:
    def test_perfect_predictions(self):
        gts = [[(1.0, 5.0)], [(2.0, 8.0)]]
        preds = [[MomentPrediction(1.0, 5.0, 0.9)], [MomentPrediction(2.0, 8.0, 0.9)]]
        rec = recall_at_1(preds, gts)
        assert rec == {0.3: 1.0, 0.5: 1.0, 0.7: 1.0}
        assert mean_iou(preds, gts) == 1.0

    def test_intermediate_iou(self):
        gts = [[(0.0, 10.0)]]
        preds = [[MomentPrediction(0.0, 6.0, 0.9)]]  # IoU 0.6
        rec = recall_at_1(preds, gts)
        assert rec[0.5] == 1.0 and rec[0.7] == 0.0
        assert abs(mean_iou(preds, gts) - 0.6) < 1e-12

    def test_matches_loop_oracle_on_random_queries(self):
        rng = np.random.default_rng(3)
        preds_all, gts_all = [], []
        for _ in range(20):
            preds_all.append(random_predictions(rng, int(rng.integers(1, 10))))
            gts_all.append(random_gts(rng, int(rng.integers(1, 4))))
        rec = recall_at_1(preds_all, gts_all)
        miou = mean_iou(preds_all, gts_all)
        for t in (0.3, 0.5, 0.7):
            hits = 0
            for preds, gts in zip(preds_all, gts_all):
                top = max(preds, key=lambda p: (p.confidence, -p.start))
                best = max(temporal_iou(top.interval(), g) for g in gts)
                hits += int(best >= t)
            assert rec[t] == hits / 20
        total = 0.0
        for preds, gts in zip(preds_all, gts_all):
            top = max(preds, key=lambda p: (p.confidence, -p.start))
            total += max(temporal_iou(top.interval(), g) for g in gts)
        assert abs(miou - total / 20) < 1e-12


class TestMeanAp:
    def test_exact_match_single_prediction_per_gt(self):
        gts = [[(1.0, 4.0), (6.0, 9.0)]]
        preds = [[
            MomentPrediction(1.0, 4.0, 0.9),
            MomentPrediction(6.0, 9.0, 0.8),
        ]]
        assert mean_ap(preds, gts) == 1.0

    def test_no_overlap_zero(self):
        gts = [[(10.0, 20.0)]]
        preds = [[MomentPrediction(0.0, 1.0, 0.9)]]
        assert mean_ap(preds, gts) == 0.0

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(4)
        preds_all, gts_all = [], []
        for _ in range(5):
            preds_all.append(random_predictions(rng, int(rng.integers(3, 20))))
            gts_all.append(random_gts(rng, int(rng.integers(1, 4))))
        got = mean_ap(preds_all, gts_all)
        want = float(
            np.mean(
                [
                    np.mean(
                        [ap_oracle(p, g, t) for p, g in zip(preds_all, gts_all)]
                    )
                    for t in MAP_THRESHOLDS
                ]
            )
        )
        assert abs(got - want) < 1e-9

    def test_monotone_confidence_transform_invariance(self):
        rng = np.random.default_rng(5)
        preds_all = [random_predictions(rng, 12) for _ in range(4)]
        gts_all = [random_gts(rng, 2) for _ in range(4)]
        base = mean_ap(preds_all, gts_all)
        rec_base = recall_at_1(preds_all, gts_all)
        squashed = [
            [MomentPrediction(p.start, p.end, float(np.exp(3 * p.confidence)))
             for p in preds]
            for preds in preds_all
        ]
        assert mean_ap(squashed, gts_all) == base
        assert recall_at_1(squashed, gts_all) == rec_base


class TestHighlightAndSummary:
    def test_hit_at_1_positive_argmax(self):
        assert hit_at_1([0.2, 0.9, 0.4], [False, True, False]) == 1.0

    def test_hit_at_1_all_negative(self):
        assert hit_at_1([0.2, 0.9, 0.4], [False, False, False]) == 0.0

    def test_ranking_ap_perfect(self):
        assert ranking_ap([0.9, 0.8, 0.1], [True, True, False]) == 1.0

    def test_top5_map_hand_fixture(self):
        # budget 2, three videos; value worked out by hand:
        # A: (4/15 + 1)/2, B: 1, C: (5/12 + 3/4)/2 -> mean = 133/180
        video_a = top5_map(
            [6, 5, 4, 3, 2, 1],
            [[1, 2, 3, 4, 5, 6], [6, 5, 4, 3, 2, 1]],
            budget=2,
        )
        video_b = top5_map([0.2, 0.9, 0.5], [[1, 2, 3]], budget=2)
        video_c = top5_map(
            [0.1, 0.2, 0.3, 0.4],
            [[5, 1, 1, 1], [1, 1, 1, 5]],
            budget=2,
        )
        assert abs(video_a - (4 / 15 + 1) / 2) < 1e-12
        assert video_b == 1.0
        assert abs(video_c - (5 / 12 + 3 / 4) / 2) < 1e-12
        overall = np.mean([video_a, video_b, video_c])
        assert abs(overall - 133 / 180) < 1e-12

    def test_budget_larger_than_video(self):
        # every shot becomes a positive, so any ranking is perfect
        assert top5_map([0.3, 0.1], [[2, 1]], budget=5) == 1.0


class TestAveragePrecision101:
    def test_all_true(self):
        assert average_precision_101([1, 1, 1], 3) == 1.0

    def test_no_gt(self):
        assert average_precision_101([1, 0], 0) == 0.0

    def test_partial(self):
        # one of two GTs found at rank 2: precision 0.5 for recall <= 0.5
        ap = average_precision_101([0, 1], 2)
        want = (51 * 0.5) / 101  # recall grid points 0.0..0.5
        assert abs(ap - want) < 1e-12
