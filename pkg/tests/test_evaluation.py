import math

import numpy as np
import pytest

from boxmend.dataset import Annotation, Category, Dataset, ImageRecord
from boxmend.evaluation import (
    Detection,
    average_precision,
    correction_report,
    dataset_as_detections,
    evaluate_detections,
    match_detections,
    mean_ap,
    robustness_mae,
)
from boxmend.exceptions import (
    CorrespondenceError,
    EmptyLevels,
    NoEvaluableClasses,
)
from boxmend.fmc import CorrectionRecord
from boxmend.geometry import Box, ImageDims


def brute_force_ap(flags, num_gt):
    """Independent AP oracle: enumerate every confidence threshold.

    Interpolated precision at recall r is the best precision among all
    thresholds whose recall reaches r; AP averages it over the recall
    steps actually achieved.
    """
    if num_gt == 0:
        return float("nan")
    points = []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        tp += bool(flag)
        points.append((tp / num_gt, tp / k))
    total_tp = tp
    total = 0.0
    for j in range(1, total_tp + 1):
        r = j / num_gt
        total += max(p for rec, p in points if rec >= r)
    return total / num_gt


def det(image_id, cat, cx, cy, w, h, conf):
    return Detection(image_id, cat, Box(cx, cy, w, h), conf)


def gt(image_id, cat, cx, cy, w, h, ann_id=1):
    return Annotation(ann_id, image_id, cat, Box(cx, cy, w, h))


class TestMatchDetections:
    def test_exact_hit_is_tp(self):
        result = match_detections([det(1, 1, 10, 10, 4, 4, 0.9)], [gt(1, 1, 10, 10, 4, 4)])
        assert result.tp == (True,)
        assert result.gt_matched == (True,)

    def test_second_detection_on_same_gt_is_fp(self):
        dets = [det(1, 1, 10, 10, 4, 4, 0.9), det(1, 1, 10, 10, 4, 4, 0.8)]
        result = match_detections(dets, [gt(1, 1, 10, 10, 4, 4)])
        assert result.order == (0, 1)
        assert result.tp == (True, False)

    def test_below_threshold_is_fp(self):
        # IoU of these boxes is 1/3
        dets = [det(1, 1, 12.5, 10, 5, 4, 0.9)]
        gts = [gt(1, 1, 10, 10, 5, 4)]
        result = match_detections(dets, gts, iou_threshold=0.5)
        assert result.tp == (False,)

    def test_greedy_prefers_highest_iou(self):
        dets = [det(1, 1, 10, 10, 4, 4, 0.9)]
        gts = [gt(1, 1, 12, 10, 4, 4, ann_id=1), gt(1, 1, 10, 10, 4, 4, ann_id=2)]
        result = match_detections(dets, gts)
        assert result.gt_matched == (False, True)

    def test_class_and_image_respected(self):
        dets = [det(1, 1, 10, 10, 4, 4, 0.9), det(2, 2, 10, 10, 4, 4, 0.8)]
        gts = [gt(1, 2, 10, 10, 4, 4, ann_id=1), gt(2, 1, 10, 10, 4, 4, ann_id=2)]
        result = match_detections(dets, gts)
        assert result.tp == (False, False)

    def test_confidence_ties_keep_insertion_order(self):
        dets = [det(1, 1, 10, 10, 4, 4, 0.5), det(1, 1, 10, 10, 4, 4, 0.5)]
        result = match_detections(dets, [gt(1, 1, 10, 10, 4, 4)])
        assert result.order == (0, 1)
        assert result.tp == (True, False)


class TestAveragePrecision:
    def test_all_tp_covering_all_gts(self):
        assert average_precision([True, True, True], num_gt=3).ap == 1.0

    def test_no_detections(self):
        assert average_precision([], num_gt=4).ap == 0.0

    def test_hand_case_five_sixths(self):
        curve = average_precision([True, False, True], num_gt=2)
        assert curve.ap == pytest.approx(5 / 6, abs=1e-12)
        assert curve.precisions == (1.0, 0.5, 2 / 3)
        assert curve.recalls == (0.5, 0.5, 1.0)

    def test_zero_gt_undefined(self):
        assert math.isnan(average_precision([True], num_gt=0).ap)

    def test_matches_brute_force_oracle_exactly(self):
        rng = np.random.default_rng(1234)
        for _ in range(1000):
            n = int(rng.integers(0, 21))
            flags = [bool(rng.random() < 0.5) for _ in range(n)]
            num_gt = int(rng.integers(max(1, sum(flags)), sum(flags) + 8))
            assert average_precision(flags, num_gt).ap == brute_force_ap(flags, num_gt)

    def test_invariant_under_monotone_confidence_transform(self):
        rng = np.random.default_rng(7)
        gts = [gt(1, 1, 10 + 12 * i, 10, 6, 6, ann_id=i + 1) for i in range(5)]
        dets = [
            det(1, 1, 10 + 12 * i + rng.uniform(-2, 2), 10, 6, 6, float(rng.uniform(0.1, 0.9)))
            for i in range(8)
        ]
        base = match_detections(dets, gts)
        squashed = [
            Detection(d.image_id, d.category_id, d.box, d.confidence**3 + 1)
            for d in dets
        ]
        trans = match_detections(squashed, gts)
        assert base.order == trans.order and base.tp == trans.tp
        assert (
            average_precision(base.tp, 5).ap == average_precision(trans.tp, 5).ap
        )


class TestMeanAp:
    def test_single_class(self):
        assert mean_ap([0.73]) == 0.73

    def test_two_classes(self):
        assert mean_ap([1.0, 0.0]) == 0.5

    def test_empty_raises(self):
        with pytest.raises(NoEvaluableClasses):
            mean_ap([])

    def test_zero_gt_class_excluded(self):
        gts = [gt(1, 1, 10, 10, 4, 4)]
        dets = [det(1, 1, 10, 10, 4, 4, 0.9), det(1, 2, 30, 30, 4, 4, 0.9)]
        result = evaluate_detections(dets, gts)
        assert set(result["per_class"]) == {1}
        assert result["map"] == 1.0


class TestRobustnessMae:
    # Published mAP rows at noise levels 0.0 .. 1.0 step 0.2 (VOC table).
    VOC_BASE = 77.3
    VOC_ROWS = {
        "faster_rcnn": ([77.3, 71.9, 44.3, 19.3, 13.5, 19.0], 36.4, 0.06),
        "oa_mil": ([76.6, 73.4, 63.4, 35.5, 16.2, 18.2], 30.1, 0.06),
        "ssd_det": ([77.9, 75.6, 67.5, 51.3, 32.5, 31.3], 21.3, 0.2),
        "fmg_det": ([75.7, 73.2, 69.3, 62.6, 50.2, 46.5], 14.4, 0.06),
    }
    LEVELS = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]

    @pytest.mark.parametrize("name", list(VOC_ROWS))
    def test_voc_rows(self, name):
        perfs, published, tol = self.VOC_ROWS[name]
        profile = robustness_mae(self.VOC_BASE, list(zip(self.LEVELS, perfs)))
        assert profile.mae == pytest.approx(published, abs=tol)

    def test_coco_rows_exact_with_solved_base(self):
        rows = {
            "faster_rcnn": ([8.5, 0.7], 33.1),
            "oa_mil": ([16.1, 0.7], 29.3),
            "ssd_det": ([27.1, 1.5], 23.4),
            "fmg_det": ([26.9, 15.7], 16.4),
        }
        # Base never published for COCO; every row must solve to the same one.
        bases = [mae + sum(р) / 2 for (р, mae) in rows.values()]
        assert all(b == pytest.approx(bases[0], abs=1e-9) for b in bases)
        base = bases[0]
        assert base == pytest.approx(37.7, abs=1e-9)
        for perfs, published in rows.values():
            profile = robustness_mae(base, list(zip([0.4, 0.8], perfs)))
            assert profile.mae == pytest.approx(published, abs=1e-9)

    def test_single_level_at_base_is_zero(self):
        assert robustness_mae(77.3, [(0.0, 77.3)]).mae == 0.0

    def test_empty_levels(self):
        with pytest.raises(EmptyLevels):
            robustness_mae(50.0, [])

    def test_one_shot_faster_rcnn_row(self):
        perfs = [19.2, 15.3, 5.1, 0.8, 0.4, 1.7]
        profile = robustness_mae(19.2, list(zip(self.LEVELS, perfs)))
        assert profile.mae == pytest.approx(12.1, abs=0.06)


def report_setup():
    images = (ImageRecord(1, "a.png", ImageDims(64, 64)),)
    cats = (Category(1, "circle"), Category(2, "rectangle"))
    truth_anns = (
        Annotation(1, 1, 1, Box(10, 10, 8, 8)),
        Annotation(2, 1, 2, Box(40, 40, 12, 6)),
    )
    truth = Dataset(images, cats, truth_anns, {})
    noisy = Dataset(
        images,
        cats,
        (
            Annotation(1, 1, 1, Box(12, 11, 8, 8)),
            Annotation(2, 1, 2, Box(38, 42, 10, 6)),
        ),
        {},
    )
    return truth, noisy, images, cats


class TestCorrectionReport:
    def test_corrected_equal_truth(self):
        truth, noisy, images, cats = report_setup()
        records = [
            CorrectionRecord(1, True, truth.annotations[0].box, 0.9, 0.5),
            CorrectionRecord(2, True, truth.annotations[1].box, 0.9, 0.5),
        ]
        corrected = Dataset(images, cats, truth.annotations, {})
        report = correction_report(noisy, corrected, truth, records)
        assert report.mean_iou_corrected == 1.0
        assert report.acceptance_rate == 1.0
        assert set(report.per_class) == {"circle", "rectangle"}

    def test_all_rejected_columns_equal(self):
        truth, noisy, images, cats = report_setup()
        records = [
            CorrectionRecord(1, False, noisy.annotations[0].box, None, None, reject_reason="low-iou"),
            CorrectionRecord(2, False, noisy.annotations[1].box, None, None, reject_reason="empty-mask"),
        ]
        report = correction_report(noisy, noisy, truth, records)
        assert report.mean_iou_corrected == report.mean_iou_noisy
        assert report.acceptance_rate == 0.0
        assert report.reject_reasons == {"low-iou": 1, "empty-mask": 1}

    def test_acceptance_rate_definition(self):
        truth, noisy, images, cats = report_setup()
        records = [
            CorrectionRecord(1, True, truth.annotations[0].box, 0.9, 0.5),
            CorrectionRecord(2, False, noisy.annotations[1].box, None, None, reject_reason="low-iou"),
        ]
        corrected = Dataset(images, cats, (truth.annotations[0], noisy.annotations[1]), {})
        report = correction_report(noisy, corrected, truth, records)
        assert report.acceptance_rate == 0.5

    def test_correspondence_error(self):
        truth, noisy, images, cats = report_setup()
        short = Dataset(images, cats, truth.annotations[:1], {})
        with pytest.raises(CorrespondenceError):
            correction_report(noisy, short, truth, [])

    def test_csv_rows_shape(self):
        truth, noisy, images, cats = report_setup()
        records = [
            CorrectionRecord(1, True, truth.annotations[0].box, 0.9, 0.5),
            CorrectionRecord(2, True, truth.annotations[1].box, 0.9, 0.5),
        ]
        report = correction_report(noisy, Dataset(images, cats, truth.annotations, {}), truth, records)
        rows = report.to_csv_rows()
        assert rows[0] == ["class", "count", "mean_iou_noisy", "mean_iou_corrected"]
        assert rows[-1][0] == "__all__"


class TestDatasetAsDetections:
    def test_carries_fields(self):
        truth, _, _, _ = report_setup()
        dets = dataset_as_detections(truth, confidence=0.75)
        assert len(dets) == 2
        assert all(d.confidence == 0.75 for d in dets)
        assert dets[0].box == truth.annotations[0].box
