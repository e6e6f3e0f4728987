"""Detector: IoU, anchor matching, focal loss, merge, and image-level calls."""

import math
from functools import lru_cache

import numpy as np
import pytest

from polypkit import detect, nets, synthdata
from polypkit import ndgrad as nd
from polypkit.ndgrad import Tape
from polypkit.ndgrad.gradcheck import check_gradients
from polypkit.detect import Anchor, BoxPred

# ------------------------------------------------------------------ iou


def test_iou_identical_boxes():
    assert detect.iou((3, 4, 10, 12), (3, 4, 10, 12)) == 1.0


def test_iou_disjoint_boxes():
    assert detect.iou((0, 0, 2, 2), (5, 5, 7, 7)) == 0.0


def test_iou_quarter_overlap_value():
    # overlap 1x1 = 1; union 4 + 4 - 1 = 7
    assert math.isclose(detect.iou((0, 0, 2, 2), (1, 1, 3, 3)), 1 / 7,
                        rel_tol=1e-12)


def test_iou_degenerate_box_raises():
    with pytest.raises(ValueError):
        detect.iou((0, 0, 0, 2), (1, 1, 3, 3))
    with pytest.raises(ValueError):
        detect.iou((0, 0, 2, 2), (1, 3, 3, 3))


def test_iou_symmetry_property():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = _random_box(rng)
        b = _random_box(rng)
        assert detect.iou(a, b) == detect.iou(b, a)
        assert 0.0 <= detect.iou(a, b) <= 1.0


def _random_box(rng, size=16):
    x0, y0 = rng.uniform(0, size - 1, size=2)
    w, h = rng.uniform(0.5, size / 2, size=2)
    return (x0, y0, x0 + w, y0 + h)


def _lattice_cells(box):
    x0, y0, x1, y1 = box
    return {(i, j) for i in range(x0, x1) for j in range(y0, y1)}


def test_iou_matches_unit_cell_enumeration():
    # For integer-coordinate boxes, areas are exact unit-cell counts, so
    # counting cells gives an independent IoU oracle.
    rng = np.random.default_rng(1)
    for _ in range(200):
        ax0, ay0 = rng.integers(0, 10, size=2)
        bx0, by0 = rng.integers(0, 10, size=2)
        a = (int(ax0), int(ay0), int(ax0 + rng.integers(1, 6)),
             int(ay0 + rng.integers(1, 6)))
        b = (int(bx0), int(by0), int(bx0 + rng.integers(1, 6)),
             int(by0 + rng.integers(1, 6)))
        ca, cb = _lattice_cells(a), _lattice_cells(b)
        oracle = len(ca & cb) / len(ca | cb)
        assert math.isclose(detect.iou(a, b), oracle, rel_tol=1e-12)


# ------------------------------------------------------------------ anchors


def test_anchor_grid_tiles_frame():
    anchors = detect.anchor_grid()
    cells = detect.FRAME_SIZE // detect.STRIDE
    assert len(anchors) == cells * cells * len(detect.ANCHOR_SIZES)
    for a in anchors:
        r, c = a.cell
        assert 0 <= r < cells and 0 <= c < cells
        cx = (a.box[0] + a.box[2]) / 2
        cy = (a.box[1] + a.box[3]) / 2
        assert math.isclose(cx, (c + 0.5) * detect.STRIDE)
        assert math.isclose(cy, (r + 0.5) * detect.STRIDE)
    sizes = {round(a.box[2] - a.box[0], 6) for a in anchors}
    assert sizes == set(detect.ANCHOR_SIZES)


def test_anchor_exactly_on_gt_is_foreground():
    anchors = detect.anchor_grid()
    gt = anchors[17].box
    assign = detect.match_anchors([gt], anchors)
    assert assign[17] == 0


def test_adoption_when_no_anchor_reaches_threshold():
    # Anchors confined to one corner, ground truth in the other: IoU is 0
    # everywhere, yet exactly one anchor must be forced foreground.
    anchors = (Anchor(box=(0, 0, 4, 4), cell=(0, 0)),
               Anchor(box=(4, 0, 8, 4), cell=(0, 0)))
    assign = detect.match_anchors([(50, 50, 60, 60)], anchors)
    assert (assign >= 0).sum() == 1


def test_match_anchors_threshold_order_enforced():
    anchors = detect.anchor_grid()
    with pytest.raises(ValueError):
        detect.match_anchors([(0, 0, 8, 8)], anchors, tau_fg=0.4, tau_bg=0.5)


def test_match_anchors_no_gt_all_background():
    anchors = detect.anchor_grid()
    assign = detect.match_anchors([], anchors)
    assert (assign == detect.BACKGROUND).all()


def test_match_anchors_ignore_band():
    # A single anchor overlapping the gt with IoU inside [tau_bg, tau_fg)
    # and no better competitor must be adopted (it is the gt's best); add a
    # second anchor clearly foreground so the band anchor stays ignored.
    fg = Anchor(box=(10, 10, 20, 20), cell=(0, 0))
    band = Anchor(box=(14, 10, 24, 20), cell=(0, 0))  # IoU 6/14 ~ 0.43
    far = Anchor(box=(40, 40, 50, 50), cell=(0, 0))
    assign = detect.match_anchors([(10, 10, 20, 20)],
                                  (fg, band, far))
    assert assign[0] == 0
    assert assign[1] == detect.IGNORE
    assert assign[2] == detect.BACKGROUND


def _match_oracle(gt_boxes, anchors, tau_fg=0.5, tau_bg=0.4):
    """Plain-loop re-derivation of the matching rules."""
    out = [detect.BACKGROUND] * len(anchors)
    if not gt_boxes:
        return out
    for i, a in enumerate(anchors):
        ious = [detect.iou(a.box, g) for g in gt_boxes]
        best = max(range(len(gt_boxes)), key=lambda k: ious[k])
        if ious[best] >= tau_fg:
            out[i] = best
        elif ious[best] >= tau_bg:
            out[i] = detect.IGNORE
    for g in range(len(gt_boxes)):
        if g not in out:
            col = [detect.iou(a.box, gt_boxes[g]) for a in anchors]
            out[col.index(max(col))] = g
    return out


def test_match_anchors_equals_exhaustive_scan():
    rng = np.random.default_rng(2)
    anchors = detect.anchor_grid()
    for _ in range(30):
        n_gt = int(rng.integers(1, 4))
        gts = []
        for _ in range(n_gt):
            cx, cy = rng.uniform(8, 56, size=2)
            w, h = rng.uniform(6, 26, size=2)
            gts.append((max(0, cx - w / 2), max(0, cy - h / 2),
                        min(64, cx + w / 2), min(64, cy + h / 2)))
        got = detect.match_anchors(gts, anchors)
        assert got.tolist() == _match_oracle(gts, anchors)


def test_match_anchors_every_gt_has_a_positive_property():
    rng = np.random.default_rng(3)
    anchors = detect.anchor_grid()
    for _ in range(30):
        gts = []
        for _ in range(int(rng.integers(1, 4))):
            x0, y0 = rng.uniform(0, 58, size=2)
            gts.append((x0, y0, min(64, x0 + rng.uniform(2, 30)),
                        min(64, y0 + rng.uniform(2, 30))))
        assign = detect.match_anchors(gts, anchors)
        for g in range(len(gts)):
            assert (assign == g).any()


# ------------------------------------------------------------------ losses


def test_focal_loss_perfect_prediction_is_zero():
    assert detect.focal_loss(1.0) == 0.0


def test_focal_loss_reduces_to_cross_entropy():
    p = np.array([0.3, 0.8, 0.99])
    got = detect.focal_loss(p, alpha=1.0, gamma=0.0)
    assert np.allclose(got, -np.log(p))


def test_focal_loss_reference_value():
    # 0.25 * (1 - 0.5)^2 * ln 2
    assert math.isclose(detect.focal_loss(0.5), 0.25 * 0.25 * math.log(2),
                        rel_tol=1e-9)


def test_focal_loss_tensor_matches_array():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.02, 0.98, size=(5, 7))
    tape = Tape()
    t = detect.focal_loss(tape.constant(p))
    assert np.allclose(t.data, detect.focal_loss(p), atol=1e-9)


def test_focal_loss_gradcheck_100_cases():
    rng = np.random.default_rng(5)
    for _ in range(100):
        p = rng.uniform(0.05, 0.95, size=6)

        def build(tape, leaves):
            return detect.focal_loss(leaves[0]).sum()

        check_gradients(build, [p])


def test_smooth_l1_values():
    d = np.array([0.0, 0.5, 1.0, -2.0])
    assert np.allclose(detect.smooth_l1(d), [0.0, 0.125, 0.5, 1.5])


def test_smooth_l1_tensor_matches_array():
    rng = np.random.default_rng(12)
    d = rng.normal(size=(4, 9)) * 2
    tape = Tape()
    t = detect.smooth_l1(tape.constant(d))
    assert np.allclose(t.data, detect.smooth_l1(d), atol=1e-12)


def test_smooth_l1_gradcheck_away_from_kink():
    rng = np.random.default_rng(6)
    for _ in range(100):
        d = rng.normal(size=5) * 2
        d = d[np.abs(np.abs(d) - 1.0) > 1e-2]
        if d.size == 0:
            continue

        def build(tape, leaves):
            return detect.smooth_l1(leaves[0]).sum()

        check_gradients(build, [d])


def test_offset_encode_decode_roundtrip():
    rng = np.random.default_rng(7)
    anchors = detect.anchor_grid()
    for _ in range(100):
        a = anchors[rng.integers(len(anchors))]
        cx, cy = rng.uniform(20, 44, size=2)
        w, h = rng.uniform(4, 18, size=2)
        gt = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        t = detect.encode_offsets(gt, a.box)
        back = detect.decode_offsets(t, a.box)
        assert np.allclose(back, gt, atol=1e-9)


# ------------------------------------------------------------------ merge


def _pred(box, conf, subclass="II"):
    scores = np.zeros(len(synthdata.SUBCLASSES))
    scores[synthdata.SUBCLASSES.index(subclass)] = conf
    return BoxPred(box=box, confidence=conf, confidence_sum=conf,
                   subclass=subclass, class_scores=scores)


def test_merge_single_box_unchanged():
    merged = detect.decode_and_merge([_pred((5, 5, 15, 15), 0.4)])
    assert len(merged) == 1
    assert merged[0].box == (5, 5, 15, 15)
    assert merged[0].confidence == 0.4
    assert merged[0].source == "merged"


def test_merge_identical_boxes_sums_scores():
    merged = detect.decode_and_merge([_pred((5, 5, 15, 15), 0.3),
                                      _pred((5, 5, 15, 15), 0.4)])
    assert len(merged) == 1
    assert math.isclose(merged[0].confidence, 0.7)
    assert math.isclose(merged[0].confidence_sum, 0.7)
    assert merged[0].cluster_size == 2
    # geometry comes from the higher-confidence seed
    assert merged[0].box == (5, 5, 15, 15)


def test_merge_disjoint_boxes_kept_separately():
    merged = detect.decode_and_merge([_pred((0, 0, 10, 10), 0.4),
                                      _pred((30, 30, 40, 40), 0.3)])
    assert len(merged) == 2


def test_merge_confidence_capped_sum_retained():
    preds = [_pred((5, 5, 15, 15), 0.5) for _ in range(3)]
    merged = detect.decode_and_merge(preds)
    assert len(merged) == 1
    assert merged[0].confidence == 1.0
    assert math.isclose(merged[0].confidence_sum, 1.5)


def test_merge_different_classes_never_merge():
    merged = detect.decode_and_merge([_pred((5, 5, 15, 15), 0.4, "I"),
                                      _pred((5, 5, 15, 15), 0.3, "II")])
    assert len(merged) == 2


def test_merge_floor_drops_below_keeps_equal():
    merged = detect.decode_and_merge([_pred((0, 0, 10, 10), 0.05),
                                      _pred((30, 30, 40, 40), 0.049)])
    assert len(merged) == 1
    assert merged[0].confidence == 0.05


def test_merge_keeps_seed_geometry():
    # The 0.4 box seeds the cluster and absorbs the overlapping 0.3 box.
    merged = detect.decode_and_merge([_pred((0, 0, 10, 10), 0.3),
                                      _pred((1, 1, 11, 11), 0.4)])
    assert len(merged) == 1
    assert merged[0].box == (1, 1, 11, 11)


def _random_preds(rng, n):
    preds = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, 50, size=2)
        w, h = rng.uniform(4, 14, size=2)
        preds.append(_pred(
            (float(x0), float(y0), float(min(64, x0 + w)),
             float(min(64, y0 + h))),
            float(rng.uniform(0.01, 0.9)),
            str(rng.choice(synthdata.SUBCLASSES))))
    return preds


def test_merge_idempotent_property():
    rng = np.random.default_rng(8)
    for _ in range(50):
        once = detect.decode_and_merge(_random_preds(rng, int(rng.integers(0, 12))))
        twice = detect.decode_and_merge(once)
        assert len(twice) == len(once)
        for a, b in zip(once, twice):
            assert a.box == b.box
            assert a.subclass == b.subclass
            assert math.isclose(a.confidence_sum, b.confidence_sum)
            assert a.cluster_size == b.cluster_size


def test_merge_conserves_above_floor_boxes():
    rng = np.random.default_rng(9)
    for _ in range(50):
        preds = _random_preds(rng, int(rng.integers(0, 12)))
        above = sum(1 for p in preds if p.confidence_sum >= 0.05)
        merged = detect.decode_and_merge(preds)
        assert sum(m.cluster_size for m in merged) == above


def test_merge_same_class_outputs_never_overlap():
    rng = np.random.default_rng(10)
    for _ in range(50):
        merged = detect.decode_and_merge(_random_preds(rng, 10))
        for i, a in enumerate(merged):
            for b in merged[i + 1:]:
                if a.subclass == b.subclass:
                    assert detect.iou(a.box, b.box) <= 0.5


# ------------------------------------------------------------- image-level


def test_image_call_location_class_decoupling():
    # Class II boxes sum to 0.7, beating the single 0.5 class-I box that
    # still wins the location pick.
    preds = [_pred((0, 0, 10, 10), 0.4, "II"),
             _pred((30, 30, 40, 40), 0.3, "II"),
             _pred((50, 50, 60, 60), 0.5, "I")]
    call = detect.image_level_classification(preds)
    assert call.box == (50, 50, 60, 60)
    assert call.subclass == "II"
    assert math.isclose(call.class_sums["II"], 0.7)
    assert math.isclose(call.class_sums["I"], 0.5)


def test_image_call_single_box():
    call = detect.image_level_classification([_pred((0, 0, 10, 10), 0.3, "IIIa")])
    assert call.subclass == "IIIa"
    assert call.box == (0, 0, 10, 10)


def test_image_call_empty_is_no_polyp_not_error():
    call = detect.image_level_classification([])
    assert call.subclass == detect.NO_POLYP
    assert call.box is None
    assert all(v == 0.0 for v in call.class_sums.values())


def test_image_call_tie_breaks_to_lowest_class_index():
    preds = [_pred((0, 0, 10, 10), 0.4, "IIIb"),
             _pred((30, 30, 40, 40), 0.4, "I")]
    call = detect.image_level_classification(preds)
    assert call.subclass == "I"


def test_image_call_matches_enumeration_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        preds = _random_preds(rng, int(rng.integers(1, 10)))
        call = detect.image_level_classification(preds)
        sums = {c: 0.0 for c in synthdata.SUBCLASSES}
        for p in preds:
            sums[p.subclass] += p.confidence_sum
        best_sum = max(sums.values())
        oracle_class = [c for c in synthdata.SUBCLASSES
                        if sums[c] == best_sum][0]
        best_conf = max(p.confidence_sum for p in preds)
        oracle_box = [p.box for p in preds
                      if p.confidence_sum == best_conf][0]
        assert call.subclass == oracle_class
        assert call.box == oracle_box
        assert all(math.isclose(call.class_sums[c], sums[c]) for c in sums)


# ------------------------------------------------------------ training


@lru_cache(maxsize=1)
def detect_corpus():
    corpus = synthdata.generate_corpus((30, 40, 6), (3, 3, 3), seed=7)
    train, val, test = synthdata.split_by_patient(corpus, synthdata.SplitSpec())
    keep = lambda fs: [f for f in fs if f.label != synthdata.WATER_FECES]
    return keep(train), keep(test)


@lru_cache(maxsize=1)
def trained_detector():
    train, _ = detect_corpus()
    return detect.train_detector(train, epochs=25, batch_size=16, seed=0)


def test_train_detector_requires_boxes():
    train, _ = detect_corpus()
    normals = [f for f in train if not f.boxes]
    with pytest.raises(ValueError):
        detect.train_detector(normals, epochs=1)


def test_train_detector_loss_decreases_smoothed():
    model = trained_detector()
    hist = np.array(model.train_loss)
    k = 5
    assert hist[-k:].mean() < hist[:k].mean()


def test_train_detector_seed_determinism():
    train, _ = detect_corpus()
    a = detect.train_detector(train, epochs=2, batch_size=16, seed=3)
    b = detect.train_detector(train, epochs=2, batch_size=16, seed=3)
    assert np.array_equal(a.trunk.arrays["layer0.w"], b.trunk.arrays["layer0.w"])
    assert np.array_equal(a.head_box.arrays["layer2.b"], b.head_box.arrays["layer2.b"])
    assert a.train_loss == b.train_loss


def test_train_detector_counts_skipped_batches():
    # 15 box-free frames and 1 with boxes, in two batches of 8: every epoch
    # one batch has no foreground anchor and must be skipped, not crash.
    train, _ = detect_corpus()
    normals = [f for f in train if not f.boxes][:15]
    ab = [f for f in train if f.boxes][:1]
    model = detect.train_detector(normals + ab, epochs=2, batch_size=8, seed=0)
    assert model.skipped_batches == 2


def test_trained_detector_learns_train_set_recall():
    model = trained_detector()
    train, _ = detect_corpus()
    recall = detect.localisation_recall(model, train)
    assert recall >= 0.6


def test_localisation_recall_requires_boxes():
    _, test = detect_corpus()
    normals = [f for f in test if not f.boxes]
    with pytest.raises(ValueError):
        detect.localisation_recall(trained_detector(), normals)


def test_predictions_are_deterministic_and_valid():
    model = trained_detector()
    _, test = detect_corpus()
    frame = test[0]
    a = detect.predict_boxes(model, frame)
    b = detect.predict_boxes(model, frame)
    assert len(a) == len(b)
    for pa, pb in zip(a, b):
        assert pa.box == pb.box and pa.confidence == pb.confidence
        assert 0.0 <= pa.confidence <= 1.0
        assert pa.subclass in synthdata.SUBCLASSES
        assert ((pa.class_scores >= 0) & (pa.class_scores <= 1)).all()
        x0, y0, x1, y1 = pa.box
        assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
