"""One-stage polyp localiser/classifier on a fixed anchor grid.

A small conv trunk produces one stride-8 feature map; three 1x1-conv heads
predict, per anchor, an objectness probability, five per-class sigmoid
scores, and four box offsets. Training is focal loss on objectness (all
resolved anchors), per-class binary cross-entropy on foreground anchors,
and smooth-L1 on their box offsets. Inference decodes offsets, floors by
confidence, merges same-class overlapping boxes by summing their
confidences, and aggregates per-class sums into an image-level call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from . import nets
from .ndgrad import Tape, Tensor
from .nets import NetworkParams
from .synthdata import ABNORMAL, SUBCLASSES, SynthFrame

__all__ = [
    "Anchor", "BoxPred", "DetectorParams", "ImageCall", "NO_POLYP",
    "iou", "anchor_grid", "match_anchors", "BACKGROUND", "IGNORE",
    "focal_loss", "smooth_l1", "encode_offsets", "decode_offsets",
    "train_detector", "predict_boxes", "decode_and_merge",
    "image_level_classification", "localisation_recall",
]

EPS = 1e-12
NO_POLYP = "NoPolyp"

# Anchor assignment codes (non-negative values are ground-truth indices).
BACKGROUND = -1
IGNORE = -2

FRAME_SIZE = 64
STRIDE = 8
ANCHOR_SIZES = (12.0, 24.0)


@dataclass(frozen=True)
class Anchor:
    box: tuple[float, float, float, float]
    cell: tuple[int, int]  # (row, col) grid origin


@dataclass
class BoxPred:
    box: tuple[float, float, float, float]
    confidence: float          # capped at 1.0 for probability semantics
    confidence_sum: float      # uncapped; authoritative for ranking
    subclass: str
    class_scores: np.ndarray   # per-class sigmoid scores of the seed box
    source: str = "raw"        # "raw" or "merged"
    cluster_size: int = 1      # raw boxes folded into this one


@dataclass
class ImageCall:
    box: tuple[float, float, float, float] | None
    subclass: str
    class_sums: dict[str, float]


@dataclass
class DetectorParams:
    trunk: NetworkParams
    head_obj: NetworkParams
    head_cls: NetworkParams
    head_box: NetworkParams
    anchors: tuple[Anchor, ...]
    skipped_batches: int = 0
    train_loss: tuple[float, ...] = ()


def iou(a, b) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    if ax1 <= ax0 or ay1 <= ay0 or bx1 <= bx0 or by1 <= by0:
        raise ValueError("iou: degenerate (zero-area) box")
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)
    return inter / union


def anchor_grid(frame_size: int = FRAME_SIZE, stride: int = STRIDE,
                sizes=ANCHOR_SIZES) -> tuple[Anchor, ...]:
    """Square anchors of each size centred on every stride cell."""
    anchors = []
    cells = frame_size // stride
    for r in range(cells):
        for c in range(cells):
            cy = (r + 0.5) * stride
            cx = (c + 0.5) * stride
            for s in sizes:
                anchors.append(Anchor(
                    box=(cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2),
                    cell=(r, c)))
    return tuple(anchors)


def match_anchors(gt_boxes, anchors, tau_fg: float = 0.5,
                  tau_bg: float = 0.4) -> np.ndarray:
    """Per-anchor assignment: gt index, BACKGROUND, or IGNORE.

    An anchor is foreground for its best-IoU ground truth when that IoU
    >= tau_fg, background when < tau_bg, and ignored in between. Every
    ground truth left without a foreground anchor then adopts its best
    anchor (in ground-truth order), so each has at least one positive.
    """
    if tau_bg > tau_fg:
        raise ValueError("match_anchors: tau_bg must be <= tau_fg")
    n = len(anchors)
    out = np.full(n, BACKGROUND, dtype=int)
    if not gt_boxes:
        return out
    mat = np.array([[iou(a.box, g) for g in gt_boxes] for a in anchors])
    best_gt = mat.argmax(axis=1)
    best_iou = mat[np.arange(n), best_gt]
    out[best_iou >= tau_fg] = best_gt[best_iou >= tau_fg]
    out[(best_iou < tau_fg) & (best_iou >= tau_bg)] = IGNORE
    for g in range(len(gt_boxes)):
        if not np.any(out == g):
            out[mat[:, g].argmax()] = g
    return out


def focal_loss(p, alpha: float = 0.25, gamma: float = 2.0):
    """-alpha * (1-p)^gamma * ln(p) where p is the probability assigned to
    the true side (foreground probability for positives, its complement
    for negatives). Accepts arrays (returns elementwise) or a Tensor."""
    if isinstance(p, Tensor):
        tape = p.tape
        one = tape.constant(1.0)
        pt = one - p
        mod = pt * pt if gamma == 2.0 else nd.exp(nd.log(pt + tape.constant(EPS)) * gamma)
        return mod * nd.log(p + tape.constant(EPS)) * (-alpha)
    p = np.clip(np.asarray(p, dtype=float), EPS, 1.0)
    return -alpha * (1.0 - p) ** gamma * np.log(p)


def smooth_l1(d):
    """Elementwise Huber: 0.5 d^2 below |d|=1, |d| - 0.5 beyond."""
    if isinstance(d, Tensor):
        tape = d.tape
        a = abs(d)
        # With m = min(|d|, 1) both branches collapse into m*(|d| - m/2):
        # 0.5 d^2 when m = |d|, and |d| - 0.5 when m = 1.
        m = a - nd.relu(a - tape.constant(1.0))
        return m * (a - m * 0.5)
    a = np.abs(np.asarray(d, dtype=float))
    return np.where(a < 1.0, 0.5 * a * a, a - 0.5)


def encode_offsets(gt_box, anchor_box) -> np.ndarray:
    """Anchor-relative (tx, ty, tw, th): centre shift over anchor size and
    log size ratios."""
    gx0, gy0, gx1, gy1 = gt_box
    ax0, ay0, ax1, ay1 = anchor_box
    aw, ah = ax1 - ax0, ay1 - ay0
    gw, gh = gx1 - gx0, gy1 - gy0
    return np.array([((gx0 + gx1) / 2 - (ax0 + ax1) / 2) / aw,
                     ((gy0 + gy1) / 2 - (ay0 + ay1) / 2) / ah,
                     np.log(gw / aw), np.log(gh / ah)])


def decode_offsets(t, anchor_box, frame_size: int = FRAME_SIZE) -> tuple:
    """Inverse of encode_offsets, clipped to the frame."""
    tx, ty, tw, th = np.asarray(t, dtype=float)
    ax0, ay0, ax1, ay1 = anchor_box
    aw, ah = ax1 - ax0, ay1 - ay0
    cx = (ax0 + ax1) / 2 + tx * aw
    cy = (ay0 + ay1) / 2 + ty * ah
    w = aw * np.exp(min(tw, 4.0))
    h = ah * np.exp(min(th, 4.0))
    x0 = float(np.clip(cx - w / 2, 0.0, frame_size))
    y0 = float(np.clip(cy - h / 2, 0.0, frame_size))
    x1 = float(np.clip(cx + w / 2, 0.0, frame_size))
    y1 = float(np.clip(cy + h / 2, 0.0, frame_size))
    return (x0, y0, x1, y1)


# ------------------------------------------------------------------ model

_N_ANCHORS_PER_CELL = len(ANCHOR_SIZES)
_N_CLASSES = len(SUBCLASSES)


def _trunk_specs():
    return (nets.conv(16, 3, stride=2, padding=1), nets.relu(),
            nets.conv(32, 3, stride=2, padding=1), nets.relu(),
            nets.conv(64, 3, stride=2, padding=1), nets.relu())


def _head_specs(channels_out: int):
    return (nets.conv(64, 1), nets.relu(), nets.conv(channels_out, 1))


def _forward_heads(model_or_bounds, x, tape: Tape):
    """Feature trunk plus the three heads; outputs keep the grid layout."""
    trunk, obj, cls, box = model_or_bounds
    h = nets.forward(trunk, x, mode="eval", tape=tape)
    obj_map = nets.forward(obj, h, mode="eval", tape=tape)
    cls_map = nets.forward(cls, h, mode="eval", tape=tape)
    box_map = nets.forward(box, h, mode="eval", tape=tape)
    return obj_map, cls_map, box_map


def _init_detector(seed: int) -> DetectorParams:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(2 ** 31, size=4)
    trunk = nets.init_params(_trunk_specs(), (FRAME_SIZE, FRAME_SIZE, 3),
                             seed=int(seeds[0]))
    grid = FRAME_SIZE // STRIDE
    feat = (grid, grid, 64)
    a = _N_ANCHORS_PER_CELL
    head_obj = nets.init_params(_head_specs(a), feat, seed=int(seeds[1]))
    # Bias objectness towards background at init so the dense negatives do
    # not flood the first updates: sigmoid(-ln 99) = 0.01 foreground prior.
    head_obj.arrays[f"layer{len(head_obj.specs) - 1}.b"][:] = -np.log(99.0)
    return DetectorParams(
        trunk=trunk,
        head_obj=head_obj,
        head_cls=nets.init_params(_head_specs(a * _N_CLASSES), feat,
                                  seed=int(seeds[2])),
        head_box=nets.init_params(_head_specs(a * 4), feat, seed=int(seeds[3])),
        anchors=anchor_grid())


def _dihedral(raster: np.ndarray, boxes, k: int,
              size: float = float(FRAME_SIZE)):
    """Apply the k-th symmetry of the square (k in 0..7: rotation count in
    the low two bits, horizontal flip in the third) to a frame and its
    boxes. Rotating np.rot90-style maps the point (x, y) to (y, size - x).
    """
    rot, flip = k & 3, k & 4
    out = np.rot90(raster, rot, axes=(0, 1))
    pts = [((b[0], b[1]), (b[2], b[3])) for b in boxes]
    for _ in range(rot):
        pts = [((p0[1], size - p0[0]), (p1[1], size - p1[0]))
               for p0, p1 in pts]
    if flip:
        out = out[:, ::-1, :]
        pts = [((size - p0[0], p0[1]), (size - p1[0], p1[1]))
               for p0, p1 in pts]
    fixed = [(min(p0[0], p1[0]), min(p0[1], p1[1]),
              max(p0[0], p1[0]), max(p0[1], p1[1])) for p0, p1 in pts]
    return np.ascontiguousarray(out), fixed


def _targets_for(gt_boxes, classes, anchors) -> tuple[np.ndarray, ...]:
    assign = match_anchors(gt_boxes, anchors)
    cls_idx = np.full(len(anchors), -1, dtype=int)
    offsets = np.zeros((len(anchors), 4))
    for i, g in enumerate(assign):
        if g >= 0:
            cls_idx[i] = classes[g]
            offsets[i] = encode_offsets(gt_boxes[g], anchors[i].box)
    return assign, cls_idx, offsets


def train_detector(frames, *, epochs: int = 40, batch_size: int = 16,
                   lr: float = 1e-3, lam: float = 1.0, seed: int = 0,
                   alpha: float = 0.25, gamma: float = 2.0,
                   augment: bool = True) -> DetectorParams:
    """Train on abnormal frames (boxes) plus normal frames (pure negatives).

    Loss per batch: focal objectness summed over resolved (non-ignored)
    anchors + per-class BCE over foreground anchors + lam * smooth-L1 over
    foreground offsets, each normalised by the foreground count. Batches
    that contain no foreground anchor are skipped and counted on the
    returned model. With augment, every frame appearance is passed through
    a random symmetry of the square (boxes transformed exactly).
    """
    if not any(f.boxes for f in frames):
        raise ValueError("train_detector needs at least one frame with boxes")
    model = _init_detector(seed)
    anchors = model.anchors
    frame_cls = [[SUBCLASSES.index(lb.subclass) for lb in f.boxes]
                 for f in frames]
    params = ({f"trunk.{k}": v for k, v in model.trunk.arrays.items()}
              | {f"obj.{k}": v for k, v in model.head_obj.arrays.items()}
              | {f"cls.{k}": v for k, v in model.head_cls.arrays.items()}
              | {f"box.{k}": v for k, v in model.head_box.arrays.items()})
    opt = nd.adam(lr)
    rng = np.random.default_rng(seed)
    n_anchor = len(anchors)
    history = []
    skipped = 0
    for _ in range(epochs):
        order = rng.permutation(len(frames))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            b = len(idx)
            rasters, per_frame = [], []
            for i in idx:
                k = int(rng.integers(8)) if augment else 0
                raster, boxes = _dihedral(frames[i].raster,
                                          [lb.box for lb in frames[i].boxes], k)
                rasters.append(raster)
                per_frame.append(_targets_for(boxes, frame_cls[i], anchors))
            assign = np.stack([t[0] for t in per_frame])
            if not np.any(assign >= 0):
                skipped += 1
                continue
            cls_idx = np.stack([t[1] for t in per_frame])
            offs = np.stack([t[2] for t in per_frame])
            xb = np.stack(rasters)
            tape = Tape()
            bounds = (nets.bind(model.trunk, tape),
                      nets.bind(model.head_obj, tape),
                      nets.bind(model.head_cls, tape),
                      nets.bind(model.head_box, tape))
            obj_map, cls_map, box_map = _forward_heads(bounds, xb, tape)
            obj_p = nd.sigmoid(obj_map.reshape(b, n_anchor))
            cls_p = nd.sigmoid(cls_map.reshape(b, n_anchor, _N_CLASSES))
            box_t = box_map.reshape(b, n_anchor, 4)

            resolved = (assign != IGNORE)
            is_fg = (assign >= 0).astype(float)
            n_fg = float(is_fg.sum())
            y = tape.constant(is_fg)
            one = tape.constant(1.0)
            # p_t: foreground prob for positives, complement for negatives.
            pt = obj_p * y + (one - obj_p) * (one - y)
            fl = focal_loss(pt, alpha=alpha, gamma=gamma)
            # Sum over resolved anchors, normalised by foreground count —
            # the focal-loss convention; a per-anchor mean would dilute the
            # few positives by the ~1000x larger background population.
            w_res = tape.constant(resolved.astype(float) / n_fg)
            obj_loss = (fl * w_res).sum()
            onehot = np.zeros((b, n_anchor, _N_CLASSES))
            rows, cols = np.nonzero(assign >= 0)
            onehot[rows, cols, cls_idx[rows, cols]] = 1.0
            t = tape.constant(onehot)
            bce = (t * nd.log(cls_p + tape.constant(EPS))
                   + (one - t) * nd.log(one - cls_p + tape.constant(EPS)))
            w_fg = tape.constant(
                (assign >= 0).astype(float)[:, :, None] / n_fg)
            cls_loss = (bce * w_fg).sum() * (-1.0 / _N_CLASSES)

            d = box_t - tape.constant(offs)
            box_loss = (smooth_l1(d) * w_fg).sum() * (1.0 / 4.0)

            loss = obj_loss + cls_loss + box_loss * lam
            grads = tape.backward(loss)
            named = {}
            for prefix, bound in zip(("trunk.", "obj.", "cls.", "box."),
                                     bounds):
                named |= bound.grads_by_name(grads, prefix=prefix)
            nd.optimizer_step(opt, params, named)
            epoch_losses.append(float(loss.data))
        history.append(float(np.mean(epoch_losses)) if epoch_losses
                       else float("nan"))
    model.skipped_batches = skipped
    model.train_loss = tuple(history)
    return model


# ------------------------------------------------------------------ inference


def predict_boxes(model: DetectorParams, frame: SynthFrame,
                  score_floor: float = 0.05) -> list[BoxPred]:
    """Raw per-anchor predictions above the confidence floor.

    A box's class is its best class score; its confidence is objectness
    times that score. Boxes with confidence below the floor are dropped.
    """
    n_anchor = len(model.anchors)
    tape = Tape()
    obj_map, cls_map, box_map = _forward_heads(
        (model.trunk, model.head_obj, model.head_cls, model.head_box),
        frame.raster[None], tape)
    obj = 1.0 / (1.0 + np.exp(-obj_map.data.reshape(n_anchor)))
    cls = 1.0 / (1.0 + np.exp(-cls_map.data.reshape(n_anchor, _N_CLASSES)))
    offs = box_map.data.reshape(n_anchor, 4)
    preds = []
    for i in range(n_anchor):
        k = int(cls[i].argmax())
        conf = float(obj[i] * cls[i, k])
        if conf < score_floor:
            continue
        box = decode_offsets(offs[i], model.anchors[i].box)
        if box[2] <= box[0] or box[3] <= box[1]:
            continue  # clipped entirely off-frame; carries no area
        preds.append(BoxPred(
            box=box, confidence=conf, confidence_sum=conf,
            subclass=SUBCLASSES[k], class_scores=cls[i].copy()))
    return preds


def decode_and_merge(preds, score_floor: float = 0.05,
                     iou_merge: float = 0.5) -> list[BoxPred]:
    """Greedy same-class merge: the highest-confidence box absorbs every
    same-class box overlapping it above iou_merge; the cluster keeps the
    seed's geometry and sums the members' (uncapped) confidences. Ranking
    uses the uncapped sum; the capped value is for probability use.

    Output is sorted by descending uncapped confidence (ties by geometry),
    which makes the operation idempotent including order. Two same-class
    outputs never overlap above iou_merge, so a second pass merges nothing.
    """
    alive = [p for p in preds if p.confidence_sum >= score_floor]
    order = sorted(range(len(alive)),
                   key=lambda i: (-alive[i].confidence_sum, i))
    taken = [False] * len(alive)
    merged = []
    for i in order:
        if taken[i]:
            continue
        taken[i] = True
        seed = alive[i]
        total = seed.confidence_sum
        size = seed.cluster_size
        for j in order:
            if taken[j] or alive[j].subclass != seed.subclass:
                continue
            if iou(seed.box, alive[j].box) > iou_merge:
                taken[j] = True
                total += alive[j].confidence_sum
                size += alive[j].cluster_size
        merged.append(BoxPred(
            box=seed.box, confidence=min(1.0, total), confidence_sum=total,
            subclass=seed.subclass, class_scores=seed.class_scores,
            source="merged", cluster_size=size))
    merged.sort(key=lambda p: (-p.confidence_sum, p.box, p.subclass))
    return merged


def image_level_classification(merged) -> ImageCall:
    """Location from the single best box; class from per-class sums.

    The location is the highest-confidence merged box; the image class is
    the argmax of summed (uncapped) confidences per class, which may
    disagree with the located box's own class. Empty input is the
    'no polyp found' outcome, not an error.
    """
    sums = {c: 0.0 for c in SUBCLASSES}
    if not merged:
        return ImageCall(box=None, subclass=NO_POLYP, class_sums=sums)
    for p in merged:
        sums[p.subclass] += p.confidence_sum
    best_box = min(range(len(merged)),
                   key=lambda i: (-merged[i].confidence_sum, i))
    best_class = max(SUBCLASSES, key=lambda c: sums[c])
    # max() keeps the first maximum, i.e. the lowest class index on ties.
    return ImageCall(box=merged[best_box].box, subclass=best_class,
                     class_sums=sums)


def localisation_recall(model: DetectorParams, frames,
                        iou_threshold: float = 0.5) -> float:
    """Fraction of ground-truth boxes matched (class-blind) by a merged
    prediction with IoU >= the threshold."""
    hit = 0
    total = 0
    for f in frames:
        if not f.boxes:
            continue
        merged = decode_and_merge(predict_boxes(model, f))
        for lb in f.boxes:
            total += 1
            if any(iou(p.box, lb.box) >= iou_threshold for p in merged):
                hit += 1
    if total == 0:
        raise ValueError("localisation_recall: no ground-truth boxes")
    return hit / total
