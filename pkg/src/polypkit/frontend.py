"""Stream frontend: blur scoring, distractor rejection, and filtering.

Frames flow through two cheap gates before any downstream model sees them.
A variance-of-Laplacian score rejects blurred frames first (no network
involved), then a small convolutional classifier rejects water/feces
distractor frames. Both thresholds are data-derived: the blur cutoff
maximises balanced accuracy on sharp-versus-blurred validation frames, and
the distractor cutoff is the standard 0.5 operating point of a sigmoid
trained with binary cross entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from . import nets
from .nets import NetworkParams
from .synthdata import SynthFrame, WATER_FECES, blur

__all__ = [
    "FrontendDecision",
    "variance_of_laplacian", "bce_loss",
    "train_distractor_classifier", "predict_distractor_prob",
    "learn_blur_threshold", "filter_stream",
]

EPS = 1e-12

# 3x3 Laplacian, 4-neighbour convention: centre +4, edge neighbours -1,
# corners 0. Only the relative ordering of scores matters for thresholding,
# so the (equally defensible) 8-neighbour variant is not exposed.
LAPLACIAN_KERNEL = np.array([[0.0, -1.0, 0.0],
                             [-1.0, 4.0, -1.0],
                             [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class FrontendDecision:
    """One frame's verdict. ``distractor_prob`` is None when the blur gate
    rejected the frame before the classifier ran."""
    frame_index: int
    patient_id: int
    blur_score: float
    distractor_prob: float | None
    verdict: str  # pass | reject_blur | reject_distractor


def variance_of_laplacian(frame: SynthFrame | np.ndarray) -> float:
    """Sharpness score: variance of the 3x3 Laplacian response.

    Colour rasters are reduced to grayscale by the channel mean; the border
    is handled by reflective padding so the response has the raster's shape.
    """
    raster = frame.raster if isinstance(frame, SynthFrame) else frame
    gray = raster.mean(axis=2) if raster.ndim == 3 else raster
    padded = np.pad(gray, 1, mode="reflect")
    response = (4.0 * padded[1:-1, 1:-1]
                - padded[:-2, 1:-1] - padded[2:, 1:-1]
                - padded[1:-1, :-2] - padded[1:-1, 2:])
    return float(response.var())


def bce_loss(p, y) -> float:
    """Mean binary cross entropy, -[y ln p + (1-y) ln(1-p)], with p clamped
    to [1e-12, 1 - 1e-12] so exact 0/1 predictions stay finite."""
    p = np.clip(np.asarray(p, dtype=float), EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=float)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


_CLASSIFIER_SPECS = (
    nets.conv(8, 4, stride=2), nets.relu(),
    nets.conv(16, 4, stride=2), nets.relu(),
    nets.conv(32, 4, stride=2), nets.relu(),
    nets.linear(1),
)


def _frame_batch(frames) -> np.ndarray:
    return np.stack([f.raster for f in frames])


def predict_distractor_prob(params: NetworkParams, frames,
                            batch_size: int = 64) -> np.ndarray:
    """Sigmoid probabilities that each frame is a distractor."""
    x = _frame_batch(frames)
    probs = []
    for start in range(0, len(x), batch_size):
        tape = nd.Tape()
        bound = nets.bind(params, tape)
        logits = nets.forward(bound, tape.constant(x[start:start + batch_size]),
                              mode="eval")
        probs.append(1.0 / (1.0 + np.exp(-logits.data.ravel())))
    return np.concatenate(probs)


def train_distractor_classifier(train_frames, val_frames, *,
                                epochs: int = 12, batch_size: int = 32,
                                lr: float = 3e-3, seed: int = 0,
                                label_flip: bool = False) -> NetworkParams:
    """Train the water/feces-versus-rest classifier with BCE and Adam.

    The returned parameters are the epoch snapshot with the best validation
    accuracy (earliest epoch wins ties, so runs are deterministic per seed).
    ``label_flip`` inverts the training labels; it exists for the sanity
    check that a mistrained classifier cannot beat chance.
    """
    x = _frame_batch(train_frames)
    y = np.array([1.0 if f.label == WATER_FECES else 0.0
                  for f in train_frames])
    if label_flip:
        y = 1.0 - y
    if len(np.unique(y)) < 2:
        raise ValueError(
            "distractor training needs both classes present; got only "
            + ("distractor" if y.any() else "non-distractor") + " frames")
    params = nets.init_params(_CLASSIFIER_SPECS, x.shape[1:], seed=seed)
    opt = nd.adam(lr)
    rng = np.random.default_rng(seed)
    val_labels = np.array([1.0 if f.label == WATER_FECES else 0.0
                           for f in val_frames])
    best_acc = -1.0
    best = params.copy()
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            tape = nd.Tape()
            bound = nets.bind(params, tape)
            logits = nets.forward(bound, tape.constant(x[idx]), mode="eval")
            p = nd.sigmoid(logits.reshape((len(idx),)))
            yb = tape.constant(y[idx])
            one = tape.constant(1.0)
            eps = tape.constant(EPS)
            loss = -((yb * nd.log(p + eps)
                      + (one - yb) * nd.log(one - p + eps)).mean())
            grads = tape.backward(loss)
            nd.optimizer_step(opt, params.arrays, bound.grads_by_name(grads))
        probs = predict_distractor_prob(params, val_frames)
        acc = float(np.mean((probs > 0.5) == (val_labels > 0.5)))
        if acc > best_acc:
            best_acc = acc
            best = params.copy()
    return best


def learn_blur_threshold(frames, *, sigma_range=(1.0, 3.0),
                         seed: int = 0) -> float:
    """Blur cutoff maximising balanced accuracy on sharp vs blurred frames.

    Each input frame contributes its own score (sharp class) and the score
    of a blurred copy with sigma drawn uniformly from ``sigma_range``.
    Candidate cutoffs are midpoints between adjacent distinct scores; the
    lowest maximiser is returned so the choice is deterministic.
    """
    if not frames:
        raise ValueError("need at least one frame to learn a blur threshold")
    rng = np.random.default_rng(seed)
    sharp = np.array([variance_of_laplacian(f) for f in frames])
    blurred = np.array([
        variance_of_laplacian(blur(f, rng.uniform(*sigma_range)))
        for f in frames])
    scores = np.concatenate([sharp, blurred])
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    candidates = np.concatenate([[distinct[0] - 1.0], mids,
                                 [distinct[-1] + 1.0]])
    best_thr = candidates[0]
    best_bal = -1.0
    for thr in candidates:
        tpr = float(np.mean(sharp >= thr))      # sharp frames kept
        tnr = float(np.mean(blurred < thr))     # blurred frames rejected
        bal = 0.5 * (tpr + tnr)
        if bal > best_bal:
            best_bal = bal
            best_thr = thr
    return float(best_thr)


def filter_stream(frames, blur_threshold: float,
                  classifier: NetworkParams):
    """Apply the two gates in fixed order: blur first, classifier second.

    Returns (kept frames, decision log), both in stream order. The
    classifier never runs on blur-rejected frames, which the decision log
    records as a missing distractor probability.
    """
    blur_scores = [variance_of_laplacian(f) for f in frames]
    needs_cls = [i for i, s in enumerate(blur_scores)
                 if s >= blur_threshold]
    probs = {}
    if needs_cls:
        cls_probs = predict_distractor_prob(
            classifier, [frames[i] for i in needs_cls])
        probs = dict(zip(needs_cls, cls_probs))
    kept = []
    decisions = []
    for i, frame in enumerate(frames):
        if blur_scores[i] < blur_threshold:
            verdict = "reject_blur"
            prob = None
        elif probs[i] > 0.5:
            verdict = "reject_distractor"
            prob = float(probs[i])
        else:
            verdict = "pass"
            prob = float(probs[i])
            kept.append(frame)
        decisions.append(FrontendDecision(
            frame_index=frame.index, patient_id=frame.patient_id,
            blur_score=blur_scores[i], distractor_prob=prob,
            verdict=verdict))
    return kept, decisions
