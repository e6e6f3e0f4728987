"""Seeded procedural colonoscopy-like frames with patient-wise splits.

Three frame classes:

* Normal: smooth mucosa texture (base tint, band-limited folds, vignette).
* Abnormal: the same texture plus 1-2 polyp blobs. Each blob carries a
  subclass style (hue weights, radial texture frequency, boundary
  lobulation) and an axis-aligned bounding box fully inside the frame.
  Blob amplitude is rescaled when needed so the mean intensity inside the
  boxes exceeds the outside mean by at least the configured contrast.
* Water&Feces: speckle and streak distractor texture with a few solid
  clumps. The clumps make the class actively harmful as anomaly-training
  contamination, while the dense speckle keeps it easy for a small
  classifier to recognise.

Every frame is a pure function of (seed, frame index): the generator draws
from ``default_rng(SeedSequence([seed, index]))``, so any frame can be
regenerated in isolation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "NORMAL", "ABNORMAL", "WATER_FECES", "LABELS", "SUBCLASSES",
    "LabeledBox", "SynthFrame", "SplitSpec", "GeneratorConfig",
    "generate_corpus", "render_frame", "split_by_patient",
    "subsample_stream", "blur", "export_corpus", "load_corpus",
]

NORMAL = "Normal"
ABNORMAL = "Abnormal"
WATER_FECES = "Water&Feces"
LABELS = (NORMAL, ABNORMAL, WATER_FECES)

SUBCLASSES = ("I", "II", "IIo", "IIIa", "IIIb")

# Per-subclass appearance: RGB bump weights, radial ripple frequency,
# boundary lobulation depth. Chosen to be separable by a small conv net
# (hue direction, texture scale, outline shape all differ).
_STYLE = {
    "I":    {"hue": (1.00, 0.22, 0.22), "texture_freq": 0.0, "lobulation": 0.00},
    "II":   {"hue": (0.22, 1.00, 0.22), "texture_freq": 2.0, "lobulation": 0.06},
    "IIo":  {"hue": (0.22, 0.30, 1.00), "texture_freq": 3.5, "lobulation": 0.12},
    "IIIa": {"hue": (0.92, 0.12, 1.00), "texture_freq": 5.0, "lobulation": 0.20},
    "IIIb": {"hue": (1.00, 0.95, 0.12), "texture_freq": 7.0, "lobulation": 0.30},
}

_LUM = np.array([1.0, 1.0, 1.0]) / 3.0  # grayscale = channel mean


@dataclass
class LabeledBox:
    box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    subclass: str
    style: dict = field(default_factory=dict)


@dataclass
class SynthFrame:
    raster: np.ndarray  # (H, W, 3) float64 in [0, 1]
    patient_id: int
    label: str
    boxes: list[LabeledBox] = field(default_factory=list)
    blur_sigma: float = 0.0
    index: int = -1
    split: str | None = None


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0


@dataclass(frozen=True)
class GeneratorConfig:
    size: int = 64
    contrast: float = 0.12       # required inside-vs-outside box mean gap
    fold_amp: float = 0.10       # mucosa fold amplitude (std of luminance)
    fold_sigma: float = 4.0      # fold correlation length in pixels
    tint_jitter: float = 0.035   # per-frame base-color jitter
    blob_amp: float = 0.30       # initial polyp bump luminance amplitude
    ripple_amp: float = 0.05
    speckle_amp: float = 0.22


def _class_layout(counts, patients):
    """Frame count and patient count per class, plus global id offsets."""
    counts = tuple(int(c) for c in counts)
    patients = tuple(int(p) for p in patients)
    if len(counts) != 3 or len(patients) != 3:
        raise ValueError("counts and patients must have one entry per class")
    for label, c, p in zip(LABELS, counts, patients):
        if c <= 0:
            raise ValueError(f"{label}: frame count must be positive")
        if p < 3:
            raise ValueError(f"{label}: need at least 3 patients for splits")
        if p > c:
            raise ValueError(f"{label}: more patients ({p}) than frames ({c})")
    return counts, patients


def _frame_slot(counts, patients, index):
    """Map a global frame index to (label, patient_id)."""
    offset = 0
    patient_base = 0
    for label, c, p in zip(LABELS, counts, patients):
        if index < offset + c:
            local = index - offset
            per = c // p
            extra = c % p
            # First `extra` patients get per+1 frames.
            boundary = extra * (per + 1)
            if local < boundary:
                k = local // (per + 1)
            else:
                k = extra + (local - boundary) // per
            return label, patient_base + k
        offset += c
        patient_base += p
    raise IndexError(f"frame index {index} out of range")


def _base_texture(rng, cfg: GeneratorConfig, base_color):
    s = cfg.size
    tint = np.asarray(base_color) + rng.normal(0.0, cfg.tint_jitter, size=3)
    img = np.broadcast_to(tint, (s, s, 3)).copy()
    folds = gaussian_filter(rng.normal(size=(s, s)), cfg.fold_sigma, mode="reflect")
    sd = folds.std()
    if sd > 0:
        folds = folds / sd * cfg.fold_amp
    fine = gaussian_filter(rng.normal(size=(s, s)), 2.0, mode="reflect")
    sd = fine.std()
    if sd > 0:
        fine = fine / sd * (0.45 * cfg.fold_amp)
    img += (folds + fine)[:, :, None] * np.array([1.0, 0.85, 0.75])
    # Specular-like highlight blotches. These intentionally rival polyp
    # bumps in raw pixel statistics (bright, blob-scale) so whole-image
    # brightness cues stay uninformative; they differ in structure only
    # (elongated, weakly tinted, no depression ring, no radial ripple).
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(int(rng.integers(2, 5))):
        hx = rng.uniform(6, s - 6)
        hy = rng.uniform(6, s - 6)
        angle = rng.uniform(0, math.pi)
        s_short = rng.uniform(2.5, 7.0)
        s_long = s_short * rng.uniform(1.0, 2.5)
        ca, sa = math.cos(angle), math.sin(angle)
        u = (xx - hx) * ca + (yy - hy) * sa
        v = -(xx - hx) * sa + (yy - hy) * ca
        spot = np.exp(-0.5 * ((u / s_long) ** 2 + (v / s_short) ** 2))
        tint_dir = 1.0 + rng.normal(0.0, 0.22, size=3)
        tint_dir = np.clip(tint_dir, 0.3, None)
        tint_dir /= tint_dir.mean()
        amp = rng.uniform(0.15, 0.48)
        img += amp * spot[:, :, None] * tint_dir
    # Flat vascular blotches: strongly coloured but luminance-free (the
    # colour direction sums to zero across channels).  Regions of colour
    # excess are therefore as common on normal mucosa as on a polyp bump;
    # only the bump's relief structure (dome, ring, ripple) is distinctive.
    for _ in range(int(rng.integers(3, 7))):
        bx = rng.uniform(4, s - 4)
        by = rng.uniform(4, s - 4)
        sig = rng.uniform(3.0, 8.0)
        spot = np.exp(-0.5 * (((xx - bx) ** 2 + (yy - by) ** 2) / sig ** 2))
        hue = rng.uniform(0.1, 1.0, size=3)
        hue /= hue.mean()
        amp = rng.uniform(0.14, 0.38)
        img += amp * spot[:, :, None] * (hue - 1.0)
    # Vignette with a jittered optical center, as around a scope lumen.
    cx = s / 2 + rng.uniform(-6, 6)
    cy = s / 2 + rng.uniform(-6, 6)
    d2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (s / 2) ** 2)
    img *= (1.0 - rng.uniform(0.15, 0.30) * d2)[:, :, None]
    return img


def _render_blob(rng, cfg: GeneratorConfig, occupied):
    """One polyp bump field plus its box; retries to avoid heavy overlap."""
    s = cfg.size
    subclass = SUBCLASSES[rng.integers(0, len(SUBCLASSES))]
    style = _STYLE[subclass]
    r = rng.uniform(5.0, 9.0)
    lob = style["lobulation"]
    extent = r * (1.0 + lob) + 0.5
    for _ in range(20):
        cx = rng.uniform(extent + 1.0, s - extent - 1.0)
        cy = rng.uniform(extent + 1.0, s - extent - 1.0)
        if all((cx - ox) ** 2 + (cy - oy) ** 2 > (r + orad) ** 2
               for ox, oy, orad in occupied):
            break
    n_lobes = int(rng.integers(3, 6))
    phase = rng.uniform(0, 2 * math.pi)
    ripple_phase = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:s, 0:s]
    dx = xx - cx
    dy = yy - cy
    d = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    # Lobes push outward only: valleys stay at radius r so the bump keeps
    # filling its bounding box even for heavily lobulated subclasses.
    r_theta = r * (1.0 + lob * 0.5 * (np.cos(n_lobes * theta + phase) + 1.0))
    t = np.clip(d / np.maximum(r_theta, 1e-9), 0.0, 1.0)
    # Dome with a plateau: stays near peak height over most of the disk.
    profile = np.cos(0.5 * math.pi * t ** 1.7) ** 2
    lum = cfg.blob_amp * rng.uniform(1.0, 1.4) * profile
    if style["texture_freq"] > 0:
        lum += cfg.ripple_amp * profile * np.sin(
            2 * math.pi * style["texture_freq"] * t + ripple_phase)
    # Faint depression ring outside the box keeps global brightness from
    # flagging abnormal frames to trivial whole-image statistics.
    ring = np.exp(-0.5 * ((d - 1.9 * r_theta) / (0.18 * r)) ** 2)
    lum -= 0.30 * cfg.blob_amp * ring * (d > 1.35 * r_theta)
    hue = np.asarray(style["hue"])
    hue = hue / hue.mean()
    bump = lum[:, :, None] * hue
    box = (max(cx - extent, 0.0), max(cy - extent, 0.0),
           min(cx + extent, float(s)), min(cy + extent, float(s)))
    labeled = LabeledBox(box=box, subclass=subclass,
                         style={"hue": tuple(style["hue"]),
                                "texture_freq": style["texture_freq"],
                                "lobulation": lob})
    occupied.append((cx, cy, r))
    return bump, labeled


def _box_mask(boxes, size):
    mask = np.zeros((size, size), dtype=bool)
    for lb in boxes:
        x0, y0, x1, y1 = lb.box
        mask[int(math.floor(y0)):int(math.ceil(y1)),
             int(math.floor(x0)):int(math.ceil(x1))] = True
    return mask


def _render_abnormal(rng, cfg: GeneratorConfig):
    base = _base_texture(rng, cfg, (0.66, 0.45, 0.40))
    n_blobs = 2 if rng.random() < 0.35 else 1
    occupied: list = []
    blob_field = np.zeros_like(base)
    boxes = []
    for _ in range(n_blobs):
        bump, lb = _render_blob(rng, cfg, occupied)
        blob_field += bump
        boxes.append(lb)
    inside = _box_mask(boxes, cfg.size)
    target = 1.2 * cfg.contrast
    # Scale the blob field up until the box-mean gap clears the contrast
    # requirement on the final clipped raster. Only scales up, so natural
    # amplitude variety survives when a frame already clears the bar.
    raster = np.clip(base + blob_field, 0.0, 1.0)
    for _ in range(12):
        lum = raster.mean(axis=2)
        if lum[inside].mean() - lum[~inside].mean() >= target:
            break
        blob_field *= 1.3
        raster = np.clip(base + blob_field, 0.0, 1.0)
    return raster, boxes


def _render_normal(rng, cfg: GeneratorConfig):
    return np.clip(_base_texture(rng, cfg, (0.66, 0.45, 0.40)), 0.0, 1.0), []


def _render_distractor(rng, cfg: GeneratorConfig):
    s = cfg.size
    img = _base_texture(rng, cfg, (0.55, 0.44, 0.30))
    # Dense bright/dark speckle: the class signature.
    u = rng.random((s, s))
    bright = (u < 0.16).astype(np.float64)
    dark = (u > 0.92).astype(np.float64)
    img += (cfg.speckle_amp * bright - 0.8 * cfg.speckle_amp * dark)[:, :, None] \
        * np.array([1.0, 0.9, 0.55])
    # Streaks: a few bright diagonal washes (water reflections).
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(int(rng.integers(2, 5))):
        angle = rng.uniform(0, math.pi)
        offset = rng.uniform(-s, s)
        coord = xx * math.cos(angle) + yy * math.sin(angle)
        band = np.abs(coord - s / 2 - offset) < rng.uniform(1.5, 3.5)
        img += 0.10 * band[:, :, None] * np.array([1.0, 1.0, 0.8])
    # Solid clumps: blob-shaped debris. These poison anomaly training when
    # distractor frames leak into the believed-normal pool.
    for _ in range(int(rng.integers(1, 4))):
        r = rng.uniform(4.0, 8.0)
        cx = rng.uniform(r + 1, s - r - 1)
        cy = rng.uniform(r + 1, s - r - 1)
        d = np.hypot(xx - cx, yy - cy)
        prof = np.cos(0.5 * math.pi * np.clip(d / r, 0, 1)) ** 2
        img += 0.30 * prof[:, :, None] * np.array([1.05, 0.95, 0.55])
    return np.clip(img, 0.0, 1.0), []


def render_frame(counts, patients, seed: int, index: int,
                 cfg: GeneratorConfig = GeneratorConfig()) -> SynthFrame:
    """Regenerate a single frame from its corpus coordinates."""
    counts, patients = _class_layout(counts, patients)
    label, patient_id = _frame_slot(counts, patients, index)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    if label == NORMAL:
        raster, boxes = _render_normal(rng, cfg)
    elif label == ABNORMAL:
        raster, boxes = _render_abnormal(rng, cfg)
    else:
        raster, boxes = _render_distractor(rng, cfg)
    return SynthFrame(raster=raster, patient_id=patient_id, label=label,
                      boxes=boxes, blur_sigma=0.0, index=index)


def generate_corpus(counts, patients, seed: int,
                    cfg: GeneratorConfig = GeneratorConfig()) -> list[SynthFrame]:
    """All frames for the requested per-class (Normal, Abnormal, Water&Feces)
    counts, with patients allocated contiguously within each class."""
    counts, patients = _class_layout(counts, patients)
    total = sum(counts)
    return [render_frame(counts, patients, seed, i, cfg) for i in range(total)]


def split_by_patient(corpus, spec: SplitSpec):
    """Patient-disjoint (train, val, test) lists, class-stratified.

    Patients are shuffled per class with the split seed, then allocated by
    largest remainder so per-split class proportions track the corpus.
    Frames are tagged with their split name in place.
    """
    fractions = spec.fractions
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be three values summing to 1")
    by_class_patients: dict[str, list[int]] = {lab: [] for lab in LABELS}
    frames_by_patient: dict[int, list[SynthFrame]] = {}
    patient_label: dict[int, str] = {}
    for f in corpus:
        frames_by_patient.setdefault(f.patient_id, []).append(f)
        prev = patient_label.setdefault(f.patient_id, f.label)
        if prev != f.label:
            raise ValueError(
                f"patient {f.patient_id} spans classes {prev} and {f.label}")
    for pid, lab in patient_label.items():
        by_class_patients[lab].append(pid)
    rng = np.random.default_rng(spec.seed)
    splits: tuple[list[SynthFrame], ...] = ([], [], [])
    names = ("train", "val", "test")
    for lab in LABELS:
        pids = sorted(by_class_patients[lab])
        if not pids:
            continue
        if len(pids) < 3:
            raise ValueError(
                f"class {lab}: only {len(pids)} patients, need one per split")
        rng.shuffle(pids)
        n = len(pids)
        raw = [frac * n for frac in fractions]
        alloc = [int(math.floor(x)) for x in raw]
        remainders = sorted(range(3), key=lambda i: (raw[i] - alloc[i], -i),
                            reverse=True)
        for i in remainders[: n - sum(alloc)]:
            alloc[i] += 1
        # Guarantee one patient per split, stealing from the largest bucket.
        for i in range(3):
            while alloc[i] == 0:
                donor = max(range(3), key=lambda j: alloc[j])
                if alloc[donor] <= 1:
                    raise ValueError(
                        f"class {lab}: cannot place a patient in every split")
                alloc[donor] -= 1
                alloc[i] += 1
        start = 0
        for si, count in enumerate(alloc):
            for pid in pids[start:start + count]:
                for f in sorted(frames_by_patient[pid], key=lambda f: f.index):
                    f.split = names[si]
                    splits[si].append(f)
            start += count
    for part in splits:
        part.sort(key=lambda f: f.index)
    return splits


def subsample_stream(frames, stride: int):
    """Keep every stride-th frame within each patient stream, in order."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    position: dict[int, int] = {}
    kept = []
    for f in sorted(frames, key=lambda f: f.index):
        k = position.get(f.patient_id, 0)
        position[f.patient_id] = k + 1
        if k % stride == 0:
            kept.append(f)
    return kept


def blur(frame: SynthFrame, sigma: float) -> SynthFrame:
    """Gaussian-blurred copy; per-channel, mean-preserving boundary mode."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return replace(frame, raster=frame.raster.copy(), blur_sigma=0.0)
    out = np.empty_like(frame.raster)
    for c in range(frame.raster.shape[2]):
        out[:, :, c] = gaussian_filter(frame.raster[:, :, c], sigma,
                                       mode="reflect")
    return replace(frame, raster=out, blur_sigma=float(sigma),
                   boxes=list(frame.boxes))


# -- corpus on disk ------------------------------------------------------------

def export_corpus(splits: dict[str, list[SynthFrame]], out_dir) -> None:
    """One directory per split: frames as flat little-endian f32 rasters plus
    a JSON-lines index."""
    out_dir = Path(out_dir)
    for split_name, frames in splits.items():
        d = out_dir / split_name
        (d / "frames").mkdir(parents=True, exist_ok=True)
        lines = []
        for f in frames:
            fname = f"frames/{f.index:05d}.f32"
            shape = f.raster.shape
            (d / fname).write_bytes(
                f.raster.astype("<f4").tobytes())
            lines.append(json.dumps({
                "file": fname,
                "shape": list(shape),
                "index": f.index,
                "patient_id": f.patient_id,
                "label": f.label,
                "blur_sigma": f.blur_sigma,
                "split": split_name,
                "boxes": [{"box": list(lb.box), "subclass": lb.subclass,
                           "style": lb.style} for lb in f.boxes],
            }, sort_keys=True))
        (d / "index.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))


def load_corpus(root) -> dict[str, list[SynthFrame]]:
    root = Path(root)
    splits: dict[str, list[SynthFrame]] = {}
    for d in sorted(root.iterdir()):
        idx = d / "index.jsonl"
        if not idx.is_file():
            continue
        frames = []
        for line in idx.read_text().splitlines():
            rec = json.loads(line)
            raw = (d / rec["file"]).read_bytes()
            raster = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            raster = raster.reshape(rec["shape"])
            frames.append(SynthFrame(
                raster=raster,
                patient_id=rec["patient_id"],
                label=rec["label"],
                boxes=[LabeledBox(box=tuple(b["box"]), subclass=b["subclass"],
                                  style=b.get("style", {}))
                       for b in rec["boxes"]],
                blur_sigma=rec["blur_sigma"],
                index=rec["index"],
                split=rec["split"],
            ))
        splits[d.name] = frames
    if not splits:
        raise FileNotFoundError(f"no corpus splits found under {root}")
    return splits
