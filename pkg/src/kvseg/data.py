"""Masks, run-length encoding, splits, augmentation and Jaccard scoring.

RLE strings are whitespace-separated ``start length`` pairs with 1-indexed
starts over a row-major flattening (left-to-right, top-to-bottom) unless
``order="column"`` is requested. Multi-class masks hold 0 for background
and ``1..C`` for organ classes; where binary masks overlap the higher class
index wins.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionError, FormatError

CLASS_NAMES = ("large_bowel", "small_bowel", "stomach")
NUM_ORGANS = len(CLASS_NAMES)
ORDERS = ("row", "column")


# ---------------------------------------------------------------------------
# run-length encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RleRecord:
    class_id: int
    runs: tuple[tuple[int, int], ...]

    def validate(self, width: int, height: int) -> None:
        total = width * height
        prev_end = 0
        for start, length in self.runs:
            if start < 1 or length < 1:
                raise FormatError(f"run ({start}, {length}) must have start >= 1 and length >= 1")
            if start <= prev_end:
                raise FormatError(f"run starting at {start} overlaps or precedes the previous run")
            end = start + length - 1
            if end > total:
                raise FormatError(f"run ({start}, {length}) exceeds {total} pixels")
            prev_end = end

    def to_string(self) -> str:
        return " ".join(f"{s} {n}" for s, n in self.runs)


def parse_rle(text: str, class_id: int = 1) -> RleRecord:
    tokens = text.split()
    if len(tokens) % 2:
        raise FormatError("RLE string needs an even number of integers")
    try:
        values = [int(t) for t in tokens]
    except ValueError:
        raise FormatError(f"RLE string contains a non-integer: {text!r}") from None
    return RleRecord(class_id, tuple(zip(values[0::2], values[1::2])))


def rle_decode(rec: RleRecord, width: int, height: int, order: str = "row") -> np.ndarray:
    """Binary ``(height, width)`` uint8 mask."""
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    rec.validate(width, height)
    flat = np.zeros(width * height, dtype=np.uint8)
    for start, length in rec.runs:
        flat[start - 1 : start - 1 + length] = 1
    if order == "row":
        return flat.reshape(height, width)
    return flat.reshape(width, height).T.copy()


def rle_encode(mask: np.ndarray, class_id: int = 1, order: str = "row") -> RleRecord:
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    flat = (np.asarray(mask) != 0).astype(np.int8)
    flat = flat.reshape(-1) if order == "row" else flat.T.reshape(-1)
    edges = np.flatnonzero(np.diff(np.concatenate([[0], flat, [0]])))
    starts, ends = edges[0::2], edges[1::2]
    return RleRecord(class_id, tuple((int(s) + 1, int(e - s)) for s, e in zip(starts, ends)))


def compose_multiclass(per_class: Sequence[np.ndarray]) -> np.ndarray:
    """Stack binary masks for classes ``1..C`` into one label image."""
    if not per_class:
        raise ValueError("need at least one class mask")
    shape = np.shape(per_class[0])
    out = np.zeros(shape, dtype=np.uint8)
    for cls, m in enumerate(per_class, start=1):
        m = np.asarray(m)
        if m.shape != shape:
            raise DimensionError(f"class {cls} mask shape {m.shape} differs from {shape}")
        out[m != 0] = cls
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[Fraction, Fraction, Fraction] = (Fraction(80, 100), Fraction(16, 100), Fraction(4, 100))
    seed: int = 0

    def __post_init__(self):
        ratios = tuple(Fraction(str(r)) if isinstance(r, float) else Fraction(r) for r in self.ratios)
        if len(ratios) != 3 or any(r <= 0 for r in ratios) or sum(ratios) != 1:
            raise ValueError(f"split ratios must be three positive rationals summing to 1, got {self.ratios}")
        object.__setattr__(self, "ratios", ratios)


def split_dataset(ids: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list, list, list]:
    """Seeded shuffle, then cuts at ``floor(r0*N)`` and ``floor((r0+r1)*N)``."""
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    n = len(ids)
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [ids[i] for i in order]
    cut1 = math.floor(spec.ratios[0] * n)
    cut2 = math.floor((spec.ratios[0] + spec.ratios[1]) * n)
    return shuffled[:cut1], shuffled[cut1:cut2], shuffled[cut2:]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

AUG_PROB = 0.5
SHIFT_LIMIT = 0.0625
SCALE_LIMIT = 0.10
ROTATE_LIMIT = 15.0
DROPOUT_MAX_HOLES = 8
DROPOUT_MAX_SIZE = 8
BRIGHTNESS_LIMIT = 0.2
CONTRAST_LIMIT = 0.2
TRANSFORMS = ("hflip", "vflip", "shift_scale_rotate", "coarse_dropout", "brightness_contrast")


def sample_seed(global_seed: int, epoch: int, index: int) -> int:
    """64-bit per-sample seed, independent of iteration order."""
    return int(np.random.SeedSequence([global_seed, epoch, index]).generate_state(1, np.uint64)[0])


def augment_gates(seed: int) -> dict[str, bool]:
    """Which of the five transforms ``augment`` would apply for ``seed``."""
    draws = np.random.default_rng(seed).random(len(TRANSFORMS))
    return {name: bool(u < AUG_PROB) for name, u in zip(TRANSFORMS, draws)}


def hflip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[..., :, ::-1].copy(), mask[:, ::-1].copy()


def vflip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[..., ::-1, :].copy(), mask[::-1, :].copy()


def shift_scale_rotate(image, mask, shift: tuple[float, float], scale: float, angle_deg: float):
    """Affine warp about the image centre; the mask uses nearest-neighbour sampling."""
    h, w = mask.shape
    theta = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]) * scale
    inv = np.linalg.inv(rot)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset_px = np.array([shift[0] * h, shift[1] * w])
    # output o maps to input inv @ (o - centre - offset) + centre
    offset = centre - inv @ (centre + offset_px)
    warp = lambda a, order: ndimage.affine_transform(a, inv, offset=offset, order=order, mode="constant", cval=0)
    out_mask = warp(mask, 0).astype(mask.dtype)
    if image.ndim == 2:
        out_img = warp(image, 1)
    else:
        out_img = np.stack([warp(c, 1) for c in image])
    return out_img.astype(image.dtype), out_mask


def coarse_dropout(image: np.ndarray, holes: Iterable[tuple[int, int, int, int]]) -> np.ndarray:
    """Fill ``(row, col, height, width)`` rectangles with the image mean."""
    out = image.copy()
    fill = image.mean()
    for r, c, hh, ww in holes:
        out[..., r : r + hh, c : c + ww] = fill
    return out


def brightness_contrast(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    return np.clip(image * (1.0 + contrast) + brightness, 0.0, 1.0).astype(image.dtype)


def augment(image: np.ndarray, mask: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply each of the five transforms independently with probability 0.5.

    ``image`` is float in ``[0, 1]`` shaped ``(H, W)`` or ``(C, H, W)``;
    ``mask`` is ``(H, W)`` class indices. Geometric transforms act on both,
    photometric ones (dropout, brightness/contrast) on the image only.
    """
    if image.shape[-2:] != mask.shape:
        raise DimensionError(f"image {image.shape} and mask {mask.shape} differ")
    rng = np.random.default_rng(seed)
    gates = rng.random(len(TRANSFORMS)) < AUG_PROB
    h, w = mask.shape
    if gates[0]:
        image, mask = hflip(image, mask)
    if gates[1]:
        image, mask = vflip(image, mask)
    if gates[2]:
        shift = tuple(rng.uniform(-SHIFT_LIMIT, SHIFT_LIMIT, size=2))
        scale = 1.0 + rng.uniform(-SCALE_LIMIT, SCALE_LIMIT)
        angle = rng.uniform(-ROTATE_LIMIT, ROTATE_LIMIT)
        image, mask = shift_scale_rotate(image, mask, shift, scale, angle)
    if gates[3]:
        holes = []
        for _ in range(rng.integers(1, DROPOUT_MAX_HOLES + 1)):
            hh = int(rng.integers(1, min(DROPOUT_MAX_SIZE, h) + 1))
            ww = int(rng.integers(1, min(DROPOUT_MAX_SIZE, w) + 1))
            holes.append((int(rng.integers(0, h - hh + 1)), int(rng.integers(0, w - ww + 1)), hh, ww))
        image = coarse_dropout(image, holes)
    if gates[4]:
        image = brightness_contrast(
            image, rng.uniform(-BRIGHTNESS_LIMIT, BRIGHTNESS_LIMIT), rng.uniform(-CONTRAST_LIMIT, CONTRAST_LIMIT)
        )
    return image, mask


# ---------------------------------------------------------------------------
# Jaccard
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JaccardScores:
    per_class: tuple[float, ...]
    mean: float
    weighted: float


class JaccardAccumulator:
    """Set-level Jaccard: intersections and unions are summed over images.

    A class absent from both prediction and ground truth scores 1. The
    weighted score weights each organ class by its share of ground-truth
    organ pixels (falls back to the plain mean when there are none).
    """

    def __init__(self, classes: int = NUM_ORGANS):
        self.classes = classes
        self.inter = np.zeros(classes, dtype=np.int64)
        self.union = np.zeros(classes, dtype=np.int64)
        self.gt_count = np.zeros(classes, dtype=np.int64)
        self.images = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        for i, c in enumerate(range(1, self.classes + 1)):
            p, g = pred == c, gt == c
            self.inter[i] += np.count_nonzero(p & g)
            self.union[i] += np.count_nonzero(p | g)
            self.gt_count[i] += np.count_nonzero(g)
        self.images += 1

    def result(self) -> JaccardScores:
        scores = np.where(self.union > 0, self.inter / np.maximum(self.union, 1), 1.0)
        mean = float(scores.mean())
        total = self.gt_count.sum()
        weighted = float((scores * self.gt_count).sum() / total) if total else mean
        return JaccardScores(tuple(float(s) for s in scores), mean, weighted)


def jaccard(pred: np.ndarray, gt: np.ndarray, classes: int = NUM_ORGANS) -> JaccardScores:
    acc = JaccardAccumulator(classes)
    acc.update(pred, gt)
    return acc.result()


# ---------------------------------------------------------------------------
# files: graymaps, manifests, synthetic data
# ---------------------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """8-bit or 16-bit portable graymap as a uint8 / uint16 array."""
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.dtype not in (np.uint8, np.uint16):
        arr = arr.astype(np.uint16)
    return arr


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise FormatError(f"only 8-bit graymaps are written, got {arr.dtype}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def image_to_float(arr: np.ndarray) -> np.ndarray:
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


@dataclass(frozen=True)
class ManifestRow:
    id: str
    class_id: int
    rle: RleRecord
    width: int
    height: int
    line: int


def _class_id(text: str, line: int) -> int:
    text = text.strip()
    if text in CLASS_NAMES:
        return CLASS_NAMES.index(text) + 1
    try:
        value = int(text)
    except ValueError:
        raise FormatError(f"unknown class {text!r}", line) from None
    if not 1 <= value <= NUM_ORGANS:
        raise FormatError(f"class id {value} outside 1..{NUM_ORGANS}", line)
    return value


def read_manifest(path) -> list[ManifestRow]:
    """CSV with header ``id,class,rle,width,height``; empty ``rle`` means no pixels."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "class", "rle", "width", "height"]:
            raise FormatError("manifest header must be id,class,rle,width,height", 1)
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 5:
                raise FormatError(f"expected 5 fields, got {len(rec)}", line)
            try:
                width, height = int(rec[3]), int(rec[4])
            except ValueError:
                raise FormatError("width/height must be integers", line) from None
            cls = _class_id(rec[1], line)
            try:
                rle = parse_rle(rec[2], cls)
                rle.validate(width, height)
            except FormatError as exc:
                raise FormatError(str(exc), line) from None
            rows.append(ManifestRow(rec[0].strip(), cls, rle, width, height, line))
    return rows


def masks_from_manifest(rows: Sequence[ManifestRow], order: str = "row") -> dict[str, np.ndarray]:
    """Multi-class masks keyed by id; ids listed without a class get zeros for it."""
    grouped: dict[str, dict] = {}
    for r in rows:
        g = grouped.setdefault(r.id, {"size": (r.width, r.height), "masks": {}})
        if g["size"] != (r.width, r.height):
            raise FormatError(f"id {r.id!r} listed with two different sizes", r.line)
        g["masks"][r.class_id] = rle_decode(r.rle, r.width, r.height, order)
    out = {}
    for id_, g in grouped.items():
        w, h = g["size"]
        out[id_] = compose_multiclass([g["masks"].get(c, np.zeros((h, w), np.uint8)) for c in range(1, NUM_ORGANS + 1)])
    return out


def write_manifest(path, masks: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "class", "rle", "width", "height"])
        for id_, m in masks.items():
            h, w = m.shape
            for c, name in enumerate(CLASS_NAMES, start=1):
                writer.writerow([id_, name, rle_encode(m == c, c).to_string(), w, h])


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float (H, W) in [0, 1]
    mask: np.ndarray  # uint8 (H, W)


_INTENSITY = {0: 0.12, 1: 0.40, 2: 0.65, 3: 0.90}


def synthetic_sample(
    rng: np.random.Generator, size: int, classes: int = NUM_ORGANS
) -> tuple[np.ndarray, np.ndarray]:
    """Blob image (uint8) with its exact mask; class ``c`` has its own intensity.

    Class 1 is an ellipse, 2 an axis-aligned rectangle, 3 a disc; later
    classes are drawn over earlier ones.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.uint8)
    lo, hi = max(size // 10, 2), max(size // 4, 3)
    for c in range(1, classes + 1):
        if rng.random() < 0.15:
            continue
        cy, cx = rng.uniform(hi, size - hi, size=2)
        if c == 1:
            ry, rx = rng.uniform(lo, hi, size=2)
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        elif c == 2:
            hy, hx = rng.uniform(lo, hi, size=2)
            region = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        else:
            r = rng.uniform(lo, hi)
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        mask[region] = c
    levels = np.vectorize(_INTENSITY.get)(mask).astype(np.float64)
    image = np.clip(levels + rng.normal(0.0, 0.03, size=mask.shape), 0.0, 1.0)
    return np.round(image * 255).astype(np.uint8), mask


def make_synthetic(
    n: int, size: int = 32, seed: int = 0, classes: int = NUM_ORGANS
) -> list[tuple[str, np.ndarray, np.ndarray]]:
    if not 1 <= classes <= NUM_ORGANS:
        raise ValueError(f"classes must be in 1..{NUM_ORGANS}")
    out = []
    for i in range(n):
        rng = np.random.default_rng(sample_seed(seed, 0, i))
        img, mask = synthetic_sample(rng, size, classes)
        out.append((f"case{i:05d}", img, mask))
    return out


def write_synthetic(root, n: int, size: int = 32, seed: int = 0, classes: int = NUM_ORGANS) -> list[str]:
    """Write ``images/``, ``masks/``, ``manifest.csv`` and ``ids.txt`` under ``root``."""
    root = Path(root)
    samples = make_synthetic(n, size, seed, classes)
    for id_, img, mask in samples:
        write_pgm(root / "images" / f"{id_}.pgm", img)
        write_pgm(root / "masks" / f"{id_}.pgm", mask)
    write_manifest(root / "manifest.csv", {id_: mask for id_, _, mask in samples})
    ids = [s[0] for s in samples]
    (root / "ids.txt").write_text("".join(f"{i}\n" for i in ids))
    return ids


def read_ids(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def load_dataset(root, ids: Sequence[str] | None = None, order: str = "row") -> list[Sample]:
    """Images from ``root/images``; masks from ``root/masks`` or, failing that,
    decoded from ``root/manifest.csv``."""
    root = Path(root)
    if ids is None:
        ids = read_ids(root / "ids.txt") if (root / "ids.txt").exists() else sorted(
            p.stem for p in (root / "images").glob("*.pgm")
        )
    manifest_masks = None
    samples = []
    for id_ in ids:
        img_path = root / "images" / f"{id_}.pgm"
        if not img_path.exists():
            raise FormatError(f"missing image {img_path}")
        image = image_to_float(read_pgm(img_path))
        mask_path = root / "masks" / f"{id_}.pgm"
        if mask_path.exists():
            mask = read_pgm(mask_path).astype(np.uint8)
        else:
            if manifest_masks is None:
                manifest_masks = masks_from_manifest(read_manifest(root / "manifest.csv"), order)
            if id_ not in manifest_masks:
                raise FormatError(f"no mask for {id_!r}")
            mask = manifest_masks[id_]
        if mask.shape != image.shape:
            raise DimensionError(f"{id_}: image {image.shape} vs mask {mask.shape}")
        samples.append(Sample(id_, image, mask))
    if not samples:
        raise FormatError(f"no samples found under {root}")
    return samples
