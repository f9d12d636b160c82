"""Dataset handling: manifests, binary label mapping, patient-wise splits,
augmentation, weighted sampling, and the synthetic desk-scale generator.

Images are CHW float arrays in [0, 1]. Labels: 0 = normal, 1 = anomaly,
None = unlabeled. A sample's split membership is decided purely by its
patient id so near-duplicate frames from one study never straddle splits.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from PIL import Image

NORMAL = 0
ANOMALY = 1
UNLABELED_CLASS = "unlabeled"

MANIFEST_HEADER = ["path", "source_class", "patient_id"]


@dataclass
class Sample:
    image: np.ndarray  # CHW float32 in [0, 1]
    label: Optional[int]
    patient_id: str
    source_class: str = ""

    def is_labeled(self) -> bool:
        return self.label is not None


@dataclass(frozen=True)
class ClassMap:
    """Mapping from source class names to the binary task.

    Classes in neither set are excluded from the dataset (and counted);
    the literal class name "unlabeled" always maps to an unlabeled sample.
    """

    normal_classes: frozenset
    anomaly_classes: frozenset

    def __post_init__(self):
        overlap = self.normal_classes & self.anomaly_classes
        if overlap:
            raise ValueError(f"ClassMap: classes in both sets: {sorted(overlap)}")

    def label_for(self, source_class: str):
        """Return 0, 1, None (unlabeled), or the string 'excluded'."""
        if source_class == UNLABELED_CLASS:
            return None
        if source_class in self.normal_classes:
            return NORMAL
        if source_class in self.anomaly_classes:
            return ANOMALY
        return "excluded"


KVASIR_CLASS_MAP = ClassMap(
    normal_classes=frozenset({
        "Pylorus", "Reduced Mucosal View", "Ileo-cecal valve",
        "Normal Clean Mucosa",
    }),
    anomaly_classes=frozenset({
        "Angiectasia", "Blood-fresh", "Foreign Bodies", "Ulcer",
        "Erosion", "Lymphangiectasia",
    }),
)

GALAR_CLASS_MAP = ClassMap(
    normal_classes=frozenset({"Normal Clean Mucosa"}),
    anomaly_classes=frozenset({
        "Polyp", "Blood", "Active Bleeding", "Angiectasia", "Erosion",
        "Erythema", "Ulcer",
    }),
)

SYNTH_CLASS_MAP = ClassMap(
    normal_classes=frozenset({"synthetic-normal"}),
    anomaly_classes=frozenset({"synthetic-anomaly"}),
)

CLASS_MAPS = {
    "kvasir": KVASIR_CLASS_MAP,
    "galar": GALAR_CLASS_MAP,
    "synth": SYNTH_CLASS_MAP,
}


class ManifestError(ValueError):
    pass


def read_image(path) -> np.ndarray:
    """Load a PNG or PPM file as CHW float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, image: np.ndarray) -> None:
    """Write a CHW float image in [0, 1] as 8-bit RGB PNG/PPM."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path)


def load_manifest(path, class_map: ClassMap,
                  load_images: bool = True) -> Tuple[List[Sample], int]:
    """Read a manifest CSV, returning (samples, excluded_row_count).

    Rows whose class is in neither map set are excluded and counted, so
    rows_in == len(samples) + excluded. Missing image files and malformed
    rows raise with the offending row identified.
    """
    path = Path(path)
    samples: List[Sample] = []
    excluded = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: expected header {','.join(MANIFEST_HEADER)}, "
                f"got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            rel, source_class, patient_id = (c.strip() for c in row)
            if not rel or not patient_id:
                raise ManifestError(f"{path}:{lineno}: empty path or patient_id")
            label = class_map.label_for(source_class)
            if label == "excluded":
                excluded += 1
                continue
            img_path = path.parent / rel
            if load_images:
                if not img_path.is_file():
                    raise ManifestError(f"{path}:{lineno}: image not found: {rel}")
                image = read_image(img_path)
            else:
                image = np.zeros((3, 1, 1), dtype=np.float32)
            samples.append(Sample(image=image, label=label,
                                  patient_id=patient_id, source_class=source_class))
    return samples, excluded


def write_manifest(path, rows: Iterable[Tuple[str, str, str]]) -> None:
    """Write (path, source_class, patient_id) rows with the standard header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# patient-wise splitting


@dataclass
class SplitSpec:
    train: Set[str]
    val: Set[str]
    test: Set[str]
    seed: int

    def __post_init__(self):
        a, b, c = self.train, self.val, self.test
        if (a & b) or (a & c) or (b & c):
            raise ValueError("SplitSpec: splits share patient ids")

    def split_of(self, patient_id: str) -> Optional[str]:
        if patient_id in self.train:
            return "train"
        if patient_id in self.val:
            return "val"
        if patient_id in self.test:
            return "test"
        return None

    def partition(self, samples: Sequence[Sample]) -> Dict[str, List[Sample]]:
        out: Dict[str, List[Sample]] = {"train": [], "val": [], "test": []}
        for s in samples:
            part = self.split_of(s.patient_id)
            if part is not None:
                out[part].append(s)
        return out

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "train": sorted(self.train),
            "val": sorted(self.val),
            "test": sorted(self.test),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        obj = json.loads(text)
        return cls(train=set(obj["train"]), val=set(obj["val"]),
                   test=set(obj["test"]), seed=int(obj["seed"]))


def patient_split(patients: Sequence[str], ratio: float = 0.8, seed: int = 0,
                  test: Sequence[str] = ()) -> SplitSpec:
    """Shuffle patients deterministically and cut train:val at ``ratio``.

    Patients listed in ``test`` are reserved for the test split and removed
    from the train/val pool first.
    """
    test_set = set(test)
    pool = sorted(set(patients) - test_set)
    if len(pool) < 2:
        raise ValueError(
            f"patient_split: need at least 2 non-test patients, got {len(pool)}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"patient_split: ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    order = [pool[i] for i in rng.permutation(len(pool))]
    n_train = int(math.floor(ratio * len(pool) + 0.5))
    n_train = min(max(n_train, 1), len(pool) - 1)
    return SplitSpec(train=set(order[:n_train]), val=set(order[n_train:]),
                     test=test_set, seed=seed)


# ---------------------------------------------------------------------------
# resampling and augmentation


def _bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                     reflect: bool = False) -> np.ndarray:
    """Sample CHW image at fractional (y, x) grids; border clamps or reflects."""
    c, h, w = image.shape

    def fold(idx, n):
        if reflect and n > 1:
            period = 2 * n - 2
            idx = np.abs(idx) % period
            return np.where(idx >= n, period - idx, idx)
        return np.clip(idx, 0, n - 1)

    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(image.dtype)
    fx = (xs - x0).astype(image.dtype)
    y0c, y1c = fold(y0, h), fold(y0 + 1, h)
    x0c, x1c = fold(x0, w), fold(x0 + 1, w)
    tl = image[:, y0c, x0c]
    tr = image[:, y0c, x1c]
    bl = image[:, y1c, x0c]
    br = image[:, y1c, x1c]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def resize(image: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize (half-pixel centers) with output clamped to [0, 1]."""
    c, h, w = image.shape
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"resize: target must be positive, got {target}")
    if (th, tw) == (h, w):
        return image.copy()
    ys = (np.arange(th, dtype=np.float64) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw, dtype=np.float64) + 0.5) * (w / tw) - 0.5
    grid_y = np.repeat(ys, tw).reshape(th, tw)
    grid_x = np.tile(xs, th).reshape(th, tw)
    out = _bilinear_sample(image.astype(np.float64), grid_y, grid_x)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


@dataclass(frozen=True)
class AugmentPolicy:
    """Which augmentations run and how often. All probabilities in [0, 1]."""

    p_rotate: float = 0.0
    p_hflip: float = 0.0
    p_vflip: float = 0.0
    p_erase: float = 0.0
    rotate_degrees: Tuple[float, float] = (-180.0, 180.0)
    erase_area: Tuple[float, float] = (0.02, 0.2)
    erase_aspect: Tuple[float, float] = (0.3, 3.3)
    erase_fill: Optional[Tuple[float, float, float]] = None  # None: channel means

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls()

    @classmethod
    def default_train(cls) -> "AugmentPolicy":
        return cls(p_rotate=0.25, p_hflip=0.5, p_vflip=0.5, p_erase=0.25)

    def enabled(self) -> bool:
        return any(p > 0 for p in
                   (self.p_rotate, self.p_hflip, self.p_vflip, self.p_erase))

    def as_dict(self) -> dict:
        return {
            "p_rotate": self.p_rotate, "p_hflip": self.p_hflip,
            "p_vflip": self.p_vflip, "p_erase": self.p_erase,
            "rotate_degrees": list(self.rotate_degrees),
            "erase_area": list(self.erase_area),
            "erase_aspect": list(self.erase_aspect),
            "erase_fill": None if self.erase_fill is None else list(self.erase_fill),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AugmentPolicy":
        kwargs = dict(obj)
        for key in ("rotate_degrees", "erase_area", "erase_aspect"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("erase_fill") is not None:
            kwargs["erase_fill"] = tuple(kwargs["erase_fill"])
        return cls(**kwargs)


def _rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate around the image center, bilinear with reflected borders."""
    c, h, w = image.shape
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    src_y = cos_t * dy - sin_t * dx + cy
    src_x = sin_t * dy + cos_t * dx + cx
    out = _bilinear_sample(image.astype(np.float64), src_y, src_x, reflect=True)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def _erase(image: np.ndarray, policy: AugmentPolicy,
           rng: np.random.Generator) -> np.ndarray:
    c, h, w = image.shape
    frac = rng.uniform(*policy.erase_area)
    aspect = rng.uniform(*policy.erase_aspect)
    eh = int(np.clip(round(math.sqrt(frac * h * w * aspect)), 1, h))
    ew = int(np.clip(round(math.sqrt(frac * h * w / aspect)), 1, w))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    fill = (np.asarray(policy.erase_fill, dtype=image.dtype)
            if policy.erase_fill is not None
            else image.reshape(c, -1).mean(axis=1))
    out = image.copy()
    out[:, top:top + eh, left:left + ew] = fill[:, None, None]
    return out


def augment(sample: Sample, policy: AugmentPolicy,
            rng: np.random.Generator) -> Sample:
    """Apply the policy's transforms; label, patient, and shape are untouched.

    The rng draw sequence is fixed (one uniform gate per transform) so a
    given seed produces the same augmentation regardless of which gates
    fire.
    """
    img = sample.image
    gates = rng.uniform(size=4)
    if policy.p_rotate > 0 and gates[0] < policy.p_rotate:
        img = _rotate(img, rng.uniform(*policy.rotate_degrees))
    if policy.p_hflip > 0 and gates[1] < policy.p_hflip:
        img = img[:, :, ::-1].copy()
    if policy.p_vflip > 0 and gates[2] < policy.p_vflip:
        img = img[:, ::-1, :].copy()
    if policy.p_erase > 0 and gates[3] < policy.p_erase:
        img = _erase(img, policy, rng)
    if img is sample.image:
        return sample
    return replace(sample, image=img)


# ---------------------------------------------------------------------------
# sampling


def weighted_sampler(labels: Sequence[int], rng: np.random.Generator):
    """Endless index stream drawing each class inversely to its frequency.

    With both classes weighted to 1/freq the expected class mix is 50:50.
    Draws are with replacement; single-class label sets are rejected.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) == 0:
        raise ValueError("weighted_sampler: labels must be a non-empty 1-D array")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("weighted_sampler: both classes must be present")
    weights = np.where(labels == 1, 1.0 / n_pos, 1.0 / n_neg)
    probs = weights / weights.sum()
    n = len(labels)

    def stream():
        while True:
            for idx in rng.choice(n, size=1024, replace=True, p=probs):
                yield int(idx)

    return stream()


# ---------------------------------------------------------------------------
# synthetic desk-scale data


# pink-tinted mucosa-like base palette; anomaly inserts leave these bands
_BASE_MEAN = np.array([0.64, 0.36, 0.30])
_BASE_AMP = np.array([0.10, 0.06, 0.05])
_DARK_RED = np.array([0.30, 0.05, 0.06])
_SPECULAR = np.array([0.97, 0.95, 0.90])

PATIENT_GROUP_SIZE = 25


def _base_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth low-frequency texture: tiny noise grid upsampled bilinearly."""
    coarse = rng.uniform(-1.0, 1.0, size=(3, 4, 4))
    # base values stay well inside [0,1], so resize's clamp never bites
    img = resize(coarse * _BASE_AMP[:, None, None] + _BASE_MEAN[:, None, None],
                 (size, size))
    img = img + rng.normal(0.0, 0.015, size=(3, size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _add_blobs(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = img.shape[1]
    out = img.copy()
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    for _ in range(int(rng.integers(1, 4))):
        radius = rng.uniform(0.10, 0.18) * size
        cy = rng.uniform(radius, size - radius)
        cx = rng.uniform(radius, size - radius)
        stretch = rng.uniform(0.7, 1.4)
        dist = np.sqrt(((yy - cy) * stretch) ** 2 + ((xx - cx) / stretch) ** 2)
        mask = np.clip(2.0 * (1.0 - dist / radius), 0.0, 1.0)
        color = _DARK_RED if rng.uniform() < 0.5 else _SPECULAR
        color = np.clip(color + rng.normal(0.0, 0.015, size=3), 0.0, 1.0)
        out = out * (1.0 - mask) + color[:, None, None] * mask
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synth_dataset(n_normal: int, n_anomaly: int, size: int = 32,
                  seed: int = 0) -> List[Sample]:
    """Deterministic synthetic stand-in for capsule-endoscopy frames.

    Normals are smooth pink textures; anomalies add 1-3 high-contrast
    dark-red or specular blobs. Patient ids are assigned in consecutive
    groups of 25 over a class-interleaved order so patient-wise splitting
    keeps both classes in every split.
    """
    if n_normal < 0 or n_anomaly < 0:
        raise ValueError("synth_dataset: counts must be non-negative")
    rng = np.random.default_rng(seed)
    order: List[int] = []  # 0 = normal, 1 = anomaly, interleaved
    a, b = n_normal, n_anomaly
    while a > 0 or b > 0:
        if a > 0:
            order.append(NORMAL)
            a -= 1
        if b > 0:
            order.append(ANOMALY)
            b -= 1
    samples: List[Sample] = []
    for idx, label in enumerate(order):
        img = _base_texture(size, rng)
        if label == ANOMALY:
            img = _add_blobs(img, rng)
        samples.append(Sample(
            image=img,
            label=label,
            patient_id=f"synth{idx // PATIENT_GROUP_SIZE:04d}",
            source_class=("synthetic-anomaly" if label == ANOMALY
                          else "synthetic-normal"),
        ))
    return samples
