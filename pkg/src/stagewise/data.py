"""Manifest-driven image pipeline and the synthetic screening dataset.

Covers CSV manifests, P6 PPM codec (PNG optionally via Pillow), bilinear
resizing with half-pixel centers, train-split augmentation, per-channel
normalization, deterministic batching, and a procedural 4-class generator
used for desk-scale verification runs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import StagewiseError
from .tensor import Tensor

CLASS_NAMES = ("Normal", "Bacterial", "Viral", "COVID-19")


class ManifestError(StagewiseError):
    """Malformed manifest file."""


class DecodeError(StagewiseError):
    """Malformed or truncated image payload."""


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    class_names: tuple[str, ...] = CLASS_NAMES
    root: Optional[Path] = None

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict[str, dict[str, int]]:
        """Per-split, per-class record counts."""
        out: dict[str, dict[str, int]] = {}
        for r in self.records:
            per = out.setdefault(r.split, {c: 0 for c in self.class_names})
            per[self.class_names[r.label]] += 1
        return out

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p


def load_manifest(path: str | Path,
                  class_names: Sequence[str] = CLASS_NAMES) -> DatasetManifest:
    """Parse a `path,label,split` CSV; errors carry 1-based line numbers."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    label_of = {name: i for i, name in enumerate(class_names)}
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != ["path", "label", "split"]:
            raise ManifestError(
                f"{path}:1: header must be 'path,label,split', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            rec_path, label, split = (f.strip() for f in row)
            if label not in label_of:
                raise ManifestError(
                    f"{path}:{lineno}: unknown label {label!r} "
                    f"(expected one of {list(class_names)})")
            if split not in ("train", "test"):
                raise ManifestError(
                    f"{path}:{lineno}: split must be train or test, got {split!r}")
            if rec_path in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {rec_path!r}")
            seen.add(rec_path)
            records.append(ManifestRecord(rec_path, label_of[label], split))
    return DatasetManifest(records=records, class_names=tuple(class_names),
                           root=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        for r in manifest.records:
            writer.writerow([r.path, manifest.class_names[r.label], r.split])


# ---------------------------------------------------------------------------
# image codec
# ---------------------------------------------------------------------------

def encode_ppm(img: np.ndarray) -> bytes:
    """uint8 HxWx3 array to binary P6."""
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DecodeError(f"encode_ppm wants uint8 HxWx3, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def _ppm_tokens(buf: bytes, n: int, start: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = start
    while len(tokens) < n:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise DecodeError("PPM header truncated")
        tokens.append(buf[i:j])
        i = j
    return tokens, i


def decode_ppm(buf: bytes) -> np.ndarray:
    """Binary P6 to float32 (3, H, W) in [0, 1]."""
    if buf[:2] != b"P6":
        raise DecodeError(f"not a P6 PPM (magic {buf[:2]!r})")
    try:
        (w_tok, h_tok, maxv_tok), i = _ppm_tokens(buf, 3, 2)
        w, h, maxv = int(w_tok), int(h_tok), int(maxv_tok)
    except (ValueError, DecodeError) as exc:
        raise DecodeError(f"malformed PPM header: {exc}") from None
    if maxv != 255:
        raise DecodeError(f"only maxval 255 supported, got {maxv}")
    if w < 1 or h < 1:
        raise DecodeError(f"bad PPM dimensions {w}x{h}")
    i += 1  # exactly one whitespace byte separates header and payload
    payload = buf[i:i + w * h * 3]
    if len(payload) != w * h * 3:
        raise DecodeError(
            f"truncated PPM payload: expected {w * h * 3} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def encode_from_float(img: np.ndarray) -> bytes:
    """float (3, H, W) in [0, 1] back to P6 bytes (inverse of decode_ppm)."""
    arr = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return encode_ppm(arr.transpose(1, 2, 0))


def decode_image(buf: bytes) -> np.ndarray:
    """Decode P6 PPM (always available) or PNG (requires Pillow)."""
    if buf[:2] == b"P6":
        return decode_ppm(buf)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError:
            raise DecodeError("PNG support requires Pillow") from None
        with Image.open(io.BytesIO(buf)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)
    raise DecodeError(f"unrecognized image magic {buf[:8]!r}")


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel-center sampling; identity is exact."""
    c, h, w = img.shape
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"bad resize target {target}")
    if (th, tw) == (h, w):
        return img.copy()
    sy = (np.arange(th, dtype=np.float64) + 0.5) * (h / th) - 0.5
    sx = (np.arange(tw, dtype=np.float64) + 0.5) * (w / tw) - 0.5
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0)[None, :, None]
    fx = (sx - x0)[None, None, :]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    img64 = img.astype(np.float64)
    top = img64[:, y0c][:, :, x0c] * (1 - fx) + img64[:, y0c][:, :, x1c] * fx
    bot = img64[:, y1c][:, :, x0c] * (1 - fx) + img64[:, y1c][:, :, x1c] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center with bilinear resampling and edge replication."""
    c, h, w = img.shape
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    sy = cy + dy * cos_t - dx * sin_t
    sx = cx + dy * sin_t + dx * cos_t
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    img64 = img.astype(np.float64)
    out = (img64[:, y0c, x0c] * (1 - fy) * (1 - fx)
           + img64[:, y0c, x1c] * (1 - fy) * fx
           + img64[:, y1c, x0c] * fy * (1 - fx)
           + img64[:, y1c, x1c] * fy * fx)
    return out.astype(img.dtype)


# ---------------------------------------------------------------------------
# augmentation and normalization
# ---------------------------------------------------------------------------

@dataclass
class AugmentPolicy:
    """Train-split transforms; all magnitudes zero means identity."""

    flip_prob: float = 0.5
    flip_axis: str = "vertical"      # the written-up choice; horizontal optional
    max_rotation_deg: float = 15.0
    lighting_jitter: float = 0.10    # max relative brightness/contrast change

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")
        if self.flip_axis not in ("vertical", "horizontal"):
            raise ValueError(f"flip_axis must be vertical|horizontal")

    @staticmethod
    def none() -> "AugmentPolicy":
        return AugmentPolicy(flip_prob=0.0, max_rotation_deg=0.0,
                             lighting_jitter=0.0)

    def to_dict(self) -> dict:
        return {"flip_prob": self.flip_prob, "flip_axis": self.flip_axis,
                "max_rotation_deg": self.max_rotation_deg,
                "lighting_jitter": self.lighting_jitter}

    @staticmethod
    def from_dict(d: dict) -> "AugmentPolicy":
        return AugmentPolicy(**d)


def augment(img: np.ndarray, policy: AugmentPolicy,
            rng: np.random.Generator | int) -> np.ndarray:
    """Apply flip / rotation / lighting jitter; exact identity when all-zero."""
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    out = img
    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        out = out[:, ::-1, :] if policy.flip_axis == "vertical" else out[:, :, ::-1]
    if policy.max_rotation_deg > 0:
        angle = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg)
        out = rotate_bilinear(out, angle)
    if policy.lighting_jitter > 0:
        brightness = 1.0 + rng.uniform(-policy.lighting_jitter, policy.lighting_jitter)
        contrast = 1.0 + rng.uniform(-policy.lighting_jitter, policy.lighting_jitter)
        mean = out.mean(dtype=np.float64)
        out = (out * brightness - mean) * contrast + mean
        out = np.clip(out, 0.0, 1.0).astype(img.dtype)
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std must be positive, got {self.std}")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @staticmethod
    def from_dict(d: dict) -> "NormalizationStats":
        return NormalizationStats(mean=tuple(d["mean"]), std=tuple(d["std"]))


# community-standard channel statistics of the large natural-image corpus the
# pretrained backbones were fit on; overridable in every config
IMAGENET_STATS = NormalizationStats(mean=(0.485, 0.456, 0.406),
                                    std=(0.229, 0.224, 0.225))


def normalize(img: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=img.dtype).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=img.dtype).reshape(3, 1, 1)
    return (img - mean) / std


def denormalize(img: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=img.dtype).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=img.dtype).reshape(3, 1, 1)
    return img * std + mean


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

def _synth_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One procedural grayscale field per class, returned as HxWx3 uint8.

    The four classes differ in spatial texture (smooth / small bright blobs /
    oriented bands / large diffuse patches) with randomized geometry, plus a
    mild class-dependent global intensity shift that keeps a raw-pixel linear
    model competitive but far from perfect.
    """
    h = w = size
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w),
                         indexing="ij")
    r2 = yy ** 2 + xx ** 2
    base = 0.55 - 0.25 * r2  # bright center, dark rim
    img = base + rng.normal(0.0, 0.02, (h, w))

    if label == 0:
        img += rng.uniform(-0.03, 0.03)
    elif label == 1:
        n_blobs = rng.integers(6, 11)
        for _ in range(n_blobs):
            cy, cx = rng.uniform(-0.7, 0.7, 2)
            sigma = rng.uniform(0.05, 0.12)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            img += rng.uniform(0.25, 0.45) * blob
    elif label == 2:
        angle = rng.uniform(-0.6, 0.6)  # radians around vertical bands
        freq = rng.uniform(6.0, 10.0)
        phase = rng.uniform(0, 2 * math.pi)
        coord = xx * math.cos(angle) + yy * math.sin(angle)
        img += 0.12 * np.sin(freq * math.pi * coord + phase)
    else:
        n_patches = rng.integers(2, 4)
        for _ in range(n_patches):
            cy, cx = rng.uniform(-0.5, 0.5, 2)
            sy, sx = rng.uniform(0.25, 0.5, 2)
            patch = np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
            img += rng.uniform(-0.3, -0.15) * patch
        img += rng.normal(0.0, 0.03, (h, w))

    gray = np.clip(img, 0.0, 1.0)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    return np.rint(rgb * 255.0).astype(np.uint8)


def gen_synthetic(n_per_class: Sequence[int], image_size: int, seed: int,
                  out_dir: str | Path,
                  train_fraction: float = 0.8) -> DatasetManifest:
    """Write a 4-class procedural dataset plus its manifest; fully seeded.

    ``n_per_class`` gives total images per class; each class is split
    deterministically into train/test by ``train_fraction``.
    """
    if len(n_per_class) != len(CLASS_NAMES):
        raise ValueError(f"need {len(CLASS_NAMES)} class counts, got {n_per_class}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[ManifestRecord] = []
    for label, count in enumerate(n_per_class):
        n_train = int(round(count * train_fraction))
        for idx in range(count):
            rng = np.random.default_rng([seed, label, idx])
            img = _synth_image(label, image_size, rng)
            name = f"class{label}_{idx:04d}.ppm"
            (out_dir / name).write_bytes(encode_ppm(img))
            split = "train" if idx < n_train else "test"
            records.append(ManifestRecord(name, label, split))
    manifest = DatasetManifest(records=records, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: Tensor          # (N, 3, H, W) normalized float32
    labels: list[int]


class BatchStream:
    """Deterministic per-epoch batch producer with an in-memory decode cache.

    Train epochs shuffle with a seed derived from (seed, epoch) and augment
    each image with a per-record stream; the test split is always ordered
    and never augmented.
    """

    def __init__(self, manifest: DatasetManifest, split: str,
                 image_size: int | tuple[int, int], batch_size: int,
                 seed: int = 0,
                 augment_policy: Optional[AugmentPolicy] = None,
                 stats: NormalizationStats = IMAGENET_STATS,
                 cache: Optional[dict] = None):
        self.records = manifest.split(split)
        if not self.records:
            raise ManifestError(f"split {split!r} is empty")
        self.manifest = manifest
        self.split_name = split
        self.size = (image_size, image_size) if isinstance(image_size, int) \
            else tuple(image_size)
        self.batch_size = batch_size
        self.seed = seed
        self.policy = augment_policy if split == "train" else None
        self.stats = stats
        self.cache = cache if cache is not None else {}

    def __len__(self):
        return len(self.records)

    def _decoded(self, record: ManifestRecord) -> np.ndarray:
        img = self.cache.get(record.path)
        if img is None:
            path = self.manifest.resolve(record)
            try:
                img = decode_image(path.read_bytes())
            except (OSError, DecodeError) as exc:
                raise DecodeError(f"cannot read image {path}: {exc}") from None
            self.cache[record.path] = img
        return img

    def epoch(self, epoch_idx: int = 0) -> Iterator[Batch]:
        order = np.arange(len(self.records))
        if self.split_name == "train":
            rng = np.random.default_rng([self.seed, epoch_idx])
            order = rng.permutation(order)
        chunks = [order[s:s + self.batch_size]
                  for s in range(0, len(order), self.batch_size)]
        if (self.split_name == "train" and len(chunks) > 1
                and len(chunks[-1]) == 1):
            # a lone trailing sample would degenerate train-mode batchnorm
            chunks[-2:] = [np.concatenate(chunks[-2:])]
        for chunk in chunks:
            imgs = []
            labels = []
            for rec_idx in chunk:
                record = self.records[rec_idx]
                img = resize_bilinear(self._decoded(record), self.size)
                if self.policy is not None:
                    img = augment(img, self.policy,
                                  np.random.default_rng(
                                      [self.seed, epoch_idx, int(rec_idx)]))
                imgs.append(normalize(img, self.stats))
                labels.append(record.label)
            stacked = np.ascontiguousarray(np.stack(imgs).astype(np.float32))
            yield Batch(images=Tensor(stacked), labels=labels)
