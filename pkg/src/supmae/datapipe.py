"""Dataset ingestion, augmentation, patchification and mask plans."""
from __future__ import annotations

import csv
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMATS = ("idx-ubyte", "raw-tensor-dir", "csv-pixels")
RTD_MAGIC = b"RTD1"
RTD_DTYPES = {1: np.dtype("u1"), 2: np.dtype("<f4"), 3: np.dtype("<f8")}

# stream tags folded into seed sequences so that independent random
# decisions never share a generator
_SHUFFLE, _AUGMENT, _MASK = 101, 202, 303


class IngestError(ValueError):
    pass


class DataError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class BatchError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # H x W x C in [0, 1]
    label: int


@dataclass
class ImageDataset:
    """Images stacked as [n, H, W, C] float32 in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = int(self.labels[(self.labels < 0) | (self.labels >= self.num_classes)][0])
            raise DataError(f"label {bad} out of range [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------- ingestion

def load_dataset(path, fmt: str, num_classes: int | None = None, image_shape: Sequence[int] | None = None) -> ImageDataset:
    """Read a dataset in one of :data:`FORMATS`; images are scaled to [0, 1].

    ``num_classes`` defaults to ``max(label) + 1``; when given, labels outside
    ``[0, num_classes)`` raise :class:`DataError`.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: no such file or directory")
    if fmt == "idx-ubyte":
        images, labels = _load_idx(path)
    elif fmt == "raw-tensor-dir":
        images, labels = _load_rtd(path)
    elif fmt == "csv-pixels":
        images, labels = _load_csv(path, image_shape)
    else:
        raise IngestError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if len(labels) == 0:
        raise IngestError(f"{path}: no records")
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return ImageDataset(images, labels, k)


def _read_idx(fp: Path) -> np.ndarray:
    buf = fp.read_bytes()
    if len(buf) < 4:
        raise IngestError(f"{fp}: truncated header at byte offset {len(buf)}")
    zero, dtype_code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or dtype_code != 0x08:
        raise IngestError(f"{fp}: bad magic at byte offset 0")
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IngestError(f"{fp}: truncated header at byte offset {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    need = head + int(np.prod(dims))
    if len(buf) < need:
        raise IngestError(f"{fp}: truncated payload at byte offset {len(buf)} (expected {need} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=need - head, offset=head).reshape(dims)


def _load_idx(path: Path):
    if path.is_dir():
        imgs = sorted(path.glob("*images*idx3*"))
        if not imgs:
            raise IngestError(f"{path}: no records")
        img_fp = imgs[0]
    else:
        img_fp = path
    lab_fp = img_fp.with_name(img_fp.name.replace("images", "labels").replace("idx3", "idx1"))
    if not lab_fp.exists():
        raise IngestError(f"{img_fp}: missing label file {lab_fp.name}")
    raw = _read_idx(img_fp)
    labels = _read_idx(lab_fp).astype(np.int64)
    if raw.ndim == 3:
        raw = raw[..., None]
    if len(raw) != len(labels):
        raise IngestError(f"{img_fp}: {len(raw)} images but {len(labels)} labels")
    return raw.astype(np.float32) / 255.0, labels


def write_rtd(fp, pixels: np.ndarray) -> None:
    """Write one raw-tensor-dir sample (uint8, float32 or float64 payload)."""
    pixels = np.asarray(pixels)
    code = {v: k for k, v in RTD_DTYPES.items()}[pixels.dtype.newbyteorder("<") if pixels.dtype.itemsize > 1 else pixels.dtype]
    header = RTD_MAGIC + struct.pack("<BBxx", code, pixels.ndim) + struct.pack(f"<{pixels.ndim}I", *pixels.shape)
    Path(fp).write_bytes(header + pixels.astype(RTD_DTYPES[code]).tobytes())


def write_raw_tensor_dir(path, images: np.ndarray, labels: Sequence[int]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_rtd(path / f"{i:06d}.rtd", img)
    with open(path / "labels.tsv", "w") as fh:
        for i, lab in enumerate(labels):
            fh.write(f"{i:06d}\t{int(lab)}\n")


def _read_rtd(fp: Path) -> np.ndarray:
    buf = fp.read_bytes()
    if len(buf) < 8 or buf[:4] != RTD_MAGIC:
        raise IngestError(f"{fp}: bad magic at byte offset 0")
    code, rank = struct.unpack("<BB", buf[4:6])
    if code not in RTD_DTYPES:
        raise IngestError(f"{fp}: unknown dtype code {code} at byte offset 4")
    head = 8 + 4 * rank
    if len(buf) < head:
        raise IngestError(f"{fp}: truncated header at byte offset {len(buf)}")
    dims = struct.unpack(f"<{rank}I", buf[8:head])
    dt = RTD_DTYPES[code]
    need = head + int(np.prod(dims)) * dt.itemsize
    if len(buf) < need:
        raise IngestError(f"{fp}: truncated payload at byte offset {len(buf)} (expected {need} bytes)")
    arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims)), offset=head).reshape(dims)
    arr = arr.astype(np.float32) / 255.0 if code == 1 else arr.astype(np.float32)
    return arr[..., None] if arr.ndim == 2 else arr


def _natural_key(stem: str):
    return (0, int(stem), "") if stem.isdigit() else (1, 0, stem)


def _load_rtd(path: Path):
    files = sorted(path.glob("*.rtd"), key=lambda p: _natural_key(p.stem))
    if not files:
        raise IngestError(f"{path}: no records")
    label_fp = path / "labels.tsv"
    if not label_fp.exists():
        raise IngestError(f"{path}: missing labels.tsv")
    labels = {}
    for lineno, line in enumerate(label_fp.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestError(f"{label_fp}: malformed line {lineno}")
        labels[parts[0]] = int(parts[1])
    imgs, labs = [], []
    for fp in files:
        if fp.stem not in labels:
            raise DataError(f"{fp.name}: no label in labels.tsv")
        imgs.append(_read_rtd(fp))
        labs.append(labels[fp.stem])
    if len({im.shape for im in imgs}) != 1:
        raise IngestError(f"{path}: samples have mixed shapes")
    return np.stack(imgs), np.array(labs, dtype=np.int64)


def _load_csv(path: Path, image_shape):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise IngestError(f"{path}: no records")
    k = len(rows[0]) - 1
    if image_shape is None:
        side = math.isqrt(k)
        if side * side != k:
            raise IngestError(f"{path}: {k} pixels per row is not square; pass image_shape")
        image_shape = (side, side, 1)
    image_shape = tuple(image_shape) if len(image_shape) == 3 else tuple(image_shape) + (1,)
    if int(np.prod(image_shape)) != k:
        raise IngestError(f"{path}: image_shape {image_shape} does not hold {k} pixels")
    labels, pix = [], []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != k + 1:
            raise IngestError(f"{path}: line {lineno} has {len(row)} fields, expected {k + 1}")
        labels.append(int(row[0]))
        pix.append([float(v) for v in row[1:]])
    images = (np.array(pix, dtype=np.float32) / 255.0).reshape((-1,) + image_shape)
    return images, np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------- augmentation

def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an H x W x C image."""
    h, w = img.shape[:2]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return img.copy()

    def axis(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (x - lo).astype(img.dtype)

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def random_resized_crop(
    img: LabeledImage,
    out_hw: tuple[int, int],
    scale_range: tuple[float, float],
    rng: np.random.Generator,
    ratio_range: tuple[float, float] = (3 / 4, 4 / 3),
) -> LabeledImage:
    """Crop a random area fraction and aspect ratio, then resize to ``out_hw``.

    Falls back to a centre crop when 10 attempts fail to fit.
    """
    lo, hi = scale_range
    if not (0 < lo <= hi <= 1):
        raise ValueError(f"scale_range {scale_range} must lie in (0, 1]")
    h, w = img.pixels.shape[:2]
    area = h * w
    log_r = (math.log(ratio_range[0]), math.log(ratio_range[1]))
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    else:
        in_ratio = w / h
        if in_ratio < ratio_range[0]:
            cw, ch = w, int(round(w / ratio_range[0]))
        elif in_ratio > ratio_range[1]:
            ch, cw = h, int(round(h * ratio_range[1]))
        else:
            cw, ch = w, h
        top, left = (h - ch) // 2, (w - cw) // 2
    crop = img.pixels[top:top + ch, left:left + cw]
    return LabeledImage(resize_bilinear(crop, out_hw), img.label)


def hflip(img: LabeledImage) -> LabeledImage:
    return LabeledImage(img.pixels[:, ::-1].copy(), img.label)


@dataclass(frozen=True)
class AugmentConfig:
    randcrop: bool = True
    hflip: bool = True
    color_jitter: bool = False  # accepted for ablation parity; a no-op
    scale_min: float = 0.2
    scale_max: float = 1.0

    @classmethod
    def from_switches(cls, spec: str, scale_min: float = 0.2, scale_max: float = 1.0, flip: bool = True):
        parts = {p.strip() for p in spec.split(",") if p.strip()} - {"none"}
        unknown = parts - {"randcrop", "cjit"}
        if unknown:
            raise ValueError(f"unknown augmentation {sorted(unknown)}")
        return cls("randcrop" in parts, flip and bool(parts), "cjit" in parts, scale_min, scale_max)


def augment(img: LabeledImage, cfg: AugmentConfig, rng: np.random.Generator) -> LabeledImage:
    out_hw = img.pixels.shape[:2]
    if cfg.randcrop:
        img = random_resized_crop(img, out_hw, (cfg.scale_min, cfg.scale_max), rng)
    if cfg.hflip and rng.random() < 0.5:
        img = hflip(img)
    return img


# ---------------------------------------------------------------- patches

@dataclass
class PatchGrid:
    patches: np.ndarray  # [..., N, P*P*C]
    grid: tuple[int, int]
    patch_size: int
    channels: int

    @property
    def n(self) -> int:
        return self.grid[0] * self.grid[1]


def patchify(img: np.ndarray, patch_size: int) -> PatchGrid:
    """Split [..., H, W, C] into row-major patches flattened channel-last."""
    *lead, h, w, c = img.shape
    p = patch_size
    if h % p or w % p:
        raise GeometryError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = img.reshape(*lead, gh, p, gw, p, c)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)  # [..., gh, gw, p, p, c]
    return PatchGrid(x.reshape(*lead, gh * gw, p * p * c), (gh, gw), p, c)


def de_patchify(grid: PatchGrid) -> np.ndarray:
    gh, gw = grid.grid
    p, c = grid.patch_size, grid.channels
    *lead, n, d = grid.patches.shape
    if n != gh * gw or d != p * p * c:
        raise GeometryError(f"patches {grid.patches.shape} do not match grid {grid.grid}, P={p}, C={c}")
    x = grid.patches.reshape(*lead, gh, gw, p, p, c)
    nl = len(lead)
    x = np.moveaxis(x, nl + 1, nl + 2)
    return x.reshape(*lead, gh * p, gw * p, c)


# ---------------------------------------------------------------- masking

@dataclass(frozen=True)
class MaskPlan:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    shuffle_perm: np.ndarray
    ratio: float

    @property
    def n(self) -> int:
        return len(self.shuffle_perm)

    @property
    def order(self) -> np.ndarray:
        """Token order fed to the decoder: visible patches, then masked ones."""
        return np.concatenate([self.visible_idx, self.masked_idx])

    @property
    def restore(self) -> np.ndarray:
        """Permutation taking decoder-order tokens back to patch order."""
        return np.argsort(self.order, kind="stable")


def masked_count(n_patches: int, ratio: float) -> int:
    m = int(math.floor(ratio * n_patches + 0.5))
    if n_patches - m < 1:
        log.warning("mask ratio %.3f leaves no visible patch of %d; keeping one", ratio, n_patches)
        m = n_patches - 1
    return m


def build_mask_plan(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform masking by argsort of per-patch noise; the first slots stay visible."""
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio {ratio} outside [0, 1)")
    if n_patches < 1:
        raise ValueError("need at least one patch")
    m = masked_count(n_patches, ratio)
    perm = np.argsort(rng.random(n_patches), kind="stable")
    keep = n_patches - m
    return MaskPlan(np.sort(perm[:keep]), np.sort(perm[keep:]), perm, ratio)


def full_plan(n_patches: int) -> MaskPlan:
    idx = np.arange(n_patches)
    return MaskPlan(idx, idx[:0], idx.copy(), 0.0)


def stream_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def plan_for(seed: int, sample_index: int, epoch: int, n_patches: int, ratio: float) -> MaskPlan:
    """Mask plan as a pure function of (seed, sample_index, epoch)."""
    return build_mask_plan(n_patches, ratio, stream_rng(seed, _MASK, epoch, sample_index))


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    visible: np.ndarray  # [B, V, D] patches fed to the encoder
    targets: np.ndarray  # [B, M, D] raw pixels of masked patches
    labels: np.ndarray
    visible_idx: np.ndarray  # [B, V]
    masked_idx: np.ndarray  # [B, M]
    restore: np.ndarray  # [B, N]
    patches: np.ndarray  # [B, N, D] full grid (pixels the encoder never sees when masked)
    indices: np.ndarray  # dataset indices

    @property
    def size(self) -> int:
        return len(self.labels)


def make_batch(patches: np.ndarray, labels, plans: Sequence[MaskPlan], indices=None) -> Batch:
    """Gather visible patches per plan and keep masked-patch pixels as targets."""
    patches = np.asarray(patches)
    if patches.ndim != 3:
        raise BatchError(f"expected [B, N, D] patches, got {patches.shape}")
    b, n, _ = patches.shape
    if len(plans) != b:
        raise BatchError(f"{len(plans)} plans for {b} samples")
    if len({(p.n, len(p.visible_idx)) for p in plans}) != 1 or plans[0].n != n:
        raise BatchError("plans disagree on geometry or visible count")
    vis = np.stack([p.visible_idx for p in plans])
    msk = np.stack([p.masked_idx for p in plans])
    rows = np.arange(b)[:, None]
    return Batch(
        visible=patches[rows, vis],
        targets=patches[rows, msk],
        labels=np.asarray(labels, dtype=np.int64),
        visible_idx=vis,
        masked_idx=msk,
        restore=np.stack([p.restore for p in plans]),
        patches=patches,
        indices=np.arange(b) if indices is None else np.asarray(indices),
    )


def scatter_back(batch: Batch) -> np.ndarray:
    """Inverse of the gather in :func:`make_batch`: rebuild the [B, N, D] grid."""
    b, v, d = batch.visible.shape
    n = batch.restore.shape[1]
    out = np.empty((b, n, d), dtype=batch.visible.dtype)
    rows = np.arange(b)[:, None]
    out[rows, batch.visible_idx] = batch.visible
    out[rows, batch.masked_idx] = batch.targets
    return out


def _threads() -> int:
    return max(1, int(os.environ.get("SUPMAE_THREADS", "1")))


def iterate_batches(
    data: ImageDataset,
    batch_size: int,
    patch_size: int,
    seed: int,
    epoch: int,
    mask_ratio: float = 0.0,
    aug: AugmentConfig | None = None,
    shuffle: bool = True,
    drop_last: bool = False,
) -> Iterator[Batch]:
    """Deterministic batch stream for one epoch.

    Order, augmentation and masks depend only on (seed, epoch, sample index);
    worker threads (``SUPMAE_THREADS``) only change wall time.
    """
    n = len(data)
    order = stream_rng(seed, _SHUFFLE, epoch).permutation(n) if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    pool = ThreadPoolExecutor(_threads()) if aug is not None and _threads() > 1 else None

    def prep(i: int) -> np.ndarray:
        img = data[int(i)]
        if aug is not None:
            img = augment(img, aug, stream_rng(seed, _AUGMENT, epoch, int(i)))
        return img.pixels

    try:
        for s in range(0, stop, batch_size):
            idx = order[s:s + batch_size]
            imgs = list(pool.map(prep, idx)) if pool else [prep(i) for i in idx]
            grid = patchify(np.stack(imgs), patch_size)
            plans = [plan_for(seed, int(i), epoch, grid.n, mask_ratio) for i in idx]
            yield make_batch(grid.patches, data.labels[idx], plans, idx)
    finally:
        if pool:
            pool.shutdown()


# ---------------------------------------------------------------- toy data

TOY_SHAPES = ("square", "disk", "triangle", "plus", "cross", "hbar", "vbar", "ring", "frame", "diamond")


def _shape_mask(kind: str, size: int, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float) -> np.ndarray:
    r = size / 2
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    t = max(1.0, size / 5)
    if kind == "square":
        return (ady <= r) & (adx <= r)
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (adx <= (dy + r) / 2)
    if kind == "plus":
        return ((ady <= t / 2) & (adx <= r)) | ((adx <= t / 2) & (ady <= r))
    if kind == "cross":
        return (np.abs(dy - dx) <= t * 0.7) & (ady <= r) | (np.abs(dy + dx) <= t * 0.7) & (ady <= r)
    if kind == "hbar":
        return (ady <= t) & (adx <= r)
    if kind == "vbar":
        return (adx <= t) & (ady <= r)
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r - t) ** 2)
    if kind == "frame":
        return (ady <= r) & (adx <= r) & ((ady >= r - t) | (adx >= r - t))
    if kind == "diamond":
        return ady + adx <= r
    raise ValueError(kind)


def synthetic_shapes(n: int, seed: int, size: int = 32, channels: int = 3, noise: float = 0.0) -> ImageDataset:
    """Ten-class toy set: one randomly placed, sized and coloured shape over a
    flat background with a random linear shading.

    Labels are balanced (sample i has class i mod 10 before shuffling).
    """
    rng = stream_rng(seed, 4242)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    images = np.empty((n, size, size, channels), dtype=np.float32)
    labels = np.arange(n) % len(TOY_SHAPES)
    rng.shuffle(labels)
    for i in range(n):
        bg = rng.uniform(0, 1, size=channels)
        theta = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(theta) * yy + np.sin(theta) * xx) / size - 0.5
        img = bg + 0.15 * ramp[..., None]
        fg = rng.uniform(0, 1, size=channels)
        # some channel must differ enough for the outline to survive shading
        while np.abs(fg - bg).max() < 0.4:
            fg = rng.uniform(0, 1, size=channels)
        s = int(rng.integers(size // 2, (3 * size) // 4 + 1))
        cy, cx = rng.uniform(s / 2 + 1, size - s / 2 - 1, size=2)
        m = _shape_mask(TOY_SHAPES[labels[i]], s, yy, xx, cy, cx)
        img = np.where(m[..., None], fg, img)
        if noise:
            img = img + noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0, 1)
    return ImageDataset(images, labels, len(TOY_SHAPES))
