"""Dataset ingestion, preprocessing, augmentation, batching, and the
synthetic dataset generator used by desk-scale tests.

Image trees follow root/{train,test}/<class-name>/<file>. Class indices
come from the lexicographically sorted class-name list. Pixels live in
[0,1] as float arrays of shape (3, H, W); every augmentation clamps back
into [0,1] and never touches labels or dimensions.

Determinism: the (dataset seed, epoch) pair fixes the shuffle permutation,
and each sample's augmentation draws come from a generator seeded by
(seed, epoch, sample index) - so prefetch worker count has zero numerical
effect. LEAFNET_THREADS caps the prefetch pool (default: available cores).
"""

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DecodeFailure,
    DuplicateClassName,
    EmptyDataset,
    UnsupportedFormat,
)
from .tensor import DTYPES, Tensor

PDIMG_MAGIC = b"PDIM"
IMAGE_EXTENSIONS = (".pdimg", ".png", ".jpg", ".jpeg")
PREFETCH_CHUNK = 128  # loader granularity only; no numerical effect


def worker_count():
    env = os.environ.get("LEAFNET_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (3, H, W) floats in [0, 1]
    label: int
    source_id: str


@dataclass
class DatasetManifest:
    class_names: list  # sorted; index = position
    counts: dict  # split -> per-class sample counts
    files: dict  # split -> list of (path, class index)
    skipped: list  # unreadable / unsupported entries, reported not dropped


@dataclass
class AugmentConfig:
    rotation_deg: float = 20.0
    flip_prob: float = 0.5
    zoom_range: tuple = (0.8, 1.2)
    contrast_range: tuple = (0.8, 1.2)
    enabled: bool = True

    def __post_init__(self):
        if self.zoom_range[0] > self.zoom_range[1]:
            raise ValueError("zoom_range must be (lo, hi)")
        if self.contrast_range[0] > self.contrast_range[1]:
            raise ValueError("contrast_range must be (lo, hi)")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")


@dataclass
class Dataset:
    images: list
    class_names: list
    augment: AugmentConfig | None = None
    dataset_id: str = "dataset"

    def __len__(self):
        return len(self.images)

    def labels(self):
        return np.array([im.label for im in self.images], dtype=np.int64)


# ---------------------------------------------------------------------------
# PDIMG raw fixture format: magic "PDIM", u32 LE H, W, C, then H*W*C u8
# bytes row-major, channel-interleaved.


def write_pdimg(path, pixels):
    """pixels: (3, H, W) floats in [0,1] or (H, W, C) u8."""
    if pixels.ndim == 3 and pixels.shape[0] in (1, 3) and pixels.dtype != np.uint8:
        arr = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
        arr = np.transpose(arr, (1, 2, 0))
    else:
        arr = pixels.astype(np.uint8)
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(PDIMG_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_pdimg(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PDIMG_MAGIC:
        raise DecodeFailure(f"{path}: bad PDIMG magic")
    if len(blob) < 16:
        raise DecodeFailure(f"{path}: truncated PDIMG header")
    h, w, c = struct.unpack("<III", blob[4:16])
    need = 16 + h * w * c
    if len(blob) < need:
        raise DecodeFailure(f"{path}: truncated PDIMG payload")
    arr = np.frombuffer(blob[16:need], dtype=np.uint8).reshape(h, w, c)
    return arr


# ---------------------------------------------------------------------------
# decoding and resizing


def _decode_rgb_u8(path):
    """Any supported container -> (H, W, 3) uint8."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pdimg":
        arr = read_pdimg(path)
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        elif arr.shape[2] == 4:
            arr = arr[:, :, :3]
        elif arr.shape[2] != 3:
            raise DecodeFailure(f"{path}: unsupported channel count {arr.shape[2]}")
        return arr
    if ext in (".png", ".jpg", ".jpeg"):
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover
            raise UnsupportedFormat("Pillow is required for PNG/JPEG input") from exc
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")  # drops alpha
                return np.asarray(im, dtype=np.uint8)
        except UnsupportedFormat:
            raise
        except Exception as exc:
            raise DecodeFailure(f"{path}: {exc}") from exc
    raise UnsupportedFormat(f"{path}: unsupported container {ext!r}")


def bilinear_resize(channel_last, out_h, out_w):
    """Bilinear resample of an (H, W, C) float array using half-pixel
    centres with edge clamping. Same-size input passes through untouched."""
    h, w = channel_last.shape[:2]
    if (h, w) == (out_h, out_w):
        return channel_last
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0)[:, None, None]
    tx = (xs - x0)[None, :, None]
    a = channel_last[y0][:, x0]
    b = channel_last[y0][:, x1]
    c = channel_last[y1][:, x0]
    d = channel_last[y1][:, x1]
    top = a * (1 - tx) + b * tx
    bot = c * (1 - tx) + d * tx
    return top * (1 - ty) + bot * ty


def load_image(path, target_hw, label=0, source_id=None):
    """Decode, bilinear-resize to target (H, W), and scale into [0,1]."""
    arr = _decode_rgb_u8(path).astype(np.float64) / 255.0
    arr = bilinear_resize(arr, target_hw[0], target_hw[1])
    pixels = np.clip(np.transpose(arr, (2, 0, 1)), 0.0, 1.0)
    return LabeledImage(
        pixels=pixels,
        label=label,
        source_id=source_id if source_id is not None else path,
    )


# ---------------------------------------------------------------------------
# directory scanning


def scan_dataset(root):
    """Index a root/{train,test}/<class>/<file> tree.

    Class indices follow the sorted union of class names across splits;
    unsupported or unreadable entries land in manifest.skipped.
    """
    splits = [s for s in ("train", "test") if os.path.isdir(os.path.join(root, s))]
    if not splits:
        raise EmptyDataset(f"{root}: no train/ or test/ subtree")
    names = set()
    per_split_dirs = {}
    for split in splits:
        seen = []
        for entry in sorted(os.listdir(os.path.join(root, split))):
            full = os.path.join(root, split, entry)
            if not os.path.isdir(full):
                continue
            norm = entry.strip()
            if norm in seen:
                raise DuplicateClassName(f"{split}/: class {norm!r} appears twice")
            seen.append(norm)
        per_split_dirs[split] = seen
        names.update(seen)
    if not names:
        raise EmptyDataset(f"{root}: no class directories")
    class_names = sorted(names)
    index = {n: i for i, n in enumerate(class_names)}

    counts = {}
    files = {}
    skipped = []
    for split in splits:
        counts[split] = [0] * len(class_names)
        files[split] = []
        for name in per_split_dirs[split]:
            cdir = os.path.join(root, split, name)
            for fname in sorted(os.listdir(cdir)):
                fpath = os.path.join(cdir, fname)
                if not os.path.isfile(fpath):
                    continue
                if os.path.splitext(fname)[1].lower() not in IMAGE_EXTENSIONS:
                    skipped.append(fpath)
                    continue
                files[split].append((fpath, index[name]))
                counts[split][index[name]] += 1
    if all(len(files[s]) == 0 for s in splits):
        raise EmptyDataset(f"{root}: no images found")
    return DatasetManifest(class_names, counts, files, skipped)


def load_split(root, split, target_hw, manifest=None, augment=None):
    """Decode every image of a split into an in-memory Dataset."""
    if manifest is None:
        manifest = scan_dataset(root)
    if split not in manifest.files:
        raise EmptyDataset(f"{root}: split {split!r} missing")
    entries = manifest.files[split]
    if not entries:
        raise EmptyDataset(f"{root}: split {split!r} holds no images")

    def _load(entry):
        path, label = entry
        return load_image(path, target_hw, label=label)

    workers = worker_count()
    if workers > 1 and len(entries) > 1:
        images = []
        with ThreadPoolExecutor(max_workers=workers) as ex:
            for start in range(0, len(entries), PREFETCH_CHUNK):
                images.extend(ex.map(_load, entries[start : start + PREFETCH_CHUNK]))
    else:
        images = [_load(e) for e in entries]
    return Dataset(
        images=images,
        class_names=manifest.class_names,
        augment=augment,
        dataset_id=f"{os.path.basename(os.path.abspath(root))}/{split}",
    )


# ---------------------------------------------------------------------------
# augmentation


def _sample_grid(channel_last, ys, xs):
    """Bilinear sample at fractional coordinates with edge replication."""
    h, w = channel_last.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0)[..., None]
    tx = (xs - x0)[..., None]
    a = channel_last[y0, x0]
    b = channel_last[y0, x1]
    c = channel_last[y1, x0]
    d = channel_last[y1, x1]
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty


def _rotate(channel_last, angle_deg):
    if angle_deg == 0.0:
        return channel_last
    h, w = channel_last.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_y = cos * yy + sin * xx + cy  # inverse mapping of a CCW rotation
    src_x = -sin * yy + cos * xx + cx
    return _sample_grid(channel_last, src_y, src_x)


def _zoom(channel_last, factor):
    if factor == 1.0:
        return channel_last
    h, w = channel_last.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # factor > 1: centre crop + resize; factor < 1: shrink with edge padding
    src_y = (yy - cy) / factor + cy
    src_x = (xx - cx) / factor + cx
    return _sample_grid(channel_last, src_y, src_x)


def sample_seed(dataset_seed, epoch, sample_index):
    return np.random.SeedSequence([int(dataset_seed), int(epoch), int(sample_index)])


def augment(img, cfg, seed):
    """Apply, in fixed order, rotation -> horizontal flip -> zoom ->
    contrast, all draws taken from a generator seeded by `seed`. Labels
    and dimensions never change; output stays in [0,1]."""
    if cfg is None or not cfg.enabled:
        return img
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    do_flip = rng.random() < cfg.flip_prob
    zoom = rng.uniform(*cfg.zoom_range)
    contrast = rng.uniform(*cfg.contrast_range)

    arr = np.transpose(img.pixels, (1, 2, 0))
    arr = _rotate(arr, angle)
    if do_flip:
        arr = arr[:, ::-1, :]
    arr = _zoom(arr, zoom)
    mean = arr.mean()
    arr = mean + contrast * (arr - mean)
    arr = np.clip(arr, 0.0, 1.0)
    return LabeledImage(
        pixels=np.ascontiguousarray(np.transpose(arr, (2, 0, 1))),
        label=img.label,
        source_id=img.source_id,
    )


# ---------------------------------------------------------------------------
# batching


def batches(dataset, batch_size=32, seed=0, epoch=0, train=False, dtype="f32",
            workers=None, shuffle=True):
    """Yield (Tensor[N,3,H,W], labels[N]) over a seeded per-epoch
    permutation (or dataset order when shuffle=False); the final batch may
    be short. Augmentation runs only when train=True and the dataset
    carries an enabled AugmentConfig."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset.images)
    if n == 0:
        raise EmptyDataset("cannot batch an empty dataset")
    if shuffle:
        perm = np.random.default_rng(
            np.random.SeedSequence([int(seed), int(epoch)])
        ).permutation(n)
    else:
        perm = np.arange(n)
    np_dtype = DTYPES[dtype] if isinstance(dtype, str) else np.dtype(dtype).type
    do_aug = train and dataset.augment is not None and dataset.augment.enabled

    def _prepare(i):
        img = dataset.images[int(i)]
        if do_aug:
            img = augment(img, dataset.augment, sample_seed(seed, epoch, int(i)))
        return img.pixels.astype(np_dtype), img.label

    if workers is None:
        workers = worker_count()
    prepared = []
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            for start in range(0, n, PREFETCH_CHUNK):
                prepared.extend(ex.map(_prepare, perm[start : start + PREFETCH_CHUNK]))
    else:
        prepared = [_prepare(i) for i in perm]

    for start in range(0, n, batch_size):
        chunk = prepared[start : start + batch_size]
        x = np.stack([p for p, _ in chunk]).astype(np_dtype)
        y = np.array([l for _, l in chunk], dtype=np.int64)
        yield Tensor(x), y


# ---------------------------------------------------------------------------
# synthetic data


def synth_dataset(classes, per_class, hw=(32, 32), seed=0, noise=0.08, phase=0.0):
    """Deterministic separable toy corpus: class k draws an oriented
    gradient plus a class hue, with seeded Gaussian pixel noise (clamped to
    [0,1]). `phase` shifts orientation and hue together, giving the
    domain-shifted variants used by transfer experiments."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 4:
        raise ValueError("need at least 4 samples per class")
    h, w = hw
    yy, xx = np.meshgrid(
        np.linspace(-0.5, 0.5, h), np.linspace(-0.5, 0.5, w), indexing="ij"
    )
    images = []
    names = [f"class{k:02d}" for k in range(classes)]
    for k in range(classes):
        theta = np.pi * (k + phase) / classes
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        lo, hi = proj.min(), proj.max()
        grad = (proj - lo) / (hi - lo) if hi > lo else np.zeros_like(proj)
        hue = 0.5 + 0.5 * np.cos(
            2 * np.pi * (k / classes + phase) - 2 * np.pi * np.arange(3) / 3
        )
        base = 0.2 + 0.6 * (0.5 * grad[None, :, :] + 0.5 * hue[:, None, None])
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), k, i]))
            pix = np.clip(base + rng.normal(0.0, noise, base.shape), 0.0, 1.0)
            images.append(
                LabeledImage(pixels=pix, label=k, source_id=f"synth:{k}:{i}")
            )
    return Dataset(
        images=images,
        class_names=names,
        dataset_id=f"synth(K={classes},n={per_class},seed={seed},phase={phase})",
    )


def write_dataset_tree(dataset, root, split="train"):
    """Materialise a dataset as a PDIMG tree scannable by scan_dataset."""
    for img in dataset.images:
        cdir = os.path.join(root, split, dataset.class_names[img.label])
        os.makedirs(cdir, exist_ok=True)
        safe = img.source_id.replace("/", "_").replace(":", "_")
        write_pdimg(os.path.join(cdir, f"{safe}.pdimg"), img.pixels)
