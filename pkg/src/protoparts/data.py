"""Patch datasets: synthetic generation, cropping, augmentation, whitening, splits.

Images are uint8 H x W x 3 arrays. Whitening produces float32 N x 3 x H x W
arrays ready for the backbone.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

CLASS_NAMES = ["AU", "BRU", "CYS", "STR", "WD", "WW"]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any mix of ints and strings."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass
class DatasetManifest:
    classes: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    patches_per_class: int = 300
    patch_size: int = 64
    split: float = 0.8
    augmentation_factor: int = 4
    seed: int = 0
    # "mixed" is the union of the surface and section views, so it holds twice the patches
    views: list[str] = field(default_factory=lambda: ["section"])

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ValueError(f"split fraction must lie in (0, 1), got {self.split}")
        if self.augmentation_factor < 1:
            raise ValueError("augmentation_factor must be >= 1")
        unknown = set(self.views) - {"surface", "section", "mixed"}
        if unknown:
            raise ValueError(f"unknown views {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NormalizationStats:
    mean: np.ndarray  # per channel, on the [0, 1] scale
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float32), np.float32(1e-6))

    @classmethod
    def from_images(cls, images: np.ndarray) -> "NormalizationStats":
        x = images.reshape(-1, 3).astype(np.float64) / 255.0
        return cls(x.mean(axis=0), x.std(axis=0))

    def to_json(self) -> dict:
        return {"mean": [repr(float(v)) for v in self.mean],
                "std": [repr(float(v)) for v in self.std]}

    @classmethod
    def from_json(cls, d: dict) -> "NormalizationStats":
        return cls([float(v) for v in d["mean"]], [float(v) for v in d["std"]])


@dataclass
class ImagePatch:
    pixels: np.ndarray
    label: int
    patch_id: str
    source_id: str = ""
    offset: tuple[int, int] = (0, 0)


@dataclass
class PatchSet:
    """Column-wise storage of many same-size patches, kept in id order."""

    images: np.ndarray  # M x S x S x 3 uint8
    labels: np.ndarray
    ids: list[str]
    sources: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_patches(cls, patches: list[ImagePatch]) -> "PatchSet":
        if not patches:
            raise ValueError("empty patch list")
        order = sorted(range(len(patches)), key=lambda i: patches[i].patch_id)
        return cls(np.stack([patches[i].pixels for i in order]),
                   np.array([patches[i].label for i in order], dtype=np.int64),
                   [patches[i].patch_id for i in order],
                   [patches[i].source_id for i in order])

    def patches(self) -> list[ImagePatch]:
        srcs = self.sources or [""] * len(self)
        return [ImagePatch(self.images[i], int(self.labels[i]), self.ids[i], srcs[i])
                for i in range(len(self))]

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        srcs = [self.sources[i] for i in idx] if self.sources else []
        return PatchSet(self.images[idx], self.labels[idx], [self.ids[i] for i in idx], srcs)

    def whitened(self, stats: NormalizationStats) -> np.ndarray:
        return whiten_batch(self.images, stats)


@dataclass
class Dataset:
    manifest: DatasetManifest
    train: PatchSet
    test: PatchSet
    stats: NormalizationStats

    @property
    def class_names(self) -> list[str]:
        return list(self.manifest.classes)


# ------------------------------------------------------------------ patches


def extract_patches(image: np.ndarray, size: int, count: int, seed: int,
                    source_id: str = "", label: int = -1) -> list[ImagePatch]:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than patch size {size}")
    rng = np.random.default_rng(seed)
    out = []
    for n in range(count):
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        out.append(ImagePatch(image[y:y + size, x:x + size].copy(), label,
                              f"{source_id}_{n:02d}", source_id, (y, x)))
    return out


# ------------------------------------------------------------- augmentation


def solve_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 H with H @ [x, y, 1] ~ [u, v, 1] for four (x, y) -> (u, v) pairs."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for n, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * n] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * n + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * n], b[2 * n + 1] = u, v
    if not np.isfinite(a).all() or np.linalg.cond(a) > 1e12:
        raise np.linalg.LinAlgError("degenerate point correspondence")
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    q = np.c_[pts, np.ones(len(pts))] @ h.T
    return q[:, :2] / q[:, 2:3]


def warp_perspective(pixels: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Displace each corner by up to rho * size and resample (bilinear, reflect padding)."""
    size = pixels.shape[0]
    corners = np.array([[0, 0], [size - 1, 0], [size - 1, size - 1], [0, size - 1]], float)
    for _ in range(5):
        moved = corners + rng.uniform(-rho * size, rho * size, size=(4, 2))
        try:
            # output pixel p samples the input at back(p); back maps displaced corners to the originals
            back = solve_homography(moved, corners)
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise np.linalg.LinAlgError("perspective warp: singular homography after 5 retries")
    ys, xs = np.mgrid[0:size, 0:pixels.shape[1]]
    src = apply_homography(back, np.c_[xs.ravel(), ys.ravel()])
    coords = [src[:, 1].reshape(ys.shape), src[:, 0].reshape(ys.shape)]
    img = pixels.astype(np.float64)
    out = np.stack([ndimage.map_coordinates(img[..., c], coords, order=1, mode="reflect")
                    for c in range(img.shape[2])], axis=-1)
    return out


def augment(patch: ImagePatch, mode: str, seed: int = 0, rho: float = 0.15) -> ImagePatch:
    """``mode`` is 'identity', 'hflip', 'vflip' or 'perspective'."""
    px = patch.pixels
    if mode == "identity":
        new = px.copy()
    elif mode == "hflip":
        new = px[:, ::-1].copy()
    elif mode == "vflip":
        new = px[::-1].copy()
    elif mode == "perspective":
        if not 0.0 <= rho <= 0.25:
            raise ValueError(f"perspective rho must lie in [0, 0.25], got {rho}")
        warped = warp_perspective(px, rho, np.random.default_rng(seed))
        new = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
    else:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    return replace(patch, pixels=new, patch_id=f"{patch.patch_id}~{mode}")


_FLIPS = ("identity", "hflip", "vflip")


def augment_variants(patch: ImagePatch, factor: int, seed: int, rho: float = 0.15) -> list[ImagePatch]:
    """``factor`` copies: the three flips, then the flips again under perspective warps."""
    out = []
    for v in range(factor):
        flipped = augment(patch, _FLIPS[v % 3])
        rnd = v // 3
        if rnd:
            warped = augment(flipped, "perspective", derive_seed(seed, patch.patch_id, v), rho)
            flipped = replace(warped, patch_id=f"{patch.patch_id}~{_FLIPS[v % 3]}+p{rnd}")
        out.append(flipped)
    return out


def augment_set(ps: PatchSet, factor: int, seed: int, rho: float = 0.15) -> PatchSet:
    patches = [v for p in ps.patches() for v in augment_variants(p, factor, seed, rho)]
    return PatchSet.from_patches(patches)


# ---------------------------------------------------------------- whitening


def whiten(patch, stats: NormalizationStats) -> np.ndarray:
    """(I - m) / sigma per channel; input H x W x 3 (uint8 or [0, 1] floats), output 3 x H x W."""
    px = patch.pixels if isinstance(patch, ImagePatch) else np.asarray(patch)
    x = px.astype(np.float32) / np.float32(255.0) if px.dtype == np.uint8 else px.astype(np.float32)
    return ((x - stats.mean) / stats.std).transpose(2, 0, 1)


def whiten_batch(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    x = images.astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(((x - stats.mean) / stats.std).transpose(0, 3, 1, 2))


# ---------------------------------------------------------------- splitting


def _train_count(n: int, fraction: float) -> int:
    return min(max(int(math.floor(n * fraction + 0.5)), 1), n - 1)


def split_stratified(patches: list[ImagePatch], fraction: float = 0.8,
                     seed: int = 0) -> tuple[list[ImagePatch], list[ImagePatch]]:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    by_class: dict[int, list[ImagePatch]] = {}
    for p in sorted(patches, key=lambda p: p.patch_id):
        by_class.setdefault(p.label, []).append(p)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in sorted(by_class):
        group = by_class[label]
        if len(group) < 2:
            raise ValueError(f"class {label} has {len(group)} patch(es); need at least 2")
        order = rng.permutation(len(group))
        k = _train_count(len(group), fraction)
        train += [group[i] for i in order[:k]]
        test += [group[i] for i in order[k:]]
    return train, test


def pipeline_counts(manifest: DatasetManifest) -> dict[str, int]:
    """Patch totals the pipeline produces for ``manifest`` without generating anything."""
    per_class = sum(2 if v == "mixed" else 1 for v in manifest.views) * manifest.patches_per_class
    train = test = 0
    for _ in manifest.classes:
        k = _train_count(per_class, manifest.split)
        train += k
        test += per_class - k
    return {"patches": per_class * len(manifest.classes), "train": train, "test": test,
            "augmented_train": train * manifest.augmentation_factor}


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class ClassStyle:
    hue: float  # degrees
    saturation: float
    value: float
    texture: str  # "noise", "stripes" or "blobs"
    grain: float  # gaussian smoothing sigma of the noise field, px
    amplitude: float


# AU/BRU differ only in hue; CYS/STR differ only in texture grain.
CLASS_STYLES = {
    "AU": ClassStyle(30.0, 0.70, 0.75, "noise", 6.0, 0.06),
    "BRU": ClassStyle(80.0, 0.70, 0.75, "noise", 6.0, 0.06),
    "CYS": ClassStyle(200.0, 0.45, 0.65, "noise", 0.7, 0.28),
    "STR": ClassStyle(200.0, 0.45, 0.65, "noise", 3.0, 0.28),
    "WD": ClassStyle(270.0, 0.50, 0.70, "stripes", 0.0, 0.20),
    "WW": ClassStyle(140.0, 0.50, 0.55, "blobs", 0.0, 0.25),
}
HUE_ONLY_PAIR = ("AU", "BRU")
TEXTURE_ONLY_PAIR = ("CYS", "STR")


def _texture_field(style: ClassStyle, size: int, rng: np.random.Generator) -> np.ndarray:
    if style.texture == "noise":
        f = ndimage.gaussian_filter(rng.standard_normal((size, size)), style.grain, mode="wrap")
    elif style.texture == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(7.0, 10.0)
        yy, xx = np.mgrid[0:size, 0:size]
        f = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + rng.uniform(0, 2 * np.pi))
    elif style.texture == "blobs":
        f = np.zeros((size, size))
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(int(size * size / 180)):
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(2.5, 4.5)
            f += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    else:
        raise ValueError(style.texture)
    return (f - f.mean()) / (f.std() + 1e-12)


def render_source(style: ClassStyle, size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic source image for a class, with per-image colour jitter."""
    hue = (style.hue + rng.uniform(-6, 6)) % 360.0
    sat = np.clip(style.saturation + rng.uniform(-0.05, 0.05), 0, 1)
    val = np.clip(style.value + rng.uniform(-0.05, 0.05), 0, 1)
    tex = _texture_field(style, size, rng)
    hsv = np.empty((size, size, 3))
    hsv[..., 0] = hue / 360.0
    hsv[..., 1] = np.clip(sat + 0.3 * style.amplitude * tex, 0, 1)
    hsv[..., 2] = np.clip(val + style.amplitude * tex, 0, 1)
    return np.clip(np.rint(hsv_to_rgb(hsv) * 255), 0, 255).astype(np.uint8)


def generate_patches(manifest: DatasetManifest, seed: int | None = None,
                     patches_per_source: int = 4) -> list[ImagePatch]:
    """All patches for every view and class, each class rendered from its own source images."""
    seed = manifest.seed if seed is None else seed
    size = manifest.patch_size
    out = []
    for view in manifest.views:
        views = ["surface", "section"] if view == "mixed" else [view]
        for label, name in enumerate(manifest.classes):
            style = CLASS_STYLES[name]
            for sub in views:
                n_sources = math.ceil(manifest.patches_per_class / patches_per_source)
                made = 0
                for s in range(n_sources):
                    tag = view if sub == view else f"{view}-{sub}"
                    source_id = f"{tag}-{name}-{s:05d}"
                    rng = np.random.default_rng(derive_seed(seed, source_id))
                    img = render_source(style, 2 * size, rng)
                    take = min(patches_per_source, manifest.patches_per_class - made)
                    out += extract_patches(img, size, take, derive_seed(seed, source_id, "crop"),
                                           source_id, label)
                    made += take
    return out


def build_dataset(manifest: DatasetManifest, seed: int | None = None) -> Dataset:
    """Generate, split and normalize in memory; augmentation is applied later, to train only."""
    seed = manifest.seed if seed is None else seed
    train, test = split_stratified(generate_patches(manifest, seed), manifest.split, seed)
    train_set, test_set = PatchSet.from_patches(train), PatchSet.from_patches(test)
    return Dataset(manifest, train_set, test_set, NormalizationStats.from_images(train_set.images))


def synth_dataset(manifest: DatasetManifest, seed: int | None, root) -> Dataset:
    """Build the dataset and write ``root/<split>/<class>/<patch_id>.png`` plus ``manifest.json``."""
    ds = build_dataset(manifest, seed)
    save_dataset(ds, root)
    return ds


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    for split, ps in (("train", ds.train), ("test", ds.test)):
        for name in ds.manifest.classes:
            (root / split / name).mkdir(parents=True, exist_ok=True)
        for img, label, pid in zip(ps.images, ps.labels, ps.ids):
            Image.fromarray(img, "RGB").save(root / split / ds.manifest.classes[label] / f"{pid}.png")
    meta = {"manifest": ds.manifest.to_dict(), "class_order": ds.manifest.classes,
            "stats": ds.stats.to_json(),
            "counts": {"train": len(ds.train), "test": len(ds.test)}}
    (root / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "manifest.json").read_text())
    manifest = DatasetManifest(**meta["manifest"])
    splits = {}
    for split in ("train", "test"):
        patches = []
        for label, name in enumerate(manifest.classes):
            for path in sorted((root / split / name).glob("*.png")):
                with Image.open(path) as im:
                    px = np.asarray(im.convert("RGB"), dtype=np.uint8)
                src = path.stem.rsplit("_", 1)[0]
                patches.append(ImagePatch(px, label, path.stem, src))
        splits[split] = PatchSet.from_patches(patches)
    return Dataset(manifest, splits["train"], splits["test"], NormalizationStats.from_json(meta["stats"]))


# ---------------------------------------------------------- feature helpers


def grain_statistic(pixels: np.ndarray) -> float:
    """Mean absolute difference between horizontally/vertically adjacent grey pixels."""
    g = pixels.astype(np.float64).mean(axis=2)
    return float((np.abs(np.diff(g, axis=0)).mean() + np.abs(np.diff(g, axis=1)).mean()) / 2)


def mean_hue(pixels: np.ndarray) -> float:
    """Circular mean hue in degrees."""
    h = rgb_to_hsv(pixels.astype(np.float64) / 255.0)[..., 0] * 2 * np.pi
    return float(np.degrees(np.arctan2(np.sin(h).mean(), np.cos(h).mean())) % 360.0)
