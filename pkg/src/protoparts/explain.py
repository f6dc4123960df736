"""Explanations for one input: where each prototype fired, what it was pushed onto,
and how sensitive its match is to controlled image perturbations."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

from . import autodiff as ad
from .data import derive_seed, warp_perspective, whiten
from .prototypes import ProtoPNet, distance_map, similarity

PERTURBATIONS = ("hue", "saturation", "brightness", "contrast", "texture", "shape")


def _check_pushed(model: ProtoPNet) -> None:
    if not model.prototypes.pushed:
        raise ValueError("model prototypes have not been pushed")


def _as_float_image(image) -> np.ndarray:
    img = np.asarray(image)
    return img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)


def similarity_map(model: ProtoPNet, image, prototype_id: int) -> np.ndarray:
    """Hf x Wf similarity of one prototype over the latent grid of one image."""
    if not 0 <= prototype_id < model.prototypes.count:
        raise ValueError(f"unknown prototype id {prototype_id}")
    x = whiten(_as_float_image(image), model.stats)[None]
    with ad.no_grad():
        z = model.backbone.features(x)
        proto = ad.Tensor(model.prototypes.vectors.data[prototype_id:prototype_id + 1])
        d = distance_map(z, proto).data[0, 0]
    return similarity(d)


def top_similarity(model: ProtoPNet, image, prototype_id: int) -> float:
    return float(similarity_map(model, image, prototype_id).max())


# ------------------------------------------------------------------ heatmap


def bilinear_sample(grid: np.ndarray, ys, xs) -> np.ndarray:
    """Evaluate the bilinear interpolant of ``grid`` at (ys, xs); coordinates are clamped."""
    h, w = grid.shape
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0, h - 1)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = ys - y0, xs - x0
    g = grid.astype(np.float64)
    top = g[y0, x0] * (1 - fx) + g[y0, x1] * fx
    bottom = g[y1, x0] * (1 - fx) + g[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def upsample(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize; pixel centres map to (p + 0.5) * in / out - 0.5 in grid coordinates."""
    h, w = grid.shape
    ys = (np.arange(height) + 0.5) * h / height - 0.5
    xs = (np.arange(width) + 0.5) * w / width - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(grid, yy, xx)


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / (hi - lo)


def bounding_box(heat: np.ndarray, percentile: float = 95.0) -> tuple[int, int, int, int]:
    """Tightest half-open (y0, y1, x0, x1) around pixels at or above the percentile."""
    mask = heat >= np.percentile(heat, percentile)
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def activation_heatmap(image, model: ProtoPNet, prototype_id: int):
    """Upsampled, min-max normalised similarity map and its 95th-percentile box."""
    _check_pushed(model)
    img = np.asarray(image)
    heat = normalize_map(upsample(similarity_map(model, img, prototype_id), img.shape[0], img.shape[1]))
    return heat, bounding_box(heat)


# -------------------------------------------------------------- descriptors


def perturb(image, name: str, magnitude: float = 1.0, seed: int = 0) -> np.ndarray:
    """Apply one named perturbation at ``magnitude`` times its reference strength.

    Reference strengths: hue +20 deg, saturation x0.5, brightness +0.2,
    contrast x0.5 about the channel mean, Gaussian blur sigma 2 px,
    perspective warp rho 0.15. Magnitude 0 returns the image unchanged.
    """
    img = _as_float_image(image)
    if name not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {name!r}")
    if magnitude == 0:
        return img.copy()
    if name in ("hue", "saturation"):
        hsv = rgb_to_hsv(np.clip(img, 0, 1))
        if name == "hue":
            hsv[..., 0] = (hsv[..., 0] + 20.0 * magnitude / 360.0) % 1.0
        else:
            hsv[..., 1] *= 1.0 - 0.5 * magnitude
        return hsv_to_rgb(hsv)
    if name == "brightness":
        return np.clip(img + 0.2 * magnitude, 0, 1)
    if name == "contrast":
        mean = img.mean(axis=(0, 1), keepdims=True)
        return mean + (img - mean) * (1.0 - 0.5 * magnitude)
    if name == "texture":
        return ndimage.gaussian_filter(img, sigma=(2.0 * magnitude, 2.0 * magnitude, 0), mode="reflect")
    return warp_perspective(img, 0.15 * magnitude, np.random.default_rng(seed))


def descriptor_profile(model: ProtoPNet, prototype_id: int, magnitude: float = 1.0) -> dict[str, float]:
    """Relative drop of the prototype's top similarity on its own source image, per perturbation."""
    prov = model.prototypes.provenance[prototype_id]
    if prov is None:
        raise ValueError(f"prototype {prototype_id} has no push provenance")
    src = _as_float_image(prov.source_pixels)
    s0 = top_similarity(model, src, prototype_id)
    profile = {}
    for name in PERTURBATIONS:
        pert = perturb(src, name, magnitude, seed=derive_seed("descriptor", prototype_id))
        s = top_similarity(model, pert, prototype_id)
        profile[name] = float(np.clip((s0 - s) / s0, -1.0, 1.0))
    return profile


# ------------------------------------------------------------------ reports


def _round6(x):
    if isinstance(x, float):
        return float(f"{x:.6g}")
    if isinstance(x, dict):
        return {k: _round6(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round6(v) for v in x]
    return x


@dataclass
class Evidence:
    prototype_id: int
    class_id: int
    similarity_score: float
    head_weight: float
    contribution: float
    argmax_cell: list[int]
    heatmap_path: str
    source_patch_path: str
    source_rectangle: list[int]
    bounding_box: list[int]
    descriptor_profile: dict[str, float] = field(default_factory=dict)


@dataclass
class ExplanationReport:
    input_id: str
    predicted_class: int
    predicted_name: str
    class_scores: list[float]
    evidence: list[Evidence]
    contributions: list[list[float]]  # K x P, score * weight

    def to_json(self) -> dict:
        return _round6(asdict(self))

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def _overlay(image: np.ndarray, heat: np.ndarray, box) -> np.ndarray:
    rgb = colormaps["jet"](heat)[..., :3]
    out = 0.5 * _as_float_image(image) + 0.5 * rgb
    out = np.clip(np.rint(out * 255), 0, 255).astype(np.uint8)
    y0, y1, x0, x1 = box
    out[y0, x0:x1] = out[y1 - 1, x0:x1] = (255, 255, 0)
    out[y0:y1, x0] = out[y0:y1, x1 - 1] = (255, 255, 0)
    return out


def _save_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.ascontiguousarray(arr), "RGB").save(path)


def explain(model: ProtoPNet, image, k: int = 5, input_id: str = "input", out_dir=None,
            descriptors: bool = True) -> ExplanationReport:
    """Top-k prototype evidence for the predicted class; PNGs and report.json under out_dir/input_id."""
    _check_pushed(model)
    img = np.asarray(image)
    x = whiten(_as_float_image(img), model.stats)[None]
    with ad.no_grad():
        fwd = model.forward(x)
    scores = fwd.scores.data[0]
    weight = model.head.weight.data
    logits = fwd.logits.data[0]
    pred = int(np.argmax(logits))
    contrib = weight * scores[None, :]
    order = np.argsort(-contrib[pred], kind="stable")[:min(k, model.prototypes.count)]

    folder = None
    if out_dir is not None:
        folder = Path(out_dir) / input_id
        folder.mkdir(parents=True, exist_ok=True)
    evidence = []
    for j in order:
        j = int(j)
        heat, box = activation_heatmap(img, model, j)
        prov = model.prototypes.provenance[j]
        heat_path = src_path = ""
        if folder is not None:
            # paths are relative to the report's folder so reports stay byte-stable across output roots
            heat_path = f"heatmap_p{j:03d}.png"
            src_path = f"source_p{j:03d}.png"
            _save_png(_overlay(img, heat, box), folder / heat_path)
            _save_png(prov.patch_pixels, folder / src_path)
        evidence.append(Evidence(
            prototype_id=j,
            class_id=int(model.prototypes.class_of[j]),
            similarity_score=float(scores[j]),
            head_weight=float(weight[pred, j]),
            contribution=float(contrib[pred, j]),
            argmax_cell=[int(c) for c in fwd.cells[0, j]],
            heatmap_path=heat_path,
            source_patch_path=src_path,
            source_rectangle=list(prov.input_rectangle),
            bounding_box=list(box),
            descriptor_profile=descriptor_profile(model, j) if descriptors else {},
        ))
    report = ExplanationReport(input_id, pred, model.class_names[pred],
                               [float(v) for v in logits], evidence,
                               [[float(v) for v in row] for row in contrib])
    if folder is not None:
        report.write(folder / "report.json")
    return report
