"""Prototype layer, similarity scoring, the linear head, and the assembled network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig, build_backbone

EPSILON = 1e-4
MAX_SIMILARITY = float(np.log(1.0 / EPSILON))


@dataclass
class Provenance:
    """Where a pushed prototype came from."""

    train_image_id: str
    latent_cell: tuple[int, int]
    input_rectangle: tuple[int, int, int, int]  # y0, y1, x0, x1, half-open
    patch_pixels: np.ndarray  # uint8 crop of the source image at input_rectangle
    source_pixels: np.ndarray  # full uint8 source image, needed to re-score perturbations

    def to_json(self) -> dict:
        return {
            "train_image_id": self.train_image_id,
            "latent_cell": list(self.latent_cell),
            "input_rectangle": list(self.input_rectangle),
        }


class PrototypeLayer:
    def __init__(self, vectors: Tensor, class_of: np.ndarray, num_classes: int):
        self.vectors = vectors
        self.class_of = np.asarray(class_of, dtype=np.int64)
        self.num_classes = num_classes
        self.provenance: list[Provenance | None] = [None] * len(self.class_of)

    @classmethod
    def create(cls, num_classes: int, dim: int, per_class: int = 10, seed: int = 0):
        rng = np.random.default_rng(seed)
        vectors = Tensor(rng.uniform(0.0, 1.0, size=(num_classes * per_class, dim)),
                         requires_grad=True, name="prototypes")
        class_of = np.repeat(np.arange(num_classes), per_class)
        return cls(vectors, class_of, num_classes)

    @property
    def count(self) -> int:
        return len(self.class_of)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def of_class(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.class_of == k)

    @property
    def pushed(self) -> bool:
        return all(p is not None for p in self.provenance)


class ClassifierHead:
    def __init__(self, weight: Tensor):
        self.weight = weight

    @classmethod
    def create(cls, class_of: np.ndarray, num_classes: int) -> "ClassifierHead":
        w = np.where(np.arange(num_classes)[:, None] == np.asarray(class_of)[None, :], 1.0, -0.5)
        return cls(Tensor(w, requires_grad=True, name="head"))

    def off_class_mask(self, class_of: np.ndarray) -> np.ndarray:
        k = self.weight.shape[0]
        return np.arange(k)[:, None] != np.asarray(class_of)[None, :]


def distance_map(features: Tensor, prototypes: Tensor) -> Tensor:
    """Squared L2 distance of every latent cell to every prototype: N x P x Hf x Wf."""
    z, p = ad._d(features), ad._d(prototypes)
    if z.ndim != 4 or p.ndim != 2 or z.shape[1] != p.shape[1]:
        raise ValueError(f"distance_map: features {features.shape} vs prototypes {prototypes.shape}")
    diff = z[:, None] - p[None, :, :, None, None]  # N, P, D, H, W
    dist = (diff * diff).sum(axis=2)

    def bw(g):
        gd = 2.0 * diff * g[:, :, None]
        gz = gd.sum(axis=1) if features.requires_grad else None
        gp = -gd.sum(axis=(0, 3, 4)) if prototypes.requires_grad else None
        return gz, gp

    return ad.apply("distance_map", dist, (features, prototypes), bw)


def similarity(d):
    """log((d + 1) / (d + eps)); accepts a Tensor (differentiable) or array-like."""
    if isinstance(d, Tensor):
        dd = ad._d(d)
        if (dd < 0).any():
            raise ValueError("similarity: negative distance")
        sim = np.log((dd + 1) / (dd + EPSILON))
        return ad.apply("similarity", sim, (d,),
                        lambda g: (g * (1 / (dd + 1) - 1 / (dd + EPSILON)),))
    arr = np.asarray(d, dtype=np.float32)
    if (arr < 0).any():
        raise ValueError("similarity: negative distance")
    out = np.log((arr + 1) / (arr + np.float32(EPSILON)))
    return out if out.ndim else float(out)


def top_activation(dist: Tensor) -> tuple[Tensor, np.ndarray]:
    """Max similarity per (image, prototype) and its (i, j) cell, row-major first on ties."""
    sim = similarity(dist)
    scores, flat = ad.amax(sim, axis=(2, 3))
    wf = dist.shape[3]
    cells = np.stack([flat // wf, flat % wf], axis=-1)
    return scores, cells


def logits(scores: Tensor, head: ClassifierHead) -> Tensor:
    if scores.shape[1] != head.weight.shape[1]:
        raise ValueError(f"logits: {scores.shape[1]} scores for a head over {head.weight.shape[1]} prototypes")
    return ad.dense(scores, head.weight)


def prototype_diversity(layer: PrototypeLayer) -> float:
    """Distinct (image, cell) sources over the prototype count; 1.0 means no collapse."""
    if not layer.pushed:
        raise ValueError("prototype_diversity needs every prototype pushed")
    distinct = {(p.train_image_id, tuple(p.latent_cell)) for p in layer.provenance}
    return len(distinct) / layer.count


@dataclass
class Forward:
    features: Tensor
    distances: Tensor
    scores: Tensor
    cells: np.ndarray
    logits: Tensor


class ProtoPNet:
    """Backbone, prototype layer and head, plus the whitening stats inputs expect."""

    def __init__(self, backbone: Backbone, prototypes: PrototypeLayer, head: ClassifierHead,
                 class_names: list[str], stats=None):
        self.backbone = backbone
        self.prototypes = prototypes
        self.head = head
        self.class_names = list(class_names)
        self.stats = stats
        self.metadata: dict = {}

    @classmethod
    def create(cls, cfg: BackboneConfig, class_names, per_class: int = 10, seed: int = 0,
               stats=None) -> "ProtoPNet":
        k = len(class_names)
        ss = np.random.SeedSequence(seed)
        s_backbone, s_protos = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
        backbone = build_backbone(cfg, s_backbone)
        layer = PrototypeLayer.create(k, cfg.add_on_dim, per_class, s_protos)
        head = ClassifierHead.create(layer.class_of, k)
        return cls(backbone, layer, head, class_names, stats)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def forward(self, x, train: bool = False) -> Forward:
        z = self.backbone.features(x, train=train)
        dist = distance_map(z, self.prototypes.vectors)
        scores, cells = top_activation(dist)
        return Forward(z, dist, scores, cells, logits(scores, self.head))

    def predict(self, x, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Class predictions and logits for whitened images, eval mode."""
        outs = []
        with ad.no_grad():
            for start in range(0, len(x), batch_size):
                outs.append(self.forward(x[start:start + batch_size]).logits.data)
        lg = np.concatenate(outs) if outs else np.zeros((0, self.num_classes), np.float32)
        return lg.argmax(axis=1), lg

    def activations(self, x, batch_size: int = 64) -> np.ndarray:
        """Top similarity of every prototype for each image: M x P."""
        outs = []
        with ad.no_grad():
            for start in range(0, len(x), batch_size):
                outs.append(self.forward(x[start:start + batch_size]).scores.data)
        return np.concatenate(outs) if outs else np.zeros((0, self.prototypes.count), np.float32)
