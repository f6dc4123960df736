"""Staged training: warm-up, joint with cluster/separation costs, push, sparse last layer."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import NormalizationStats, PatchSet, derive_seed, whiten_batch
from .prototypes import Provenance, ProtoPNet, prototype_diversity

log = logging.getLogger(__name__)


def _default_optimizers() -> dict:
    return {
        "warmup": {"adam": {"lr": 3e-3}},
        "joint": {"adam": {"lr": 1e-3}},
        "last_layer": {"adam": {"lr": 1e-2}},
    }


@dataclass
class TrainConfig:
    epochs_warmup: int = 3
    epochs_joint: int = 30
    push_every: int = 10
    epochs_last_layer: int = 10
    lambda_clst: float = 0.8
    lambda_sep: float = 0.08
    lambda_l1: float = 1e-4
    batch_size: int = 32
    optimizers: dict = field(default_factory=_default_optimizers)
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_clst", "lambda_sep", "lambda_l1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs_joint < 1 or not 1 <= self.push_every <= self.epochs_joint:
            raise ValueError("push_every must fit inside the joint stage at least once")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(FloatingPointError):
    pass


# --------------------------------------------------------------------- costs


def _masked_min_distance(dist: Tensor, labels, class_of, own: bool) -> Tensor:
    labels = np.asarray(labels)
    class_of = np.asarray(class_of)
    per_proto, _ = ad.amin(dist, axis=(2, 3))  # N x P
    allowed = (class_of[None, :] == labels[:, None]) if own else (class_of[None, :] != labels[:, None])
    if not allowed.any(axis=1).all():
        which = "own-class" if own else "other-class"
        raise ValueError(f"some image has no {which} prototype")
    # disallowed entries are lifted past every real distance; allowed ones are untouched
    lift = np.where(allowed, 0.0, float(per_proto.data.max()) + 1e6).astype(np.float32)
    best, _ = ad.amin(ad.add(per_proto, lift), axis=1)
    return ad.mean(best)


def cluster_cost(dist: Tensor, labels, class_of) -> Tensor:
    """Mean over images of the smallest distance from any cell to an own-class prototype."""
    return _masked_min_distance(dist, labels, class_of, own=True)


def separation_cost(dist: Tensor, labels, class_of) -> Tensor:
    """Same as cluster_cost but over prototypes of the other classes."""
    if len(np.unique(class_of)) < 2:
        raise ValueError("separation_cost needs prototypes of at least two classes")
    return _masked_min_distance(dist, labels, class_of, own=False)


def joint_loss(model: ProtoPNet, x, labels, cfg: TrainConfig, train: bool = True):
    """CE + lambda_clst * cluster - lambda_sep * separation; returns (loss, terms, forward)."""
    fwd = model.forward(x, train=train)
    ce = ad.softmax_cross_entropy(fwd.logits, labels)
    loss = ce
    terms = {"ce": float(ce.data)}
    if cfg.lambda_clst or cfg.lambda_sep:
        class_of = model.prototypes.class_of
        clst = cluster_cost(fwd.distances, labels, class_of)
        sep = separation_cost(fwd.distances, labels, class_of)
        terms["cluster"] = float(clst.data)
        terms["separation"] = float(sep.data)
        if cfg.lambda_clst:
            loss = ad.add(loss, ad.mul(clst, cfg.lambda_clst))
        if cfg.lambda_sep:
            loss = ad.sub(loss, ad.mul(sep, cfg.lambda_sep))
    terms["loss"] = float(loss.data)
    return loss, terms, fwd


# ------------------------------------------------------------------ stages


def stage_parameters(model: ProtoPNet, stage: str) -> list[Tensor]:
    bb = model.backbone
    if stage == "warmup":
        return bb.add_on_parameters() + [model.prototypes.vectors]
    if stage == "joint":
        return bb.trunk_parameters() + bb.add_on_parameters() + [model.prototypes.vectors]
    if stage == "last_layer":
        return [model.head.weight]
    raise ValueError(f"unknown stage {stage!r}")


def _set_trainable(model: ProtoPNet, stage: str) -> list[Tensor]:
    everything = model.backbone.parameters() + [model.prototypes.vectors, model.head.weight]
    live = stage_parameters(model, stage)
    live_ids = {id(p) for p in live}
    for p in everything:
        p.requires_grad = id(p) in live_ids
        p.grad = None
    return live


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:  # a singleton tail would break batch-norm statistics
            yield np.sort(idx)


def accuracy(model, images: PatchSet, stats: NormalizationStats, batch_size: int = 128) -> float:
    preds = []
    for start in range(0, len(images), batch_size):
        x = whiten_batch(images.images[start:start + batch_size], stats)
        preds.append(model.predict(x, batch_size)[0])
    return float((np.concatenate(preds) == images.labels).mean())


def _run_epoch(model, train: PatchSet, stats, cfg, opt, stage, epoch) -> dict:
    rng = np.random.default_rng(derive_seed(cfg.seed, stage, epoch))
    sums: dict[str, float] = {}
    correct = seen = 0
    for idx in _batches(len(train), cfg.batch_size, rng):
        x = whiten_batch(train.images[idx], stats)
        y = train.labels[idx]
        loss, terms, fwd = joint_loss(model, x, y, cfg)
        if not np.isfinite(terms["loss"]):
            ad.current_tape().clear()
            raise TrainingDiverged(f"non-finite loss in stage {stage}, epoch {epoch}")
        ad.backward(loss)
        try:
            ad.optimizer_step(opt)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"stage {stage}, epoch {epoch}: {exc}") from exc
        for k, v in terms.items():
            sums[k] = sums.get(k, 0.0) + v * len(idx)
        correct += int((fwd.logits.data.argmax(axis=1) == y).sum())
        seen += len(idx)
    rec = {k: v / seen for k, v in sums.items()}
    rec["train_acc"] = correct / seen
    return rec


# ------------------------------------------------------------------- push


def push_prototypes(model: ProtoPNet, train: PatchSet, stats: NormalizationStats | None = None,
                    batch_size: int = 128) -> list[Provenance]:
    """Move each prototype onto its nearest latent cell among own-class training images."""
    stats = stats or model.stats
    layer = model.prototypes
    grid = model.backbone.cfg.grid_size
    feats = []
    with ad.no_grad():
        for start in range(0, len(train), batch_size):
            x = whiten_batch(train.images[start:start + batch_size], stats)
            feats.append(model.backbone.features(x, train=False).data)
    z = np.concatenate(feats)  # M x D x g x g
    m, d = z.shape[:2]
    cells = z.transpose(0, 2, 3, 1).reshape(m * grid * grid, d)  # image-major, row-major cells
    new_vectors = layer.vectors.data.copy()
    for k in range(layer.num_classes):
        protos = layer.of_class(k)
        if not len(protos):
            continue
        images = np.flatnonzero(train.labels == k)
        if not len(images):
            raise ValueError(f"class {k} has no training images to push onto")
        rows = (images[:, None] * grid * grid + np.arange(grid * grid)[None, :]).ravel()
        cand = cells[rows]
        for j in protos:
            diff = cand - layer.vectors.data[j]
            best = int(np.argmin((diff * diff).sum(axis=1)))  # first minimum = (image id, cell) order
            img = int(images[best // (grid * grid)])
            ci, cj = divmod(best % (grid * grid), grid)
            new_vectors[j] = cand[best]
            rect = model.backbone.receptive_field(ci, cj)
            src = train.images[img]
            layer.provenance[j] = Provenance(
                train.ids[img], (ci, cj), rect,
                src[rect[0]:rect[1], rect[2]:rect[3]].copy(), src.copy())
    layer.vectors.data = new_vectors
    return list(layer.provenance)


# -------------------------------------------------------------- last layer


def last_layer_loss(scores: Tensor, labels, head_weight: Tensor, off_mask: np.ndarray,
                    lambda_l1: float) -> Tensor:
    ce = ad.softmax_cross_entropy(ad.dense(scores, head_weight), labels)
    if not lambda_l1:
        return ce
    l1 = ad.sum(ad.abs(ad.mul(head_weight, off_mask.astype(np.float32))))
    return ad.add(ce, ad.mul(l1, lambda_l1))


def train_last_layer(model: ProtoPNet, train: PatchSet, cfg: TrainConfig,
                     stats: NormalizationStats | None = None, scores: np.ndarray | None = None) -> list[dict]:
    """Fit only the head on frozen activations; L1 applies to off-class weights only."""
    stats = stats or model.stats
    if scores is None:
        scores = model.activations(whiten_batch(train.images, stats))
    live = _set_trainable(model, "last_layer")
    opt = ad.make_optimizer(live, cfg.optimizers["last_layer"])
    off = model.head.off_class_mask(model.prototypes.class_of)
    history = []
    for epoch in range(cfg.epochs_last_layer):
        rng = np.random.default_rng(derive_seed(cfg.seed, "last_layer", epoch))
        total = 0.0
        for idx in _batches(len(train), cfg.batch_size, rng):
            loss = last_layer_loss(Tensor(scores[idx]), train.labels[idx], model.head.weight,
                                   off, cfg.lambda_l1)
            ad.backward(loss)
            ad.optimizer_step(opt)
            total += float(loss.data) * len(idx)
        with ad.no_grad():
            full = float(last_layer_loss(Tensor(scores), train.labels, model.head.weight,
                                         off, cfg.lambda_l1).data)
        lg = scores @ model.head.weight.data.T
        history.append({"stage": "last_layer", "epoch": epoch, "loss": full,
                        "batch_loss": total / len(train),
                        "train_acc": float((lg.argmax(axis=1) == train.labels).mean()),
                        "mean_abs_off_class": float(np.abs(model.head.weight.data[off]).mean())})
    model.head.weight.requires_grad = False
    return history


# --------------------------------------------------------------------- fit


def fit(model: ProtoPNet, train: PatchSet, cfg: TrainConfig, stats: NormalizationStats,
        val: PatchSet | None = None, push_set: PatchSet | None = None,
        history_path=None) -> list[dict]:
    """Warm-up, joint (pushing every ``push_every`` epochs), final push, last layer.

    ``train`` is the (augmented) set used for gradient steps; ``push_set``
    (default ``train``) supplies the patches prototypes are projected onto.
    """
    model.stats = stats
    push_set = push_set if push_set is not None else train
    history: list[dict] = []

    def record(rec):
        if val is not None and "val_acc" not in rec:
            rec["val_acc"] = accuracy(model, val, stats)
        history.append(rec)
        log.info("%s", rec)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    for stage, epochs in (("warmup", cfg.epochs_warmup), ("joint", cfg.epochs_joint)):
        live = _set_trainable(model, stage)
        opt = ad.make_optimizer(live, cfg.optimizers[stage])
        for epoch in range(epochs):
            rec = _run_epoch(model, train, stats, cfg, opt, stage, epoch)
            rec.update(stage=stage, epoch=epoch)
            record(rec)
            last_joint = stage == "joint" and epoch == epochs - 1
            if stage == "joint" and (epoch + 1) % cfg.push_every == 0 and not last_joint:
                push_prototypes(model, push_set, stats)
                record({"stage": "push", "epoch": epoch,
                        "prototype_diversity": prototype_diversity(model.prototypes)})

    pre_push = {"stage": "pre_push", "epoch": cfg.epochs_joint - 1}
    record(pre_push)
    push_prototypes(model, push_set, stats)
    record({"stage": "push", "epoch": cfg.epochs_joint - 1,
            "prototype_diversity": prototype_diversity(model.prototypes)})
    for rec in train_last_layer(model, train, cfg, stats):
        record(rec)
    for p in model.backbone.parameters() + [model.prototypes.vectors, model.head.weight]:
        p.requires_grad = False
    model.metadata.update({
        "train_config": cfg.to_dict(),
        "prototype_diversity": prototype_diversity(model.prototypes),
        "pre_push_val_acc": pre_push.get("val_acc"),
        "final_val_acc": history[-1].get("val_acc"),
    })
    return history
