"""The uninterpretable comparison model: same trunk, global average pool, dense head."""
from __future__ import annotations

import json
import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig, build_backbone
from .data import NormalizationStats, PatchSet, derive_seed, whiten_batch
from .training import TrainConfig, TrainingDiverged, _batches, accuracy

log = logging.getLogger(__name__)


class BaselineNet:
    def __init__(self, backbone: Backbone, weight: Tensor, bias: Tensor, class_names, stats=None):
        self.backbone = backbone
        self.weight = weight
        self.bias = bias
        self.class_names = list(class_names)
        self.stats = stats
        self.metadata: dict = {}

    @classmethod
    def create(cls, cfg: BackboneConfig, class_names, seed: int = 0, stats=None) -> "BaselineNet":
        k = len(class_names)
        ss = np.random.SeedSequence(seed)
        s_backbone, s_head = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
        backbone = build_backbone(cfg, s_backbone)
        c = cfg.block_channels[-1]
        rng = np.random.default_rng(s_head)
        weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / c), size=(k, c)), requires_grad=True, name="head")
        bias = Tensor(np.zeros(k), requires_grad=True, name="head_bias")
        return cls(backbone, weight, bias, class_names, stats)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def parameters(self) -> list[Tensor]:
        return self.backbone.trunk_parameters() + [self.weight, self.bias]

    def forward(self, x, train: bool = False) -> Tensor:
        h = self.backbone.trunk_features(ad.as_tensor(x), train)
        return ad.dense(ad.mean(h, axis=(2, 3)), self.weight, self.bias)

    def predict(self, x, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        outs = []
        with ad.no_grad():
            for start in range(0, len(x), batch_size):
                outs.append(self.forward(x[start:start + batch_size]).data)
        lg = np.concatenate(outs) if outs else np.zeros((0, self.num_classes), np.float32)
        return lg.argmax(axis=1), lg


def baseline_train(model: BaselineNet, train: PatchSet, cfg: TrainConfig, stats: NormalizationStats,
                   val: PatchSet | None = None, history_path=None) -> list[dict]:
    """Cross-entropy training for epochs_warmup + epochs_joint epochs with the joint optimizer."""
    model.stats = stats
    params = model.parameters()
    for p in params:
        p.requires_grad = True
    opt = ad.make_optimizer(params, cfg.optimizers["joint"])
    history = []
    for epoch in range(cfg.epochs_warmup + cfg.epochs_joint):
        rng = np.random.default_rng(derive_seed(cfg.seed, "baseline", epoch))
        total = 0.0
        correct = seen = 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            x = whiten_batch(train.images[idx], stats)
            y = train.labels[idx]
            logits = model.forward(x, train=True)
            loss = ad.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss.data):
                ad.current_tape().clear()
                raise TrainingDiverged(f"baseline: non-finite loss at epoch {epoch}")
            ad.backward(loss)
            try:
                ad.optimizer_step(opt)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"baseline epoch {epoch}: {exc}") from exc
            total += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(idx)
        rec = {"stage": "baseline", "epoch": epoch, "ce": total / seen, "train_acc": correct / seen}
        if val is not None:
            rec["val_acc"] = accuracy(model, val, stats)
        history.append(rec)
        log.info("%s", rec)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    for p in params:
        p.requires_grad = False
    model.metadata.update({"train_config": cfg.to_dict(),
                           "final_val_acc": history[-1].get("val_acc") if history else None})
    return history
