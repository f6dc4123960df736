"""MiniVGG feature extractor with a sigmoid-bounded 1x1 add-on head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor


@dataclass
class BackboneConfig:
    input_size: int = 64
    block_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    add_on_dim: int = 64
    use_batchnorm: bool = True

    def __post_init__(self):
        self.block_channels = [int(c) for c in self.block_channels]
        if not self.block_channels:
            raise ValueError("block_channels must not be empty")
        if self.input_size % (2 ** len(self.block_channels)):
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{len(self.block_channels)}")
        if self.add_on_dim < 8:
            raise ValueError(f"add_on_dim must be >= 8, got {self.add_on_dim}")

    @property
    def grid_size(self) -> int:
        return self.input_size // 2 ** len(self.block_channels)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConvUnit:
    weight: Tensor
    bias: Tensor | None = None
    gamma: Tensor | None = None
    beta: Tensor | None = None
    bn: BatchNormState | None = None

    def parameters(self) -> list[Tensor]:
        return [t for t in (self.weight, self.bias, self.gamma, self.beta) if t is not None]

    def __call__(self, x: Tensor, train: bool, padding: int) -> Tensor:
        h = ad.conv2d(x, self.weight, self.bias, padding=padding)
        if self.bn is not None:
            h = ad.batchnorm2d(h, self.gamma, self.beta, self.bn, train)
        return h


class Backbone:
    """Conv blocks (conv3x3-bn-relu twice, then maxpool) followed by conv1x1-relu-conv1x1-sigmoid."""

    def __init__(self, cfg: BackboneConfig, trunk: list[list[ConvUnit]], add_on: list[ConvUnit]):
        self.cfg = cfg
        self.trunk = trunk
        self.add_on = add_on

    def trunk_parameters(self) -> list[Tensor]:
        return [p for block in self.trunk for unit in block for p in unit.parameters()]

    def add_on_parameters(self) -> list[Tensor]:
        return [p for unit in self.add_on for p in unit.parameters()]

    def parameters(self) -> list[Tensor]:
        return self.trunk_parameters() + self.add_on_parameters()

    def batchnorm_states(self) -> list[BatchNormState]:
        return [u.bn for block in self.trunk for u in block if u.bn is not None]

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every weight and running statistic, keyed by a stable name."""
        out: dict[str, np.ndarray] = {}
        for b, block in enumerate(self.trunk):
            for u, unit in enumerate(block):
                _unit_arrays(out, f"trunk.{b}.{u}", unit)
        for u, unit in enumerate(self.add_on):
            _unit_arrays(out, f"add_on.{u}", unit)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for b, block in enumerate(self.trunk):
            for u, unit in enumerate(block):
                _load_unit(arrays, f"trunk.{b}.{u}", unit)
        for u, unit in enumerate(self.add_on):
            _load_unit(arrays, f"add_on.{u}", unit)

    def features(self, x, train: bool = False) -> Tensor:
        """Run trunk and add-on; returns N x D x Hf x Wf in (0, 1)."""
        return extract_features(self, x, train=train)

    def trunk_features(self, x: Tensor, train: bool) -> Tensor:
        h = x
        for block in self.trunk:
            for unit in block:
                h = ad.relu(unit(h, train, padding=1))
            h = ad.maxpool2d(h)
        return h

    def receptive_field(self, i: int, j: int) -> tuple[int, int, int, int]:
        return receptive_field(self.cfg, i, j)


def _unit_arrays(out, prefix, unit: ConvUnit) -> None:
    out[f"{prefix}.weight"] = unit.weight.data
    if unit.bias is not None:
        out[f"{prefix}.bias"] = unit.bias.data
    if unit.bn is not None:
        out[f"{prefix}.gamma"] = unit.gamma.data
        out[f"{prefix}.beta"] = unit.beta.data
        out[f"{prefix}.running_mean"] = unit.bn.running_mean
        out[f"{prefix}.running_var"] = unit.bn.running_var


def _load_unit(arrays, prefix, unit: ConvUnit) -> None:
    unit.weight.data = np.array(arrays[f"{prefix}.weight"], dtype=np.float32)
    if unit.bias is not None:
        unit.bias.data = np.array(arrays[f"{prefix}.bias"], dtype=np.float32)
    if unit.bn is not None:
        unit.gamma.data = np.array(arrays[f"{prefix}.gamma"], dtype=np.float32)
        unit.beta.data = np.array(arrays[f"{prefix}.beta"], dtype=np.float32)
        unit.bn.running_mean = np.array(arrays[f"{prefix}.running_mean"], dtype=np.float32)
        unit.bn.running_var = np.array(arrays[f"{prefix}.running_var"], dtype=np.float32)


def _he_conv(rng, out_ch, in_ch, k, name) -> Tensor:
    std = np.sqrt(2.0 / (in_ch * k * k))
    w = rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(np.float32)
    return Tensor(w, requires_grad=True, name=name)


def build_backbone(cfg: BackboneConfig, seed: int) -> Backbone:
    rng = np.random.default_rng(seed)
    trunk: list[list[ConvUnit]] = []
    in_ch = 3
    for b, ch in enumerate(cfg.block_channels):
        block = []
        for u in range(2):
            name = f"trunk.{b}.{u}"
            unit = ConvUnit(_he_conv(rng, ch, in_ch, 3, f"{name}.weight"))
            if cfg.use_batchnorm:
                unit.gamma = Tensor(np.ones(ch), requires_grad=True, name=f"{name}.gamma")
                unit.beta = Tensor(np.zeros(ch), requires_grad=True, name=f"{name}.beta")
                unit.bn = BatchNormState.fresh(ch)
            else:
                unit.bias = Tensor(np.zeros(ch), requires_grad=True, name=f"{name}.bias")
            block.append(unit)
            in_ch = ch
        trunk.append(block)
    d = cfg.add_on_dim
    add_on = [
        ConvUnit(_he_conv(rng, d, in_ch, 1, "add_on.0.weight"),
                 Tensor(np.zeros(d), requires_grad=True, name="add_on.0.bias")),
        ConvUnit(_he_conv(rng, d, d, 1, "add_on.1.weight"),
                 Tensor(np.zeros(d), requires_grad=True, name="add_on.1.bias")),
    ]
    return Backbone(cfg, trunk, add_on)


def extract_features(b: Backbone, batch, train: bool = False) -> Tensor:
    x = ad.as_tensor(batch)
    s = b.cfg.input_size
    if x.data.ndim != 4 or x.shape[1:] != (3, s, s):
        raise ValueError(f"expected N x 3 x {s} x {s} input, got {x.shape}")
    h = b.trunk_features(x, train)
    h = ad.relu(b.add_on[0](h, train, padding=0))
    return ad.sigmoid(b.add_on[1](h, train, padding=0))


def receptive_field(cfg: BackboneConfig, i: int, j: int) -> tuple[int, int, int, int]:
    """Input rectangle ``(y0, y1, x0, x1)``, half-open and clipped, seen by latent cell (i, j)."""
    g = cfg.grid_size
    if not (0 <= i < g and 0 <= j < g):
        raise ValueError(f"cell ({i}, {j}) outside the {g}x{g} grid")
    jump, size, center = 1, 1, 0.0
    for _ in cfg.block_channels:
        for _ in range(2):  # 3x3 conv, pad 1, stride 1
            size += 2 * jump
        center += 0.5 * jump  # 2x2 pool, stride 2
        size += jump
        jump *= 2
    half = (size - 1) / 2

    def span(k):
        lo = int(np.floor(center + k * jump - half))
        hi = int(np.floor(center + k * jump + half)) + 1
        return max(lo, 0), min(hi, cfg.input_size)

    y0, y1 = span(i)
    x0, x1 = span(j)
    return y0, y1, x0, x1
