"""Residual network construction, head replacement, grouping, freezing.

A Model is an ordered list of named layers plus bookkeeping: which section
each layer belongs to (stem, stage1..4, head), the contiguous group
partition that carries discriminative learning rates, and per-layer freeze
flags.  Frozen layers keep exposing their parameters but reject optimizer
updates, and frozen batchnorms also pin their running statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor

HEAD_SECTION = "head"


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    """He-style uniform init with the relu gain."""
    bound = math.sqrt(2.0) * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Layer:
    """Base layer: owns parameters and optional buffers (running stats)."""

    frozen: bool = False

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = False):
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(
            kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32),
                           requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, training):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Layer):
    """Works as 2d (NCHW) or 1d (NF) depending on the input rank."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum
        self.stats_frozen = False

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training):
        # a stats-frozen batchnorm normalizes with its stored statistics
        train_mode = training and not self.stats_frozen
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, training=train_mode,
                              eps=self.eps, momentum=self.momentum)


class ReLU(Layer):
    def forward(self, x, training):
        return ops.relu(x)


class MaxPool2d(Layer):
    def __init__(self, kernel: int = 3, stride: int = 2, padding: int = 1):
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x, training):
        return ops.max_pool2d(x, self.kernel, self.stride, self.padding)


class AdaptiveConcatPool(Layer):
    def forward(self, x, training):
        return ops.adaptive_concat_pool(x)


class Flatten(Layer):
    def forward(self, x, training):
        return ops.flatten(x)


class Dropout(Layer):
    def __init__(self, p: float, seed: int):
        self.p = p
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed: int) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def forward(self, x, training):
        return ops.dropout(x, self.p, training and not self.frozen, self.rng)


class Linear(Layer):
    def __init__(self, rng: np.random.Generator, in_f: int, out_f: int):
        self.weight = Tensor(kaiming_uniform(rng, (out_f, in_f), in_f),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_f, dtype=np.float32), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training):
        return ops.linear(x, self.weight, self.bias)


class Bottleneck(Layer):
    """1x1 reduce -> 3x3 -> 1x1 expand with identity or projected shortcut."""

    expansion = 4

    def __init__(self, rng: np.random.Generator, in_ch: int, planes: int,
                 stride: int = 1):
        out_ch = planes * self.expansion
        self.conv1 = Conv2d(rng, in_ch, planes, 1)
        self.bn1 = BatchNorm(planes)
        self.conv2 = Conv2d(rng, planes, planes, 3, stride=stride, padding=1)
        self.bn2 = BatchNorm(planes)
        self.conv3 = Conv2d(rng, planes, out_ch, 1)
        self.bn3 = BatchNorm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.down_conv: Optional[Conv2d] = Conv2d(rng, in_ch, out_ch, 1,
                                                      stride=stride)
            self.down_bn: Optional[BatchNorm] = BatchNorm(out_ch)
        else:
            self.down_conv = None
            self.down_bn = None

    def _sublayers(self) -> Iterator[tuple[str, Layer]]:
        yield "conv1", self.conv1
        yield "bn1", self.bn1
        yield "conv2", self.conv2
        yield "bn2", self.bn2
        yield "conv3", self.conv3
        yield "bn3", self.bn3
        if self.down_conv is not None:
            yield "down_conv", self.down_conv
            yield "down_bn", self.down_bn

    def params(self):
        out = {}
        for name, sub in self._sublayers():
            for pname, p in sub.params().items():
                out[f"{name}.{pname}"] = p
        return out

    def buffers(self):
        out = {}
        for name, sub in self._sublayers():
            for bname, b in sub.buffers().items():
                out[f"{name}.{bname}"] = b
        return out

    @property
    def frozen(self):
        return self.conv1.frozen

    @frozen.setter
    def frozen(self, value: bool):
        for _, sub in self._sublayers():
            sub.frozen = value

    def forward(self, x, training):
        h = self.bn1.forward(self.conv1.forward(x, training), training)
        h = ops.relu(h)
        h = self.bn2.forward(self.conv2.forward(h, training), training)
        h = ops.relu(h)
        h = self.bn3.forward(self.conv3.forward(h, training), training)
        if self.down_conv is not None:
            shortcut = self.down_bn.forward(
                self.down_conv.forward(x, training), training)
        else:
            shortcut = x
        return ops.relu(h + shortcut)


@dataclass
class ResNetConfig:
    """Construction parameters for the bottleneck residual family."""

    blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    base_width: int = 64
    n_classes: int = 4
    head_hidden: int = 512
    head_dropout: tuple[float, float] = (0.25, 0.5)
    seed: int = 0

    def __post_init__(self):
        if len(self.blocks) != 4 or any(b < 1 for b in self.blocks):
            raise ConfigError(f"blocks must be 4 positive counts, got {self.blocks}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")

    def to_dict(self) -> dict:
        return {"blocks": list(self.blocks), "base_width": self.base_width,
                "n_classes": self.n_classes, "head_hidden": self.head_hidden,
                "head_dropout": list(self.head_dropout), "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "ResNetConfig":
        return ResNetConfig(blocks=tuple(d["blocks"]), base_width=d["base_width"],
                            n_classes=d["n_classes"], head_hidden=d["head_hidden"],
                            head_dropout=tuple(d["head_dropout"]), seed=d["seed"])

    @staticmethod
    def mini(n_classes: int = 4, seed: int = 0) -> "ResNetConfig":
        """Desk-scale variant: one block per stage, narrow stem."""
        return ResNetConfig(blocks=(1, 1, 1, 1), base_width=16,
                            n_classes=n_classes, seed=seed)


@dataclass
class Model:
    """Ordered layers with a named parameter table and group assignment."""

    layers: list[tuple[str, Layer]]
    sections: list[str]                 # parallel to layers
    config: ResNetConfig
    n_groups: int = 2
    group_of_section: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.group_of_section:
            self.group_of_section = {s: 0 for s in self._section_order()}
            self.group_of_section[HEAD_SECTION] = 1

    def _section_order(self) -> list[str]:
        seen: list[str] = []
        for s in self.sections:
            if s not in seen:
                seen.append(s)
        return seen

    # -- parameter access ------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for (name, layer) in self.layers:
            for pname, p in layer.params().items():
                full = f"{name}.{pname}"
                if full in out:
                    raise ConfigError(f"duplicate parameter name {full}")
                out[full] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for (name, layer) in self.layers:
            for bname, b in layer.buffers().items():
                out[f"{name}.{bname}"] = b
        return out

    def param_group(self, param_name: str) -> int:
        layer_name = param_name.split(".")[0]
        idx = next(i for i, (n, _) in enumerate(self.layers) if n == layer_name)
        return self.group_of_section[self.sections[idx]]

    def param_frozen(self, param_name: str) -> bool:
        layer_name = param_name.split(".")[0]
        layer = next(l for n, l in self.layers if n == layer_name)
        return layer.frozen

    def head_start(self) -> int:
        return self.sections.index(HEAD_SECTION)

    def body_param_names(self) -> list[str]:
        head = self.head_start()
        names = []
        for i, (name, layer) in enumerate(self.layers):
            if i < head:
                names.extend(f"{name}.{p}" for p in layer.params())
        return names

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())

    # -- execution ---------------------------------------------------------------

    MIN_INPUT = 32

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[2] < self.MIN_INPUT or x.shape[3] < self.MIN_INPUT:
            raise DimensionError(
                f"model forward needs NCHW input of at least "
                f"{self.MIN_INPUT}x{self.MIN_INPUT}, got {x.shape}")
        h = x
        for (name, layer) in self.layers:
            h = layer.forward(h, training)
        return h

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()

    # -- state snapshots -----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Params and buffers as one named table (checkpoint payload)."""
        out = {f"param.{k}": v.data for k, v in self.named_params().items()}
        out.update({f"buffer.{k}": v for k, v in self.named_buffers().items()})
        return out

    def load_state_arrays(self, table: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        buffers = self.named_buffers()
        for key, arr in table.items():
            kind, _, name = key.partition(".")
            if kind == "param":
                if name not in params:
                    raise ConfigError(f"unknown parameter {name} in state table")
                if params[name].shape != arr.shape:
                    raise DimensionError(
                        f"parameter {name}: shape {arr.shape} != {params[name].shape}")
                params[name].data[...] = arr
            elif kind == "buffer":
                if name not in buffers:
                    raise ConfigError(f"unknown buffer {name} in state table")
                buffers[name][...] = arr
            else:
                raise ConfigError(f"bad state key {key}")

    def reseed_dropout(self, seed: int) -> None:
        """Give every dropout layer a fresh deterministic stream."""
        for i, (name, layer) in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.reseed(seed + 7919 * i)

    def clone(self) -> "Model":
        """Deep copy: same architecture, values, groups, and freeze flags.

        Dropout streams restart from their configured seeds.
        """
        other = build_resnet(self.config)
        other.load_state_arrays(self.state_arrays())
        other.n_groups = self.n_groups
        other.group_of_section = dict(self.group_of_section)
        for (_, mine), (_, theirs) in zip(self.layers, other.layers):
            theirs.frozen = mine.frozen
            for p_mine, p_theirs in zip(mine.params().values(),
                                        theirs.params().values()):
                p_theirs.requires_grad = p_mine.requires_grad
            for prim_mine, prim_theirs in zip(_primitive_layers(mine),
                                              _primitive_layers(theirs)):
                if isinstance(prim_mine, BatchNorm):
                    prim_theirs.stats_frozen = prim_mine.stats_frozen
        return other


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

_STAGE_PLANES = (1, 2, 4, 8)  # multiples of base_width per stage


def _make_head(rng: np.random.Generator, in_ch: int, cfg: ResNetConfig,
               n_classes: int) -> list[tuple[str, Layer]]:
    p1, p2 = cfg.head_dropout
    pooled = 2 * in_ch
    return [
        ("head_pool", AdaptiveConcatPool()),
        ("head_flatten", Flatten()),
        ("head_bn1", BatchNorm(pooled)),
        ("head_drop1", Dropout(p1, seed=int(rng.integers(2 ** 31)))),
        ("head_lin1", Linear(rng, pooled, cfg.head_hidden)),
        ("head_relu", ReLU()),
        ("head_bn2", BatchNorm(cfg.head_hidden)),
        ("head_drop2", Dropout(p2, seed=int(rng.integers(2 ** 31)))),
        ("head_lin2", Linear(rng, cfg.head_hidden, n_classes)),
    ]


def build_resnet(config: ResNetConfig) -> Model:
    """Bottleneck residual network with the pooled two-layer head.

    The stem is a 7x7 stride-2 convolution plus a 3x3 stride-2 max pool;
    four stages of bottleneck blocks follow.  Any input of at least 32x32
    produces (N, n_classes) logits, regardless of training size.
    """
    rng = np.random.default_rng(config.seed)
    layers: list[tuple[str, Layer]] = []
    sections: list[str] = []

    def put(name: str, layer: Layer, section: str) -> None:
        layers.append((name, layer))
        sections.append(section)

    width = config.base_width
    put("stem_conv", Conv2d(rng, 3, width, 7, stride=2, padding=3), "stem")
    put("stem_bn", BatchNorm(width), "stem")
    put("stem_relu", ReLU(), "stem")
    put("stem_pool", MaxPool2d(3, 2, 1), "stem")

    in_ch = width
    for stage_idx, (count, mult) in enumerate(zip(config.blocks, _STAGE_PLANES), 1):
        planes = width * mult
        for block_idx in range(count):
            stride = 2 if (stage_idx > 1 and block_idx == 0) else 1
            put(f"s{stage_idx}b{block_idx}",
                Bottleneck(rng, in_ch, planes, stride), f"stage{stage_idx}")
            in_ch = planes * Bottleneck.expansion

    for name, layer in _make_head(rng, in_ch, config, config.n_classes):
        put(name, layer, HEAD_SECTION)

    model = Model(layers=layers, sections=sections, config=config)
    return assign_layer_groups(model, 2)


def replace_head(model: Model, n_classes: int, seed: int = 0) -> Model:
    """Swap the head for a freshly initialized one; body bytes untouched."""
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    head = model.head_start()
    rng = np.random.default_rng(seed)
    body_out = 0
    for name, layer in model.layers[:head]:
        if isinstance(layer, Bottleneck):
            body_out = layer.conv3.weight.shape[0]
        elif isinstance(layer, Conv2d):
            body_out = layer.weight.shape[0]
    cfg = model.config
    new_cfg = ResNetConfig(blocks=cfg.blocks, base_width=cfg.base_width,
                           n_classes=n_classes, head_hidden=cfg.head_hidden,
                           head_dropout=cfg.head_dropout, seed=cfg.seed)
    new_layers = list(model.layers[:head])
    new_sections = list(model.sections[:head])
    for name, layer in _make_head(rng, body_out, new_cfg, n_classes):
        new_layers.append((name, layer))
        new_sections.append(HEAD_SECTION)
    out = Model(layers=new_layers, sections=new_sections, config=new_cfg)
    return assign_layer_groups(out, model.n_groups)


def assign_layer_groups(model: Model, n_groups: int) -> Model:
    """Partition sections into contiguous groups; the head is always last.

    Group ids are monotone with depth, group 0 contains the stem, and the
    final group is exactly the head.  Body sections are distributed evenly
    over the remaining groups.
    """
    sections = model._section_order()
    if n_groups < 2:
        raise ConfigError(f"n_groups must be >= 2, got {n_groups}")
    if n_groups > len(sections):
        raise ConfigError(
            f"n_groups={n_groups} exceeds the {len(sections)} layer sections")
    body = [s for s in sections if s != HEAD_SECTION]
    n_body_groups = n_groups - 1
    assignment: dict[str, int] = {}
    for i, section in enumerate(body):
        assignment[section] = (i * n_body_groups) // len(body)
    assignment[HEAD_SECTION] = n_groups - 1
    model.n_groups = n_groups
    model.group_of_section = assignment
    return model


def _primitive_layers(layer: Layer) -> Iterator[Layer]:
    if isinstance(layer, Bottleneck):
        for _, sub in layer._sublayers():
            yield sub
    else:
        yield layer


def set_frozen(model: Model, mode: str, freeze_stats: bool = True) -> Model:
    """Freeze policy: 'head_only' trains just the head, 'all_trainable' all.

    By default a frozen body also pins its batchnorm running statistics,
    so it is bit-stable across optimizer steps; ``freeze_stats=False``
    lets the stats keep adapting while the parameters stay fixed.
    """
    if mode not in ("head_only", "all_trainable"):
        raise ConfigError(f"unknown freeze mode {mode!r}")
    head = model.head_start()
    for i, (name, layer) in enumerate(model.layers):
        layer.frozen = (mode == "head_only" and i < head)
        for _, p in layer.params().items():
            p.requires_grad = not layer.frozen
        for prim in _primitive_layers(layer):
            if isinstance(prim, BatchNorm):
                prim.stats_frozen = layer.frozen and freeze_stats
    return model
