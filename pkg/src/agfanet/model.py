"""AGFA-Net: a 3D U-Net with optional FRM, SAFA and HFIM attention blocks.

The network is held as a flat, ordered mapping of named parameter tensors
(:class:`NetworkState`). Blocks are plain functions that read their
parameters through a :class:`Scope`, so each block can be exercised alone
with hand-built parameters.

Layout choices:

* FRM runs on every skip connection before concatenation and on every
  decoder block output.
* SAFA self-attention flattens Q, K, V to ``C x L`` (``L = D*H*W``) and
  attends over spatial positions: ``Y + V @ softmax(Q^T K)^T``. It only runs
  at the bottleneck, where ``L`` is small.
* The HFIM gate is a single-channel sigmoid map from a 1x1x1 projection of
  ``concat(y_low, upsample(y_high))``. Fusion cascades right to left, each
  level consuming the fused output of the coarser one.
* Downsampling is 2x max pooling, upsampling is trilinear x2.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .ops import ConvParams, RunningStats
from .tensor import DTYPE, ShapeError, Tensor

GROUPS = 4


class ConfigError(ValueError):
    """A ModelConfig violates one of its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 8
    depth: int = 5
    use_frm: bool = False
    use_safa: bool = False
    safa_dilations: Tuple[int, ...] = (1, 2, 3, 4)
    use_safa_self_attention: bool = True
    use_hfim: bool = False
    frm_reduction: int = 8
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "safa_dilations", tuple(int(d) for d in self.safa_dilations))
        self.validate()

    def validate(self) -> None:
        if self.base_channels <= 0 or self.base_channels % GROUPS:
            raise ConfigError(f"base_channels must be a positive multiple of 4, got {self.base_channels}")
        if self.depth < 2:
            raise ConfigError(f"depth must be at least 2, got {self.depth}")
        if self.frm_reduction <= 0 or self.base_channels // self.frm_reduction < 1:
            raise ConfigError(
                f"base_channels / frm_reduction must be >= 1 ({self.base_channels} / {self.frm_reduction})"
            )
        if not self.safa_dilations or any(d <= 0 for d in self.safa_dilations):
            raise ConfigError(f"safa_dilations must be positive integers, got {self.safa_dilations}")
        if GROUPS % len(self.safa_dilations):
            raise ConfigError(f"number of safa_dilations must divide {GROUPS}, got {len(self.safa_dilations)}")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ConfigError("only single-channel input and a single logit channel are supported")

    def channels(self, level: int) -> int:
        """Feature width at encoder/decoder level ``level`` (1-based)."""
        return self.base_channels * 2 ** (level - 1)

    @property
    def multiple(self) -> int:
        """Spatial extents must be divisible by this."""
        return 2 ** (self.depth - 1)

    def group_dilations(self) -> Tuple[int, ...]:
        d = self.safa_dilations
        return tuple(d[i % len(d)] for i in range(GROUPS))


# -- config text format ---------------------------------------------------------

def config_to_text(cfg: ModelConfig) -> str:
    lines = ["# AGFA-Net model configuration"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, tuple):
            s = ",".join(str(i) for i in v)
        else:
            s = str(v)
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are rejected."""
    known = {f.name: f for f in fields(ModelConfig)}
    defaults = ModelConfig()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        current = getattr(defaults, key)
        try:
            if isinstance(current, bool):
                if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(val)
                values[key] = val.lower() in ("true", "1", "yes")
            elif isinstance(current, tuple):
                values[key] = tuple(int(p) for p in val.replace(" ", "").split(",") if p)
            else:
                values[key] = int(val)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {val!r} for {key}") from None
    return ModelConfig(**values)


def table2_configs(base_channels: int = 8, **overrides) -> List[Tuple[str, ModelConfig]]:
    """The eleven ablation rows: Baseline, Net 1-9 and the full network.

    Nets 2-5 run SAFA with a single dilation rate (1, 2, 3, 4). The column
    checked by Nets 6, 8 and 9 is HFIM.
    """
    base = ModelConfig(base_channels=base_channels, **overrides)

    def row(**kw) -> ModelConfig:
        return replace(base, **kw)

    return [
        ("Baseline", row()),
        ("Net 1", row(use_frm=True)),
        ("Net 2", row(use_safa=True, safa_dilations=(1,))),
        ("Net 3", row(use_safa=True, safa_dilations=(2,))),
        ("Net 4", row(use_safa=True, safa_dilations=(3,))),
        ("Net 5", row(use_safa=True, safa_dilations=(4,))),
        ("Net 6", row(use_hfim=True)),
        ("Net 7", row(use_frm=True, use_safa=True, safa_dilations=(3,))),
        ("Net 8", row(use_frm=True, use_hfim=True)),
        ("Net 9", row(use_safa=True, safa_dilations=(3,), use_hfim=True)),
        ("AGFA-Net", row(use_frm=True, use_safa=True, safa_dilations=(1, 2, 3, 4), use_hfim=True)),
    ]


def named_config(name: str, base_channels: int = 8) -> ModelConfig:
    """Look up an ablation row by name; ``baseline``/``agfa`` and ``net1``..``net9`` also work."""
    key = name.lower().replace(" ", "").replace("-", "").replace("_", "")
    aliases = {"agfa": "agfanet"}
    key = aliases.get(key, key)
    for row_name, cfg in table2_configs(base_channels):
        if row_name.lower().replace(" ", "").replace("-", "") == key:
            return cfg
    raise ConfigError(f"unknown configuration name {name!r}")


# -- parameter containers ----------------------------------------------------------

@dataclass
class NetworkState:
    """All learnable tensors and batch-norm statistics of one network."""

    config: ModelConfig
    params: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, RunningStats] = field(default_factory=dict)
    training: bool = False

    def scope(self, prefix: str = "") -> "Scope":
        return Scope(self, prefix)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def train(self) -> "NetworkState":
        self.training = True
        return self

    def eval(self) -> "NetworkState":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "NetworkState":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return NetworkState(self.config, params, buffers, self.training)

    def load_arrays(self, params: Dict[str, np.ndarray], buffers: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> None:
        if set(params) != set(self.params):
            missing = set(self.params) - set(params)
            extra = set(params) - set(self.params)
            raise KeyError(f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, v in params.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=DTYPE)
        for k, (m, v) in buffers.items():
            self.buffers[k] = RunningStats(np.array(m, dtype=DTYPE), np.array(v, dtype=DTYPE), True)


class Scope:
    """Prefixed view into a NetworkState's parameters and statistics."""

    def __init__(self, net: NetworkState, prefix: str = ""):
        self.net = net
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.net.params[self.prefix + name]

    def __contains__(self, name: str) -> bool:
        return self.prefix + name in self.net.params

    def stats(self, name: str) -> RunningStats:
        return self.net.buffers[self.prefix + name]

    def child(self, name: str) -> "Scope":
        return Scope(self.net, f"{self.prefix}{name}.")

    @property
    def mode(self) -> str:
        return "train" if self.net.training else "eval"


class ParamBuilder:
    """Creates parameters in a fixed order from one seeded generator.

    Weights are He-uniform (bound ``sqrt(6 / fan_in)``); biases and BN shifts
    start at zero, BN scales at one.
    """

    def __init__(self, net: NetworkState, rng: np.random.Generator):
        self.net = net
        self.rng = rng

    def _add(self, name: str, arr: np.ndarray) -> None:
        if name in self.net.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.net.params[name] = Tensor(arr, requires_grad=True, name=name)

    def uniform(self, name: str, shape: tuple, fan_in: int) -> None:
        bound = np.sqrt(6.0 / fan_in)
        self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def conv(self, name: str, cin: int, cout: int, kernel=(3, 3, 3), bias: bool = True) -> None:
        kernel = tuple(kernel)
        self.uniform(f"{name}.weight", (cout, cin) + kernel, cin * int(np.prod(kernel)))
        if bias:
            self._add(f"{name}.bias", np.zeros(cout))

    def bn(self, name: str, channels: int) -> None:
        self._add(f"{name}.scale", np.ones(channels))
        self._add(f"{name}.shift", np.zeros(channels))
        stats = RunningStats.empty(channels)
        stats.initialized = True
        self.net.buffers[name] = stats

    def mlp(self, name: str, channels: int, hidden: int) -> None:
        self.uniform(f"{name}.fc1", (channels, hidden), channels)
        self.uniform(f"{name}.fc2", (hidden, channels), hidden)


# -- block parameter layouts ---------------------------------------------------------

def frm_hidden(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


def add_frm(b: ParamBuilder, name: str, channels: int, reduction: int) -> None:
    b.mlp(f"{name}.mlp", channels, frm_hidden(channels, reduction))
    b.conv(f"{name}.spatial", 2, 1, (7, 7, 7))


def add_safa(b: ParamBuilder, name: str, channels: int, self_attention: bool) -> None:
    if channels % GROUPS:
        raise ConfigError(f"SAFA needs channels divisible by {GROUPS}, got {channels}")
    g = channels // GROUPS
    for n in range(GROUPS):
        b.conv(f"{name}.group{n}", g, g, (3, 3, 3))
    if self_attention:
        for proj, kernel in (("q", (3, 1, 1)), ("k", (1, 3, 1)), ("v", (1, 1, 3))):
            b.conv(f"{name}.{proj}.conv", channels, channels, kernel, bias=False)
            b.bn(f"{name}.{proj}.bn", channels)


def add_hfim(b: ParamBuilder, name: str, low_channels: int, high_channels: int) -> None:
    b.conv(f"{name}.gate", low_channels + high_channels, 1, (1, 1, 1))
    b.conv(f"{name}.fuse", low_channels, low_channels, (3, 3, 3))


def add_double_conv(b: ParamBuilder, name: str, cin: int, cout: int) -> None:
    b.conv(f"{name}.conv1", cin, cout, bias=False)
    b.bn(f"{name}.bn1", cout)
    b.conv(f"{name}.conv2", cout, cout, bias=False)
    b.bn(f"{name}.bn2", cout)


def block_params(kind: str, channels: int, seed: int = 0, **kw) -> Scope:
    """Stand-alone parameters for one block, for testing blocks in isolation.

    ``kind`` is ``frm``, ``safa`` or ``hfim``. Extra keywords:
    ``reduction`` (frm), ``self_attention`` (safa), ``high_channels`` (hfim).
    """
    net = NetworkState(ModelConfig(), training=kw.pop("training", True))
    b = ParamBuilder(net, np.random.default_rng(seed))
    if kind == "frm":
        add_frm(b, "blk", channels, kw.get("reduction", 8))
    elif kind == "safa":
        add_safa(b, "blk", channels, kw.get("self_attention", True))
    elif kind == "hfim":
        add_hfim(b, "blk", channels, kw.get("high_channels", 2 * channels))
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    return net.scope("blk.")


# -- blocks -----------------------------------------------------------------------

def _channel_axis(t: Tensor) -> int:
    return 1 if t.ndim == 5 else 0


def shared_mlp(v: Tensor, scope: Scope) -> Tensor:
    """C -> C/r -> C, ReLU hidden, no biases; ``v`` is ``[C]`` or ``[N, C]``."""
    flat = v if v.ndim == 2 else ops.reshape(v, (1, v.shape[0]))
    h = ops.relu(ops.matmul(flat, scope["fc1"]))
    out = ops.matmul(h, scope["fc2"])
    return out if v.ndim == 2 else ops.reshape(out, v.shape)


def channel_attention(y: Tensor, scope: Scope) -> Tensor:
    """Channel gate sigmoid(MLP(avg) + MLP(max)) with the MLP shared by both branches."""
    mlp = scope.child("mlp")
    avg = ops.global_pool_channelwise(y, "avg")
    mx = ops.global_pool_channelwise(y, "max")
    return ops.sigmoid(ops.add(shared_mlp(avg, mlp), shared_mlp(mx, mlp)))


def spatial_attention(y: Tensor, scope: Scope) -> Tensor:
    """Single-channel spatial gate from a 7x7x7 conv over [mean_c; max_c]."""
    avg = ops.spatial_pool_across_channels(y, "avg")
    mx = ops.spatial_pool_across_channels(y, "max")
    pooled = ops.concat([avg, mx], axis=_channel_axis(y))
    conv = scope.child("spatial")
    return ops.sigmoid(ops.conv3d(pooled, conv["weight"], conv["bias"], padding=3))


def frm_forward(y: Tensor, scope: Scope) -> Tensor:
    refined = ops.mul(y, channel_attention(y, scope))
    return ops.mul(refined, spatial_attention(refined, scope))


def _conv_bn_relu(x: Tensor, scope: Scope, conv: str, bn: str, padding=None) -> Tensor:
    z = ops.conv3d(x, scope[f"{conv}.weight"], None, padding=padding)
    z = ops.batch_norm(z, scope[f"{bn}.scale"], scope[f"{bn}.shift"], scope.stats(bn), scope.mode)
    return ops.relu(z)


def safa_multires(y: Tensor, scope: Scope, dilations: Sequence[int]) -> Tensor:
    """Split into four channel groups, self-gated dilated conv per group, re-concatenate."""
    axis = _channel_axis(y)
    c = y.shape[axis]
    if c % GROUPS:
        raise ShapeError(f"SAFA needs channels divisible by {GROUPS}, got {c}")
    parts = ops.split(y, [c // GROUPS] * GROUPS, axis=axis)
    gated = []
    for n, (part, d) in enumerate(zip(parts, dilations)):
        g = scope.child(f"group{n}")
        z = ops.conv3d(part, g["weight"], g["bias"], dilation=d)
        gated.append(ops.mul(ops.sigmoid(z), z))
    return ops.concat(gated, axis=axis)


def safa_attention_matrix(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic ``L x L`` matrix softmax(Q^T K) from ``[.., C, L]`` inputs."""
    return ops.softmax(ops.matmul(ops.swap_last(q), k), axis=-1)


def safa_forward(y: Tensor, scope: Scope, config: ModelConfig) -> Tensor:
    feats = safa_multires(y, scope, config.group_dilations())
    if not config.use_safa_self_attention:
        return feats
    shape = feats.shape
    lead = shape[:-3]
    L = int(np.prod(shape[-3:]))
    q = _conv_bn_relu(feats, scope, "q.conv", "q.bn")
    k = _conv_bn_relu(feats, scope, "k.conv", "k.bn")
    v = _conv_bn_relu(feats, scope, "v.conv", "v.bn")
    q, k, v = (ops.reshape(t, lead + (L,)) for t in (q, k, v))
    attn = safa_attention_matrix(q, k)
    context = ops.matmul(v, ops.swap_last(attn))
    return ops.add(feats, ops.reshape(context, shape))


def hfim_fuse_level(y_low: Tensor, y_high: Tensor, scope: Scope) -> Tensor:
    """Fuse a decoder level with the next-coarser one through a sigmoid gate."""
    low_sp, high_sp = y_low.shape[-3:], y_high.shape[-3:]
    if y_low.ndim != y_high.ndim or any(2 * h != l for h, l in zip(high_sp, low_sp)):
        raise ShapeError(f"hfim: coarse extents {high_sp} are not half of fine extents {low_sp}")
    axis = _channel_axis(y_low)
    up = ops.upsample_trilinear(y_high, 2)
    gate_conv = scope.child("gate")
    gate = ops.sigmoid(ops.conv3d(ops.concat([y_low, up], axis=axis), gate_conv["weight"], gate_conv["bias"]))
    fuse = scope.child("fuse")
    return ops.conv3d(ops.mul(y_low, gate), fuse["weight"], fuse["bias"])


def double_conv(x: Tensor, scope: Scope) -> Tensor:
    x = _conv_bn_relu(x, scope, "conv1", "bn1")
    return _conv_bn_relu(x, scope, "conv2", "bn2")


# -- whole network --------------------------------------------------------------------

def build_network(config: ModelConfig, seed: int = 0) -> NetworkState:
    """Deterministically create every parameter for ``config``."""
    config.validate()
    net = NetworkState(config)
    b = ParamBuilder(net, np.random.default_rng(seed))
    depth = config.depth
    cin = config.in_channels
    for level in range(1, depth + 1):
        c = config.channels(level)
        add_double_conv(b, f"enc{level}", cin, c)
        cin = c
    if config.use_safa:
        add_safa(b, "safa", config.channels(depth), config.use_safa_self_attention)
    for level in range(depth - 1, 0, -1):
        c = config.channels(level)
        if config.use_frm:
            add_frm(b, f"frm_skip{level}", c, config.frm_reduction)
        add_double_conv(b, f"dec{level}", c + config.channels(level + 1), c)
        if config.use_frm:
            add_frm(b, f"frm_dec{level}", c, config.frm_reduction)
    if config.use_hfim:
        for level in range(depth - 2, 0, -1):
            add_hfim(b, f"hfim{level}", config.channels(level), config.channels(level + 1))
    b.conv("head", config.channels(1), config.out_channels, (1, 1, 1))
    return net


def check_extents(config: ModelConfig, extents: Sequence[int]) -> None:
    m = config.multiple
    bad = [n for n in extents if n % m]
    if bad:
        raise ShapeError(f"spatial extents {tuple(extents)} must each be a multiple of {m} for depth {config.depth}")


def forward_full(net: NetworkState, x: Tensor) -> Tensor:
    """Logits with the input's spatial extents; ``x`` is ``[1,D,H,W]`` or ``[N,1,D,H,W]``."""
    cfg = net.config
    if x.ndim not in (4, 5) or x.shape[-4] != cfg.in_channels:
        raise ShapeError(f"input must be [1,D,H,W] or [N,1,D,H,W], got {x.shape}")
    check_extents(cfg, x.shape[-3:])
    s = net.scope()
    skips = []
    h = x
    for level in range(1, cfg.depth + 1):
        if level > 1:
            h = ops.pool3d(h, "max", 2, 2)
        h = double_conv(h, s.child(f"enc{level}"))
        skips.append(h)
    if cfg.use_safa:
        h = safa_forward(h, s.child("safa"), cfg)
    axis = _channel_axis(x)
    decoded = {}
    for level in range(cfg.depth - 1, 0, -1):
        skip = skips[level - 1]
        if cfg.use_frm:
            skip = frm_forward(skip, s.child(f"frm_skip{level}"))
        h = ops.concat([skip, ops.upsample_trilinear(h, 2)], axis=axis)
        h = double_conv(h, s.child(f"dec{level}"))
        if cfg.use_frm:
            h = frm_forward(h, s.child(f"frm_dec{level}"))
        decoded[level] = h
    if cfg.use_hfim:
        fused = decoded[cfg.depth - 1]
        for level in range(cfg.depth - 2, 0, -1):
            fused = hfim_fuse_level(decoded[level], fused, s.child(f"hfim{level}"))
        h = fused
    head = s.child("head")
    return ops.conv3d(h, head["weight"], head["bias"])
