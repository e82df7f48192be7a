"""Single-path MobileNetV2 search space, supernet construction, path
execution and exact MAC counting."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from . import engine
from .engine import BnParams, DTYPE

Architecture = tuple  # tuple[int, ...], one candidate index per searchable layer


class CandidateSpec(NamedTuple):
    kernel: int
    expansion: int

    def __str__(self) -> str:
        return f"k{self.kernel}e{self.expansion}"


CANDIDATES: tuple[CandidateSpec, ...] = tuple(
    CandidateSpec(k, e) for k in (3, 5, 7) for e in (3, 6)
)
NUM_CANDIDATES = len(CANDIDATES)


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    stride: int
    candidates: tuple[CandidateSpec, ...] = CANDIDATES

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass(frozen=True)
class SpaceConfig:
    """Network skeleton. ``layers`` holds (out_channels, stride) per searchable layer."""

    image_size: int = 32
    in_channels: int = 3
    num_classes: int = 10
    stem_channels: int = 16
    stem_stride: int = 2
    layers: tuple = ((24, 2), (24, 1), (32, 2), (32, 1), (64, 2), (64, 1), (96, 1), (96, 1))
    head_channels: int = 128
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((int(c), int(s)) for c, s in self.layers))
        if not self.layers:
            raise ValueError("search space needs at least one layer")
        for c, s in self.layers:
            if s not in (1, 2) or c < 1:
                raise ValueError(f"bad layer (out_channels={c}, stride={s})")
        if self.stem_stride not in (1, 2):
            raise ValueError("stem stride must be 1 or 2")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_candidates(self) -> int:
        return NUM_CANDIDATES

    def layer_specs(self) -> list[LayerSpec]:
        specs, cin = [], self.stem_channels
        for cout, stride in self.layers:
            specs.append(LayerSpec(cin, cout, stride))
            cin = cout
        return specs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [list(x) for x in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SpaceConfig":
        d = dict(d)
        layers = []
        prev = d.get("stem_channels", cls.stem_channels)
        for item in d.get("layers", cls.layers):
            if isinstance(item, dict):
                if "in" in item and item["in"] != prev:
                    raise ValueError(f"inconsistent channel plan: layer expects {item['in']} inputs, "
                                     f"previous layer gives {prev}")
                item = (item["out"], item.get("stride", 1))
            layers.append(tuple(item))
            prev = item[0]
        d["layers"] = tuple(layers)
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


def validate_arch(space: SpaceConfig, arch: Sequence[int]) -> Architecture:
    arch = tuple(int(a) for a in arch)
    if len(arch) != space.num_layers:
        raise ValueError(f"architecture has {len(arch)} genes, space has {space.num_layers} layers")
    if any(a < 0 or a >= space.num_candidates for a in arch):
        raise ValueError(f"architecture {arch} has an index outside [0, {space.num_candidates})")
    return arch


def describe_arch(arch: Sequence[int]) -> str:
    return " ".join(str(CANDIDATES[a]) for a in arch)


# ---------------------------------------------------------------- modules


@dataclass
class ConvBn:
    """conv (no bias) -> BN -> optional ReLU."""

    name: str
    weight: np.ndarray
    bn: BnParams
    stride: int = 1
    padding: int = 0
    groups: int = 1
    relu: bool = True

    def tensors(self) -> Iterator[tuple[str, str, np.ndarray]]:
        yield f"{self.name}.conv", "conv", self.weight
        yield f"{self.name}.bn.gamma", "bn", self.bn.gamma
        yield f"{self.name}.bn.beta", "bn", self.bn.beta
        yield f"{self.name}.bn.running_mean", "stat", self.bn.running_mean
        yield f"{self.name}.bn.running_var", "stat", self.bn.running_var

    def forward(self, x, train):
        y = engine.conv2d_forward(x, self.weight, self.stride, self.padding, self.groups)
        y, bc = engine.bn_forward(y, self.bn, train)
        mask = None
        if self.relu:
            y, mask = engine.relu(y)
        return y, (x, bc, mask)

    def backward(self, g, cache, want, grads, need_input=True):
        x, bc, mask = cache
        if mask is not None:
            g = engine.relu_backward(g, mask)
        g, dgamma, dbeta = engine.bn_backward(g, bc)
        if want(f"{self.name}.bn.gamma", "bn"):
            grads[f"{self.name}.bn.gamma"] = dgamma
            grads[f"{self.name}.bn.beta"] = dbeta
        if want(f"{self.name}.conv", "conv"):
            grads[f"{self.name}.conv"] = engine.conv2d_backward_weight(
                g, x, self.weight.shape, self.stride, self.padding, self.groups)
        if not need_input:
            return None
        return engine.conv2d_backward_input(g, self.weight, x.shape, self.stride, self.padding, self.groups)


@dataclass
class CandidateOp:
    """Inverted residual block; ``project`` holds the op's last BN."""

    spec: CandidateSpec
    expand: ConvBn
    depthwise: ConvBn
    project: ConvBn
    residual: bool

    @property
    def project_bn(self) -> BnParams:
        return self.project.bn

    def units(self) -> tuple[ConvBn, ConvBn, ConvBn]:
        return self.expand, self.depthwise, self.project

    def tensors(self):
        for u in self.units():
            yield from u.tensors()

    def forward(self, x, train):
        caches = []
        y = x
        for u in self.units():
            y, c = u.forward(y, train)
            caches.append(c)
        if self.residual:
            y = y + x
        return y, caches

    def backward(self, g, caches, want, grads):
        g_skip = g if self.residual else None
        for u, c in zip(reversed(self.units()), reversed(caches)):
            g = u.backward(g, c, want, grads)
        return g + g_skip if g_skip is not None else g


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def _conv_bn(rng, space, name, cin, cout, k, stride, groups=1, relu=True) -> ConvBn:
    w = _kaiming_uniform(rng, (cout, cin // groups, k, k), (cin // groups) * k * k)
    return ConvBn(name, w, BnParams.create(cout, space.bn_momentum, space.bn_eps),
                  stride=stride, padding=k // 2, groups=groups, relu=relu)


def _candidate_op(rng, space, name, layer: LayerSpec, spec: CandidateSpec) -> CandidateOp:
    hidden = layer.in_channels * spec.expansion
    return CandidateOp(
        spec=spec,
        expand=_conv_bn(rng, space, f"{name}.expand", layer.in_channels, hidden, 1, 1),
        depthwise=_conv_bn(rng, space, f"{name}.depthwise", hidden, hidden, spec.kernel, layer.stride,
                           groups=hidden),
        project=_conv_bn(rng, space, f"{name}.project", hidden, layer.out_channels, 1, 1, relu=False),
        residual=layer.residual,
    )


class _Network:
    """Shared stem/head plumbing for the supernet and standalone subnets."""

    space: SpaceConfig
    stem: ConvBn
    head: ConvBn
    fc_weight: np.ndarray
    fc_bias: np.ndarray

    def _init_stem_head(self, rng):
        s = self.space
        self.stem = _conv_bn(rng, s, "stem", s.in_channels, s.stem_channels, 3, s.stem_stride)
        last = s.layers[-1][0]
        self.head = _conv_bn(rng, s, "head", last, s.head_channels, 1, 1)
        self.fc_weight = _kaiming_uniform(rng, (s.num_classes, s.head_channels), s.head_channels)
        self.fc_bias = np.zeros(s.num_classes, DTYPE)

    def path(self, arch) -> list[CandidateOp]:
        raise NotImplementedError

    def all_ops(self) -> Iterator[CandidateOp]:
        raise NotImplementedError

    def tensors(self) -> dict[str, tuple[str, np.ndarray]]:
        """All tensors by name, mapped to (kind, array). Kinds: conv, bn, stat, linear."""
        out = {}
        for name, kind, arr in self.stem.tensors():
            out[name] = (kind, arr)
        for op in self.all_ops():
            for name, kind, arr in op.tensors():
                out[name] = (kind, arr)
        for name, kind, arr in self.head.tensors():
            out[name] = (kind, arr)
        out["fc.weight"] = ("linear", self.fc_weight)
        out["fc.bias"] = ("linear", self.fc_bias)
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        return {n: a for n, (k, a) in self.tensors().items() if k != "stat"}


class Supernet(_Network):
    def __init__(self, space: SpaceConfig, seed: int):
        self.space = space
        self.layer_specs = space.layer_specs()
        rng = np.random.default_rng(seed)
        self._init_stem_head(rng)
        self.ops: list[list[CandidateOp]] = [
            [_candidate_op(rng, space, f"layers.{l}.{n}", spec, cand) for n, cand in enumerate(spec.candidates)]
            for l, spec in enumerate(self.layer_specs)
        ]

    @property
    def search_dims(self) -> tuple[int, int]:
        return self.space.num_layers, self.space.num_candidates

    def path(self, arch):
        arch = validate_arch(self.space, arch)
        return [self.ops[l][a] for l, a in enumerate(arch)]

    def all_ops(self):
        for row in self.ops:
            yield from row


class Subnet(_Network):
    """A standalone single-path network (one op per layer)."""

    def __init__(self, space: SpaceConfig, arch, seed: int | None = None):
        self.space = space
        self.arch = validate_arch(space, arch)
        self.ops: list[CandidateOp] = []
        if seed is None:
            return
        rng = np.random.default_rng(seed)
        self._init_stem_head(rng)
        for l, (spec, a) in enumerate(zip(space.layer_specs(), self.arch)):
            self.ops.append(_candidate_op(rng, space, f"layers.{l}.{a}", spec, spec.candidates[a]))

    def path(self, arch=None):
        if arch is not None and validate_arch(self.space, arch) != self.arch:
            raise ValueError(f"subnet implements {self.arch}, asked for {tuple(arch)}")
        return self.ops

    def all_ops(self):
        return iter(self.ops)


def build_supernet(space: SpaceConfig, seed: int) -> Supernet:
    return Supernet(space, seed)


def build_subnet(space: SpaceConfig, arch, seed: int) -> Subnet:
    """Fresh random initialisation of a single architecture."""
    return Subnet(space, arch, seed)


def extract_subnet(supernet: Supernet, arch) -> Subnet:
    """Deep copy of the path ``arch`` with all its inherited weights."""
    sub = Subnet(supernet.space, arch)
    sub.stem = copy.deepcopy(supernet.stem)
    sub.head = copy.deepcopy(supernet.head)
    sub.fc_weight = supernet.fc_weight.copy()
    sub.fc_bias = supernet.fc_bias.copy()
    sub.ops = [copy.deepcopy(op) for op in supernet.path(arch)]
    return sub


# ---------------------------------------------------------------- sampling


def sample_uniform(space: SpaceConfig, rng: np.random.Generator) -> Architecture:
    return tuple(int(a) for a in rng.integers(0, space.num_candidates, size=space.num_layers))


def sample_fair_round(space: SpaceConfig, rng: np.random.Generator) -> list[Architecture]:
    """N paths such that every layer's candidates are each used exactly once."""
    n = space.num_candidates
    perms = [rng.permutation(n) for _ in range(space.num_layers)]
    return [tuple(int(p[i]) for p in perms) for i in range(n)]


# ---------------------------------------------------------------- execution


TrainableFilter = Callable[[str, str], bool]


def bn_only_filter(include_stem_head: bool = True) -> TrainableFilter:
    def want(name: str, kind: str) -> bool:
        if kind != "bn":
            return False
        return include_stem_head or name.startswith("layers.")
    return want


def all_params_filter(name: str, kind: str) -> bool:
    return kind != "stat"


def trainable_filter(mode: str, include_stem_head: bool = True) -> TrainableFilter:
    if mode == "bn_only":
        return bn_only_filter(include_stem_head)
    if mode == "all_params":
        return all_params_filter
    raise ValueError(f"unknown training mode {mode!r}")


class StaleCacheError(RuntimeError):
    pass


@dataclass
class PathCache:
    net: _Network
    train: bool
    ops: list
    steps: dict = field(default_factory=dict)
    used: bool = False


def forward_path(net: _Network, arch, x: np.ndarray, train: bool = False) -> tuple[np.ndarray, PathCache]:
    """Run stem -> selected op per layer -> head. Returns (logits, cache)."""
    s = net.space
    if x.ndim != 4 or x.shape[1] != s.in_channels:
        raise engine.ShapeError(f"expected (N, {s.in_channels}, H, W) input, got {x.shape}")
    engine.counters["forward_path"] += 1
    ops = net.path(arch)
    cache = PathCache(net=net, train=train, ops=ops)
    y, cache.steps["stem"] = net.stem.forward(x.astype(DTYPE, copy=False), train)
    op_caches = []
    for op in ops:
        y, c = op.forward(y, train)
        op_caches.append(c)
    cache.steps["ops"] = op_caches
    y, cache.steps["head"] = net.head.forward(y, train)
    pooled = engine.global_avg_pool(y)
    cache.steps["pool"] = (y.shape, pooled)
    logits = engine.linear_forward(pooled, net.fc_weight, net.fc_bias)
    return logits, cache


def backward_path(net: _Network, cache: PathCache, grad_logits: np.ndarray,
                  trainable: TrainableFilter | str = "bn_only") -> dict[str, np.ndarray]:
    """Gradients for every tensor on the cached path that passes ``trainable``."""
    if cache.net is not net:
        raise StaleCacheError("cache was produced by a different network")
    if cache.used:
        raise StaleCacheError("cache already consumed by a previous backward pass")
    if not cache.train:
        raise StaleCacheError("backward requires a train-mode forward")
    cache.used = True
    want = trainable_filter(trainable) if isinstance(trainable, str) else trainable
    grads: dict[str, np.ndarray] = {}

    pool_shape, pooled = cache.steps["pool"]
    need_fc = want("fc.weight", "linear")
    g, gw, gb = engine.linear_backward(grad_logits, pooled, net.fc_weight, need_fc)
    if need_fc:
        grads["fc.weight"], grads["fc.bias"] = gw, gb
    g = engine.global_avg_pool_backward(g, pool_shape)
    g = net.head.backward(g, cache.steps["head"], want, grads)
    for op, c in zip(reversed(cache.ops), reversed(cache.steps["ops"])):
        g = op.backward(g, c, want, grads)
    net.stem.backward(g, cache.steps["stem"], want, grads, need_input=False)
    return grads


# ---------------------------------------------------------------- FLOPs


@dataclass
class FlopsReport:
    total: int
    per_layer: list[int]
    stem: int
    head: int


def _conv_macs(out_h, out_w, cout, cin, k, groups=1) -> int:
    return out_h * out_w * cout * k * k * (cin // groups)


def layer_flops(layer: LayerSpec, spec: CandidateSpec, h: int, w: int) -> tuple[int, int, int]:
    """MACs of one candidate op on an h x w input; returns (macs, out_h, out_w)."""
    hidden = layer.in_channels * spec.expansion
    pad = spec.kernel // 2
    ho = engine.conv_output_size(h, spec.kernel, layer.stride, pad)
    wo = engine.conv_output_size(w, spec.kernel, layer.stride, pad)
    macs = (_conv_macs(h, w, hidden, layer.in_channels, 1)
            + _conv_macs(ho, wo, hidden, hidden, spec.kernel, groups=hidden)
            + _conv_macs(ho, wo, layer.out_channels, hidden, 1))
    return macs, ho, wo


def flops(space: SpaceConfig, arch) -> FlopsReport:
    """Exact multiply-accumulate count of a path (convs and the linear head)."""
    arch = validate_arch(space, arch)
    h = w = engine.conv_output_size(space.image_size, 3, space.stem_stride, 1)
    stem = _conv_macs(h, w, space.stem_channels, space.in_channels, 3)
    per_layer = []
    for layer, a in zip(space.layer_specs(), arch):
        macs, h, w = layer_flops(layer, layer.candidates[a], h, w)
        per_layer.append(macs)
    head = _conv_macs(h, w, space.head_channels, space.layers[-1][0], 1) + space.head_channels * space.num_classes
    return FlopsReport(total=stem + sum(per_layer) + head, per_layer=per_layer, stem=stem, head=head)


def flops_table(space: SpaceConfig) -> tuple[np.ndarray, int]:
    """(L, N) per-op MAC table plus the fixed stem+head cost.

    Layer resolutions do not depend on the chosen ops, so total FLOPs of an
    architecture is ``fixed + sum(table[l, a_l])``.
    """
    h = w = engine.conv_output_size(space.image_size, 3, space.stem_stride, 1)
    fixed = _conv_macs(h, w, space.stem_channels, space.in_channels, 3)
    rows = []
    for layer in space.layer_specs():
        row = [layer_flops(layer, c, h, w)[0] for c in layer.candidates]
        _, h, w = layer_flops(layer, layer.candidates[0], h, w)
        rows.append(row)
    fixed += _conv_macs(h, w, space.head_channels, space.layers[-1][0], 1) + space.head_channels * space.num_classes
    return np.array(rows, dtype=np.int64), fixed
