"""Condition-routed descriptor network.

The first ``N_S`` blocks exist once per condition branch; the remaining
``B - N_S`` blocks are shared. An image runs through the blocks of its own
branch only, then the shared blocks, then GeM pooling and L2 normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DomainError, ShapeError


@dataclass
class NetworkConfig:
    B: int = 4
    N_S: int = 4
    N_c: int = 3
    widths: list = field(default_factory=lambda: [8, 16, 16, 32])
    strides: list = field(default_factory=lambda: [1, 2, 2, 2])
    kernel: int = 3
    in_channels: int = 3
    K: int = 32
    p: float = 3.0
    branch_map: dict = field(
        default_factory=lambda: {
            "reference-day": 0,
            "snow": 0,
            "dawn": 1,
            "dusk": 1,
            "night": 2,
            "night-rain": 2,
        }
    )

    @property
    def N_A(self) -> int:
        return self.B - self.N_S

    def validate(self, conditions=None):
        if self.B < 1:
            raise ConfigError("network.B", "need at least one block")
        if not 0 <= self.N_S <= self.B:
            raise ConfigError("network.N_S", f"must lie in [0, B={self.B}], got {self.N_S}")
        if self.N_c < 1:
            raise ConfigError("network.N_c", "need at least one branch")
        if len(self.widths) != self.B:
            raise ConfigError("network.widths", f"expected {self.B} entries")
        if len(self.strides) != self.B or any(s not in (1, 2) for s in self.strides):
            raise ConfigError("network.strides", f"expected {self.B} entries from {{1, 2}}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("network.kernel", "kernel size must be odd")
        if self.K != self.widths[-1]:
            raise ConfigError("network.K", f"descriptor size must equal the last width {self.widths[-1]}")
        if self.p < 1:
            raise ConfigError("network.p", "GeM exponent must be >= 1")
        for name, b in self.branch_map.items():
            if not 0 <= b < self.N_c:
                raise ConfigError(f"network.branch_map.{name}", f"branch {b} outside [0, {self.N_c})")
        for name in conditions or ():
            if name not in self.branch_map:
                raise ConfigError("network.branch_map", f"condition {name!r} has no branch")
        return self

    def branch(self, condition: str) -> int:
        try:
            return self.branch_map[condition]
        except KeyError:
            raise DomainError(f"condition {condition!r} is not routed to any branch") from None

    def block_shapes(self) -> list[tuple[tuple[int, int, int, int], tuple[int]]]:
        chans = [self.in_channels, *self.widths]
        return [((chans[i + 1], chans[i], self.kernel, self.kernel), (chans[i + 1],)) for i in range(self.B)]

    def min_input_size(self) -> int:
        return 2 ** sum(1 for s in self.strides if s == 2)


@dataclass
class ModelParams:
    """``theta[c]`` holds blocks ``0..N_S-1`` of branch c; ``phi`` the shared rest.

    Arrays are keyed ``block{i}.weight`` / ``block{i}.bias`` with the global
    block index.
    """

    theta: list[dict[str, np.ndarray]]
    phi: dict[str, np.ndarray]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for c, t in enumerate(self.theta):
            out.update({f"theta{c}.{k}": v for k, v in t.items()})
        out.update({f"phi.{k}": v for k, v in self.phi.items()})
        return out

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], n_branches: int) -> "ModelParams":
        theta = [{} for _ in range(n_branches)]
        phi = {}
        for key, v in named.items():
            head, rest = key.split(".", 1)
            if head == "phi":
                phi[rest] = v
            else:
                theta[int(head[len("theta"):])][rest] = v
        return cls(theta, phi)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_named({k: v.astype(dtype) for k, v in self.named().items()}, len(self.theta))

    def copy(self) -> "ModelParams":
        return ModelParams.from_named({k: v.copy() for k, v in self.named().items()}, len(self.theta))


def init_params(config: NetworkConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-normal weights, zero biases. Every branch starts as a copy of one draw.

    The draw for block i does not depend on N_S or N_c, so differently routed
    networks built from the same seed start from the same function.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    blocks = []
    for wshape, bshape in config.block_shapes():
        fan_in = wshape[1] * wshape[2] * wshape[3]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), wshape)
        blocks.append({"weight": w.astype(dtype), "bias": np.full(bshape, 0.01, dtype=dtype)})
    theta = [
        {f"block{i}.{k}": v.copy() for i in range(config.N_S) for k, v in blocks[i].items()}
        for _ in range(config.N_c)
    ]
    phi = {f"block{i}.{k}": v for i in range(config.N_S, config.B) for k, v in blocks[i].items()}
    return ModelParams(theta, phi)


def _blocks_forward(graph: nx.Graph, x: nx.Tensor, params: dict, prefix: str, blocks, config: NetworkConfig):
    for i in blocks:
        w = graph.leaf(params[f"block{i}.weight"], f"{prefix}.block{i}.weight")
        b = graph.leaf(params[f"block{i}.bias"], f"{prefix}.block{i}.bias")
        x = nx.conv_block_forward(x, w, b, config.strides[i])
    return x


def describe(
    graph: nx.Graph, params: ModelParams, config: NetworkConfig, images: np.ndarray, conditions
) -> nx.Tensor:
    """Batched descriptors (n, K) on ``graph``, rows in input order.

    Images are grouped by branch; each group reads only its own branch's
    parameters, so other branches never enter the graph.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[-1] != config.in_channels:
        raise ShapeError(f"expected (n, H, W, {config.in_channels}) images, got {images.shape}")
    branches = np.array([config.branch(c) for c in conditions])
    if len(branches) != len(images):
        raise ShapeError("one condition per image is required")

    if config.N_S == 0:
        groups = [(None, np.arange(len(images)))]
    else:
        groups = [(b, np.flatnonzero(branches == b)) for b in sorted(set(branches.tolist()))]

    outs, order = [], []
    for b, idx in groups:
        h = graph.constant(images[idx])
        if b is not None:
            h = _blocks_forward(graph, h, params.theta[b], f"theta{b}", range(config.N_S), config)
        outs.append(h)
        order.append(idx)

    shared = range(config.N_S, config.B)
    if config.N_S > 0 and len(outs) > 1:
        h = nx.concat(outs)
        h = _blocks_forward(graph, h, params.phi, "phi", shared, config)
    else:
        h = _blocks_forward(graph, outs[0], params.phi, "phi", shared, config)
    d = nx.l2_normalize(nx.gem(h, config.p))

    perm = np.concatenate(order)
    if np.array_equal(perm, np.arange(len(perm))):
        return d
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    return nx.take(d, inverse)


def forward_descriptor(params: ModelParams, config: NetworkConfig, image: np.ndarray, condition: str) -> np.ndarray:
    graph = nx.Graph()
    return describe(graph, params, config, np.asarray(image)[None], [condition]).data[0]


def describe_batch(
    params: ModelParams, config: NetworkConfig, images, conditions, batch_size: int = 64
) -> np.ndarray:
    """Inference-only descriptors for many images (no gradients kept)."""
    images = np.asarray(images)
    out = []
    for s in range(0, len(images), batch_size):
        g = nx.Graph()
        out.append(describe(g, params, config, images[s : s + batch_size], conditions[s : s + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, config.K))


def gem_pool(X: np.ndarray, p: float = 3.0) -> np.ndarray:
    """GeM of an (N, M, K) response -> K-vector."""
    X = np.asarray(X, dtype=np.float64)
    if np.any(X < 0):
        raise DomainError("GeM input must be non-negative")
    return nx.gem(nx.Graph().constant(X), p).data


def l2_normalize(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    try:
        return nx.l2_normalize(nx.Graph().constant(d)).data
    except ShapeError as exc:
        raise DomainError(str(exc)) from None


def count_parameters(config: NetworkConfig) -> tuple[int, int, int]:
    """(agnostic, per-branch specific, total) parameter counts."""
    sizes = [int(np.prod(w)) + int(np.prod(b)) for w, b in config.block_shapes()]
    specific = sum(sizes[: config.N_S])
    agnostic = sum(sizes[config.N_S :])
    return agnostic, specific, agnostic + config.N_c * specific


def inference_macs(params: ModelParams, config: NetworkConfig, image_shape, condition: str) -> int:
    g = nx.Graph()
    describe(g, params, config, np.zeros((1, *image_shape)) + 0.5, [condition])
    return g.mac_count
