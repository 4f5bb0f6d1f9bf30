"""Consensus network: dynamic local graphs, annular convolution, spectral
global consensus and progressive top-k pruning."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "ConfigError",
    "PruningBlockConfig",
    "NetConfig",
    "BlockOutput",
    "ForwardOutput",
    "init_params",
    "context_norm",
    "resnet_block",
    "knn_graph",
    "edge_features",
    "annulus_sum_conv",
    "annular_conv",
    "mlp_pool_aggregate",
    "score_head",
    "global_adjacency",
    "normalized_laplacian",
    "spectral_gcn",
    "global_consensus",
    "prune_topk",
    "clnet_forward",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PruningBlockConfig:
    k: int = 9
    p: int = 3
    prune_ratio: float = 0.5

    def __post_init__(self):
        if self.k < 1 or self.p < 1 or self.k % self.p:
            raise ConfigError(f"k={self.k} must be a positive multiple of p={self.p}")
        if not 0.0 < self.prune_ratio <= 1.0:
            raise ConfigError(f"prune_ratio must lie in (0, 1], got {self.prune_ratio}")


@dataclass(frozen=True)
class NetConfig:
    in_dim: int = 2
    channels: int = 128
    blocks: tuple[PruningBlockConfig, ...] = (PruningBlockConfig(9, 3, 0.5), PruningBlockConfig(6, 3, 0.5))
    resnet_depth_pre: int = 3
    resnet_depth_mid: int = 3
    final_head_depth: int = 1
    use_annular: bool = True
    use_global: bool = True

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, PruningBlockConfig) else PruningBlockConfig(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if self.in_dim not in (2, 4):
            raise ConfigError(f"in_dim must be 2 or 4, got {self.in_dim}")
        if self.channels < 1 or not blocks:
            raise ConfigError("need at least one channel and one pruning block")
        for name in ("resnet_depth_pre", "resnet_depth_mid", "final_head_depth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown net config key(s): {sorted(unknown)}")
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = tuple(PruningBlockConfig(**b) for b in d["blocks"])
        return cls(**d)

    def min_items(self) -> int:
        """Smallest N for which every block's kNN has ``k < current N``."""
        n = 2
        while not _sizes_ok(self, n):
            n += 1
        return n


def _sizes_ok(cfg: NetConfig, n: int) -> bool:
    for b in cfg.blocks:
        if b.k >= n or n < 2:
            return False
        n = math.floor(n * b.prune_ratio)
        if n < 1:
            return False
    return n >= 2


# --- parameters ---------------------------------------------------------------


def _linear_params(params, rng, name: str, fan_in: int, fan_out: int) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    params[f"{name}.W"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _resnet_params(params, rng, name: str, d: int) -> None:
    for i in (1, 2):
        _linear_params(params, rng, f"{name}.fc{i}", d, d)
        params[f"{name}.bn{i}.gamma"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{name}.bn{i}.beta"] = Tensor(np.zeros(d), requires_grad=True)


def init_params(config: NetConfig, seed: int = 0) -> "OrderedDict[str, Tensor]":
    """Create every parameter with a fixed, seeded initialization."""
    rng = np.random.default_rng(seed)
    d = config.channels
    params: OrderedDict[str, Tensor] = OrderedDict()
    _linear_params(params, rng, "embed.in", config.in_dim, d)
    for r in range(config.resnet_depth_pre):
        _resnet_params(params, rng, f"embed.res{r}", d)
    for j, blk in enumerate(config.blocks):
        p = f"block{j}"
        if j > 0:
            _linear_params(params, rng, f"{p}.in", d + 2, d)
        if config.use_annular:
            _linear_params(params, rng, f"{p}.annular1", 2 * d, d)
            _linear_params(params, rng, f"{p}.annular2", (blk.k // blk.p) * d, d)
        else:
            _linear_params(params, rng, f"{p}.mlp1", 2 * d, d)
            _linear_params(params, rng, f"{p}.mlp2", d, d)
        for r in range(config.resnet_depth_mid):
            _resnet_params(params, rng, f"{p}.mid{r}", d)
        _linear_params(params, rng, f"{p}.local_head", d, 1)
        if config.use_global:
            bound = 1.0 / math.sqrt(d)
            params[f"{p}.gcn.W"] = Tensor(rng.uniform(-bound, bound, size=(d, d)), requires_grad=True)
            _resnet_params(params, rng, f"{p}.global_res", d)
            _linear_params(params, rng, f"{p}.global_head", d, 1)
    _linear_params(params, rng, "final.in", d + 2, d)
    for r in range(config.final_head_depth):
        _resnet_params(params, rng, f"final.res{r}", d)
    _linear_params(params, rng, "final.mlp1", d, d)
    _linear_params(params, rng, "final.mlp2", d, 1)
    return params


# --- layers -------------------------------------------------------------------


def _linear(x: Tensor, params, name: str) -> Tensor:
    return ad.matmul(x, params[f"{name}.W"]) + params[f"{name}.b"]


def context_norm(features) -> Tensor:
    """Per-channel standardization across the N items of one instance."""
    features = ad.as_tensor(features)
    if features.shape[0] < 2:
        raise ShapeError(f"context_norm: need at least 2 items, got shape {features.shape}")
    return ad.standardize(features, axis=0, floor=1e-8)


def resnet_block(features, params, name: str) -> Tensor:
    """``x + f(x)`` with ``f = [linear, context norm, instance batch norm, relu] x 2``.

    The batch-norm stage normalizes across the items of this instance and
    applies a learned scale and shift.
    """
    x = ad.as_tensor(features)
    h = x
    for i in (1, 2):
        h = _linear(h, params, f"{name}.fc{i}")
        h = context_norm(h)
        h = ad.standardize(h, axis=0) * params[f"{name}.bn{i}.gamma"] + params[f"{name}.bn{i}.beta"]
        h = ad.relu(h)
    if h.shape != x.shape:
        raise ShapeError(f"resnet_block: residual {h.shape} vs input {x.shape}")
    return x + h


def knn_graph(Z, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other rows of ``Z`` by Euclidean distance.

    Rows are in ascending distance order; ties go to the smaller index.
    """
    Z = np.asarray(Z.data if isinstance(Z, Tensor) else Z, dtype=np.float64)
    n = len(Z)
    if not 1 <= k < n:
        raise ShapeError(f"knn_graph: need 1 <= k < N, got k={k}, N={n}")
    sq = np.einsum("ij,ij->i", Z, Z)
    dist = sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T)
    np.maximum(dist, 0.0, out=dist)
    np.fill_diagonal(dist, np.inf)
    part = np.argpartition(dist, k - 1, axis=1)[:, :k]
    pd = np.take_along_axis(dist, part, axis=1)
    order = np.lexsort((part, pd), axis=1)
    nbrs = np.take_along_axis(part, order, axis=1)
    # rows whose k-th distance is tied with an excluded row need the full sort
    kth = np.take_along_axis(dist, nbrs[:, -1:], axis=1)
    tied = np.flatnonzero((dist <= kth).sum(axis=1) > k)
    if tied.size:
        full = np.argsort(dist[tied], axis=1, kind="stable")[:, :k]
        nbrs[tied] = full
    return nbrs


def edge_features(Z, nbrs) -> Tensor:
    """``[z_i, z_i - z_j]`` for each anchor ``i`` and neighbor ``j``; shape N x k x 2d."""
    Z = ad.as_tensor(Z)
    nbrs = np.asarray(nbrs)
    n, d = Z.shape
    if nbrs.ndim != 2 or nbrs.shape[0] != n:
        raise ShapeError(f"edge_features: neighbor table {nbrs.shape} does not match features {Z.shape}")
    anchor = ad.reshape(Z, (n, 1, d))
    neighbours = ad.gather(Z, nbrs)
    return ad.concat([anchor + np.zeros((1, nbrs.shape[1], 1)), anchor - neighbours], axis=-1)


def annulus_sum_conv(edges, p: int, W, b) -> Tensor:
    """First annular stage: ``sum_j W e_j + b`` over each run of ``p`` sorted neighbors.

    Returns N x (k/p) x d_out.
    """
    edges = ad.as_tensor(edges)
    n, k, c = edges.shape
    if k % p:
        raise ShapeError(f"annular_conv: k={k} not divisible by p={p}")
    grouped = ad.sum(ad.reshape(edges, (n, k // p, p, c)), axis=2)
    return ad.matmul(grouped, W) + b


def annular_conv(edges, p: int, params, name: str) -> Tensor:
    """Two stacked annular convolutions: per-annulus aggregation, then one
    position-aware kernel over the k/p annulus features."""
    edges = ad.as_tensor(edges)
    n, k, _ = edges.shape
    h = annulus_sum_conv(edges, p, params[f"{name}.annular1.W"], params[f"{name}.annular1.b"])
    h = ad.relu(ad.standardize(h, axis=0))
    h = ad.reshape(h, (n, h.shape[1] * h.shape[2]))
    return _linear(h, params, f"{name}.annular2")


def mlp_pool_aggregate(edges, params, name: str) -> Tensor:
    """Per-edge two-layer MLP followed by a channel-wise max over neighbors."""
    edges = ad.as_tensor(edges)
    h = ad.relu(_linear(edges, params, f"{name}.mlp1"))
    h = _linear(h, params, f"{name}.mlp2")
    return ad.max(h, axis=1)


def score_head(features, W, b) -> tuple[Tensor, Tensor]:
    """Raw logits ``o`` and scores ``tanh(relu(o))`` in [0, 1)."""
    features = ad.as_tensor(features)
    o = ad.reshape(ad.matmul(features, W) + b, (features.shape[0],))
    return o, ad.tanh(ad.relu(o))


def global_adjacency(w_local) -> Tensor:
    """``A_ij = w_i w_j``."""
    w = ad.as_tensor(w_local)
    n = w.shape[0]
    return ad.reshape(w, (n, 1)) * ad.reshape(w, (1, n))


def normalized_laplacian(A) -> Tensor:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``."""
    A = ad.as_tensor(A)
    n = A.shape[0]
    At = A + np.eye(n)
    dinv = ad.div(1.0, ad.sqrt(ad.sum(At, axis=1)))
    return ad.reshape(dinv, (n, 1)) * At * ad.reshape(dinv, (1, n))


def spectral_gcn(L, Zt, W_g) -> Tensor:
    return ad.matmul(ad.matmul(L, Zt), W_g)


def global_consensus(w_local, Zt, W_g) -> Tensor:
    """``L Zt W_g`` for the rank-one adjacency of ``w_local``, without forming N x N matrices.

    With ``A = w w^T`` the degrees are ``1 + w_i sum(w)`` and
    ``L Z = s * (w (w^T (s * Z)) + s * Z)`` where ``s = D^-1/2``; same values as
    the dense path up to rounding, at O(N d) cost.
    """
    w = ad.as_tensor(w_local)
    n = w.shape[0]
    s = ad.reshape(ad.div(1.0, ad.sqrt(w * ad.sum(w) + 1.0)), (n, 1))
    sz = s * Zt
    proj = ad.matmul(ad.reshape(w, (1, n)), sz)
    lz = s * (ad.reshape(w, (n, 1)) * proj + sz)
    return ad.matmul(lz, W_g)


def prune_topk(items, scores, ratio: float) -> tuple[Tensor, np.ndarray]:
    """Keep the ``floor(N * ratio)`` highest-scoring rows, in descending score order.

    Ties go to the smaller index. Gradients reach kept rows only.
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64).reshape(-1)
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"prune ratio must lie in (0, 1], got {ratio}")
    keep = math.floor(len(s) * ratio)
    if keep < 1:
        raise ValueError(f"pruning {len(s)} items at ratio {ratio} keeps nothing")
    order = np.lexsort((np.arange(len(s)), -s))[:keep]
    return ad.gather(items, order), order


@dataclass
class BlockOutput:
    o_local: Tensor
    w_local: Tensor
    o_global: Tensor | None
    w_global: Tensor
    kept: np.ndarray  # indices into this block's input
    input_index: np.ndarray  # this block's input rows as indices into the original N

    @property
    def kept_original(self) -> np.ndarray:
        return self.input_index[self.kept]


@dataclass
class ForwardOutput:
    blocks: list[BlockOutput]
    o_final: Tensor
    w_final: Tensor
    candidates: np.ndarray  # indices into the original N


def clnet_forward(items, params, config: NetConfig) -> ForwardOutput:
    """Run every pruning block and the final head on one instance."""
    x = ad.as_tensor(items)
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != config.in_dim:
        raise ShapeError(f"clnet_forward: items {x.shape} do not match in_dim={config.in_dim}")
    if not _sizes_ok(config, n):
        raise ShapeError(f"clnet_forward: N={n} is too small for the configured blocks (need >= {config.min_items()})")
    index = np.arange(n)
    blocks: list[BlockOutput] = []
    h = _linear(x, params, "embed.in")
    for r in range(config.resnet_depth_pre):
        h = resnet_block(h, params, f"embed.res{r}")
    for j, blk in enumerate(config.blocks):
        p = f"block{j}"
        if j > 0:
            h = _linear(x, params, f"{p}.in")
        nbrs = knn_graph(h, blk.k)
        edges = edge_features(h, nbrs)
        if config.use_annular:
            z = annular_conv(edges, blk.p, params, p)
        else:
            z = mlp_pool_aggregate(edges, params, p)
        for r in range(config.resnet_depth_mid):
            z = resnet_block(z, params, f"{p}.mid{r}")
        o_l, w_l = score_head(z, params[f"{p}.local_head.W"], params[f"{p}.local_head.b"])
        if config.use_global:
            g = global_consensus(w_l, z, params[f"{p}.gcn.W"])
            g = resnet_block(g, params, f"{p}.global_res")
            o_g, w_g = score_head(g, params[f"{p}.global_head.W"], params[f"{p}.global_head.b"])
            feats = g
        else:
            o_g, w_g, feats = None, w_l, z
        _, kept = prune_topk(w_g, w_g, blk.prune_ratio)
        m = len(kept)
        x = ad.concat(
            [
                ad.gather(feats, kept),
                ad.reshape(ad.gather(w_l, kept), (m, 1)),
                ad.reshape(ad.gather(w_g, kept), (m, 1)),
            ],
            axis=-1,
        )
        blocks.append(BlockOutput(o_l, w_l, o_g, w_g, kept, index))
        index = index[kept]

    h = _linear(x, params, "final.in")
    for r in range(config.final_head_depth):
        h = resnet_block(h, params, f"final.res{r}")
    h = ad.relu(_linear(h, params, "final.mlp1"))
    o_hat, w_hat = score_head(h, params["final.mlp2.W"], params["final.mlp2.b"])
    return ForwardOutput(blocks, o_hat, w_hat, index)


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"CLNETCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, config: NetConfig, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, little-endian u32 version and header length,
    a JSON header (config echo and parameter table), then every parameter as
    row-major little-endian float64 in header order."""
    table = [{"name": name, "shape": list(t.shape)} for name, t in params.items()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": config.to_dict(),
        "extra": extra or {},
        "params": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple["OrderedDict[str, Tensor]", NetConfig, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    config = NetConfig.from_dict(header["net_config"])
    offset = 16 + hlen
    params: OrderedDict[str, Tensor] = OrderedDict()
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated parameter data at {entry['name']}")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        params[entry["name"]] = Tensor(arr, requires_grad=True)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after parameter data")
    expected = init_params(config, 0)
    if list(expected) != list(params) or any(expected[k].shape != params[k].shape for k in params):
        raise CheckpointError(f"{path}: parameter table does not match the stored net config")
    return params, config, header.get("extra", {})
