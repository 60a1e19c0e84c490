"""Graph network emitting a starting-node pointer and an edge-score matrix.

One forward pass consumes node coordinates and the pairwise distance
matrix and produces, per instance, a length-n vector of starting-node
logits ``beta`` and an (n, n) matrix ``A`` of edge scores. Decoding into
feasible tours lives in :mod:`tournet.decoder`; this module never decodes.

Layer stack: a linear input embedding, ``gnn_layers`` message-passing
blocks (node attention over a neighbor mask, edge updates from endpoint
features, a starting-symbol attention update on all but the final block),
a pointer head querying the final node features with the symbol, and a
small fully-connected stack compressing edge features to scalar scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor
from .instances import CvrpInstance, TspInstance, cvrp_node_features, distance_matrix


@dataclass
class ModelConfig:
    hidden: int = 128
    gnn_layers: int = 6
    fc_layers: int = 2
    heads: int = 8
    leaky_slope: float = 0.2
    neighbor_divisor: int = 5
    neighbor_threshold: int = 25
    pointer_enabled: bool = True
    in_dim: int = 2

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden width must be divisible by the head count")
        if self.gnn_layers < 1 or self.fc_layers < 1:
            raise ValueError("need at least one GNN block and one FC layer")


@dataclass(frozen=True)
class ModelOutput:
    beta: np.ndarray  # (n,) starting-node logits
    A: np.ndarray  # (n, n) edge scores

    @property
    def n(self) -> int:
        return self.beta.shape[0]


class ModelParams:
    """All learnable weights plus batch-norm running state."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormState] = {}
        self._fan_ins: dict[str, int] = {}
        h, heads = cfg.hidden, cfg.heads
        hd = h // heads

        self._weight("embed.node.w", (h, cfg.in_dim))
        self._bias("embed.node.b", h)
        self._weight("embed.edge.w", (h, 1))
        self._bias("embed.edge.b", h)
        self._weight("symbol.init", (h,))

        for l in range(cfg.gnn_layers):
            p = f"gnn.{l}"
            self._weight(f"{p}.node.w_self", (h, h))
            self._weight(f"{p}.node.w_peer", (h, h))
            self._weight(f"{p}.node.w_edge", (h, h))
            self._weight(f"{p}.node.att_pair", (heads, hd), fan_in=hd)
            self._weight(f"{p}.node.att_edge", (heads, hd), fan_in=hd)
            self._bn(f"{p}.node", h)
            self._weight(f"{p}.edge.w_src", (h, h))
            self._bias(f"{p}.edge.b_src", h)
            self._weight(f"{p}.edge.w_dst", (h, h))
            self._bias(f"{p}.edge.b_dst", h)
            self._weight(f"{p}.edge.w_self", (h, h))
            self._bias(f"{p}.edge.b_self", h)
            self._bn(f"{p}.edge", h)
            if l < cfg.gnn_layers - 1:
                self._weight(f"{p}.symbol.w_query", (h, h))
                self._weight(f"{p}.symbol.w_key", (h, h))
                self._weight(f"{p}.symbol.w_value", (h, h))
                self._bn(f"{p}.symbol", h)

        self._weight("pointer.w_query", (h, h))
        self._weight("pointer.w_key", (h, h))

        for l in range(cfg.fc_layers):
            out_dim = 1 if l == cfg.fc_layers - 1 else h
            self._weight(f"head.{l}.w", (out_dim, h))
            self._bias(f"head.{l}.b", out_dim)

    def _weight(self, name: str, shape: tuple, fan_in: int | None = None) -> None:
        self.params[name] = Parameter(np.zeros(shape, dtype=self.dtype), name)
        self._fan_ins[name] = fan_in if fan_in is not None else shape[-1]

    def _bias(self, name: str, size: int) -> None:
        self.params[name] = Parameter(np.zeros(size, dtype=self.dtype), name)
        self._fan_ins[name] = 0  # biases stay zero at init

    def _bn(self, name: str, features: int) -> None:
        state = BatchNormState(features, name + ".bn", dtype=self.dtype)
        self.bn[name] = state
        self.params[state.scale.name] = state.scale
        self.params[state.shift.name] = state.shift

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Named arrays for checkpointing: weights plus BN running stats."""
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, s in self.bn.items():
            out[f"bnstat/{k}/mean"] = s.running_mean
            out[f"bnstat/{k}/var"] = s.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.asarray(arrays[f"param/{k}"], dtype=self.dtype).reshape(p.data.shape)
        for k, s in self.bn.items():
            s.running_mean = np.asarray(arrays[f"bnstat/{k}/mean"], dtype=self.dtype)
            s.running_var = np.asarray(arrays[f"bnstat/{k}/var"], dtype=self.dtype)

    def copy(self) -> "ModelParams":
        other = ModelParams(self.cfg, self.dtype)
        other.load_state_arrays(self.state_arrays())
        return other


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    mp = ModelParams(cfg, dtype=dtype)
    rng = np.random.default_rng(seed)
    for name, p in mp.named_parameters():
        fan_in = mp._fan_ins.get(name)
        if name.endswith((".scale", ".shift")) or fan_in == 0:
            continue  # BN affine and biases keep their deterministic init
        bound = 1.0 / math.sqrt(fan_in)
        p.data = rng.uniform(-bound, bound, size=p.data.shape).astype(mp.dtype)
    return mp


def neighbor_mask(dm: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(n, n) boolean: True where j may attend to i's update.

    Below the size threshold every other node is a neighbor; above it only
    the ceil(n/divisor) nearest per row are kept. Self is never a neighbor.
    """
    n = dm.shape[0]
    if n <= cfg.neighbor_threshold:
        return ~np.eye(n, dtype=bool)
    k = math.ceil(n / cfg.neighbor_divisor)
    masked = dm + np.where(np.eye(n, dtype=bool), np.inf, 0.0)
    order = np.argsort(masked, axis=1, kind="stable")
    mask = np.zeros((n, n), dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return mask


def _linear_t(x: Tensor, w: Parameter) -> Tensor:
    # x @ w.T over the last axis
    return ad.matmul(x, ad.transpose(w, (1, 0)))


def _head_mix(w: Parameter, att: Parameter, cfg: ModelConfig) -> Tensor:
    """Collapse (score-vector . per-head slice of W x) into one matrix.

    Returns (heads, hidden) M with M[k] = att[k] @ W[k*hd:(k+1)*hd, :], so
    that x @ M.T yields each head's scalar directly; algebraically equal to
    slicing the projected features and dotting with the score vector.
    """
    h = cfg.hidden
    hd = h // cfg.heads
    w4 = ad.reshape(w, (cfg.heads, hd, h))
    return ad.reduce_sum(ad.mul(w4, ad.reshape(att, (cfg.heads, hd, 1))), axis=1)


def embed(coords: np.ndarray, dm: np.ndarray, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Linear input embedding: (b,n,d)->(b,n,h) nodes, (b,n,n)->(b,n,n,h) edges."""
    dtype = params.dtype
    x_nodes = Tensor(np.asarray(coords, dtype=dtype))
    x_edges = Tensor(np.asarray(dm, dtype=dtype)[..., None])
    v0 = ad.add(_linear_t(x_nodes, params["embed.node.w"]), params["embed.node.b"])
    e0 = ad.add(_linear_t(x_edges, params["embed.edge.w"]), params["embed.edge.b"])
    return v0, e0


def node_update(v: Tensor, e: Tensor, nmask: np.ndarray, params: ModelParams,
                layer: int, training: bool, return_attention: bool = False):
    """Multi-head attention over neighbors, residual add, batch norm.

    Per head: a leaky-relu score from the projected (self, peer, edge)
    triple, softmax over the unmasked peers, then aggregation of the
    peer features' head slice; the head outputs concatenate back to h.
    """
    cfg = params.cfg
    b, n, h = v.shape
    heads = cfg.heads
    hd = h // heads
    p = f"gnn.{layer}.node"

    m_self = _head_mix(params[f"{p}.w_self"], params[f"{p}.att_pair"], cfg)
    m_peer = _head_mix(params[f"{p}.w_peer"], params[f"{p}.att_pair"], cfg)
    m_edge = _head_mix(params[f"{p}.w_edge"], params[f"{p}.att_edge"], cfg)

    s_self = _linear_t(v, m_self)  # (b, n, heads)
    s_peer = _linear_t(v, m_peer)
    s_edge = _linear_t(e, m_edge)  # (b, n, n, heads)
    scores = ad.add(ad.add(ad.reshape(s_self, (b, n, 1, heads)),
                           ad.reshape(s_peer, (b, 1, n, heads))), s_edge)
    scores = ad.leaky_relu(scores, cfg.leaky_slope)
    scores = ad.masked_fill(scores, ~nmask[..., None], ad.neg_inf(params.dtype))
    alpha = ad.softmax(scores, axis=2)

    alpha_t = ad.transpose(alpha, (0, 3, 1, 2))  # (b, heads, n, n)
    v_heads = ad.transpose(ad.reshape(v, (b, n, heads, hd)), (0, 2, 1, 3))
    agg = ad.matmul(alpha_t, v_heads)  # (b, heads, n, hd)
    agg = ad.reshape(ad.transpose(agg, (0, 2, 1, 3)), (b, n, h))
    out = ad.batch_norm(ad.add(agg, v), params.bn[p], training)
    if return_attention:
        return out, alpha
    return out


def edge_update(v: Tensor, e: Tensor, params: ModelParams, layer: int,
                training: bool) -> Tensor:
    """Endpoint-projection broadcast sum, sigmoid gate, residual, batch norm."""
    b, n, h = v.shape
    p = f"gnn.{layer}.edge"
    src = ad.add(_linear_t(v, params[f"{p}.w_src"]), params[f"{p}.b_src"])
    dst = ad.add(_linear_t(v, params[f"{p}.w_dst"]), params[f"{p}.b_dst"])
    contrib = ad.add(ad.reshape(src, (b, n, 1, h)), ad.reshape(dst, (b, 1, n, h)))
    pre = ad.add(ad.add(contrib, _linear_t(e, params[f"{p}.w_self"])),
                 params[f"{p}.b_self"])
    gated = ad.sigmoid(pre)
    return ad.batch_norm(ad.add(gated, e), params.bn[p], training)


def symbol_update(v_h: Tensor, v: Tensor, params: ModelParams, layer: int,
                  training: bool) -> Tensor:
    """Starting-symbol self-attention with leaky-relu scores (not normalized)."""
    cfg = params.cfg
    b, n, h = v.shape
    p = f"gnn.{layer}.symbol"
    q = _linear_t(v_h, params[f"{p}.w_query"])  # (b, h)
    k = _linear_t(v, params[f"{p}.w_key"])  # (b, n, h)
    val = _linear_t(v, params[f"{p}.w_value"])
    scores = ad.leaky_relu(
        ad.reduce_sum(ad.mul(ad.reshape(q, (b, 1, h)), k), axis=2), cfg.leaky_slope)
    attn = ad.reduce_sum(ad.mul(ad.reshape(scores, (b, n, 1)), val), axis=1)
    return ad.batch_norm(ad.add(attn, v_h), params.bn[p], training)


def pointer(v_h: Tensor, v: Tensor, params: ModelParams) -> Tensor:
    """Starting-node logits: leaky-relu of the symbol query against all keys.

    With the pointer disabled the logits force node 0 (one-hot after
    softmax), matching the fixed-start convention.
    """
    cfg = params.cfg
    b, n, h = v.shape
    if not cfg.pointer_enabled:
        data = np.full((b, n), ad.neg_inf(params.dtype), dtype=params.dtype)
        data[:, 0] = 0.0
        return Tensor(data)
    q = _linear_t(v_h, params["pointer.w_query"])
    k = _linear_t(v, params["pointer.w_key"])
    return ad.leaky_relu(
        ad.reduce_sum(ad.mul(ad.reshape(q, (b, 1, h)), k), axis=2), cfg.leaky_slope)


def edge_scores(e: Tensor, params: ModelParams) -> Tensor:
    """FC stack on edge features; relu between layers, none on the last."""
    cfg = params.cfg
    a = e
    for l in range(cfg.fc_layers):
        a = ad.add(_linear_t(a, params[f"head.{l}.w"]), params[f"head.{l}.b"])
        if l < cfg.fc_layers - 1:
            a = ad.relu(a)
    b, n = a.shape[0], a.shape[1]
    return ad.reshape(a, (b, n, n))


def forward_graph(coords: np.ndarray, dm: np.ndarray, nmask: np.ndarray,
                  params: ModelParams, training: bool,
                  counter=None) -> tuple[Tensor, Tensor]:
    """Batched forward pass; returns (beta (b,n), A (b,n,n)) graph tensors."""
    if counter is not None:
        counter.increment()
    cfg = params.cfg
    b = coords.shape[0]
    v, e = embed(coords, dm, params)
    v_h = ad.add(params["symbol.init"],
                 Tensor(np.zeros((b, cfg.hidden), dtype=params.dtype)))
    for l in range(cfg.gnn_layers):
        v = node_update(v, e, nmask, params, l, training)
        e = edge_update(v, e, params, l, training)
        if l < cfg.gnn_layers - 1:
            v_h = symbol_update(v_h, v, params, l, training)
    beta = pointer(v_h, v, params)
    scores = edge_scores(e, params)
    return beta, scores


class ForwardCounter:
    """Counts model invocations (used to audit forwards per training batch)."""

    def __init__(self):
        self.count = 0

    def increment(self):
        self.count += 1


def _instance_inputs(inst: TspInstance | CvrpInstance) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(inst, CvrpInstance):
        feats = cvrp_node_features(inst)
        combined = TspInstance(coords=inst.all_coords(), metric="euclid")
        return feats, distance_matrix(combined)
    return inst.coords, distance_matrix(inst)


def forward(inst: TspInstance | CvrpInstance, params: ModelParams,
            mode: str = "eval", counter=None) -> ModelOutput:
    """Single-instance forward; eval mode is a pure function of (params, inst)."""
    outs = forward_batch([inst], params, mode=mode, counter=counter)
    return outs[0]


def forward_batch(instances: Sequence[TspInstance | CvrpInstance],
                  params: ModelParams, mode: str = "eval",
                  counter=None) -> list[ModelOutput]:
    """Forward a batch of same-size instances with shared parameters."""
    if mode not in ("eval", "train"):
        raise ValueError("mode must be 'eval' or 'train'")
    feats, dms = zip(*(_instance_inputs(i) for i in instances))
    ns = {f.shape[0] for f in feats}
    if len(ns) != 1:
        raise ValueError("batched instances must share the same size")
    coords = np.stack(feats)
    dm = np.stack(dms)
    nmask = np.stack([neighbor_mask(d, params.cfg) for d in dms])
    training = mode == "train"
    if training:
        beta, scores = forward_graph(coords, dm, nmask, params, True, counter)
    else:
        with ad.no_grad():
            beta, scores = forward_graph(coords, dm, nmask, params, False, counter)
    return [ModelOutput(beta=np.asarray(beta.data[i]), A=np.asarray(scores.data[i]))
            for i in range(len(instances))]
