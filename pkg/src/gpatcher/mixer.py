"""Patch mixer: alternating feature-mixing and patch-mixing MLP blocks.

Each block is ``P <- act(LN(P) W + b)``. The feature block maps along the
last axis (``d_in -> hidden``); the patch block maps ``p -> p`` across
patch slots. Padding slots are zeroed after every block, so their input
content never reaches the logits. Gradients are written out by hand.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import ShapeMismatch
from .patcher import PatchSet

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "none")
AGGREGATES = ("mean", "sum", "max")


@dataclass(frozen=True)
class MixerConfig:
    d: int
    p: int
    num_classes: int
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.5
    activation: str = "relu"
    aggregate: str = "mean"
    residual: bool = False
    two_layer: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("d", "p", "num_classes", "hidden", "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.aggregate not in AGGREGATES:
            raise ValueError(f"aggregate must be one of {AGGREGATES}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_shapes(cfg: MixerConfig):
    """Ordered ``name -> shape`` for every trainable tensor."""
    shapes = {}
    d_in = cfg.d
    for i in range(cfg.layers):
        for kind, width_in, width_out in (("feature", d_in, cfg.hidden),
                                          ("patch", cfg.p, cfg.p)):
            ln_width = d_in if kind == "feature" else cfg.hidden
            pre = f"{kind}{i}"
            shapes[f"{pre}.ln_scale"] = (ln_width,)
            shapes[f"{pre}.ln_shift"] = (ln_width,)
            shapes[f"{pre}.W"] = (width_in, width_out)
            shapes[f"{pre}.b"] = (width_out,)
            if cfg.two_layer:
                shapes[f"{pre}.W2"] = (width_out, width_out)
                shapes[f"{pre}.b2"] = (width_out,)
        d_in = cfg.hidden
    shapes["head.W"] = (cfg.hidden, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


@dataclass(eq=False)
class MixerModel:
    config: MixerConfig
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.params):
            raise ShapeMismatch("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {self.params[name].shape}")

    def copy(self):
        return MixerModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def save(self, path):
        """Write an ``.npz`` checkpoint; reloading gives bit-identical tensors."""
        meta = {"version": CHECKPOINT_VERSION, "config": self.config.to_dict()}
        arrays = {f"param:{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                                dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            params = {k[len("param:"):]: z[k].copy() for k in z.files if k.startswith("param:")}
        return cls(MixerConfig.from_dict(meta["config"]), params)


def init_params(cfg: MixerConfig, seed=0) -> MixerModel:
    """Xavier-uniform weights, zero biases, unit LN scale and zero LN shift."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("W"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf == "ln_scale":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return MixerModel(cfg, params)


def zeros_like(model: MixerModel):
    return {k: np.zeros_like(v) for k, v in model.params.items()}


# elementary pieces

def _act(kind, h):
    if kind == "relu":
        return np.maximum(h, 0.0)
    if kind == "tanh":
        return np.tanh(h)
    return h


def _act_grad(kind, h_or_out, dy):
    # relu caches the boolean gate, tanh the output
    if kind == "relu":
        return dy * h_or_out
    if kind == "tanh":
        return dy * (1.0 - h_or_out * h_or_out)
    return dy


def _act_cache(kind, h, out):
    if kind == "relu":
        return h > 0.0
    if kind == "tanh":
        # copied: dropout and residual later update ``out`` in place
        return out.copy()
    return None


def _ln(x, scale, shift, eps, mask=None):
    """Layer norm over the last axis; rows where ``mask`` is false give 0."""
    shape = x.shape
    y, xhat, rstd = kernels.layer_norm(x.reshape(-1, shape[-1]), scale, shift, eps,
                                       None if mask is None else mask.reshape(-1))
    return y.reshape(shape), xhat, rstd


def _ln_backward(dy, xhat, rstd, scale, mask=None):
    shape = dy.shape
    dx, dscale, dshift = kernels.layer_norm_backward(
        dy.reshape(-1, shape[-1]), xhat, rstd, scale, None if mask is None else mask.reshape(-1))
    return dx.reshape(shape), dscale, dshift


def _dense(x, W, b, axis):
    # activations are slot-major (p, n, width): feature maps act on the last
    # axis, patch maps on the first, which is one GEMM on a (p, n*width) view
    if axis == "feature":
        return x @ W + b
    p = x.shape[0]
    return (W.T @ x.reshape(p, -1)).reshape(x.shape) + b[:, None, None]


def _dense_backward(x, W, dy, axis):
    if axis == "feature":
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)
    p = x.shape[0]
    x2, dy2 = x.reshape(p, -1), dy.reshape(p, -1)
    return (W @ dy2).reshape(dy.shape), x2 @ dy2.T, dy2.sum(axis=1)


@dataclass(eq=False)
class ForwardTrace:
    """Cached activations from :func:`forward`; consumed by :func:`backward`."""

    mask: np.ndarray
    gather: object
    blocks: list
    pooled: np.ndarray
    pool_cache: object
    n: int


def _inputs(cfg, ps):
    if not isinstance(ps, PatchSet):
        raise TypeError("forward expects a PatchSet")
    mask = np.asarray(ps.valid, dtype=bool)
    if ps.p != cfg.p:
        raise ShapeMismatch(f"patch size {ps.p} != model p={cfg.p}")
    if ps.d != cfg.d:
        raise ShapeMismatch(f"feature width {ps.d} != model d={cfg.d}")
    return mask


def _mlp(model, pre, z, axis, training, rng):
    """Linear (optionally linear-act-linear) map + activation + dropout."""
    cfg, P = model.config, model.params
    cache = {"z": z}
    h = _dense(z, P[f"{pre}.W"], P[f"{pre}.b"], axis)
    if cfg.two_layer:
        mid = _act(cfg.activation, h)
        cache["mid_gate"] = _act_cache(cfg.activation, h, mid)
        cache["mid"] = mid
        h = _dense(mid, P[f"{pre}.W2"], P[f"{pre}.b2"], axis)
    out, cache["gate"], drop = _activate(cfg, h, training, rng)
    if drop is not None:
        cache["drop"] = drop
    return out, cache


def _activate(cfg, h, training, rng):
    out = _act(cfg.activation, h)
    gate = _act_cache(cfg.activation, h, out)
    drop = None
    if training and cfg.dropout > 0.0:
        drop = rng.random(out.shape, dtype=np.float32) >= cfg.dropout
        out *= drop
        out *= 1.0 / (1.0 - cfg.dropout)
    return out, gate, drop


def _deactivate(cfg, cache, dout):
    if "drop" in cache:
        dout = dout * cache["drop"] * (1.0 / (1.0 - cfg.dropout))
    return _act_grad(cfg.activation, cache["gate"], dout)


def _mlp_backward(model, pre, cache, dout, axis, grads):
    cfg, P = model.config, model.params
    dh = _deactivate(cfg, cache, dout)
    if cfg.two_layer:
        dmid, dW2, db2 = _dense_backward(cache["mid"], P[f"{pre}.W2"], dh, axis)
        grads[f"{pre}.W2"] += dW2
        grads[f"{pre}.b2"] += db2
        dh = _act_grad(cfg.activation, cache["mid_gate"], dmid)
    dz, dW, db = _dense_backward(cache["z"], P[f"{pre}.W"], dh, axis)
    grads[f"{pre}.W"] += dW
    grads[f"{pre}.b"] += db
    return dz


def _gather_matrix(indices, mask, n_src):
    """Sparse (rows x n_src) selector used to scatter slot gradients to nodes."""
    rows = np.flatnonzero(mask.ravel())
    cols = indices.ravel()[rows]
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(mask.size, n_src))


def forward(model: MixerModel, ps: PatchSet, *, training=False, rng=None):
    """Logits (``n x C``) and the trace needed for :func:`backward`.

    When the patch set carries node features (rather than a materialized
    tensor) the first feature block runs per node and is gathered after
    the linear map, which is exact because layer norm acts per slot.
    """
    cfg, P = model.config, model.params
    # internal layout is slot-major: (p, n, width)
    mask = np.ascontiguousarray(_inputs(cfg, ps).T)
    m3 = mask[:, :, None]
    if training and cfg.dropout > 0.0 and rng is None:
        rng = np.random.default_rng(0)
    blocks = []
    gather = None
    x = None
    if ps.tensor is None:
        if ps.node_features is None:
            raise ShapeMismatch("patch set has no features")
        gather = ps
    else:
        x = np.where(m3, np.asarray(ps.tensor, dtype=np.float64).transpose(1, 0, 2), 0.0)
    for i in range(cfg.layers):
        # feature mixing
        pre = f"feature{i}"
        if i == 0 and gather is not None:
            X = gather.node_features
            z, xhat, rstd = _ln(X, P[f"{pre}.ln_scale"], P[f"{pre}.ln_shift"], cfg.ln_eps)
            h = _dense(z, P[f"{pre}.W"], P[f"{pre}.b"], "feature")
            idx = np.where(mask, gather.indices.T, 0)
            cache = {"z": z, "node_level": True, "idx": idx}
            if cfg.two_layer:
                mid = _act(cfg.activation, h)
                cache["mid_gate"] = _act_cache(cfg.activation, h, mid)
                cache["mid"] = mid
                h = _dense(mid, P[f"{pre}.W2"], P[f"{pre}.b2"], "feature")
            out, cache["gate"], drop = _activate(cfg, h[idx], training, rng)
            if drop is not None:
                cache["drop"] = drop
            if cfg.residual and cfg.d == cfg.hidden:
                out += X[idx]
        else:
            z, xhat, rstd = _ln(x, P[f"{pre}.ln_scale"], P[f"{pre}.ln_shift"], cfg.ln_eps, mask)
            out, cache = _mlp(model, pre, z, "feature", training, rng)
            if cfg.residual and x.shape[-1] == cfg.hidden:
                out += x
            cache["node_level"] = False
        cache.update(xhat=xhat, rstd=rstd)
        out *= m3
        x = out
        blocks.append(cache)
        # patch mixing along the slot axis
        pre = f"patch{i}"
        z, xhat, rstd = _ln(x, P[f"{pre}.ln_scale"], P[f"{pre}.ln_shift"], cfg.ln_eps, mask)
        out, cache = _mlp(model, pre, z, "patch", training, rng)
        if cfg.residual:
            out += x
        cache.update(xhat=xhat, rstd=rstd)
        out *= m3
        x = out
        blocks.append(cache)
    pooled, pool_cache = _aggregate(cfg.aggregate, x, mask)
    logits = _dense(pooled, P["head.W"], P["head.b"], "feature")
    return logits, ForwardTrace(mask, gather, blocks, pooled, pool_cache, mask.shape[1])


def _aggregate(kind, x, mask):
    counts = mask.sum(axis=0)
    if kind == "sum":
        return x.sum(axis=0), None
    if kind == "mean":
        denom = np.maximum(counts, 1)[:, None]
        return x.sum(axis=0) / denom, denom
    filled = np.where(mask[:, :, None], x, -np.inf)
    arg = filled.argmax(axis=0)
    out = np.take_along_axis(x, arg[None, :, :], axis=0)[0]
    out[counts == 0] = 0.0
    return out, arg


def _aggregate_backward(kind, dpooled, cache, mask):
    p, n = mask.shape
    m3 = mask[:, :, None]
    shape = (p, n, dpooled.shape[1])
    if kind == "sum":
        return np.broadcast_to(dpooled[None], shape) * m3
    if kind == "mean":
        return np.broadcast_to((dpooled / cache)[None], shape) * m3
    dx = np.zeros(shape)
    np.put_along_axis(dx, cache[None], dpooled[None], axis=0)
    return dx * m3


def backward(model: MixerModel, trace: ForwardTrace, dlogits):
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dlogits."""
    cfg, P = model.config, model.params
    grads = zeros_like(model)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    mask = trace.mask
    m3 = mask[:, :, None]
    dpooled, grads["head.W"][...], grads["head.b"][...] = _dense_backward(
        trace.pooled, P["head.W"], dlogits, "feature")
    dx = _aggregate_backward(cfg.aggregate, dpooled, trace.pool_cache, mask)
    for i in reversed(range(cfg.layers)):
        # patch block (dx is already zero on padding slots)
        pre = f"patch{i}"
        cache = trace.blocks[2 * i + 1]
        dz = _mlp_backward(model, pre, cache, dx, "patch", grads)
        dxin, dscale, dshift = _ln_backward(dz, cache["xhat"], cache["rstd"],
                                            P[f"{pre}.ln_scale"], mask)
        grads[f"{pre}.ln_scale"] += dscale
        grads[f"{pre}.ln_shift"] += dshift
        dx = dxin + dx if cfg.residual else dxin
        dx *= m3
        # feature block
        pre = f"feature{i}"
        cache = trace.blocks[2 * i]
        if cache["node_level"]:
            _feature0_node_backward(model, trace, cache, dx, grads)
            break
        dz = _mlp_backward(model, pre, cache, dx, "feature", grads)
        dxin, dscale, dshift = _ln_backward(dz, cache["xhat"], cache["rstd"],
                                            P[f"{pre}.ln_scale"], mask)
        grads[f"{pre}.ln_scale"] += dscale
        grads[f"{pre}.ln_shift"] += dshift
        if cfg.residual and cache["z"].shape[-1] == cfg.hidden:
            dxin += dx
        dx = dxin * m3
    return grads


def _feature0_node_backward(model, trace, cache, dout, grads):
    cfg, P = model.config, model.params
    pre = "feature0"
    dh_slots = _deactivate(cfg, cache, dout)
    S = _gather_matrix(cache["idx"], trace.mask, cache["z"].shape[0])
    dh = np.asarray(S.T @ dh_slots.reshape(-1, dh_slots.shape[-1]))
    if cfg.two_layer:
        dmid, dW2, db2 = _dense_backward(cache["mid"], P[f"{pre}.W2"], dh, "feature")
        grads[f"{pre}.W2"] += dW2
        grads[f"{pre}.b2"] += db2
        dh = _act_grad(cfg.activation, cache["mid_gate"], dmid)
    dz, dW, db = _dense_backward(cache["z"], P[f"{pre}.W"], dh, "feature")
    grads[f"{pre}.W"] += dW
    grads[f"{pre}.b"] += db
    _, dscale, dshift = _ln_backward(dz, cache["xhat"], cache["rstd"], P[f"{pre}.ln_scale"])
    grads[f"{pre}.ln_scale"] += dscale
    grads[f"{pre}.ln_shift"] += dshift


def predict(model: MixerModel, ps: PatchSet):
    return forward(model, ps, training=False)[0]
