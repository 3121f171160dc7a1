"""Dense towers and a stacked attention block with hand-written backprop.

Weights may carry one optional leading "agent" axis, e.g. ``(K, in, out)``;
inputs then carry the same leading axis followed by any batch axes. This
lets all agents of a team run through one set of numpy calls.

Parameter names are ``"<tower>/W<l>"`` / ``"<tower>/b<l>"`` for dense
layers and ``"attn<l>/{Wq,Wk,Wv,Wo,bo}"`` for attention layers.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .mdp import ConfigError

DTYPES = {"float32": np.float32, "float64": np.float64}


class DimensionError(ValueError):
    pass


@dataclass
class NetworkSpec:
    o_alone_dim: int = 22
    token_dim: int = 5
    num_actions: int = 5
    alone_hidden: tuple = (64, 64)
    encoder_hidden: tuple = ()
    model_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    head_hidden: tuple = (64,)
    precision: str = "float32"

    def validate(self, path: str = "") -> None:
        dims = [self.o_alone_dim, self.token_dim, self.num_actions, self.model_dim,
                self.num_heads, *self.alone_hidden, *self.encoder_hidden, *self.head_hidden]
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"{path}: all network dimensions must be positive")
        if self.num_layers < 0:
            raise ConfigError(f"{path}/num_layers: must be >= 0")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"{path}/num_heads: must divide model_dim")
        if self.precision not in DTYPES:
            raise ConfigError(f"{path}/precision: one of {sorted(DTYPES)}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("alone_hidden", "encoder_hidden", "head_hidden"):
            d[k] = list(d[k])
        return d


class ParamStore:
    """Ordered mapping of parameter name to array."""

    def __init__(self, tensors=None):
        self.tensors: OrderedDict[str, np.ndarray] = OrderedDict(tensors or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    @property
    def total_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParamStore":
        return ParamStore((k, v.copy()) for k, v in self.tensors.items())

    def zeros_like(self) -> "ParamStore":
        return ParamStore((k, np.zeros_like(v)) for k, v in self.tensors.items())

    def astype(self, dtype) -> "ParamStore":
        return ParamStore((k, v.astype(dtype)) for k, v in self.tensors.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for k, v in self.tensors.items():
            n = v.size
            self.tensors[k] = flat[pos:pos + n].reshape(v.shape).astype(v.dtype)
            pos += n

    def agent(self, i: int) -> "ParamStore":
        """Slice agent ``i`` out of a stacked store."""
        return ParamStore((k, v[i].copy()) for k, v in self.tensors.items())

    @staticmethod
    def stack(stores) -> "ParamStore":
        stores = list(stores)
        return ParamStore((k, np.stack([s[k] for s in stores])) for k in stores[0].names())

    def num_layers(self, tower: str) -> int:
        n = 0
        while f"{tower}/W{n}" in self.tensors:
            n += 1
        return n

    def digest(self) -> str:
        """sha256 over names, dtypes, shapes and bytes."""
        h = hashlib.sha256()
        for k, v in self.tensors.items():
            h.update(f"{k}|{v.dtype.str}|{v.shape}".encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            self[k].dtype == other[k].dtype and np.array_equal(self[k], other[k]) for k in self
        )


def tower_sizes(spec: NetworkSpec, algo: str) -> dict:
    """Dense tower layer sizes for an algorithm's architecture."""
    A, d = spec.num_actions, spec.model_dim
    full_in = spec.o_alone_dim + 2 * spec.token_dim  # o_alone ++ mean/max pooled tokens
    collab = {
        "cenc": [spec.o_alone_dim, *spec.encoder_hidden, d],
        "tenc": [spec.token_dim, *spec.encoder_hidden, d],
        "head": [2 * d, *spec.head_hidden, A],
    }
    if algo == "collaq":
        return {"alone": [spec.o_alone_dim, *spec.alone_hidden, A], **collab}
    if algo == "sum_two_nets":
        return {"alone": [full_in, *spec.alone_hidden, A], **collab}
    if algo == "iql":
        return {"alone": [full_in, *spec.alone_hidden, A]}
    raise ValueError(f"unknown algo {algo!r}")


def _glorot(rng, fan_in, fan_out, lead, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=lead + (fan_in, fan_out)).astype(dtype)


def init_params(spec: NetworkSpec, rng: np.random.Generator, algo: str = "collaq",
                num_agents: int | None = None) -> ParamStore:
    """Glorot-uniform weights, zero biases; stacked on axis 0 when ``num_agents`` is set."""
    lead = () if num_agents is None else (num_agents,)
    dt = spec.dtype
    p = ParamStore()
    for tower, sizes in tower_sizes(spec, algo).items():
        for l, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            p[f"{tower}/W{l}"] = _glorot(rng, a, b, lead, dt)
            p[f"{tower}/b{l}"] = np.zeros(lead + (b,), dtype=dt)
    if algo != "iql":
        d = spec.model_dim
        for l in range(spec.num_layers):
            for name in ("Wq", "Wk", "Wv", "Wo"):
                p[f"attn{l}/{name}"] = _glorot(rng, d, d, lead, dt)
            p[f"attn{l}/bo"] = np.zeros(lead + (d,), dtype=dt)
    return p


# -- primitives -------------------------------------------------------------

def _mm(x, W):
    lead = W.ndim - 2
    if x.shape[-1] != W.shape[-2]:
        raise DimensionError(f"input dim {x.shape[-1]} does not match weight {W.shape}")
    x2 = x.reshape(x.shape[:lead] + (-1, x.shape[-1]))
    return (x2 @ W).reshape(x.shape[:-1] + (W.shape[-1],))


def _add_bias(y, b):
    lead = b.ndim - 1
    return y + b.reshape(b.shape[:lead] + (1,) * (y.ndim - lead - 1) + b.shape[-1:])


def _mm_backward(x, W, gy, need_dx=True):
    lead = W.ndim - 2
    x2 = x.reshape(x.shape[:lead] + (-1, x.shape[-1]))
    g2 = gy.reshape(gy.shape[:lead] + (-1, gy.shape[-1]))
    dW = np.swapaxes(x2, -1, -2) @ g2
    dx = (g2 @ np.swapaxes(W, -1, -2)).reshape(x.shape) if need_dx else None
    return dW, dx


def _bias_grad(gy, b):
    lead = b.ndim - 1
    axes = tuple(range(lead, gy.ndim - 1))
    return gy.sum(axis=axes) if axes else gy.copy()


# -- traces -------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Activations recorded by one forward pass of a tower or attention block."""

    kind: str
    prefix: str
    records: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def mlp_forward(params: ParamStore, tower: str, x, want_trace: bool = False,
                final_relu: bool = False):
    """Affine + ReLU per hidden layer, affine output (ReLU too if ``final_relu``)."""
    n = params.num_layers(tower)
    if n == 0:
        raise KeyError(f"no tower named {tower!r}")
    h = np.asarray(x)
    records = []
    for l in range(n):
        W, b = params[f"{tower}/W{l}"], params[f"{tower}/b{l}"]
        z = _add_bias(_mm(h, W), b)
        relu = l < n - 1 or final_relu
        out = np.maximum(z, 0) if relu else z
        records.append((h, out, relu))
        h = out
    trace = ForwardTrace("mlp", tower, records) if want_trace else None
    return h, trace


def _mlp_backward(params, trace: ForwardTrace, gy, grads, need_dx=False):
    tower = trace.prefix
    n = len(trace.records)
    for l in range(n - 1, -1, -1):
        x, out, relu = trace.records[l]
        if relu:
            gy = gy * (out > 0)
        W = params[f"{tower}/W{l}"]
        dW, dx = _mm_backward(x, W, gy, need_dx=need_dx or l > 0)
        _accumulate(grads, f"{tower}/W{l}", dW)
        _accumulate(grads, f"{tower}/b{l}", _bias_grad(gy, params[f"{tower}/b{l}"]))
        gy = dx
    return gy


def _accumulate(grads, name, g):
    if name in grads.tensors:
        grads.tensors[name] = grads.tensors[name] + g
    else:
        grads.tensors[name] = g


def _split_heads(x, H):
    return x.reshape(x.shape[:-1] + (H, x.shape[-1] // H))


def attention_forward(params: ParamStore, query, tokens, mask=None, want_trace: bool = False,
                      num_heads: int = 2, prefix: str = "attn"):
    """Stacked query-over-tokens attention.

    ``query``: (..., d) embedding; ``tokens``: (..., N, d) token embeddings;
    ``mask``: (..., N) presence flags (all present when omitted). Each layer
    updates the query by residual scaled dot-product attention followed by a
    ReLU. Rows without any present token return exactly zero.
    """
    query = np.asarray(query)
    tokens = np.asarray(tokens, dtype=query.dtype)
    if tokens.ndim == query.ndim:  # a list of zero tokens for a single query
        tokens = tokens.reshape(query.shape[:-1] + (0, query.shape[-1]))
    if tokens.shape[-1] != query.shape[-1]:
        raise DimensionError(f"token dim {tokens.shape[-1]} != query dim {query.shape[-1]}")
    N = tokens.shape[-2]
    if mask is None:
        mask = np.ones(tokens.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    H = num_heads
    d = query.shape[-1]
    dh = d // H
    scale = 1.0 / math.sqrt(dh)
    has_any = mask.any(axis=-1)
    L = 0
    while f"{prefix}{L}/Wq" in params:
        L += 1
    h = query
    records = []
    maskf = mask[..., None, :].astype(query.dtype)  # (..., 1, N) broadcast over heads
    for l in range(L):
        Wq, Wk, Wv, Wo, bo = (params[f"{prefix}{l}/{n}"] for n in ("Wq", "Wk", "Wv", "Wo", "bo"))
        if N == 0:
            records.append(None)
            continue
        q = _split_heads(_mm(h, Wq), H)  # (..., H, dh)
        k = _split_heads(_mm(tokens, Wk), H)  # (..., N, H, dh)
        v = _split_heads(_mm(tokens, Wv), H)
        kT = np.moveaxis(k, -3, -1)  # (..., H, dh, N)
        s = (q[..., None, :] @ kT)[..., 0, :] * scale  # (..., H, N)
        s = np.where(maskf > 0, s, -np.inf)
        smax = np.max(s, axis=-1, keepdims=True)
        smax = np.where(np.isfinite(smax), smax, 0.0)
        e = np.exp(s - smax) * maskf
        Z = e.sum(axis=-1, keepdims=True)
        p = e / np.where(Z > 0, Z, 1.0)
        vT = np.moveaxis(v, -3, -2)  # (..., H, N, dh)
        c = (p[..., None, :] @ vT)[..., 0, :]  # (..., H, dh)
        c = c.reshape(c.shape[:-2] + (d,))
        u = _add_bias(_mm(c, Wo), bo) + h
        out = np.maximum(u, 0)
        records.append((h, q, k, v, p, c, out))
        h = out
    y = h * has_any[..., None].astype(h.dtype)
    if N == 0:
        y = np.zeros_like(query)
    trace = None
    if want_trace:
        trace = ForwardTrace("attention", prefix, records,
                             {"tokens": tokens, "has_any": has_any, "H": H, "scale": scale})
    return y, trace


def _attention_backward(params, trace: ForwardTrace, gy, grads):
    """Returns (d query, d tokens)."""
    tokens = trace.extra["tokens"]
    H, scale = trace.extra["H"], trace.extra["scale"]
    prefix = trace.prefix
    g = gy * trace.extra["has_any"][..., None].astype(gy.dtype)
    gtok = np.zeros_like(tokens)
    for l in range(len(trace.records) - 1, -1, -1):
        rec = trace.records[l]
        names = {n: f"{prefix}{l}/{n}" for n in ("Wq", "Wk", "Wv", "Wo", "bo")}
        if rec is None:
            for n in names.values():
                _accumulate(grads, n, np.zeros_like(params[n]))
            g = np.zeros_like(g)
            continue
        h, q, k, v, p, c, out = rec
        d = h.shape[-1]
        gu = g * (out > 0)
        dWo, gc = _mm_backward(c, params[names["Wo"]], gu)
        _accumulate(grads, names["Wo"], dWo)
        _accumulate(grads, names["bo"], _bias_grad(gu, params[names["bo"]]))
        gh = gu  # residual
        gc = _split_heads(gc, H)  # (..., H, dh)
        vT = np.moveaxis(v, -3, -2)  # (..., H, N, dh)
        # c = p @ vT
        gp = (gc[..., None, :] @ np.swapaxes(vT, -1, -2))[..., 0, :]  # (..., H, N)
        gvT = p[..., :, None] * gc[..., None, :]  # (..., H, N, dh)
        gv = np.moveaxis(gvT, -3, -2)  # (..., N, H, dh)
        gs = p * (gp - np.sum(p * gp, axis=-1, keepdims=True))
        gs = gs * scale
        kT = np.moveaxis(k, -3, -1)  # (..., H, dh, N)
        gq = (gs[..., None, :] @ np.swapaxes(kT, -1, -2))[..., 0, :]  # (..., H, dh)
        gk = np.moveaxis(gs[..., :, None] * q[..., None, :], -3, -2)  # (..., N, H, dh)
        gq = gq.reshape(gq.shape[:-2] + (d,))
        gk = gk.reshape(gk.shape[:-2] + (d,))
        gv = gv.reshape(gv.shape[:-2] + (d,))
        dWq, dh_q = _mm_backward(h, params[names["Wq"]], gq)
        dWk, dtok_k = _mm_backward(tokens, params[names["Wk"]], gk)
        dWv, dtok_v = _mm_backward(tokens, params[names["Wv"]], gv)
        _accumulate(grads, names["Wq"], dWq)
        _accumulate(grads, names["Wk"], dWk)
        _accumulate(grads, names["Wv"], dWv)
        gtok = gtok + dtok_k + dtok_v
        g = gh + dh_q
    return g, gtok


def backward(params: ParamStore, trace: ForwardTrace, upstream) -> ParamStore:
    """Reverse-mode gradients of ``sum(upstream * output)`` for one trace.

    Every tensor in ``params`` gets an entry; untouched ones are zero.
    """
    grads = ParamStore()
    upstream = np.asarray(upstream)
    if trace.kind == "mlp":
        _mlp_backward(params, trace, upstream, grads)
    elif trace.kind == "attention":
        _attention_backward(params, trace, upstream, grads)
    else:
        raise ValueError(f"unknown trace kind {trace.kind!r}")
    return fill_zeros(params, grads)


def fill_zeros(params: ParamStore, grads: ParamStore) -> ParamStore:
    out = ParamStore()
    for k, v in params.items():
        g = grads.tensors.get(k)
        out[k] = np.zeros_like(v) if g is None else g.astype(v.dtype, copy=False)
    return out


def finite_diff_gradcheck(params: ParamStore, loss_fn, grad_fn, eps: float = 1e-6,
                          num_coords: int = 200, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> float`` and ``grad_fn(params) -> ParamStore`` are
    evaluated in float64 on a random subsample of at least ``num_coords``
    coordinates (all of them when there are fewer).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    p = params.astype(np.float64)
    base = loss_fn(p)
    if not np.isfinite(base):
        raise FloatingPointError("loss is not finite")
    analytic = grad_fn(p).flat()
    theta = p.flat()
    n = theta.size
    idx = np.arange(n) if n <= num_coords else rng.choice(n, size=num_coords, replace=False)
    worst = 0.0
    work = p.copy()
    for j in idx:
        t = theta.copy()
        t[j] += eps
        work.load_flat(t)
        fp = loss_fn(work)
        t[j] -= 2 * eps
        work.load_flat(t)
        fm = loss_fn(work)
        numeric = (fp - fm) / (2 * eps)
        denom = max(abs(analytic[j]), abs(numeric), 1e-12)
        err = abs(analytic[j] - numeric) / denom
        worst = max(worst, err)
    return float(worst)
