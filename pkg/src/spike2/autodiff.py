"""Reverse-mode differentiation over the tensor kernels.

A Var wraps a float64 array plus the closure that routes its gradient to its
parents. Graphs are acyclic by construction; backward() walks one reverse
topological order and accumulates into .grad. One tape per training step;
tapes are never shared across threads.

The only non-smooth primitive is round_clip, the quantizer used by the
spiking neurons: its backward is the straight-through rule, i.e. the exact
derivative of the relaxed map clip(u, 0, D) (pass the gradient iff the
pre-round value lies in [0, D]).
"""

from __future__ import annotations

import numpy as np

from . import tensor as tk


class GradError(ValueError):
    pass


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def param(data, name=None) -> Var:
    return Var(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def const(data) -> Var:
    return Var(data)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(data, parents, backward) -> Var:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Var(data, requires_grad=True, parents=parents, backward=backward)
    return Var(data)


def _acc(var: Var, g: np.ndarray) -> None:
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.zeros_like(var.data)
    var.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (the adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def back(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), back)


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def back(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), back)


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def back(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), back)


def div(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def back(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), back)


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(x % a.data.ndim for x in ax)
            shape = [1 if i in ax else d for i, d in enumerate(a.data.shape)]
            gg = g.reshape(shape)
        _acc(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out, (a,), back)


def vmean(a: Var, axis=None, keepdims=False) -> Var:
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for x in ax:
            n *= a.data.shape[x % a.data.ndim]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Var, shape) -> Var:
    out = a.data.reshape(shape)

    def back(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(out, (a,), back)


def transpose(a: Var, axes) -> Var:
    out = a.data.transpose(axes)
    inv = np.argsort(axes)

    def back(g):
        _acc(a, g.transpose(inv))

    return _make(out, (a,), back)


def concat(parts: list[Var], axis: int) -> Var:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def back(g):
        start = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            _acc(p, g[tuple(sl)])
            start += s

    return _make(out, tuple(parts), back)


def split(a: Var, sections: int, axis: int) -> list[Var]:
    chunks = np.split(a.data, sections, axis=axis)
    size = chunks[0].shape[axis]
    outs = []
    for i, ch in enumerate(chunks):
        def back(g, i=i):
            gg = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[axis] = slice(i * size, (i + 1) * size)
            gg[tuple(sl)] = g
            _acc(a, gg)

        outs.append(_make(ch, (a,), back))
    return outs


def tile_leading(a: Var, n: int) -> Var:
    """Repeat a along a new leading axis (e.g. queries over the batch)."""
    out = np.repeat(a.data[None], n, axis=0)

    def back(g):
        _acc(a, g.sum(axis=0))

    return _make(out, (a,), back)


def take_pairs(a: Var, idx0: np.ndarray, idx1: np.ndarray) -> Var:
    """Select a[idx0[k], idx1[k]] rows; used to pull matched queries."""
    idx0 = np.asarray(idx0, dtype=np.int64)
    idx1 = np.asarray(idx1, dtype=np.int64)
    out = a.data[idx0, idx1]

    def back(g):
        gg = np.zeros_like(a.data)
        np.add.at(gg, (idx0, idx1), g)
        _acc(a, gg)

    return _make(out, (a,), back)


def matmul(a: Var, b: Var) -> Var:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise GradError("matmul operands must be at least 2-D")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _acc(a, _unbroadcast(ga, a.data.shape))
        _acc(b, _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), back)


def sigmoid(a: Var) -> Var:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        _acc(a, g * out * (1.0 - out))

    return _make(out, (a,), back)


def exp(a: Var) -> Var:
    out = np.exp(a.data)

    def back(g):
        _acc(a, g * out)

    return _make(out, (a,), back)


def log(a: Var) -> Var:
    out = np.log(a.data)

    def back(g):
        _acc(a, g / a.data)

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# Quantizer
# ---------------------------------------------------------------------------


def round_clip(u: Var, d_max: int, relaxed: bool = False) -> Var:
    """Forward clip(round(u), 0, D); backward passes gradient iff u in [0, D].

    relaxed=True drops the round (forward clip(u, 0, D)), whose exact
    derivative equals the straight-through backward; used by gradient checks.
    """
    u = _wrap(u)
    if d_max < 1:
        raise GradError("quantization ceiling D must be >= 1")
    if relaxed:
        out = np.clip(u.data, 0.0, float(d_max))
    else:
        out = np.clip(tk.round_half_away(u.data), 0.0, float(d_max))
    gate = (u.data >= 0.0) & (u.data <= float(d_max))

    def back(g):
        _acc(u, g * gate)

    return _make(out, (u,), back)


# ---------------------------------------------------------------------------
# Structured ops: conv, batch norm, sampling, resizing
# ---------------------------------------------------------------------------


def conv2d(x: Var, spec: tk.ConvSpec, w: Var, b: Var | None = None) -> Var:
    x, w = _wrap(x), _wrap(w)
    bias = None if b is None else b.data
    out, cols = tk.conv2d_forward(x.data, spec, w.data, bias)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        _acc(w, tk.conv2d_grad_weight(g, cols, spec))
        _acc(x, tk.conv2d_grad_input(g, w.data, spec, x.data.shape))
        if b is not None:
            _acc(b, g.sum(axis=(0, 2, 3)))

    return _make(out, parents, back)


def batchnorm(x: Var, gamma: Var, beta: Var, running_mean: np.ndarray,
              running_var: np.ndarray, epsilon: float, momentum: float,
              training: bool) -> Var:
    """Channel-axis-1 batch norm. Training mode normalizes with batch
    statistics and updates the running arrays in place (side effect on the
    layer, not on the tape)."""
    x = _wrap(x)
    c = x.data.shape[1]
    axes = (0,) + tuple(range(2, x.data.ndim))
    shape = (1, c) + (1,) * (x.data.ndim - 2)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def back(g):
        _acc(gamma, (g * xhat).sum(axis=axes))
        _acc(beta, g.sum(axes))
        if not x.requires_grad:
            return
        gx_hat = g * gamma.data.reshape(shape)
        if training:
            m = gx_hat.mean(axis=axes).reshape(shape)
            mx = (gx_hat * xhat).mean(axis=axes).reshape(shape)
            _acc(x, inv.reshape(shape) * (gx_hat - m - xhat * mx))
        else:
            _acc(x, gx_hat * inv.reshape(shape))

    return _make(out, (x, gamma, beta), back)


def grid_sample(feat: Var, points, padding: str = "zeros") -> Var:
    """Bilinear gather; points may be a Var (offset gradients flow through
    the sampling locations) or a plain array (fixed grid)."""
    feat = _wrap(feat)
    pts_var = points if isinstance(points, Var) else None
    pts = points.data if isinstance(points, Var) else np.asarray(points, dtype=np.float64)
    out = tk.bilinear_gather(feat.data, pts, padding)
    parents = (feat,) if pts_var is None else (feat, pts_var)

    def back(g):
        need_pts = pts_var is not None and pts_var.requires_grad
        dfeat, dpts = tk.bilinear_gather_backward(feat.data, pts, g, padding, need_pts)
        _acc(feat, dfeat)
        if need_pts:
            _acc(pts_var, dpts)

    return _make(out, parents, back)


def upsample_nearest(x: Var, k: int) -> Var:
    x = _wrap(x)
    out = x.data.repeat(k, axis=2).repeat(k, axis=3)

    def back(g):
        n, c, h, w = x.data.shape
        _acc(x, g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)))

    return _make(out, (x,), back)


def upsample_bilinear(x: Var, k: int) -> Var:
    """Integer-factor bilinear resize via separable row/column matrices."""
    x = _wrap(x)
    n, c, h, w = x.data.shape
    my = tk.upsample_matrices(h, h * k)
    mx = tk.upsample_matrices(w, w * k)
    out = np.einsum("ab,ncbw,dw->ncad", my, x.data, mx, optimize=True)

    def back(g):
        _acc(x, np.einsum("ab,ncad,dw->ncbw", my, g, mx, optimize=True))

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def bce_with_logits(logits: Var, targets: np.ndarray) -> Var:
    """Mean binary cross-entropy on logits, numerically stable."""
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    val = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.array(val.mean())
    n = x.size

    def back(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        _acc(logits, g * (s - t) / n)

    return _make(out, (logits,), back)


def cross_entropy(logits: Var, targets: np.ndarray, class_weights: np.ndarray | None = None) -> Var:
    """Weighted mean CE over rows; logits (M, K), integer targets (M,)."""
    x = logits.data
    t = np.asarray(targets, dtype=np.int64)
    m = x.shape[0]
    shift = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - lse
    w = np.ones(x.shape[1]) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    wi = w[t]
    wsum = wi.sum()
    out = np.array(-(wi * logp[np.arange(m), t]).sum() / wsum)

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        onehot[np.arange(m), t] = 1.0
        _acc(logits, g * (wi[:, None] / wsum) * (p - onehot))

    return _make(out, (logits,), back)


def dice_loss(mask_logits: Var, targets: np.ndarray, smooth: float = 1.0) -> Var:
    """Soft dice over the last axis (flattened pixels); mean over rows."""
    probs = sigmoid(mask_logits)
    t = np.asarray(targets, dtype=np.float64)
    num = mul(vsum(mul(probs, t), axis=-1), 2.0) + smooth
    den = vsum(probs, axis=-1) + (t.sum(axis=-1) + smooth)
    return vmean(sub(1.0, div(num, den)))


# ---------------------------------------------------------------------------
# Backward driver
# ---------------------------------------------------------------------------


def _topo_dfs(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _topo_kahn(root: Var) -> list[Var]:
    # in-degree: number of consumers within the reachable-from-root subgraph
    nodes: list[Var] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append(n)
        for p in n._parents:
            if p.requires_grad:
                stack.append(p)
    consumers: dict[int, int] = {id(n): 0 for n in nodes}
    for n in nodes:
        for p in n._parents:
            if id(p) in consumers:
                consumers[id(p)] += 1
    ready = [n for n in nodes if consumers[id(n)] == 0]
    order_rev: list[Var] = []
    while ready:
        n = ready.pop(0)
        order_rev.append(n)
        for p in n._parents:
            if id(p) in consumers:
                consumers[id(p)] -= 1
                if consumers[id(p)] == 0:
                    ready.append(p)
    if len(order_rev) != len(nodes):
        raise GradError("cycle detected in tape")
    return order_rev[::-1]


def backward(loss: Var, order: str = "dfs") -> None:
    """Accumulate gradients of a scalar loss into every reachable .grad."""
    if loss.data.size != 1:
        raise GradError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo = _topo_dfs(loss) if order == "dfs" else _topo_kahn(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_map(loss: Var, params: dict[str, Var], order: str = "dfs") -> dict[str, np.ndarray]:
    """Run backward and return name -> gradient; parameters not reachable
    from the loss get exact zeros."""
    backward(loss, order=order)
    out = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.data) if p.grad is None else p.grad
    return out


def zero_grads(params) -> None:
    it = params.values() if isinstance(params, dict) else params
    for p in it:
        p.grad = None
