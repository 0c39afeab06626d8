"""Reverse-mode automatic differentiation over a small, fixed primitive set.

A Graph is a flat list of nodes in topological order. It is built once,
shapes are inferred and checked at build time, and the finished graph is
evaluated many times with different bindings. Inputs and parameters are
named leaves; parameter values live with the graph but can be overridden
per call, which is how the trainer feeds updated weights without touching
graph structure.

Primitives: elementwise + - * / with numpy broadcasting, matmul, strided
1-D convolution, gated recurrence over time (GRU or LSTM), sigmoid, exp,
log, cumulative sum, sum/max reductions, gather along the time axis, and
cosine similarity. reshape/concat move data without arithmetic. Everything
else (tanh, mean, logsumexp, ...) is composed from these.

Graphs default to float32; float64 exists for gradient verification only.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ContractError, GraphBuildError, NumericError

_DTYPES = {"float32": np.float32, "float64": np.float64}

_LEAF_OPS = ("input", "parameter", "constant")


class Node:
    __slots__ = ("idx", "op", "args", "attrs", "shape")

    def __init__(self, idx, op, args, attrs, shape):
        self.idx = idx
        self.op = op
        self.args = args
        self.attrs = attrs
        self.shape = shape

    def __repr__(self):
        return f"Node({self.idx}, {self.op!r}, shape={self.shape})"


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise GraphBuildError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def _reduce_shape(shape, axis, keepdims):
    if axis is None:
        return tuple(1 for _ in shape) if keepdims else ()
    if keepdims:
        return tuple(1 if i == axis else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i != axis)


class Graph:
    """Static computation graph with named inputs and parameters."""

    def __init__(self, dtype="float32"):
        if dtype not in _DTYPES:
            raise ContractError(f"dtype must be 'float32' or 'float64', got {dtype!r}")
        self.dtype = _DTYPES[dtype]
        self.nodes: list[Node] = []
        self.input_names: dict[str, int] = {}
        self.param_names: dict[str, int] = {}
        self.params: dict[str, np.ndarray] = {}
        self._input_meta: dict[str, dict] = {}
        self._consts: dict[int, np.ndarray] = {}

    # ---- construction -------------------------------------------------

    def _append(self, op, args, attrs, shape):
        node = Node(len(self.nodes), op, tuple(args), attrs, tuple(shape))
        self.nodes.append(node)
        return node.idx

    def _shape(self, idx):
        return self.nodes[idx].shape

    def _coerce(self, x):
        """Return a node id. ints are node ids; floats and arrays become constants."""
        if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
            if 0 <= x < len(self.nodes):
                return int(x)
            raise GraphBuildError(f"node id {x} out of range")
        if isinstance(x, (float, np.floating)):
            return self.constant(np.asarray(x, dtype=self.dtype))
        if isinstance(x, np.ndarray):
            return self.constant(x)
        raise GraphBuildError(f"cannot use {type(x).__name__} as a graph operand")

    def input(self, name, shape, differentiable=False, integer=False):
        if name in self.input_names or name in self.param_names:
            raise GraphBuildError(f"name {name!r} already declared")
        if integer and differentiable:
            raise GraphBuildError("integer inputs cannot be differentiable")
        idx = self._append("input", (), {"name": name}, tuple(shape))
        self.input_names[name] = idx
        self._input_meta[name] = {"differentiable": differentiable, "integer": integer}
        return idx

    def parameter(self, name, value):
        if name in self.input_names or name in self.param_names:
            raise GraphBuildError(f"name {name!r} already declared")
        value = np.asarray(value, dtype=self.dtype)
        idx = self._append("parameter", (), {"name": name}, value.shape)
        self.param_names[name] = idx
        self.params[name] = value
        return idx

    def constant(self, value):
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.integer):
            value = value.astype(self.dtype)
        idx = self._append("constant", (), {}, value.shape)
        self._consts[idx] = value
        return idx

    # ---- elementwise arithmetic ----------------------------------------

    def _binary(self, op, a, b):
        a, b = self._coerce(a), self._coerce(b)
        try:
            shape = np.broadcast_shapes(self._shape(a), self._shape(b))
        except ValueError:
            raise GraphBuildError(
                f"{op}: shapes {self._shape(a)} and {self._shape(b)} do not broadcast"
            ) from None
        return self._append(op, (a, b), {}, shape)

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def div(self, a, b):
        return self._binary("div", a, b)

    # ---- dense / conv / recurrent ---------------------------------------

    def matmul(self, a, b):
        a, b = self._coerce(a), self._coerce(b)
        sa, sb = self._shape(a), self._shape(b)
        if len(sa) < 2 or len(sb) < 2:
            raise GraphBuildError("matmul operands must have ndim >= 2")
        if sa[-1] != sb[-2]:
            raise GraphBuildError(f"matmul: inner dims {sa} @ {sb} do not match")
        try:
            batch = np.broadcast_shapes(sa[:-2], sb[:-2])
        except ValueError:
            raise GraphBuildError(f"matmul: batch dims {sa} @ {sb} do not broadcast") from None
        return self._append("matmul", (a, b), {}, batch + (sa[-2], sb[-1]))

    def conv1d(self, x, w, stride, pad):
        """x (B,T,C), w (K,C,F), pad=(left,right). Output (B,T_out,F)."""
        x, w = self._coerce(x), self._coerce(w)
        sx, sw = self._shape(x), self._shape(w)
        if len(sx) != 3 or len(sw) != 3:
            raise GraphBuildError(f"conv1d expects x (B,T,C) and w (K,C,F), got {sx}, {sw}")
        if sx[2] != sw[1]:
            raise GraphBuildError(f"conv1d: channel mismatch, x has {sx[2]}, w expects {sw[1]}")
        pl, pr = pad
        if stride < 1 or pl < 0 or pr < 0:
            raise GraphBuildError("conv1d: stride must be >= 1 and padding >= 0")
        t_out = (sx[1] + pl + pr - sw[0]) // stride + 1
        if t_out < 1:
            raise GraphBuildError(f"conv1d: input length {sx[1]} too short for kernel {sw[0]}")
        return self._append(
            "conv1d", (x, w), {"stride": stride, "pad": (pl, pr)}, (sx[0], t_out, sw[2])
        )

    def recurrence(self, x, w, u, b, cell="gru"):
        """Run a gated recurrent cell over axis 1 of x (B,T,I), zero initial state.

        w (I,G*H), u (H,G*H), b (G*H,) with G=3 for gru, 4 for lstm.
        Returns the hidden state sequence (B,T,H).
        """
        if cell not in ("gru", "lstm"):
            raise GraphBuildError(f"unknown recurrence cell {cell!r}")
        gates = 3 if cell == "gru" else 4
        x, w, u, b = self._coerce(x), self._coerce(w), self._coerce(u), self._coerce(b)
        sx, sw, su, sb = self._shape(x), self._shape(w), self._shape(u), self._shape(b)
        if len(sx) != 3:
            raise GraphBuildError(f"recurrence expects x (B,T,I), got {sx}")
        h = su[0] if len(su) == 2 else 0
        if len(sw) != 2 or len(su) != 2 or sw != (sx[2], gates * h) or su != (h, gates * h):
            raise GraphBuildError(
                f"recurrence: weight shapes {sw}/{su} inconsistent with x {sx} and cell {cell}"
            )
        if sb != (gates * h,):
            raise GraphBuildError(f"recurrence: bias shape {sb}, expected ({gates * h},)")
        return self._append("recurrence", (x, w, u, b), {"cell": cell}, (sx[0], sx[1], h))

    # ---- pointwise nonlinear ---------------------------------------------

    def sigmoid(self, x):
        x = self._coerce(x)
        return self._append("sigmoid", (x,), {}, self._shape(x))

    def tanh(self, x):
        x = self._coerce(x)
        return self._append("tanh", (x,), {}, self._shape(x))

    def exp(self, x):
        x = self._coerce(x)
        return self._append("exp", (x,), {}, self._shape(x))

    def log(self, x):
        x = self._coerce(x)
        return self._append("log", (x,), {}, self._shape(x))

    # ---- scans and reductions ---------------------------------------------

    def cumsum(self, x, axis):
        x = self._coerce(x)
        axis = _norm_axis(axis, len(self._shape(x)))
        return self._append("cumsum", (x,), {"axis": axis}, self._shape(x))

    def reduce_sum(self, x, axis=None, keepdims=False):
        x = self._coerce(x)
        axis = _norm_axis(axis, len(self._shape(x)))
        shape = _reduce_shape(self._shape(x), axis, keepdims)
        return self._append("sum", (x,), {"axis": axis, "keepdims": keepdims}, shape)

    def reduce_max(self, x, axis=None, keepdims=False):
        x = self._coerce(x)
        axis = _norm_axis(axis, len(self._shape(x)))
        shape = _reduce_shape(self._shape(x), axis, keepdims)
        return self._append("max", (x,), {"axis": axis, "keepdims": keepdims}, shape)

    # ---- gather / similarity ------------------------------------------------

    def take(self, x, idx):
        """Gather rows along the time axis of x (N,D) or (B,N,D).

        idx is an integer node. For 2-D x any idx shape S gives output (*S, D).
        For 3-D x, idx is either shared, shape S -> (B, *S, D), or batched with
        leading dim B, shape (B, *S) -> (B, *S, D). Not differentiable in idx.
        """
        x, idx = self._coerce(x), self._coerce(idx)
        sx, si = self._shape(x), self._shape(idx)
        if len(sx) == 2:
            shape = si + (sx[1],)
            batched = False
        elif len(sx) == 3:
            batched = len(si) >= 1 and si[0] == sx[0]
            shape = (sx[0],) + (si[1:] if batched else si) + (sx[2],)
        else:
            raise GraphBuildError(f"take expects x with ndim 2 or 3, got {sx}")
        return self._append("take", (x, idx), {"batched": batched}, shape)

    def cosine(self, a, b, pairwise=False):
        """Cosine similarity along the last axis; zero-norm rows give 0.

        Rowwise (default): a and b share shape (..., M, D) -> (..., M).
        Pairwise: a (..., M, D) with b (..., K, D) -> (..., M, K).
        """
        a, b = self._coerce(a), self._coerce(b)
        sa, sb = self._shape(a), self._shape(b)
        if len(sa) < 2 or len(sb) < 2:
            raise GraphBuildError("cosine operands must have ndim >= 2")
        if pairwise:
            if sa[:-2] != sb[:-2] or sa[-1] != sb[-1]:
                raise GraphBuildError(f"pairwise cosine: incompatible shapes {sa}, {sb}")
            shape = sa[:-1] + (sb[-2],)
        else:
            if sa != sb:
                raise GraphBuildError(f"rowwise cosine needs equal shapes, got {sa}, {sb}")
            shape = sa[:-1]
        return self._append("cosine", (a, b), {"pairwise": pairwise}, shape)

    # ---- structural ----------------------------------------------------------

    def reshape(self, x, shape):
        x = self._coerce(x)
        size = int(np.prod(self._shape(x), dtype=np.int64))
        shape = list(shape)
        if shape.count(-1) > 1:
            raise GraphBuildError("reshape allows at most one -1")
        if -1 in shape:
            rest = int(np.prod([s for s in shape if s != -1], dtype=np.int64))
            if rest == 0 or size % rest:
                raise GraphBuildError(f"cannot reshape {self._shape(x)} to {tuple(shape)}")
            shape[shape.index(-1)] = size // rest
        if int(np.prod(shape, dtype=np.int64)) != size:
            raise GraphBuildError(f"cannot reshape {self._shape(x)} to {tuple(shape)}")
        return self._append("reshape", (x,), {}, tuple(shape))

    def concat(self, xs, axis):
        xs = tuple(self._coerce(x) for x in xs)
        if not xs:
            raise GraphBuildError("concat of nothing")
        shapes = [self._shape(x) for x in xs]
        axis = _norm_axis(axis, len(shapes[0]))
        base = list(shapes[0])
        total = 0
        for s in shapes:
            if len(s) != len(base) or any(
                i != axis and s[i] != base[i] for i in range(len(base))
            ):
                raise GraphBuildError(f"concat: incompatible shapes {shapes}")
            total += s[axis]
        base[axis] = total
        return self._append("concat", xs, {"axis": axis}, tuple(base))

    # ---- composed helpers -----------------------------------------------------

    def square(self, x):
        x = self._coerce(x)
        return self.mul(x, x)

    def mean(self, x, axis=None, keepdims=False):
        x = self._coerce(x)
        sx = self._shape(x)
        ax = _norm_axis(axis, len(sx))
        n = int(np.prod(sx)) if ax is None else sx[ax]
        return self.div(self.reduce_sum(x, axis=axis, keepdims=keepdims), float(n))

    def logsumexp(self, x, axis, keepdims=False):
        # max is subtracted for stability; its subgradient cancels in the total
        x = self._coerce(x)
        m = self.reduce_max(x, axis=axis, keepdims=True)
        s = self.log(self.reduce_sum(self.exp(self.sub(x, m)), axis=axis, keepdims=True))
        out = self.add(s, m)
        if not keepdims:
            sx = self._shape(x)
            out = self.reshape(out, _reduce_shape(sx, _norm_axis(axis, len(sx)), False))
        return out

    def affine(self, x, w, b):
        return self.add(self.matmul(x, w), b)

    # ---- evaluation -------------------------------------------------------------

    def _bind(self, bindings, params):
        params = self.params if params is None else params
        values = [None] * len(self.nodes)
        seen = set()
        for node in self.nodes:
            if node.op == "constant":
                values[node.idx] = self._consts[node.idx]
            elif node.op == "parameter":
                name = node.attrs["name"]
                try:
                    v = params[name]
                except KeyError:
                    raise ContractError(f"missing value for parameter {name!r}") from None
                v = np.asarray(v, dtype=self.dtype)
                if v.shape != node.shape:
                    raise ContractError(
                        f"parameter {name!r} has shape {v.shape}, declared {node.shape}"
                    )
                values[node.idx] = v
            elif node.op == "input":
                name = node.attrs["name"]
                try:
                    v = bindings[name]
                except KeyError:
                    raise ContractError(f"missing value for input {name!r}") from None
                seen.add(name)
                if self._input_meta[name]["integer"]:
                    v = np.asarray(v)
                    if not np.issubdtype(v.dtype, np.integer):
                        raise ContractError(f"input {name!r} must be an integer array")
                else:
                    v = np.asarray(v, dtype=self.dtype)
                if v.shape != node.shape:
                    raise ContractError(
                        f"input {name!r} has shape {v.shape}, declared {node.shape}"
                    )
                values[node.idx] = v
        extra = set(bindings) - seen
        if extra:
            raise ContractError(f"unknown input names: {sorted(extra)}")
        return values

    def evaluate(self, bindings=None, params=None):
        """Run the forward pass; returns an Evaluation holding all node values."""
        values = self._bind(bindings or {}, params)
        aux = {}
        # non-finite values are caught and reported by node, not by warning
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for node in self.nodes:
                if node.op in _LEAF_OPS:
                    continue
                args = [values[i] for i in node.args]
                values[node.idx] = _FORWARD[node.op](node, args, aux, self.dtype)
        return Evaluation(self, values, aux)

    def value_and_grad(self, bindings, output, params=None, wrt=None):
        """Evaluate a scalar output node and its gradients.

        Returns (value, grads) where grads maps each requested name (default:
        all parameters plus inputs declared differentiable) to its gradient.
        """
        ev = self.evaluate(bindings, params)
        value = ev.scalar(output)
        if not np.isfinite(value):
            ev.raise_first_nonfinite(output)
        return value, ev.backward(output, wrt=wrt)

    def param_count(self):
        return sum(int(np.prod(n.shape)) for n in self.nodes if n.op == "parameter")


class Evaluation:
    """Forward values for one graph run, plus the backward pass."""

    def __init__(self, graph, values, aux):
        self.graph = graph
        self.values = values
        self.aux = aux

    def value(self, node):
        return self.values[node]

    def scalar(self, node):
        v = self.values[node]
        if np.ndim(v) != 0:
            raise ContractError(
                f"node {node} has shape {np.shape(v)}; gradients need a scalar output"
            )
        return float(v)

    def raise_first_nonfinite(self, upto=None):
        limit = len(self.values) if upto is None else upto + 1
        for node in self.graph.nodes[:limit]:
            v = self.values[node.idx]
            if v is not None and not np.all(np.isfinite(v)):
                raise NumericError(
                    f"non-finite values first appear at node {node.idx} (op {node.op!r})"
                )
        raise NumericError("non-finite output but all node values finite (check bindings)")

    def backward(self, output, wrt=None):
        """Gradients of a scalar node w.r.t. named parameters and inputs."""
        g = self.graph
        if np.ndim(self.values[output]) != 0:
            raise ContractError("backward requires a scalar output node")
        if wrt is None:
            wrt = list(g.param_names) + [
                n for n, m in g._input_meta.items() if m["differentiable"]
            ]
        adj = [None] * len(g.nodes)
        adj[output] = np.asarray(1.0, dtype=g.dtype)
        for node in reversed(g.nodes[: output + 1]):
            d = adj[node.idx]
            if d is None or node.op in _LEAF_OPS:
                continue
            args = [self.values[i] for i in node.args]
            if node.op == "recurrence":
                # needs its own hidden-state output and saved gate activations
                fn = gru_backward if node.attrs["cell"] == "gru" else lstm_backward
                grads = fn(*args, self.values[node.idx], self.aux[node.idx], d)
            else:
                grads = _BACKWARD[node.op](node, args, d, self.aux, g.dtype)
            for arg_idx, gr in zip(node.args, grads):
                if gr is None:
                    continue
                if adj[arg_idx] is None:
                    adj[arg_idx] = gr
                else:
                    adj[arg_idx] = adj[arg_idx] + gr
        out = {}
        for name in wrt:
            if name in g.param_names:
                idx = g.param_names[name]
            elif name in g.input_names:
                if not g._input_meta[name]["differentiable"]:
                    raise ContractError(f"input {name!r} is not differentiable")
                idx = g.input_names[name]
            else:
                raise ContractError(f"unknown wrt name {name!r}")
            gr = adj[idx]
            if gr is None:
                gr = np.zeros(g.nodes[idx].shape, dtype=g.dtype)
            out[name] = gr
        return out


# ---- forward kernels -------------------------------------------------------
# These also serve the plain (graph-free) inference paths in encoder/pooling.


def sigmoid(x):
    return expit(x)


def _conv1d_cols(x, k, stride, pad):
    b, t, c = x.shape
    pl, pr = pad
    xp = np.pad(x, ((0, 0), (pl, pr), (0, 0)))
    t_out = (xp.shape[1] - k) // stride + 1
    wins = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, :: stride]
    # (B, T_out, C, K) -> (B, T_out, K, C), matching w.reshape(K*C, F)
    return np.ascontiguousarray(wins[:, :t_out].transpose(0, 1, 3, 2)), xp.shape[1], t_out


def conv1d_forward(x, w, stride, pad):
    b = x.shape[0]
    k, c, f = w.shape
    cols, _, t_out = _conv1d_cols(x, k, stride, pad)
    y = cols.reshape(b * t_out, k * c) @ w.reshape(k * c, f)
    return y.reshape(b, t_out, f)


def conv1d_backward(x, w, dy, stride, pad, cols=None):
    b, t, c = x.shape
    k, _, f = w.shape
    pl, pr = pad
    if cols is None:
        cols, tp, t_out = _conv1d_cols(x, k, stride, pad)
    else:
        tp, t_out = t + pl + pr, dy.shape[1]
    dy2 = dy.reshape(b * t_out, f)
    dw = (cols.reshape(b * t_out, k * c).T @ dy2).reshape(k, c, f)
    dcols = (dy2 @ w.reshape(k * c, f).T).reshape(b, t_out, k, c)
    dxp = np.zeros((b, tp, c), dtype=x.dtype)
    for j in range(k):
        dxp[:, j : j + stride * t_out : stride, :] += dcols[:, :, j, :]
    return dxp[:, pl : tp - pr if pr else tp, :], dw


def gru_forward(x, w, u, b):
    bs, t, _ = x.shape
    h_dim = u.shape[0]
    xw = x.reshape(bs * t, -1) @ w
    xw = xw.reshape(bs, t, 3 * h_dim) + b
    h = np.zeros((bs, h_dim), dtype=x.dtype)
    hs = np.empty((bs, t, h_dim), dtype=x.dtype)
    gates = np.empty((bs, t, 3 * h_dim), dtype=x.dtype)  # z, r, n
    hun = np.empty((bs, t, h_dim), dtype=x.dtype)
    for i in range(t):
        hu = h @ u
        z = expit(xw[:, i, :h_dim] + hu[:, :h_dim])
        r = expit(xw[:, i, h_dim : 2 * h_dim] + hu[:, h_dim : 2 * h_dim])
        n = np.tanh(xw[:, i, 2 * h_dim :] + r * hu[:, 2 * h_dim :])
        h = (1.0 - z) * n + z * h
        hs[:, i] = h
        gates[:, i, :h_dim] = z
        gates[:, i, h_dim : 2 * h_dim] = r
        gates[:, i, 2 * h_dim :] = n
        hun[:, i] = hu[:, 2 * h_dim :]
    return hs, (gates, hun)


def gru_backward(x, w, u, b, hs, saved, dhs):
    gates, hun = saved
    bs, t, h_dim = hs.shape
    dxw = np.empty((bs, t, 3 * h_dim), dtype=x.dtype)
    du = np.zeros_like(u)
    dh = np.zeros((bs, h_dim), dtype=x.dtype)
    dhu = np.empty((bs, 3 * h_dim), dtype=x.dtype)
    for i in range(t - 1, -1, -1):
        dh = dh + dhs[:, i]
        h_prev = hs[:, i - 1] if i else np.zeros((bs, h_dim), dtype=x.dtype)
        z = gates[:, i, :h_dim]
        r = gates[:, i, h_dim : 2 * h_dim]
        n = gates[:, i, 2 * h_dim :]
        dz = dh * (h_prev - n)
        dpre_n = dh * (1.0 - z) * (1.0 - n * n)
        dr = dpre_n * hun[:, i]
        dhu[:, :h_dim] = dz * z * (1.0 - z)
        dhu[:, h_dim : 2 * h_dim] = dr * r * (1.0 - r)
        dhu[:, 2 * h_dim :] = dpre_n * r
        dxw[:, i, :h_dim] = dhu[:, :h_dim]
        dxw[:, i, h_dim : 2 * h_dim] = dhu[:, h_dim : 2 * h_dim]
        dxw[:, i, 2 * h_dim :] = dpre_n
        if i:
            du += h_prev.T @ dhu
        dh = dh * z + dhu @ u.T
    dxw2 = dxw.reshape(bs * t, 3 * h_dim)
    dw = x.reshape(bs * t, -1).T @ dxw2
    db = dxw2.sum(axis=0)
    dx = (dxw2 @ w.T).reshape(x.shape)
    return dx, dw, du, db


def lstm_forward(x, w, u, b):
    bs, t, _ = x.shape
    h_dim = u.shape[0]
    xw = (x.reshape(bs * t, -1) @ w).reshape(bs, t, 4 * h_dim) + b
    h = np.zeros((bs, h_dim), dtype=x.dtype)
    c = np.zeros((bs, h_dim), dtype=x.dtype)
    hs = np.empty((bs, t, h_dim), dtype=x.dtype)
    gates = np.empty((bs, t, 4 * h_dim), dtype=x.dtype)  # i, f, g, o
    cs = np.empty((bs, t, h_dim), dtype=x.dtype)
    for s in range(t):
        pre = xw[:, s] + h @ u
        ig = expit(pre[:, :h_dim])
        fg = expit(pre[:, h_dim : 2 * h_dim])
        gg = np.tanh(pre[:, 2 * h_dim : 3 * h_dim])
        og = expit(pre[:, 3 * h_dim :])
        c = fg * c + ig * gg
        h = og * np.tanh(c)
        hs[:, s] = h
        cs[:, s] = c
        gates[:, s, :h_dim] = ig
        gates[:, s, h_dim : 2 * h_dim] = fg
        gates[:, s, 2 * h_dim : 3 * h_dim] = gg
        gates[:, s, 3 * h_dim :] = og
    return hs, (gates, cs)


def lstm_backward(x, w, u, b, hs, saved, dhs):
    gates, cs = saved
    bs, t, h_dim = hs.shape
    dxw = np.empty((bs, t, 4 * h_dim), dtype=x.dtype)
    du = np.zeros_like(u)
    dh = np.zeros((bs, h_dim), dtype=x.dtype)
    dc = np.zeros((bs, h_dim), dtype=x.dtype)
    dpre = np.empty((bs, 4 * h_dim), dtype=x.dtype)
    for s in range(t - 1, -1, -1):
        dh = dh + dhs[:, s]
        c_prev = cs[:, s - 1] if s else np.zeros((bs, h_dim), dtype=x.dtype)
        h_prev = hs[:, s - 1] if s else np.zeros((bs, h_dim), dtype=x.dtype)
        ig = gates[:, s, :h_dim]
        fg = gates[:, s, h_dim : 2 * h_dim]
        gg = gates[:, s, 2 * h_dim : 3 * h_dim]
        og = gates[:, s, 3 * h_dim :]
        tc = np.tanh(cs[:, s])
        do = dh * tc
        dc = dc + dh * og * (1.0 - tc * tc)
        di = dc * gg
        dg = dc * ig
        df = dc * c_prev
        dpre[:, :h_dim] = di * ig * (1.0 - ig)
        dpre[:, h_dim : 2 * h_dim] = df * fg * (1.0 - fg)
        dpre[:, 2 * h_dim : 3 * h_dim] = dg * (1.0 - gg * gg)
        dpre[:, 3 * h_dim :] = do * og * (1.0 - og)
        dxw[:, s] = dpre
        if s:
            du += h_prev.T @ dpre
        dh = dpre @ u.T
        dc = dc * fg
    dxw2 = dxw.reshape(bs * t, 4 * h_dim)
    dw = x.reshape(bs * t, -1).T @ dxw2
    db = dxw2.sum(axis=0)
    dx = (dxw2 @ w.T).reshape(x.shape)
    return dx, dw, du, db


_COS_EPS = 1e-12


def _cos_normalize(a):
    norm = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    ok = norm > _COS_EPS
    unit = np.where(ok, a / np.maximum(norm, _COS_EPS), 0.0)
    return unit, norm, ok


def cosine_forward(a, b, pairwise):
    ua, na, oka = _cos_normalize(a)
    ub, nb, okb = _cos_normalize(b)
    if pairwise:
        return ua @ np.swapaxes(ub, -1, -2), (ua, ub, na, nb, oka, okb)
    return np.sum(ua * ub, axis=-1), (ua, ub, na, nb, oka, okb)


def cosine_backward(dy, saved, pairwise):
    ua, ub, na, nb, oka, okb = saved
    if pairwise:
        c = ua @ np.swapaxes(ub, -1, -2)
        da = (dy @ ub - np.sum(dy * c, axis=-1, keepdims=True) * ua) / np.maximum(na, _COS_EPS)
        dyt = np.swapaxes(dy, -1, -2)
        ct = np.swapaxes(c, -1, -2)
        db = (dyt @ ua - np.sum(dyt * ct, axis=-1, keepdims=True) * ub) / np.maximum(nb, _COS_EPS)
    else:
        c = np.sum(ua * ub, axis=-1, keepdims=True)
        dye = dy[..., None]
        da = dye * (ub - c * ua) / np.maximum(na, _COS_EPS)
        db = dye * (ua - c * ub) / np.maximum(nb, _COS_EPS)
    return np.where(oka, da, 0.0), np.where(okb, db, 0.0)


def _take_indices(x, idx, batched):
    if x.ndim == 2:
        return None
    b = x.shape[0]
    if batched:
        flat = idx.reshape(b, -1)
    else:
        flat = np.broadcast_to(idx.reshape(-1), (b, idx.size))
    return np.arange(b)[:, None], flat


def take_forward(x, idx, batched, out_shape):
    if x.ndim == 2:
        return x[idx.reshape(-1)].reshape(out_shape)
    rows, flat = _take_indices(x, idx, batched)
    return x[rows, flat].reshape(out_shape)


def _row_scatter_add(dx2, rows, d2):
    """dx2[rows] += d2 with duplicate rows accumulated.

    Sort plus reduceat; np.add.at is an order of magnitude slower here.
    """
    if rows.size == 0:
        return
    order = np.argsort(rows, kind="stable")
    sr = rows[order]
    starts = np.flatnonzero(np.r_[True, sr[1:] != sr[:-1]])
    dx2[sr[starts]] += np.add.reduceat(d2[order], starts, axis=0)


def take_backward(x, idx, dy, batched):
    dx = np.zeros_like(x)
    d2 = dy.reshape(-1, x.shape[-1])
    if x.ndim == 2:
        r = idx.reshape(-1).astype(np.intp)
        r = np.where(r < 0, r + x.shape[0], r)  # forward already bounds-checked
        _row_scatter_add(dx, r, d2)
    else:
        rows, flat = _take_indices(x, idx, batched)
        n = x.shape[1]
        flat = np.where(flat < 0, flat + n, flat)
        g = (rows * n + flat).reshape(-1).astype(np.intp)
        _row_scatter_add(dx.reshape(-1, x.shape[-1]), g, d2)
    return dx


# ---- op dispatch tables ------------------------------------------------------


def _fw_add(node, a, aux, dt):
    return a[0] + a[1]


def _fw_sub(node, a, aux, dt):
    return a[0] - a[1]


def _fw_mul(node, a, aux, dt):
    return a[0] * a[1]


def _fw_div(node, a, aux, dt):
    return a[0] / a[1]


def _fw_matmul(node, a, aux, dt):
    return a[0] @ a[1]


def _fw_conv1d(node, a, aux, dt):
    x, w = a
    k, c, f = w.shape
    cols, _, t_out = _conv1d_cols(x, k, node.attrs["stride"], node.attrs["pad"])
    aux[node.idx] = cols  # reused by the backward pass
    y = cols.reshape(-1, k * c) @ w.reshape(k * c, f)
    return y.reshape(x.shape[0], t_out, f)


def _fw_recurrence(node, a, aux, dt):
    fn = gru_forward if node.attrs["cell"] == "gru" else lstm_forward
    hs, saved = fn(*a)
    aux[node.idx] = saved
    return hs


def _fw_sigmoid(node, a, aux, dt):
    return expit(a[0])


def _fw_tanh(node, a, aux, dt):
    y = np.tanh(a[0])
    aux[node.idx] = y
    return y


def _fw_exp(node, a, aux, dt):
    return np.exp(a[0])


def _fw_log(node, a, aux, dt):
    return np.log(a[0])


def _fw_cumsum(node, a, aux, dt):
    return np.cumsum(a[0], axis=node.attrs["axis"], dtype=dt)


def _fw_sum(node, a, aux, dt):
    return np.sum(a[0], axis=node.attrs["axis"], keepdims=node.attrs["keepdims"], dtype=dt)


def _fw_max(node, a, aux, dt):
    return np.max(a[0], axis=node.attrs["axis"], keepdims=node.attrs["keepdims"])


def _fw_take(node, a, aux, dt):
    return take_forward(a[0], a[1], node.attrs["batched"], node.shape)


def _fw_cosine(node, a, aux, dt):
    y, saved = cosine_forward(a[0], a[1], node.attrs["pairwise"])
    aux[node.idx] = saved
    return y


def _fw_reshape(node, a, aux, dt):
    return a[0].reshape(node.shape)


def _fw_concat(node, a, aux, dt):
    return np.concatenate(a, axis=node.attrs["axis"])


_FORWARD = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "div": _fw_div,
    "matmul": _fw_matmul,
    "conv1d": _fw_conv1d,
    "recurrence": _fw_recurrence,
    "sigmoid": _fw_sigmoid,
    "tanh": _fw_tanh,
    "exp": _fw_exp,
    "log": _fw_log,
    "cumsum": _fw_cumsum,
    "sum": _fw_sum,
    "max": _fw_max,
    "take": _fw_take,
    "cosine": _fw_cosine,
    "reshape": _fw_reshape,
    "concat": _fw_concat,
}


def _bw_add(node, a, d, ev, dt):
    return _unbroadcast(d, a[0].shape), _unbroadcast(d, a[1].shape)


def _bw_sub(node, a, d, ev, dt):
    return _unbroadcast(d, a[0].shape), _unbroadcast(-d, a[1].shape)


def _bw_mul(node, a, d, ev, dt):
    return _unbroadcast(d * a[1], a[0].shape), _unbroadcast(d * a[0], a[1].shape)


def _bw_div(node, a, d, ev, dt):
    return (
        _unbroadcast(d / a[1], a[0].shape),
        _unbroadcast(-d * a[0] / (a[1] * a[1]), a[1].shape),
    )


def _bw_matmul(node, a, d, ev, dt):
    da = _unbroadcast(d @ np.swapaxes(a[1], -1, -2), a[0].shape)
    db = _unbroadcast(np.swapaxes(a[0], -1, -2) @ d, a[1].shape)
    return da, db


def _bw_conv1d(node, a, d, ev, dt):
    dx, dw = conv1d_backward(a[0], a[1], d, node.attrs["stride"],
                             node.attrs["pad"], cols=ev.get(node.idx))
    return dx, dw


def _bw_sigmoid(node, a, d, ev, dt):
    y = expit(a[0])
    return (d * y * (1.0 - y),)


def _bw_tanh(node, a, d, ev, dt):
    y = ev.get(node.idx)
    if y is None:
        y = np.tanh(a[0])
    return (d * (1.0 - y * y),)


def _bw_exp(node, a, d, ev, dt):
    return (d * np.exp(a[0]),)


def _bw_log(node, a, d, ev, dt):
    return (d / a[0],)


def _bw_cumsum(node, a, d, ev, dt):
    ax = node.attrs["axis"]
    return (np.flip(np.cumsum(np.flip(d, axis=ax), axis=ax, dtype=dt), axis=ax),)


def _bw_sum(node, a, d, ev, dt):
    ax, keep = node.attrs["axis"], node.attrs["keepdims"]
    if ax is not None and not keep:
        d = np.expand_dims(d, ax)
    return (np.broadcast_to(d, a[0].shape).astype(dt, copy=False),)


def _bw_max(node, a, d, ev, dt):
    x = a[0]
    ax, keep = node.attrs["axis"], node.attrs["keepdims"]
    if ax is None:
        mask = np.zeros(x.shape, dtype=dt)
        mask.flat[np.argmax(x)] = 1.0  # ties resolve to the first maximum
        return (mask * d,)
    idx = np.expand_dims(np.argmax(x, axis=ax), ax)
    mask = np.zeros(x.shape, dtype=dt)
    np.put_along_axis(mask, idx, 1.0, axis=ax)
    if not keep:
        d = np.expand_dims(d, ax)
    return (mask * d,)


def _bw_take(node, a, d, ev, dt):
    return take_backward(a[0], a[1], d, node.attrs["batched"]), None


def _bw_cosine(node, a, d, ev, dt):
    da, db = cosine_backward(d, ev[node.idx], node.attrs["pairwise"])
    return da, db


def _bw_reshape(node, a, d, ev, dt):
    return (d.reshape(a[0].shape),)


def _bw_concat(node, a, d, ev, dt):
    ax = node.attrs["axis"]
    sizes = [x.shape[ax] for x in a]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(d, splits, axis=ax))


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "matmul": _bw_matmul,
    "conv1d": _bw_conv1d,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "exp": _bw_exp,
    "log": _bw_log,
    "cumsum": _bw_cumsum,
    "sum": _bw_sum,
    "max": _bw_max,
    "take": _bw_take,
    "cosine": _bw_cosine,
    "reshape": _bw_reshape,
    "concat": _bw_concat,
}


def finite_difference_check(graph, bindings, output, params=None, wrt=None, epsilon=1e-5):
    """Compare reverse-mode gradients against central differences.

    Only valid on float64 graphs. Returns the worst relative error over every
    coordinate of every checked tensor; where both the analytic and numeric
    values are below 1e-8 the absolute difference is used instead.
    """
    if graph.dtype != np.float64:
        raise ContractError("finite_difference_check requires a float64 graph")
    if not 1e-7 <= epsilon <= 1e-4:
        raise ContractError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    params = dict(graph.params if params is None else params)
    bindings = dict(bindings or {})
    _, grads = graph.value_and_grad(bindings, output, params=params, wrt=wrt)

    def eval_at(name, flat_idx, delta):
        store = params if name in graph.param_names else bindings
        base = np.array(store[name], dtype=np.float64)
        bumped = base.copy()
        bumped.flat[flat_idx] += delta
        store[name] = bumped
        v = graph.evaluate(bindings, params=params).scalar(output)
        store[name] = base
        return v

    worst = 0.0
    for name, grad in grads.items():
        grad = np.atleast_1d(np.asarray(grad, dtype=np.float64))
        for i in range(grad.size):
            fd = (eval_at(name, i, epsilon) - eval_at(name, i, -epsilon)) / (2 * epsilon)
            ad = grad.flat[i]
            if abs(ad) < 1e-8 and abs(fd) < 1e-8:
                err = abs(ad - fd)
            else:
                err = abs(ad - fd) / max(abs(ad), abs(fd))
            worst = max(worst, err)
    return worst
