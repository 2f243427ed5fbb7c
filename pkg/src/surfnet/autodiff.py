"""Minimal reverse-mode autodiff over dense float64 feature matrices.

A Tape records operations in construction order (which is already
topological); ``backward`` walks it once in reverse. Sparse operators enter
as constants: gradients flow through their (block-)transpose. Parameters
live outside the tape as plain arrays and are wrapped into leaf tensors per
forward pass.
"""

from __future__ import annotations

import numpy as np

from . import la
from .errors import DimensionMismatch, NonQuadChannels, NotScalar


class Tensor:
    """A dense value plus its position on a tape."""

    __slots__ = ("value", "tape", "node_id", "requires_grad", "grad")

    def __init__(self, value, tape, node_id, requires_grad):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={self.requires_grad})"


class Tape:
    """Append-only operation record; one owner, not thread-safe."""

    def __init__(self):
        self._nodes = []  # (parent_ids, backward_fn) per node
        self._tensors: dict[int, Tensor] = {}

    def leaf(self, value, requires_grad=False) -> Tensor:
        t = Tensor(value, self, len(self._nodes), requires_grad)
        self._nodes.append(((), None))
        self._tensors[t.node_id] = t
        return t

    def _record(self, value, parents, backward_fn) -> Tensor:
        requires = any(p.requires_grad for p in parents)
        t = Tensor(value, self, len(self._nodes), requires)
        self._nodes.append((tuple(p.node_id for p in parents), backward_fn))
        self._tensors[t.node_id] = t
        return t

    def __len__(self):
        return len(self._nodes)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every tensor on its tape
    that requires grad; the tape is freed afterwards."""
    if loss.value.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
    requires = [t.requires_grad for t in
                (tape._tensors[i] for i in range(len(tape._nodes)))]
    for node_id in range(len(tape._nodes) - 1, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        t = tape._tensors[node_id]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
        parents, backward_fn = tape._nodes[node_id]
        if backward_fn is None or not parents:
            continue
        parent_grads = backward_fn(g)
        for pid, pg in zip(parents, parent_grads):
            if pg is None or not requires[pid]:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    for t in tape._tensors.values():
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.value)
    tape._nodes = []
    tape._tensors = {}


def leaf(tape: Tape, value, requires_grad=False) -> Tensor:
    return tape.leaf(value, requires_grad)


def _rec(tape, value, parents, backward_fn) -> Tensor:
    return tape._record(value, parents, backward_fn)


# -- elementwise and linear primitives ----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise DimensionMismatch(f"add {a.value.shape} vs {b.value.shape}")
    return _rec(a.tape, a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise DimensionMismatch(f"sub {a.value.shape} vs {b.value.shape}")
    return _rec(a.tape, a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise DimensionMismatch(f"mul {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return _rec(a.tape, av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _rec(a.tape, a.value * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c) -> Tensor:
    return _rec(a.tape, a.value + c, (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _rec(a.tape, out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    return _rec(a.tape, np.log(av), (a,), lambda g: (g / av,))


def matmul_nt(x: Tensor, W: Tensor) -> Tensor:
    """x (N, c_in) times W (c_out, c_in) transposed -> (N, c_out)."""
    if x.value.shape[1] != W.value.shape[1]:
        raise DimensionMismatch(
            f"matmul_nt: {x.value.shape} vs {W.value.shape}")
    xv, Wv = x.value, W.value
    return _rec(x.tape, xv @ Wv.T, (x, W),
                lambda g: (g @ Wv, g.T @ xv))


def matmul_tn(a: Tensor, b: Tensor) -> Tensor:
    """a (N1, d) times b (N2, d) transposed -> similarity matrix (N1, N2)."""
    if a.value.shape[1] != b.value.shape[1]:
        raise DimensionMismatch(f"matmul_tn: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return _rec(a.tape, av @ bv.T, (a, b),
                lambda g: (g @ bv, g.T @ av))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (N, c) + row vector b (c,)."""
    if x.value.shape[1] != b.value.shape[0]:
        raise DimensionMismatch(f"bias width {b.value.shape} vs {x.value.shape}")
    return _rec(x.tape, x.value + b.value[None, :], (x, b),
                lambda g: (g, g.sum(axis=0)))


def spmv_apply(A: la.SparseOperator, x: Tensor) -> Tensor:
    """Multiply by a constant scalar sparse operator; adjoint via transpose."""
    At = la.transpose(A)
    return _rec(x.tape, la.spmv(A, x.value), (x,),
                lambda g: (la.spmv(At, g),))


def quat_spmv_apply(A: la.SparseOperator, x: Tensor) -> Tensor:
    """Apply a block-4 operator to lane-packed features (rows, 4m).

    Feature column 4t + l is lane l of quaternion slot t; internally the
    slots are moved to the dense axis so one block spmv covers all slots.
    The adjoint uses the block transpose, which is the quaternion conjugate
    transpose.
    """
    if x.value.shape[1] % 4:
        raise NonQuadChannels(f"feature width {x.value.shape[1]} not divisible by 4")
    At = la.transpose(A)

    def apply_(op, arr):
        rows, c = arr.shape
        m = c // 4
        lanes = arr.reshape(rows, m, 4).transpose(0, 2, 1).reshape(rows * 4, m)
        out = la.spmv(op, lanes)
        out_rows = out.shape[0] // 4
        return out.reshape(out_rows, 4, m).transpose(0, 2, 1).reshape(out_rows, 4 * m)

    return _rec(x.tape, apply_(A, x.value), (x,),
                lambda g: (apply_(At, g),))


def quat_channel_mix(x: Tensor, M: Tensor) -> Tensor:
    """Mix quaternion slots with a real matrix replicated across lanes.

    x is (rows, 4m), M is (m_out, m); output (rows, 4 m_out). Acting
    identically on the four lanes commutes with the quaternion structure.
    """
    if x.value.shape[1] % 4:
        raise NonQuadChannels(f"feature width {x.value.shape[1]} not divisible by 4")
    m = x.value.shape[1] // 4
    if M.value.shape[1] != m:
        raise DimensionMismatch(f"mix {M.value.shape} on {m} slots")
    xv, Mv = x.value, M.value
    rows = xv.shape[0]

    def fwd(arr, mat):
        return np.einsum("rtl,st->rsl", arr.reshape(rows, -1, 4), mat).reshape(rows, -1)

    def bwd(g):
        gr = g.reshape(rows, -1, 4)
        gx = np.einsum("rsl,st->rtl", gr, Mv).reshape(rows, -1)
        gM = np.einsum("rsl,rtl->st", gr, xv.reshape(rows, -1, 4))
        return (gx, gM)

    return _rec(x.tape, fwd(xv, Mv), (x, M), bwd)


# -- nonlinearities and normalization -----------------------------------------


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1; non-expansive."""
    xv = x.value
    out = np.where(xv > 0, xv, np.expm1(xv))
    deriv = np.where(xv > 0, 1.0, out + 1.0)
    return _rec(x.tape, out, (x,), lambda g: (g * deriv,))


BN_EPS = 1e-5


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor):
    """Per-channel batch normalization over all rows.

    Returns (output tensor, batch_mean, batch_var) so the caller can update
    running statistics; the stats are biased (divide by N) as used in the
    normalization itself.
    """
    xv = x.value
    n = xv.shape[0]
    mean = xv.mean(axis=0)
    var = xv.var(axis=0)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xv - mean) * inv
    out = xhat * gamma.value[None, :] + beta.value[None, :]
    gv = gamma.value

    def bwd(g):
        gxhat = g * gv[None, :]
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gx = (inv / n) * (n * gxhat - gxhat.sum(axis=0)[None, :]
                          - xhat * (gxhat * xhat).sum(axis=0)[None, :])
        return (gx, ggamma, gbeta)

    return _rec(x.tape, out, (x, gamma, beta), bwd), mean, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                    running_mean: np.ndarray, running_var: np.ndarray) -> Tensor:
    inv = 1.0 / np.sqrt(running_var + BN_EPS)
    rm = running_mean

    def bwd(g):
        ggamma = (g * ((x.value - rm[None, :]) * inv[None, :])).sum(axis=0)
        return (g * (gamma.value * inv)[None, :], ggamma, g.sum(axis=0))

    out = (x.value - rm[None, :]) * (gamma.value * inv)[None, :] + beta.value[None, :]
    return _rec(x.tape, out, (x, gamma, beta), bwd)


# -- pooling / reshaping -------------------------------------------------------


def _check_segments(segments, n):
    seg = np.asarray(segments, dtype=np.int64)
    if seg[0] != 0 or seg[-1] != n or (np.diff(seg) <= 0).any():
        raise DimensionMismatch(f"bad segment boundaries {seg} for {n} rows")
    return seg


def segment_mean_pool(x: Tensor, segments) -> Tensor:
    """Mean over each row segment: (N, c) -> (S, c)."""
    seg = _check_segments(segments, x.value.shape[0])
    sizes = np.diff(seg).astype(np.float64)
    pooled = np.add.reduceat(x.value, seg[:-1], axis=0) / sizes[:, None]

    def bwd(g):
        return (np.repeat(g / sizes[:, None], np.diff(seg), axis=0),)

    return _rec(x.tape, pooled, (x,), bwd)


def segment_broadcast(h: Tensor, segments) -> Tensor:
    """Rows of h (S, c) repeated over their segments -> (N, c)."""
    seg = np.asarray(segments, dtype=np.int64)
    counts = np.diff(seg)
    if len(counts) != h.value.shape[0]:
        raise DimensionMismatch("segment count mismatch")

    def bwd(g):
        return (np.add.reduceat(g, seg[:-1], axis=0),)

    return _rec(h.tape, np.repeat(h.value, counts, axis=0), (h,), bwd)


def segment_mean_broadcast(x: Tensor, segments) -> Tensor:
    """Per-segment mean distributed back to every row (avgpool context path)."""
    return segment_broadcast(segment_mean_pool(x, segments), segments)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[0] != b.value.shape[0]:
        raise DimensionMismatch("concat_cols row mismatch")
    ca = a.value.shape[1]
    return _rec(a.tape, np.concatenate([a.value, b.value], axis=1), (a, b),
                lambda g: (g[:, :ca], g[:, ca:]))


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    n_cols = x.value.shape[1]

    def bwd(g):
        out = np.zeros((x.value.shape[0], n_cols))
        out[:, j0:j1] = g
        return (out,)

    return _rec(x.tape, x.value[:, j0:j1].copy(), (x,), bwd)


# -- reductions / losses -------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.value.shape
    return _rec(x.tape, np.array(x.value.sum()), (x,),
                lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.value.size
    shape = x.value.shape
    return _rec(x.tape, np.array(x.value.mean()), (x,),
                lambda g: (np.broadcast_to(g / n, shape).copy(),))


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    d = pred.value - target
    n = d.size
    return _rec(pred.tape, np.array((d ** 2).mean()), (pred,),
                lambda g: (g * 2.0 * d / n,))


def smooth_l1_loss(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1: 0.5 d^2 / beta inside |d| < beta, |d| - 0.5 beta outside."""
    d = pred.value - target
    ad = np.abs(d)
    quad = ad < beta
    vals = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = d.size
    grad = np.where(quad, d / beta, np.sign(d))
    return _rec(pred.tape, np.array(vals.mean()), (pred,),
                lambda g: (g * grad / n,))


def cross_entropy_rows(logits: Tensor, row_idx: np.ndarray,
                       target_idx: np.ndarray) -> Tensor:
    """Mean -log softmax(logits)[i, target(i)] over the given rows.

    Stable via per-row max subtraction; backward is (softmax - onehot)
    restricted to the labeled rows.
    """
    row_idx = np.asarray(row_idx, dtype=np.int64)
    target_idx = np.asarray(target_idx, dtype=np.int64)
    z = logits.value[row_idx]
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    losses = logsumexp - z[np.arange(len(row_idx)), target_idx]
    nsel = len(row_idx)

    def bwd(g):
        soft = np.exp(z - logsumexp[:, None])
        soft[np.arange(nsel), target_idx] -= 1.0
        out = np.zeros_like(logits.value)
        np.add.at(out, row_idx, soft * (g / nsel))
        return (out,)

    return _rec(logits.tape, np.array(losses.mean()), (logits,), bwd)
