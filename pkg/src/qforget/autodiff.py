"""Reverse-mode automatic differentiation over a small fixed primitive set.

All math runs in float64 so finite-difference checks can assert tight
tolerances. Values are dense row-major numpy arrays; a `Var` wraps one value
plus the graph edges needed for the backward pass. Ops build the graph
eagerly; `Var.backward()` walks it once in reverse topological order and
accumulates gradients on every node (leaves included).

Quantized precision is simulated explicitly elsewhere; nothing in this module
ever narrows storage.
"""

import math

import numpy as np

from .errors import ContractError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)  # tanh-approximation constants
_GELU_K = 0.044715
_LN_EPS = 1e-5


def _as_value(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not a.flags.c_contiguous:
        a = np.ascontiguousarray(a)
    return a


class Var:
    """One node of the computation graph: a value, its parents, and the
    closure that routes an output gradient to parent gradients."""

    __slots__ = ("value", "grad", "parents", "op", "_backward")

    def __init__(self, value, parents=(), op="leaf", backward=None):
        self.value = _as_value(value)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into .grad for every node in the graph.

        Requires a scalar root. Each node's backward closure fires exactly
        once, after all its consumers have contributed (reverse topological
        order), so fan-out gradients sum correctly.
        """
        if self.value.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _toposort(self)
        for node in order:
            node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _toposort(root: Var) -> list:
    """Parents-before-children ordering, iterative so deep graphs are safe."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def leaf(x) -> Var:
    """Wrap an array as a graph leaf (parameter or constant)."""
    return Var(x)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    """a (m, k) @ b (k, n) -> (m, n)."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.value.shape} x {b.value.shape}")
    out = Var(a.value @ b.value, (a, b), "matmul")

    def bwd(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    out._backward = bwd
    return out


def linear(x: Var, w: Var) -> Var:
    """x (m, k) @ w.T for w (n, k) -> (m, n). Also computes q @ k.T scores."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.value.shape} x {w.value.shape}^T")
    out = Var(x.value @ w.value.T, (x, w), "linear")

    def bwd(g):
        x.grad += g @ w.value
        w.grad += g.T @ x.value

    out._backward = bwd
    return out


def add(a: Var, b: Var) -> Var:
    """Elementwise a + b, same shape."""
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")
    out = Var(a.value + b.value, (a, b), "add")

    def bwd(g):
        a.grad += g
        b.grad += g

    out._backward = bwd
    return out


def mul(a: Var, b: Var) -> Var:
    """Elementwise a * b, same shape."""
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shape mismatch {a.value.shape} vs {b.value.shape}")
    out = Var(a.value * b.value, (a, b), "mul")

    def bwd(g):
        a.grad += g * b.value
        b.grad += g * a.value

    out._backward = bwd
    return out


def scale(a: Var, c: float) -> Var:
    """a * c for a python scalar c."""
    c = float(c)
    out = Var(a.value * c, (a,), "scale")

    def bwd(g):
        a.grad += g * c

    out._backward = bwd
    return out


def slice_rows(a: Var, start: int, stop: int) -> Var:
    """a[start:stop] along axis 0."""
    out = Var(a.value[start:stop], (a,), "slice_rows")

    def bwd(g):
        a.grad[start:stop] += g

    out._backward = bwd
    return out


def slice_cols(a: Var, start: int, stop: int) -> Var:
    """a[:, start:stop]."""
    out = Var(a.value[:, start:stop], (a,), "slice_cols")

    def bwd(g):
        a.grad[:, start:stop] += g

    out._backward = bwd
    return out


def concat_cols(parts: list) -> Var:
    """hstack of 2-D Vars with equal row counts."""
    widths = [p.value.shape[1] for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=1), tuple(parts), "concat_cols")

    def bwd(g):
        ofs = 0
        for p, w in zip(parts, widths):
            p.grad += g[:, ofs:ofs + w]
            ofs += w

    out._backward = bwd
    return out


def embed(table: Var, ids) -> Var:
    """Gather rows: table (V, d), ids (T,) -> (T, d)."""
    idx = np.asarray(ids, dtype=np.int64)
    out = Var(table.value[idx], (table,), "embed")

    def bwd(g):
        np.add.at(table.grad, idx, g)

    out._backward = bwd
    return out


def layer_norm(x: Var, gain: Var, bias: Var) -> Var:
    """Row-wise layer norm: normalize each row of x (m, d), then gain*xhat+bias."""
    v = x.value
    mu = v.mean(axis=1, keepdims=True)
    var = v.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (v - mu) * inv_std
    out = Var(xhat * gain.value + bias.value, (x, gain, bias), "layer_norm")

    def bwd(g):
        gain.grad += (g * xhat).sum(axis=0)
        bias.grad += g.sum(axis=0)
        gx = g * gain.value
        # d/dx of (x - mu) * inv_std with mu, var functions of the row
        x.grad += inv_std * (
            gx - gx.mean(axis=1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        )

    out._backward = bwd
    return out


def gelu(x: Var) -> Var:
    """GELU, tanh approximation: 0.5x(1 + tanh(c(x + k x^3)))."""
    v = x.value
    u = _GELU_C * (v + _GELU_K * v**3)
    t = np.tanh(u)
    out = Var(0.5 * v * (1.0 + t), (x,), "gelu")

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * v**2)
        x.grad += g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * du)

    out._backward = bwd
    return out


def softmax_rows(logits: Var) -> Var:
    """Row-stochastic softmax with max subtraction; rows sum to 1."""
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Var(p, (logits,), "softmax")

    def bwd(g):
        logits.grad += p * (g - (g * p).sum(axis=1, keepdims=True))

    out._backward = bwd
    return out


def log_softmax_rows(logits: Var) -> Var:
    """Row-wise log softmax, stable via logsumexp."""
    z = logits.value
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Var(logp, (logits,), "log_softmax")

    def bwd(g):
        logits.grad += g - np.exp(logp) * g.sum(axis=1, keepdims=True)

    out._backward = bwd
    return out


def cross_entropy(logits: Var, targets) -> Var:
    """Mean over rows of -log softmax(logits)[target]. logits (m, V)."""
    idx = np.asarray(targets, dtype=np.int64)
    m, vocab = logits.value.shape
    if idx.shape != (m,):
        raise ShapeError(f"cross_entropy: {m} rows but {idx.shape} targets")
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"cross_entropy: target id out of range for vocab {vocab}")
    z = logits.value
    mx = z.max(axis=1, keepdims=True)
    lse = mx + np.log(np.exp(z - mx).sum(axis=1, keepdims=True))
    losses = lse[:, 0] - z[np.arange(m), idx]
    out = Var(losses.mean(), (logits,), "cross_entropy")

    def bwd(g):
        p = np.exp(z - lse)
        p[np.arange(m), idx] -= 1.0
        logits.grad += (float(g) / m) * p

    out._backward = bwd
    return out


def target_log_probs(logits: Var, targets) -> Var:
    """Per-row log softmax(logits)[target] -> (m,). Sum it for a sequence
    log-likelihood."""
    idx = np.asarray(targets, dtype=np.int64)
    m, vocab = logits.value.shape
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"target_log_probs: target id out of range for vocab {vocab}")
    z = logits.value
    mx = z.max(axis=1, keepdims=True)
    lse = mx + np.log(np.exp(z - mx).sum(axis=1, keepdims=True))
    out = Var(z[np.arange(m), idx] - lse[:, 0], (logits,), "target_log_probs")

    def bwd(g):
        p = np.exp(z - lse) * (-g[:, None])
        p[np.arange(m), idx] += g
        logits.grad += p

    out._backward = bwd
    return out


def vsum(a: Var) -> Var:
    """Sum of all elements -> scalar."""
    out = Var(a.value.sum(), (a,), "vsum")

    def bwd(g):
        a.grad += g

    out._backward = bwd
    return out


def kl_divergence_rows(p_ref: np.ndarray, log_q: Var) -> Var:
    """Mean over rows of KL(p_ref || q) given log q. p_ref is a frozen
    row-stochastic array; gradients flow to log_q only."""
    p = np.asarray(p_ref, dtype=np.float64)
    if p.shape != log_q.value.shape:
        raise ShapeError(f"kl: shape mismatch {p.shape} vs {log_q.value.shape}")
    row_sums = p.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9) or np.any(p < 0):
        raise ContractError("kl: p_ref rows must be nonnegative and sum to 1")
    m = p.shape[0]
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    val = (plogp - p * log_q.value).sum() / m
    out = Var(val, (log_q,), "kl")

    def bwd(g):
        log_q.grad += (-float(g) / m) * p

    out._backward = bwd
    return out


def log_sigmoid(z: Var) -> Var:
    """Numerically stable log sigma(z) = -log(1 + exp(-z)), elementwise."""
    v = z.value
    out_val = np.where(v >= 0, -np.log1p(np.exp(-np.abs(v))), v - np.log1p(np.exp(-np.abs(v))))
    out = Var(out_val, (z,), "log_sigmoid")

    def bwd(g):
        # d/dz log sigma(z) = sigma(-z)
        e = np.exp(-np.abs(v))
        sig_neg = np.where(v >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
        z.grad += g * sig_neg

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(f, x: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a Var to a scalar Var. The relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    x = _as_value(x)
    v = Var(x.copy())
    f(v).backward()
    # f may ignore its input entirely; the gradient is then zero.
    analytic = np.zeros_like(x) if v.grad is None else v.grad.copy()

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        xp = x.copy().reshape(-1)
        xp[i] = orig + step
        fp = float(f(Var(xp.reshape(x.shape))).value)
        xm = x.copy().reshape(-1)
        xm[i] = orig - step
        fm = float(f(Var(xm.reshape(x.shape))).value)
        nflat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
