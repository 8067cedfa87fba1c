"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 for training, float64 for
gradient checking). Every primitive records its inputs and a backward rule
on the output tensor; `backward` walks the resulting graph in reverse
topological order exactly once, accumulating gradients into the leaves.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when a primitive receives incompatibly shaped inputs."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class GradientCheckError(AssertionError):
    """Raised when analytic and finite-difference gradients disagree."""


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


@contextmanager
def no_grad():
    """Disable graph recording in the current thread (e.g. teacher forward)."""
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def grad_enabled() -> bool:
    return _grad_mode.enabled


class Tensor:
    """A dense array plus optional gradient and a link into the compute graph.

    Non-leaf tensors hold their parent tensors and a vector-Jacobian product
    closure; leaves have neither. `requires_grad` marks trainable leaves and
    propagates through primitives.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


_PRIMITIVES: dict[str, str] = {}


def _primitive(name: str, doc: str):
    def wrap(fn):
        _PRIMITIVES[name] = doc
        return fn

    return wrap


def primitive_set() -> dict[str, str]:
    """Names and one-line descriptions of all supported primitives."""
    return dict(sorted(_PRIMITIVES.items()))


def _make(op: str, values: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"primitive {op!r} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _shape_check(op: str, cond: bool, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


@_primitive("matmul", "matrix product of a (R,K) by b (K,C)")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    _shape_check("matmul", av.ndim == 2 and bv.ndim == 2 and av.shape[1] == bv.shape[0], av.shape, bv.shape)
    out = av @ bv

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _make("matmul", out, (a, b), vjp)


@_primitive("transpose", "2-D transpose")
def transpose(a: Tensor) -> Tensor:
    _shape_check("transpose", a.values.ndim == 2, a.shape)

    def vjp(g):
        return (g.T.copy(),)

    return _make("transpose", a.values.T.copy(), (a,), vjp)


@_primitive("add", "elementwise sum of same-shaped tensors")
def add(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("add", a.shape == b.shape, a.shape, b.shape)

    def vjp(g):
        return g, g

    return _make("add", a.values + b.values, (a, b), vjp)


@_primitive("mul", "elementwise product of same-shaped tensors")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("mul", a.shape == b.shape, a.shape, b.shape)
    av, bv = a.values, b.values

    def vjp(g):
        return g * bv, g * av

    return _make("mul", av * bv, (a, b), vjp)


@_primitive("scale", "multiply by a python scalar")
def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _make("scale", a.values * s, (a,), vjp)


@_primitive("row_softmax", "row-wise softmax, optionally masked (masked entries get probability 0)")
def row_softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    av = a.values
    _shape_check("row_softmax", av.ndim == 2, av.shape)
    if mask is None:
        m = av.max(axis=1, keepdims=True)
        e = np.exp(av - m)
    else:
        _shape_check("row_softmax", mask.shape == av.shape, mask.shape, av.shape)
        if not mask.any(axis=1).all():
            raise ValueError("row_softmax: some row has no unmasked entry")
        m = np.where(mask, av, -np.inf).max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(av - m), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make("row_softmax", p, (a,), vjp)


@_primitive("rms_norm", "RMS normalization over each row (or row group) with a learned gain")
def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6, group_size: int | None = None) -> Tensor:
    av = a.values
    _shape_check("rms_norm", av.ndim == 2, av.shape)
    rows, cols = av.shape
    size = cols if group_size is None else group_size
    _shape_check("rms_norm", cols % size == 0 and gain.shape == (size,), av.shape, gain.shape)
    groups = cols // size
    x = av.reshape(rows, groups, size)
    inv = 1.0 / np.sqrt((x * x).mean(axis=2, keepdims=True) + eps)
    gv = gain.values
    y = x * inv * gv
    out = y.reshape(rows, cols)

    def vjp(g):
        gg = g.reshape(rows, groups, size)
        ggain = (gg * x * inv).sum(axis=(0, 1))
        gw = gg * gv
        gx = inv * gw - (inv**3 / size) * x * (gw * x).sum(axis=2, keepdims=True)
        return gx.reshape(rows, cols), ggain

    return _make("rms_norm", out, (a, gain), vjp)


@_primitive("silu", "x * sigmoid(x)")
def silu(a: Tensor) -> Tensor:
    av = a.values
    sig = 1.0 / (1.0 + np.exp(-av))

    def vjp(g):
        return (g * sig * (1.0 + av * (1.0 - sig)),)

    return _make("silu", av * sig, (a,), vjp)


@_primitive("gather_rows", "select rows by integer index (embedding lookup / element select)")
def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    av = a.values
    _shape_check("gather_rows", av.ndim == 2, av.shape)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= av.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {av.shape[0]} rows")

    def vjp(g):
        ga = np.zeros_like(av)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make("gather_rows", av[idx], (a,), vjp)


@_primitive("slice_cols", "contiguous column slice")
def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    av = a.values
    _shape_check("slice_cols", av.ndim == 2, av.shape)
    if not (0 <= start < stop <= av.shape[1]):
        raise IndexError(f"slice_cols: [{start}:{stop}] out of range for {av.shape[1]} columns")

    def vjp(g):
        ga = np.zeros_like(av)
        ga[:, start:stop] = g
        return (ga,)

    return _make("slice_cols", av[:, start:stop].copy(), (a,), vjp)


@_primitive("concat", "concatenate along rows (axis 0) or columns (axis 1)")
def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat: empty input list")
    if axis not in (0, 1):
        raise ValueError(f"concat: axis must be 0 or 1, got {axis}")
    vals = [p.values for p in parts]
    other = 1 - axis
    _shape_check(
        "concat",
        all(v.ndim == 2 and v.shape[other] == vals[0].shape[other] for v in vals),
        *[v.shape for v in vals],
    )
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        if axis == 0:
            return tuple(g[offsets[i] : offsets[i + 1]].copy() for i in range(len(parts)))
        return tuple(g[:, offsets[i] : offsets[i + 1]].copy() for i in range(len(parts)))

    return _make("concat", out, tuple(parts), vjp)


@_primitive("reshape", "view the same values under a new shape")
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    av = a.values
    if int(np.prod(shape)) != av.size:
        raise ShapeError(f"reshape: cannot view {av.shape} as {tuple(shape)}")
    old = av.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make("reshape", av.reshape(shape), (a,), vjp)


@_primitive("mean_all", "mean over all elements (scalar output)")
def mean_all(a: Tensor) -> Tensor:
    av = a.values
    n = av.size

    def vjp(g):
        return (np.full_like(av, g / n),)

    return _make("mean_all", np.asarray(av.mean(), dtype=av.dtype), (a,), vjp)


@_primitive("sum_all", "sum over all elements (scalar output)")
def sum_all(a: Tensor) -> Tensor:
    av = a.values

    def vjp(g):
        return (np.full_like(av, g),)

    return _make("sum_all", np.asarray(av.sum(), dtype=av.dtype), (a,), vjp)


@_primitive("l2_normalize_rows", "scale each row to unit Euclidean norm")
def l2_normalize_rows(a: Tensor) -> Tensor:
    av = a.values
    _shape_check("l2_normalize_rows", av.ndim == 2, av.shape)
    norms = np.sqrt((av * av).sum(axis=1, keepdims=True))
    if (norms < 1e-12).any():
        raise ValueError("l2_normalize_rows: a row has (near-)zero norm")
    y = av / norms

    def vjp(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _make("l2_normalize_rows", y, (a,), vjp)


@_primitive("mse", "mean squared error between same-shaped tensors (scalar output)")
def mse(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("mse", a.shape == b.shape, a.shape, b.shape)
    diff = a.values - b.values
    n = diff.size

    def vjp(g):
        d = (2.0 * g / n) * diff
        return d, -d

    return _make("mse", np.asarray((diff * diff).mean(), dtype=diff.dtype), (a, b), vjp)


@_primitive("cross_entropy", "mean of -log softmax(logits)[target] over rows (scalar output)")
def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    lv = logits.values
    _shape_check("cross_entropy", lv.ndim == 2, lv.shape)
    t = np.asarray(targets, dtype=np.intp)
    _shape_check("cross_entropy", t.shape == (lv.shape[0],), lv.shape, t.shape)
    if t.size and (t.min() < 0 or t.max() >= lv.shape[1]):
        raise IndexError(f"cross_entropy: target out of range for {lv.shape[1]} classes")
    rows = lv.shape[0]
    m = lv.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(lv - m).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - lv[np.arange(rows), t]
    p = np.exp(lv - lse)

    def vjp(g):
        gl = p.copy()
        gl[np.arange(rows), t] -= 1.0
        return (gl * (g / rows),)

    return _make("cross_entropy", np.asarray(nll.mean(), dtype=lv.dtype), (logits,), vjp)


_rope_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _rope_tables(n_pos: int, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (n_pos, head_dim, base, np.dtype(dtype).str)
    hit = _rope_cache.get(key)
    if hit is None:
        half = head_dim // 2
        freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
        angles = np.arange(n_pos, dtype=np.float64)[:, None] * freqs[None, :]
        hit = (np.cos(angles).astype(dtype), np.sin(angles).astype(dtype))
        if len(_rope_cache) < 256:
            _rope_cache[key] = hit
    return hit


@_primitive("rope", "rotary position embedding applied per head (rotate-half pairing)")
def rope(a: Tensor, head_dim: int, base: float = 10000.0, positions: Sequence[int] | None = None) -> Tensor:
    av = a.values
    _shape_check("rope", av.ndim == 2 and av.shape[1] % head_dim == 0 and head_dim % 2 == 0, av.shape)
    T, cols = av.shape
    heads = cols // head_dim
    half = head_dim // 2
    if positions is None:
        pos = np.arange(T)
    else:
        pos = np.asarray(positions, dtype=np.intp)
        _shape_check("rope", pos.shape == (T,), av.shape, pos.shape)
    cos, sin = _rope_tables(int(pos.max()) + 1 if T else 1, head_dim, base, av.dtype)
    cos, sin = cos[pos][:, None, :], sin[pos][:, None, :]
    x = av.reshape(T, heads, head_dim)
    x1, x2 = x[..., :half], x[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=2).reshape(T, cols)

    def vjp(g):
        gr = g.reshape(T, heads, head_dim)
        g1, g2 = gr[..., :half], gr[..., half:]
        gx = np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=2)
        return (gx.reshape(T, cols),)

    return _make("rope", out, (a,), vjp)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


class ComputeGraph:
    """Topologically ordered view of the primitives that produced a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes  # parents always precede children

    def __len__(self) -> int:
        return len(self.nodes)


def trace(output: Tensor) -> ComputeGraph:
    """Collect the subgraph below `output` in topological order (iterative DFS)."""
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            nodes.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return ComputeGraph(nodes)


def backward(loss: Tensor) -> ComputeGraph:
    """Populate `.grad` on every tensor reachable from a scalar loss.

    Gradients are freshly computed per call (not accumulated across calls);
    within one call, tensors used in several places accumulate the sum of
    their downstream contributions. Returns the traversed graph.
    """
    if loss.values.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.values.shape}")
    graph = trace(loss)
    for node in graph.nodes:
        if node.requires_grad:
            node.grad = None
    loss.grad = np.ones((), dtype=loss.values.dtype)
    for node in reversed(graph.nodes):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.values)
            parent.grad += g
    return graph


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: Tensor,
    tolerance: float,
    step: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of `fn` against central finite differences.

    Runs in float64 regardless of the point's dtype. Checks every coordinate
    unless `max_coords` caps it, in which case a seeded uniform sample of
    coordinates is checked (needed to keep whole-model checks affordable).
    Returns the max of |analytic - numeric| / max(1, |numeric|) over checked
    coordinates; raises GradientCheckError if it exceeds `tolerance`.
    """
    x64 = np.asarray(point.values, dtype=np.float64)
    leaf = Tensor(x64.copy(), requires_grad=True)
    loss = fn(leaf)
    if loss.values.shape != ():
        raise ShapeError(f"grad_check: fn must return a scalar, got shape {loss.values.shape}")
    backward(loss)
    analytic = np.zeros_like(x64) if leaf.grad is None else leaf.grad
    flat = x64.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)
    a_flat = analytic.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn(Tensor(x64)).values)
            flat[i] = orig - step
            f_minus = float(fn(Tensor(x64)).values)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    if worst > tolerance:
        raise GradientCheckError(f"gradient check failed: max relative error {worst:.3e} > {tolerance:.3e}")
    return worst
