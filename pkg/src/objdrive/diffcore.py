"""Small reverse-mode autodiff engine on float64 numpy arrays.

Graphs are built by running the forward pass (define-by-run): every op
returns a ``Tensor`` that remembers its parents and a closure computing the
parents' gradients from its own.  ``backpropagate`` walks the tape in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DiffError(Exception):
    """Base class for graph errors; ``node`` names the offending op."""

    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"[{node}] {message}")


class ShapeError(DiffError):
    pass


class NonFiniteError(DiffError):
    pass


class CheckpointError(Exception):
    pass


# When a list is installed here, non-smooth ops append a digest of their
# branch selection (relu masks, max-pool argmax, top-k picks).  Used by
# gradient_check to skip samples that straddle a kink.
_kink_trace: list | None = None


@contextlib.contextmanager
def trace_kinks():
    global _kink_trace
    prev = _kink_trace
    _kink_trace = []
    try:
        yield _kink_trace
    finally:
        _kink_trace = prev


def record_branch(op: str, selection: np.ndarray) -> None:
    if _kink_trace is not None:
        _kink_trace.append((op, np.asarray(selection).tobytes()))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op, "non-finite value in output")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(op, msg)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError("add", f"{a.shape} vs {b.shape}") from exc
    return _node("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError("mul", f"{a.shape} vs {b.shape}") from exc
    return _node("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
           "matmul", f"{a.shape} @ {b.shape}")
    return _node("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul (N, M, K) @ (N, K, P)."""
    _check(a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] == b.shape[0]
           and a.shape[2] == b.shape[1], "bmm", f"{a.shape} @ {b.shape}")
    return _node("bmm", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    record_branch("relu", mask)
    return _node("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", f"{x.shape} -> {shape}") from exc
    return _node("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str([t.shape for t in tensors])) from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x: Tensor, idx) -> Tensor:
    """Gather rows of ``x`` (axis 0)."""
    idx = np.asarray(idx, dtype=np.int64)
    _check(idx.size == 0 or (idx.min() >= 0 and idx.max() < x.shape[0]), "take", "index out of range")

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node("take", x.data[idx], (x,), back)


def sum_(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node("sum", out, (x,), back)


# ---------------------------------------------------------------------------
# normalizations and losses


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _node("softmax", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits at integer labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    _check(logits.data.ndim == 2 and logits.shape[0] == labels.shape[0],
           "cross_entropy", f"logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k}-way head")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _node("cross_entropy", np.asarray(loss), (logits,), back)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (F, C, kh, kw) kernel."""
    _check(x.data.ndim == 4 and w.data.ndim == 4 and x.shape[1] == w.shape[1],
           "conv2d", f"input {x.shape} vs kernel {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    _check(ho > 0 and wo > 0, "conv2d", "kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False)
    cols = win.reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        _check(b.shape == (f,), "conv2d", f"bias {b.shape} vs {f} filters")
        out = out + b.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        # gradients are formed in (filter, n*ho*wo) layout to avoid large transposes
        gt = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gw = (gt @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = (gx, gw)
        return grads if b is None else grads + (gt.sum(axis=1),)

    return _node("conv2d", out, parents, back)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    _check(x.data.ndim == 4, "global_avg_pool", f"expected NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return _node("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


def bin_edges(start: int, stop: int, bins: int) -> list[tuple[int, int]]:
    """Split cells [start, stop) into ``bins`` windows (floor start, ceil end)."""
    size = stop - start
    return [(start + (i * size) // bins, start + -((-(i + 1) * size) // bins)) for i in range(bins)]


def roi_pool(fmap: Tensor, image_index, windows, bins: int = 2) -> Tensor:
    """Binned max pooling of cell windows.

    ``windows`` is (K, 4) integer ``[row0, row1, col0, col1)`` in feature
    cells, each at least ``bins`` cells per side.  Returns (K, C*bins*bins),
    channel-major.  Gradient goes to the argmax cell of each bin (first
    flat index on ties).
    """
    _check(fmap.data.ndim == 4, "roi_pool", f"expected NCHW, got {fmap.shape}")
    image_index = np.asarray(image_index, dtype=np.int64).reshape(-1)
    windows = np.asarray(windows, dtype=np.int64).reshape(-1, 4)
    n, c, h, w = fmap.shape
    k = windows.shape[0]
    nb = bins * bins
    if k == 0:
        return _node("roi_pool", np.zeros((0, c * nb)), (fmap,), lambda g: (np.zeros_like(fmap.data),))
    _check(bool(np.all(windows[:, 1] - windows[:, 0] >= bins) and np.all(windows[:, 3] - windows[:, 2] >= bins)
                and windows[:, [0, 2]].min() >= 0 and windows[:, 1].max() <= h and windows[:, 3].max() <= w),
           "roi_pool", "window outside map or smaller than bins")
    mask = np.zeros((k, nb, h, w), dtype=bool)
    for r, (r0, r1, c0, c1) in enumerate(windows):
        for bi, (a0, a1) in enumerate(bin_edges(r0, r1, bins)):
            for bj, (b0, b1) in enumerate(bin_edges(c0, c1, bins)):
                mask[r, bi * bins + bj, a0:a1, b0:b1] = True
    mask = mask.reshape(k, 1, nb, h * w)
    vals = fmap.data.reshape(n, c, 1, h * w)[image_index]
    arg = np.where(mask, vals, -np.inf).argmax(axis=-1)            # (K, C, nb)
    record_branch("roi_pool", arg)
    out = np.take_along_axis(vals[:, :, 0, :], arg, axis=-1)

    def back(g):
        gm = np.zeros((n, c, h * w))
        ii = np.broadcast_to(image_index[:, None, None], arg.shape)
        cc = np.broadcast_to(np.arange(c)[None, :, None], arg.shape)
        np.add.at(gm, (ii, cc, arg), g.reshape(k, c, nb))
        return (gm.reshape(fmap.shape),)

    return _node("roi_pool", out.reshape(k, c * nb), (fmap,), back)


# ---------------------------------------------------------------------------
# segment ops (one segment per image in a batch of object sets)


def segment_softmax(x: Tensor, segment, n_segments: int) -> Tensor:
    """Softmax of a (K,) vector independently within each segment."""
    seg = np.asarray(segment, dtype=np.int64).reshape(-1)
    _check(x.data.ndim == 1 and x.shape[0] == seg.shape[0], "segment_softmax", f"{x.shape} vs {seg.shape}")
    if seg.size == 0:
        return _node("segment_softmax", np.zeros(0), (x,), lambda g: (np.zeros(0),))
    m = np.full(n_segments, -np.inf)
    np.maximum.at(m, seg, x.data)
    e = np.exp(x.data - m[seg])
    # accumulate in sorted order so the weights do not depend on row order
    order = np.lexsort((e, seg))
    tot = np.zeros(n_segments)
    np.add.at(tot, seg[order], e[order])
    s = e / tot[seg]

    def back(g):
        dot = np.zeros(n_segments)
        np.add.at(dot, seg, g * s)
        return (s * (g - dot[seg]),)

    return _node("segment_softmax", s, (x,), back)


def segment_sum(x: Tensor, segment, n_segments: int) -> Tensor:
    """Sum rows of (K, D) ``x`` per segment -> (n_segments, D).

    Each output coordinate sums its values in sorted order, so the result
    is bitwise independent of row order.
    """
    seg = np.asarray(segment, dtype=np.int64).reshape(-1)
    _check(x.data.ndim == 2 and x.shape[0] == seg.shape[0], "segment_sum", f"{x.shape} vs {seg.shape}")
    d = x.shape[1]
    out = np.zeros((n_segments, d))
    if seg.size:
        counts = np.bincount(seg, minlength=n_segments)
        order = np.argsort(seg, kind="stable")
        slot = np.arange(seg.size) - np.repeat(np.cumsum(counts) - counts, counts)
        padded = np.zeros((n_segments, counts.max(), d))
        padded[seg[order], slot] = x.data[order]
        padded.sort(axis=1)
        for j in range(padded.shape[1]):
            out = out + padded[:, j]
    return _node("segment_sum", out, (x,), lambda g: (g[seg],))


def scatter_rows(x: Tensor, rows, n_rows: int) -> Tensor:
    """Place rows of ``x`` at distinct positions of a zero (n_rows, D) matrix."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    _check(x.data.ndim == 2 and x.shape[0] == rows.shape[0], "scatter_rows", f"{x.shape} vs {rows.shape}")
    out = np.zeros((n_rows, x.shape[1]))
    out[rows] = x.data
    return _node("scatter_rows", out, (x,), lambda g: (g[rows],))


# ---------------------------------------------------------------------------
# backward pass


def backpropagate(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(node) for every node; return gradients of ``params``.

    Leaf ``.grad`` fields are overwritten (accumulators start from zero).
    Parameters the loss does not depend on get an all-zero gradient.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor produced by a forward pass")
    if loss.data.size != 1:
        raise ShapeError(loss.op, f"loss must be scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            if gp.shape != p.shape:
                raise ShapeError(node.op, f"gradient shape {gp.shape} != input shape {p.shape}")
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp
    if params is None:
        return {}
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One Adam update with decoupled weight decay, applied in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(name, "non-finite gradient")
        if g.shape != params[name].shape:
            raise ShapeError(name, f"gradient {g.shape} vs parameter {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference checking


def gradient_check(fn: Callable[..., Tensor], input_shapes: Sequence[tuple[int, ...]], eps: float = 1e-6,
                   trials: int = 10, rng: np.random.Generator | None = None,
                   sampler: Callable[[np.random.Generator, tuple[int, ...]], np.ndarray] | None = None,
                   max_coords: int | None = None, max_resamples: int = 50) -> float:
    """Max over trials of the relative error between backprop and central differences.

    The scalar under test is ``sum(fn(*inputs) * R)`` for a random ``R``
    drawn per trial.  Each trial's error is ||a - n|| / (||a|| + ||n||) over
    all probed coordinates.  A trial whose +-eps probes change any branch
    choice (relu mask, pooling argmax, top-k pick) is discarded and redrawn.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must be in (0, 1e-3]")
    rng = rng or np.random.default_rng(0)
    sampler = sampler or (lambda r, s: r.standard_normal(s))
    worst = 0.0
    done = resamples = 0
    while done < trials:
        xs = [sampler(rng, s) for s in input_shapes]
        with trace_kinks() as base_trace:
            out = fn(*[Tensor(x.copy(), requires_grad=True) for x in xs])
        proj = rng.standard_normal(out.shape)
        leaves = [Tensor(x.copy(), requires_grad=True) for x in xs]
        loss = sum_(mul(fn(*leaves), Tensor(proj)))
        backpropagate(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
        base_sig = list(base_trace)

        def f_at(vals):
            with trace_kinks() as tr:
                val = fn(*[Tensor(v) for v in vals]).data.copy()
            return val, list(tr)

        kinked = False
        a_vals, n_vals = [], []
        for i, x in enumerate(xs):
            flat = np.arange(x.size)
            if max_coords is not None and x.size > max_coords:
                flat = rng.choice(x.size, size=max_coords, replace=False)
            for j in flat:
                vals = [v.copy() for v in xs]
                orig = vals[i].flat[j]
                vals[i].flat[j] = orig + eps
                fp, tp = f_at(vals)
                vals[i].flat[j] = orig - eps
                fm, tm = f_at(vals)
                if tp != base_sig or tm != base_sig:
                    kinked = True
                    break
                # difference outputs before projecting so untouched entries cancel exactly,
                # and divide by the step actually taken after rounding
                step = (orig + eps) - (orig - eps)
                num = float(np.sum((fp - fm) * proj)) / step
                a_vals.append(analytic[i].flat[j])
                n_vals.append(num)
            if kinked:
                break
        if kinked:
            resamples += 1
            if resamples > max_resamples:
                raise RuntimeError("too many non-differentiable samples")
            continue
        if a_vals:
            a_vec, n_vec = np.array(a_vals), np.array(n_vals)
            err = np.linalg.norm(a_vec - n_vec) / max(1e-12, np.linalg.norm(a_vec) + np.linalg.norm(n_vec))
            worst = max(worst, float(err))
        done += 1
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = "OBJDRIVE-CKPT"
CKPT_VERSION = 1


def dumps_checkpoint(params: dict[str, np.ndarray]) -> bytes:
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}", f"tensors {len(params)}"]
    offset = 0
    blobs = []
    for name, arr in params.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name may not contain whitespace: {name!r}")
        arr = np.asarray(arr, dtype="<f8")
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"{name} {shape} {offset}")
        blob = np.ascontiguousarray(arr).tobytes()
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs)


def loads_checkpoint(raw: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(raw)

    def line():
        ln = buf.readline()
        if not ln.endswith(b"\n"):
            raise CheckpointError("truncated checkpoint header")
        return ln.decode("ascii", errors="replace").strip()

    head = line().split()
    if len(head) != 2 or head[0] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if head[1] != str(CKPT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {head[1]}")
    count = line().split()
    if len(count) != 2 or count[0] != "tensors" or not count[1].isdigit():
        raise CheckpointError("malformed tensor count line")
    table = []
    for _ in range(int(count[1])):
        parts = line().split()
        if len(parts) != 3:
            raise CheckpointError(f"malformed tensor table row: {parts}")
        name, shape_s, off = parts
        try:
            shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
            off = int(off)
        except ValueError as exc:
            raise CheckpointError(f"malformed tensor table row: {parts}") from exc
        table.append((name, shape, off))
    if line() != "end":
        raise CheckpointError("tensor table not terminated")
    data = raw[buf.tell():]
    out = {}
    expected = 0
    for name, shape, off in table:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off != expected or off + nbytes > len(data):
            raise CheckpointError(f"tensor {name} offset/size inconsistent with data section")
        out[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=off).astype(DTYPE).reshape(shape)
        expected += nbytes
    if expected != len(data):
        raise CheckpointError(f"data section is {len(data)} bytes, table declares {expected}")
    return out


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_checkpoint(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads_checkpoint(Path(path).read_bytes())


def uniform_init(rng: np.random.Generator, shape: Iterable[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))
