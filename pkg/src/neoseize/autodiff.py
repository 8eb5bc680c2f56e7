"""A small dense-tensor engine with reverse-mode differentiation.

Each op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. :meth:`Tensor.backward`
orders the recorded graph topologically and runs the closures in reverse,
so every node (parameters included) is visited exactly once per call.

Conventions:

* convolution is cross-correlation (no kernel flip), stride 1;
* ``relu'(0) = 0``; max-pool ties route the gradient to the first index
  in row-major window order;
* dropout is inverted (scaled at train time), so eval mode is identity;
* all reductions run through numpy in a fixed order, so identical inputs
  and seeds give bit-identical results.

A loss can be back-propagated once; a second call raises
:class:`~neoseize.errors.UsageError`. Leaf gradients accumulate across
separate losses until :func:`zero_grad` is called.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BatchError, NonFiniteError, ShapeError, UsageError

DTYPE = np.float64
CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # arithmetic ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # autodiff --------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise UsageError("backward already called on this graph")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:  # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        self._consumed = True
        # release saved activations; the graph cannot be replayed anyway
        for node in order:
            if node._backward is not None:
                node._backward = _spent
                node._consumed = True


def _spent(_g):
    raise UsageError("backward already called on this graph")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite values produced in forward pass")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def tsum(a: Tensor) -> Tensor:
    return _result(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    return _result(np.mean(a.data), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """[N, ...] -> [N, prod(...)]."""
    return reshape(a, (a.shape[0], -1))


def index(a: Tensor, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(a.data)
        out[idx] += g
        return (out,)

    return _result(a.data[idx], (a,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def _pads(padding) -> tuple[tuple[int, int], tuple[int, int]]:
    ph, pw = padding
    ph = (ph, ph) if np.isscalar(ph) else tuple(ph)
    pw = (pw, pw) if np.isscalar(pw) else tuple(pw)
    return ph, pw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding=(0, 0)) -> Tensor:
    """Stride-1 cross-correlation. x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout].

    ``padding`` is ``(ph, pw)`` for symmetric zero padding or
    ``((top, bottom), (left, right))``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"input has {cin} channels, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape}, expected ({cout},)")
    (pt, pb), (pl, pr) = _pads(padding)
    ho, wo = h + pt + pb - kh + 1, wd + pl + pr - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    # im2col with rows ordered (n, ho, wo) and columns (cin, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, ho + kh - 1, wo + kw - 1, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, :, i, j]
            gx = gxp[:, pt:pt + h, pl:pl + wd, :].transpose(0, 3, 1, 2)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(np.ascontiguousarray(out), parents, back)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> RunningStats:
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    Train mode uses batch statistics (biased variance) and updates the
    running estimates with the unbiased variance; eval mode uses the
    running estimates.
    """
    if x.ndim != 4:
        raise ShapeError("batchnorm2d expects [N, C, H, W]")
    n, c, h, w = x.shape
    shape = (1, c, 1, 1)
    if mode == "train":
        if n < 2:
            raise BatchError("train-mode batch norm needs a batch of at least 2")
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats.mean[:] = (1 - momentum) * stats.mean + momentum * mu
        stats.var[:] = (1 - momentum) * stats.var + momentum * var * m / (m - 1)
    elif mode == "eval":
        mu, var = stats.mean, stats.var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if mode == "train":
                m = n * h * w
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv.reshape(shape) / m * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(shape)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), back)


def maxpool2d(x: Tensor, kernel=(2, 2)) -> Tensor:
    """Non-overlapping max pooling (stride = kernel); trailing rows/cols dropped."""
    kh, kw = kernel
    n, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} smaller than pooling kernel {kh}x{kw}")
    cropped = x.data[:, :, :ho * kh, :wo * kw]
    blocks = cropped.reshape(n, c, ho, kh, wo, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kh * kw)
    arg = blocks.argmax(axis=-1)  # first maximum wins
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = np.zeros_like(blocks)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * kh, :wo * kw] = (
            onehot.reshape(n, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kh, wo * kw)
        )
        return (gx,)

    return _result(out, (x,), back)


def dropout(x: Tensor, p: float, mode: str = "train", rng=None) -> Tensor:
    """Inverted dropout. ``rng`` is a numpy Generator or an integer seed."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if mode != "train" or p == 0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: [N, F], w: [F, O], b: [O]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot map {x.shape} with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match {w.shape[1]} outputs")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, (x, w) if b is None else (x, w, b), back)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Spatial mean per channel: [N, C, H, W] -> [N, C, 1, 1]."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def channelwise_mul(x: Tensor, s: Tensor) -> Tensor:
    """Scale each channel of ``x`` [N,C,H,W] by ``s`` [N,C,1,1]."""
    if s.ndim != 4 or s.shape[:2] != x.shape[:2] or s.shape[2:] != (1, 1):
        raise ShapeError(f"scale shape {s.shape} incompatible with {x.shape}")

    def back(g):
        return g * s.data, (g * x.data).sum(axis=(2, 3), keepdims=True)

    return _result(x.data * s.data, (x, s), back)


PROB_CLAMP = 1e-7


def weighted_bce(p: Tensor, y, w_pos: float = 0.5) -> Tensor:
    """Mean of ``-[w y log p + (1 - w)(1 - y) log(1 - p)]`` with p clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(y, dtype=DTYPE).reshape(p.shape)
    pc = np.clip(p.data, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (p.data >= PROB_CLAMP) & (p.data <= 1 - PROB_CLAMP)
    terms = w_pos * y * np.log(pc) + (1 - w_pos) * (1 - y) * np.log(1 - pc)
    n = p.size
    loss = -np.mean(terms)

    def back(g):
        dp = -(w_pos * y / pc - (1 - w_pos) * (1 - y) / (1 - pc)) / n
        return (g * dp * inside,)

    return _result(np.asarray(loss), (p,), back)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               atol: float = 1e-7, max_per_input: int | None = None, seed: int = 0) -> float:
    """Largest relative error between backprop and central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, atol)``; ``atol``
    keeps entries whose true gradient is essentially zero from dividing
    rounding noise by ~0. With ``max_per_input`` only a seeded random subset
    of entries of each input is probed.
    """
    for t in inputs:
        t.grad = None
    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            idx = np.sort(rng.choice(flat.size, max_per_input, replace=False))
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f(*inputs).item()
            flat[i] = old - h
            fm = f(*inputs).item()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            ai = a.reshape(-1)[i]
            err = abs(ai - num) / max(abs(ai), abs(num), atol)
            worst = max(worst, err)
    return worst
