"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the degradation network needs are provided. There is
no broadcasting: binary ops require identical shapes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def sum(self):
        return tsum(self)

    def backward(self):
        backward(self)


def _result(data, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward_fn if needs else None)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate gradients are local to this call, so calling twice without
    zeroing exactly doubles the leaf gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {loss.shape}")
    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("softmax_rows expects a 2-D tensor")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (a,), _bw)


def l1_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean absolute error. The gradient at ties is zero."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    sign = np.sign(diff)

    def _bw(g):
        return (sign * (float(g) / n), None)

    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    return _result(np.array(np.abs(diff).sum() / n), parents, _bw)


# --- padding -----------------------------------------------------------------

def _pad_widths(pad) -> tuple[int, int]:
    if isinstance(pad, int):
        return pad, pad
    return int(pad[0]), int(pad[1])


def pad2d(x: np.ndarray, before: int, after: int, mode: str) -> np.ndarray:
    if before == 0 and after == 0:
        return x
    width = ((0, 0),) * (x.ndim - 2) + ((before, after), (before, after))
    if mode == "zero":
        return np.pad(x, width)
    if mode == "reflect":
        if max(before, after) >= min(x.shape[-2:]):
            raise ValueError(f"reflect padding {before}/{after} needs a side longer than the pad, got {x.shape[-2:]}")
        return np.pad(x, width, mode="reflect")
    raise ValueError(f"unknown padding mode {mode!r}")


def _unpad_axis(g: np.ndarray, axis: int, before: int, after: int, mode: str) -> np.ndarray:
    n = g.shape[axis] - before - after
    g = np.moveaxis(g, axis, 0)
    out = g[before:before + n].copy()
    if mode == "reflect":
        if before:
            out[1:before + 1] += g[:before][::-1]
        if after:
            out[n - 1 - after:n - 1] += g[before + n:][::-1]
    return np.moveaxis(out, 0, axis)


def unpad2d(g: np.ndarray, before: int, after: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`pad2d` over the last two axes."""
    if before == 0 and after == 0:
        return g
    g = _unpad_axis(g, g.ndim - 2, before, after, mode)
    return _unpad_axis(g, g.ndim - 1, before, after, mode)


# --- convolution ---------------------------------------------------------------

@dataclass
class Conv2dParams:
    weight: Tensor  # (out_ch, in_ch, kh, kw)
    bias: Tensor  # (out_ch,)
    stride: int = 1
    padding: int | tuple[int, int] = 1
    pad_mode: str = "reflect"

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        o, _, kh, kw = self.weight.shape
        if self.bias.shape != (o,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {o} outputs")
        if self.stride == 1 and (kh % 2 == 0 or kw % 2 == 0):
            raise ValueError("stride-1 convolutions need odd kernel sizes")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``p.weight``."""
    w = p.weight
    if x.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    pb, pa = _pad_widths(p.padding)
    xp = pad2d(x.data, pb, pa, p.pad_mode)
    kh, kw = w.shape[2:]
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(f"conv2d: padded input {xp.shape[2:]} smaller than kernel {kh}x{kw}")
    if p.stride == 1:
        return _conv2d_flat(x, p, xp, pb, pa)
    return _conv2d_im2col(x, p, xp, pb, pa)


def _conv2d_flat(x, p, xp, pb, pa):
    # Each kernel tap is a contiguous slice of the row-major padded image;
    # outputs are computed on the padded width and the extra columns dropped.
    w, b = p.weight, p.bias
    n, c, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    length = ho * wp
    flat = np.zeros((n, c, hp * wp + kw - 1))
    flat[:, :, :hp * wp] = xp.reshape(n, c, -1)
    taps = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))  # (kh, kw, O, C)
    out = np.zeros((n, o, length))
    for i, j, off in taps:
        out += np.matmul(wt[i, j], flat[:, :, off:off + length])
    out = out.reshape(n, o, ho, wp)[:, :, :, :wo] + b.data[None, :, None, None]

    def _bw(g):
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gpad = np.zeros((n, o, ho, wp))
        gpad[:, :, :, :wo] = g
        gflat = gpad.reshape(n, o, length)
        gw = None
        if w.requires_grad:
            gwt = np.empty((kh, kw, o, c))
            for i, j, off in taps:
                gwt[i, j] = np.matmul(gflat, flat[:, :, off:off + length].transpose(0, 2, 1)).sum(axis=0)
            gw = gwt.transpose(2, 3, 0, 1).copy()
        gx = None
        if x.requires_grad:
            wtt = np.ascontiguousarray(wt.transpose(0, 1, 3, 2))
            gxf = np.zeros_like(flat)
            for i, j, off in taps:
                gxf[:, :, off:off + length] += np.matmul(wtt[i, j], gflat)
            gx = unpad2d(gxf[:, :, :hp * wp].reshape(n, c, hp, wp), pb, pa, p.pad_mode)
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, w, b), _bw)


def _conv2d_im2col(x, p, xp, pb, pa):
    w, b, s = p.weight, p.bias, p.stride
    n, c, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def _bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gcols[:, :, i, j]
            gx = unpad2d(gxp, pb, pa, p.pad_mode)
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, w, b), _bw)


def same_padding(ksize: int) -> tuple[int, int]:
    """Padding that preserves size for stride 1; the extra row goes after for even kernels."""
    return (ksize - 1) // 2, ksize // 2


def mixture_blur(x: Tensor, weights: Tensor, kernels: np.ndarray) -> Tensor:
    """Per-channel weighted sum of fixed-kernel correlations.

    ``out[n, c] = sum_k weights[c, k] * (x[n, c] * kernels[k])`` with reflect
    padding chosen by :func:`same_padding`. ``kernels`` is a constant and
    receives no gradient.
    """
    n, c, h, w = x.shape
    k, kh, kw = kernels.shape
    if weights.shape != (c, k):
        raise ValueError(f"mixture_blur: weights {weights.shape} vs expected {(c, k)}")
    (pbh, pah), (pbw, paw) = same_padding(kh), same_padding(kw)
    if pbh != pbw or pah != paw:
        raise ValueError("mixture_blur expects square kernels")
    xp = pad2d(x.data, pbh, pah, "reflect")
    hp, wp = xp.shape[2:]
    fh = sfft.next_fast_len(hp, real=True)
    fw = sfft.next_fast_len(wp, real=True)
    kf = sfft.rfft2(kernels[:, ::-1, ::-1], s=(fh, fw), workers=1)  # (K, fh, fw//2+1)
    xf = sfft.rfft2(xp, s=(fh, fw), workers=1)  # (N, C, fh, fw//2+1)
    keff_f = np.einsum("ck,kuv->cuv", weights.data, kf)
    full = sfft.irfft2(xf * keff_f[None], s=(fh, fw), workers=1)
    out = np.ascontiguousarray(full[..., kh - 1:kh - 1 + h, kw - 1:kw - 1 + w])

    def _bw(g):
        # g placed where the valid outputs sit inside the circular product
        gpos = np.zeros((n, c, fh, fw))
        gpos[..., kh - 1:kh - 1 + h, kw - 1:kw - 1 + w] = g
        gf = sfft.rfft2(gpos, workers=1)
        gw = None
        if weights.requires_grad:
            # Parseval over the half spectrum; interior columns count twice
            colw = np.full(fw // 2 + 1, 2.0)
            colw[0] = 1.0
            if fw % 2 == 0:
                colw[-1] = 1.0
            cross = np.einsum("ncuv,ncuv->cuv", np.conj(gf), xf) * colw
            gw = np.einsum("cuv,kuv->ck", cross, kf).real / (fh * fw)
        gx = None
        if x.requires_grad:
            # adjoint of the valid correlation: circular correlation with keff
            gxp = sfft.irfft2(gf * np.conj(keff_f)[None], s=(fh, fw), workers=1)[..., :hp, :wp]
            gx = unpad2d(gxp, pbh, pah, "reflect")
        return gx, gw

    return _result(out, (x, weights), _bw)


# --- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState):
    """Bias-corrected Adam update, in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("parameter list changed between Adam steps")
    for p in params:
        if p.grad is None:
            raise ValueError(f"missing gradient for {p!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grad(params: Sequence[Tensor]):
    for p in params:
        p.grad = None
