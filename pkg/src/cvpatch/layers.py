"""Real and complex layers.

Kernels are plain functions on tape nodes (``conv2d``, ``complex_conv2d``,
``crelu`` ...). The layer classes own ``Parameter`` objects and batch-norm
running statistics and call those kernels in ``forward``.

Conventions: NCHW layout, cross-correlation (no kernel flip), zero padding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autograd as ag
from .autograd import Node, Parameter, Tape
from .ctensor import ComplexTensor, ShapeError

BN_EPS = 1e-5
CL2_EPS = 1e-12
# im2col buffers up to this size are kept for backward; larger ones are rebuilt
_KEEP_COLUMNS_BYTES = 256 * 2**20


# -- im2col ----------------------------------------------------------------


def _out_size(n, k, stride, pad):
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"kernel {k} larger than padded input {n + 2 * pad}")
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Columns laid out (C*kh*kw, N*Ho*Wo), built from kh*kw slice copies."""
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = x_shape
    d = dcols.reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        dxp = dxp[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dxp)


def _to_nchw(flat: np.ndarray, n, ho, wo):
    """(Cout, N*Ho*Wo) -> contiguous (N, Cout, Ho, Wo)."""
    return np.ascontiguousarray(flat.reshape(-1, n, ho, wo).transpose(1, 0, 2, 3))


def _from_nchw(g: np.ndarray):
    """(N, C, H, W) -> (C, N*H*W)."""
    return g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)


# -- real kernels ------------------------------------------------------------


def conv2d(x: Node, weight: Node, bias: Node | None = None, stride: int = 1,
           padding: int = 0) -> Node:
    xv, wv = x.value, weight.value
    if xv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"conv2d: input {xv.shape} does not match kernel {wv.shape}")
    cout, _, kh, kw = wv.shape
    n = xv.shape[0]
    cols, ho, wo = _im2col(xv, kh, kw, stride, padding)
    wf = wv.reshape(cout, -1)
    out = wf @ cols
    if bias is not None:
        out += bias.value[:, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)
    keep = cols if cols.nbytes <= _KEEP_COLUMNS_BYTES else None
    del cols

    def rule(g):
        g2 = _from_nchw(g)
        cols = keep if keep is not None else _im2col(xv, kh, kw, stride, padding)[0]
        dw = (g2 @ cols.T).reshape(wv.shape)
        dx = _col2im(wf.T @ g2, xv.shape, kh, kw, stride, padding, ho, wo)
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=1)

    return x.tape.record("conv2d", inputs, _to_nchw(out, n, ho, wo), rule)


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """y = x W^T + b with W of shape (out, in)."""
    xv, wv = x.value, weight.value
    if xv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"linear: input {xv.shape} does not match weight {wv.shape}")
    out = xv @ wv.T
    if bias is not None:
        out += bias.value
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        grads = (g @ wv, g.T @ xv)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return x.tape.record("linear", inputs, out, rule)


relu = ag.relu
sigmoid = ag.sigmoid


# -- complex kernels --------------------------------------------------------


def _stacked_im2col(xr: np.ndarray, xi: np.ndarray, kh, kw, stride, pad):
    """Real and imaginary columns stacked into one (2*C*kh*kw, N*Ho*Wo) buffer."""
    cr, ho, wo = _im2col(xr, kh, kw, stride, pad)
    ci, _, _ = _im2col(xi, kh, kw, stride, pad)
    return np.concatenate([cr, ci]), ho, wo


def complex_conv2d(x: Node, a: Node, b: Node, bias: Node | None = None, stride: int = 1,
                   padding: int = 0) -> Node:
    """Complex convolution with kernel A + iB.

    real out = A*x - B*y, imag out = B*x + A*y  for input x + iy.
    """
    xv = x.value
    av, bv = a.value, b.value
    if not isinstance(xv, ComplexTensor) or xv.ndim != 4:
        raise ShapeError("complex_conv2d expects a complex NCHW input")
    if av.shape != bv.shape:
        raise ShapeError(f"A {av.shape} and B {bv.shape} differ")
    if xv.shape[1] != av.shape[1]:
        raise ShapeError(f"complex_conv2d: {xv.shape[1]} input channels, kernel expects {av.shape[1]}")
    cout, _, kh, kw = av.shape
    n = xv.shape[0]
    cols, ho, wo = _stacked_im2col(xv.real, xv.imag, kh, kw, stride, padding)
    k = cols.shape[0] // 2
    af, bf = av.reshape(cout, -1), bv.reshape(cout, -1)
    # rows [A x - B y ; B x + A y] computed in one product over stacked columns
    out = np.block([[af, -bf], [bf, af]]) @ cols
    if bias is not None:
        out[:cout] += bias.value.real[:, None]
        out[cout:] += bias.value.imag[:, None]
    result = ComplexTensor(_to_nchw(out[:cout], n, ho, wo), _to_nchw(out[cout:], n, ho, wo))
    inputs = (x, a, b) if bias is None else (x, a, b, bias)
    keep = cols if cols.nbytes <= _KEEP_COLUMNS_BYTES else None
    del cols

    def rule(g):
        c = keep if keep is not None else _stacked_im2col(xv.real, xv.imag, kh, kw, stride, padding)[0]
        gs = np.concatenate([_from_nchw(g.real), _from_nchw(g.imag)])
        gw = gs @ c.T  # [[gr x^T, gr y^T], [gi x^T, gi y^T]]
        da = (gw[:cout, :k] + gw[cout:, k:]).reshape(av.shape)
        db = (gw[cout:, :k] - gw[:cout, k:]).reshape(bv.shape)
        dc = np.block([[af.T, bf.T], [-bf.T, af.T]]) @ gs
        dx = ComplexTensor(_col2im(dc[:k], xv.shape, kh, kw, stride, padding, ho, wo),
                           _col2im(dc[k:], xv.shape, kh, kw, stride, padding, ho, wo))
        if bias is None:
            return dx, da, db
        return dx, da, db, ComplexTensor(gs[:cout].sum(axis=1), gs[cout:].sum(axis=1))

    return x.tape.record("complex_conv2d", inputs, result, rule)


def complex_linear(x: Node, a: Node, b: Node, bias: Node | None = None) -> Node:
    """(A x - B y) + i(B x + A y) for a batch of row vectors x + iy."""
    xv = x.value
    av, bv = a.value, b.value
    if not isinstance(xv, ComplexTensor) or xv.ndim != 2 or xv.shape[1] != av.shape[1]:
        raise ShapeError(f"complex_linear: input {xv.shape} does not match weight {av.shape}")
    xr, xi = xv.real, xv.imag
    out_r = xr @ av.T - xi @ bv.T
    out_i = xr @ bv.T + xi @ av.T
    if bias is not None:
        out_r = out_r + bias.value.real
        out_i = out_i + bias.value.imag
    inputs = (x, a, b) if bias is None else (x, a, b, bias)

    def rule(g):
        gr, gi = g.real, g.imag
        dx = ComplexTensor(gr @ av + gi @ bv, gi @ av - gr @ bv)
        da = gr.T @ xr + gi.T @ xi
        db = gi.T @ xr - gr.T @ xi
        if bias is None:
            return dx, da, db
        return dx, da, db, ComplexTensor(gr.sum(axis=0), gi.sum(axis=0))

    return x.tape.record("complex_linear", inputs, ComplexTensor(out_r, out_i), rule)


def crelu(x: Node) -> Node:
    v = x.value
    mr, mi = v.real > 0, v.imag > 0
    out = ComplexTensor(np.where(mr, v.real, 0.0).astype(v.dtype),
                        np.where(mi, v.imag, 0.0).astype(v.dtype))
    margin = min(np.abs(v.real).min(), np.abs(v.imag).min()) if v.size else None
    return x.tape.record("crelu", (x,), out,
                         lambda g: (ComplexTensor(g.real * mr, g.imag * mi),),
                         kink_margin=None if margin is None else float(margin))


def _max_pool_part(v: np.ndarray, k: int, s: int):
    n, c, h, w = v.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} larger than map {h}x{w}")
    if k == s:
        if h % k or w % k:
            raise ShapeError(f"map {h}x{w} not divisible by pool window {k}")
        ho, wo = h // k, w // k
        win = v.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    else:
        win = sliding_window_view(v, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        win = win.reshape(n, c, ho, wo, k * k)
    # argmax returns the first maximum in row-major window order
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if k * k > 1:
        top2 = np.partition(win, k * k - 2, axis=-1)[..., -2:]
        margin = float((top2[..., 1] - top2[..., 0]).min())
    else:
        margin = None
    return out, idx, margin


def _max_pool_back(g: np.ndarray, idx: np.ndarray, shape, k: int, s: int):
    n, c, h, w = shape
    ho, wo = idx.shape[2], idx.shape[3]
    if k == s:
        buf = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        return buf.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    dx = np.zeros(shape, dtype=g.dtype)
    rows = np.arange(ho)[:, None] * s + idx // k
    cols = np.arange(wo)[None, :] * s + idx % k
    ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dx, (ni[..., None, None], ci[..., None, None], rows, cols), g)
    return dx


def complex_max_pool(x: Node, window: int = 2, stride: int | None = None) -> Node:
    """Max-pool the real and imaginary parts independently."""
    stride = window if stride is None else stride
    v = x.value
    out_r, idx_r, m_r = _max_pool_part(v.real, window, stride)
    out_i, idx_i, m_i = _max_pool_part(v.imag, window, stride)
    margins = [m for m in (m_r, m_i) if m is not None]

    def rule(g):
        return (ComplexTensor(_max_pool_back(g.real, idx_r, v.shape, window, stride),
                              _max_pool_back(g.imag, idx_i, v.shape, window, stride)),)

    return x.tape.record("complex_max_pool", (x,), ComplexTensor(out_r, out_i), rule,
                         kink_margin=min(margins) if margins else None)


def _l2_rows(v: np.ndarray, eps: float):
    norm = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    return v / (norm + eps), norm


def _l2_rows_back(g, v, norm, eps):
    dot = np.sum(g * v, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return g / (norm + eps) - v * dot / (safe * (norm + eps) ** 2)


def cl2_norm(z: Node, eps: float = CL2_EPS) -> Node:
    """Divide the real and imaginary parts of each row by their own L2 norm."""
    v = z.value
    if v.ndim != 2:
        raise ShapeError(f"cl2_norm expects (N, D), got {v.shape}")
    yr, nr = _l2_rows(v.real, eps)
    yi, ni = _l2_rows(v.imag, eps)
    return z.tape.record("cl2_norm", (z,), ComplexTensor(yr, yi),
                         lambda g: (ComplexTensor(_l2_rows_back(g.real, v.real, nr, eps),
                                                  _l2_rows_back(g.imag, v.imag, ni, eps)),))


# -- batch normalization ----------------------------------------------------


def _bn_axes(ndim: int):
    if ndim == 4:
        return (0, 2, 3)
    if ndim == 2:
        return (0,)
    raise ShapeError(f"batch norm expects (N, C) or (N, C, H, W), got rank {ndim}")


def _bcast(p: np.ndarray, ndim: int):
    return p.reshape((1, -1, 1, 1) if ndim == 4 else (1, -1))


def _bn_part_train(v, gamma, beta, eps):
    axes = _bn_axes(v.ndim)
    mu = v.mean(axis=axes, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _bcast(gamma, v.ndim) * xhat + _bcast(beta, v.ndim)
    m = v.size // v.shape[1]

    def back(g):
        dgamma = np.sum(g * xhat, axis=axes)
        dbeta = np.sum(g, axis=axes)
        dxhat = g * _bcast(gamma, v.ndim)
        dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                          - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    return out, back, mu.reshape(-1), var.reshape(-1)


def _bn_part_eval(v, gamma, beta, rmean, rvar, eps):
    axes = _bn_axes(v.ndim)
    inv = 1.0 / np.sqrt(_bcast(rvar, v.ndim) + eps)
    xhat = (v - _bcast(rmean, v.ndim)) * inv
    out = _bcast(gamma, v.ndim) * xhat + _bcast(beta, v.ndim)

    def back(g):
        return (g * _bcast(gamma, v.ndim) * inv, np.sum(g * xhat, axis=axes),
                np.sum(g, axis=axes))

    return out, back


def complex_bn_per_component(x: Node, gamma_r: Node, beta_r: Node, gamma_i: Node,
                             beta_i: Node, stats: dict, training: bool,
                             momentum: float = 0.9, eps: float = BN_EPS) -> Node:
    """Ordinary batch norm applied separately to the real and imaginary parts.

    ``stats`` holds running_mean_r/var_r/mean_i/var_i and is updated in place in
    training mode as ``running = momentum * running + (1 - momentum) * batch``.
    """
    v = x.value
    if training:
        if v.shape[0] < 2:
            raise ValueError("batch norm in training mode needs a batch of at least 2")
        out_r, back_r, mu_r, var_r = _bn_part_train(v.real, gamma_r.value, beta_r.value, eps)
        out_i, back_i, mu_i, var_i = _bn_part_train(v.imag, gamma_i.value, beta_i.value, eps)
        for key, batch in (("mean_r", mu_r), ("var_r", var_r), ("mean_i", mu_i), ("var_i", var_i)):
            stats[key] = momentum * stats[key] + (1.0 - momentum) * batch
    else:
        out_r, back_r = _bn_part_eval(v.real, gamma_r.value, beta_r.value,
                                      stats["mean_r"], stats["var_r"], eps)
        out_i, back_i = _bn_part_eval(v.imag, gamma_i.value, beta_i.value,
                                      stats["mean_i"], stats["var_i"], eps)

    def rule(g):
        dxr, dgr, dbr = back_r(g.real)
        dxi, dgi, dbi = back_i(g.imag)
        return ComplexTensor(dxr, dxi), dgr, dbr, dgi, dbi

    return x.tape.record("complex_bn", (x, gamma_r, beta_r, gamma_i, beta_i),
                         ComplexTensor(out_r.astype(v.dtype), out_i.astype(v.dtype)), rule)


def _inv_sqrt_2x2(vrr, vri, vii):
    """Closed-form inverse square root of the SPD matrix [[vrr, vri], [vri, vii]]."""
    s = np.sqrt(vrr * vii - vri * vri)
    t = np.sqrt(vrr + vii + 2.0 * s)
    k = 1.0 / (s * t)
    return (vii + s) * k, -vri * k, (vrr + s) * k


def complex_bn_covariance(x: Node, gamma_r: Node, beta_r: Node, gamma_i: Node,
                          beta_i: Node, stats: dict, training: bool,
                          momentum: float = 0.9, eps: float = BN_EPS) -> Node:
    """Whiten each channel's (real, imag) pair by V^{-1/2}, then scale and shift.

    V is the per-channel 2x2 covariance of (real, imag) over the batch and
    spatial axes, regularized by eps * I. Built from differentiable primitives.
    """
    v = x.value
    nd = v.ndim
    axes = _bn_axes(nd)
    t = x.tape
    shape = (1, -1, 1, 1) if nd == 4 else (1, -1)
    xr, xi = ag.real_part(x), ag.imag_part(x)
    if training:
        if v.shape[0] < 2:
            raise ValueError("batch norm in training mode needs a batch of at least 2")
        mr = ag.mean(xr, axis=axes, keepdims=True)
        mi = ag.mean(xi, axis=axes, keepdims=True)
        cr, ci = ag.sub(xr, mr), ag.sub(xi, mi)
        vrr = ag.mean(ag.square(cr), axis=axes, keepdims=True)
        vii = ag.mean(ag.square(ci), axis=axes, keepdims=True)
        vri = ag.mean(ag.mul(cr, ci), axis=axes, keepdims=True)
        for key, node in (("mean_r", mr), ("mean_i", mi), ("vrr", vrr), ("vri", vri), ("vii", vii)):
            stats[key] = momentum * stats[key] + (1.0 - momentum) * node.value.reshape(-1)
        vrr_e = ag.add(vrr, eps)
        vii_e = ag.add(vii, eps)
        s = ag.sqrt(ag.sub(ag.mul(vrr_e, vii_e), ag.square(vri)))
        tt = ag.sqrt(ag.add(ag.add(vrr_e, vii_e), ag.scale(s, 2.0)))
        k = ag.div(t.constant(np.ones((), v.dtype)), ag.mul(s, tt))
        wrr = ag.mul(ag.add(vii_e, s), k)
        wii = ag.mul(ag.add(vrr_e, s), k)
        wri = ag.scale(ag.mul(vri, k), -1.0)
    else:
        wrr_v, wri_v, wii_v = _inv_sqrt_2x2(stats["vrr"] + eps, stats["vri"], stats["vii"] + eps)
        wrr, wri, wii = (t.constant(w.reshape(shape).astype(v.dtype)) for w in (wrr_v, wri_v, wii_v))
        cr = ag.sub(xr, t.constant(stats["mean_r"].reshape(shape).astype(v.dtype)))
        ci = ag.sub(xi, t.constant(stats["mean_i"].reshape(shape).astype(v.dtype)))
    out_r = ag.add(ag.mul(wrr, cr), ag.mul(wri, ci))
    out_i = ag.add(ag.mul(wri, cr), ag.mul(wii, ci))
    out_r = ag.add(ag.mul(out_r, ag.reshape(gamma_r, shape)), ag.reshape(beta_r, shape))
    out_i = ag.add(ag.mul(out_i, ag.reshape(gamma_i, shape)), ag.reshape(beta_i, shape))
    return ag.make_complex(out_r, out_i)


# -- initialization ---------------------------------------------------------


def _fans(shape):
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_complex_weights(shape, rng: np.random.Generator, scheme: str = "rayleigh",
                         dtype=np.float64):
    """Return (A, B) kernels for a complex weight of the given shape.

    ``rayleigh``: modulus ~ Rayleigh(1/sqrt(fan_in)), phase ~ U[-pi, pi).
    ``glorot``: A and B independently Glorot-uniform.
    """
    fan_in, fan_out = _fans(shape)
    if scheme == "rayleigh":
        sigma = 1.0 / np.sqrt(fan_in)
        mod = rng.rayleigh(scale=sigma, size=shape)
        phase = rng.uniform(-np.pi, np.pi, size=shape)
        return (mod * np.cos(phase)).astype(dtype), (mod * np.sin(phase)).astype(dtype)
    if scheme == "glorot":
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return (rng.uniform(-lim, lim, size=shape).astype(dtype),
                rng.uniform(-lim, lim, size=shape).astype(dtype))
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_real_weights(shape, rng: np.random.Generator, dtype=np.float64):
    fan_in, _ = _fans(shape)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# -- layer objects ----------------------------------------------------------


class Module:
    """Owns parameters, buffers and child modules, in attribute order."""

    def named_parameters(self):
        seen = set()
        for p in self._walk_params():
            if id(p) not in seen:
                seen.add(id(p))
                yield p.name, p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def _walk_params(self):
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
            elif isinstance(value, Module):
                yield from value._walk_params()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item._walk_params()

    def modules(self):
        seen = set()
        stack = [self]
        while stack:
            m = stack.pop(0)
            if id(m) in seen:
                continue
            seen.add(id(m))
            yield m
            for value in vars(m).values():
                if isinstance(value, Module):
                    stack.append(value)
                elif isinstance(value, (list, tuple)):
                    stack.extend(v for v in value if isinstance(v, Module))

    def named_buffers(self):
        for m in self.modules():
            for key, arr in getattr(m, "stats", {}).items():
                yield f"{m.name}.{key}", arr

    def load_buffers(self, tensors: dict) -> None:
        for m in self.modules():
            stats = getattr(m, "stats", None)
            if stats is None:
                continue
            for key in stats:
                stats[key] = np.array(tensors[f"{m.name}.{key}"], dtype=stats[key].dtype)


class RealConv2d(Module):
    def __init__(self, name, cin, cout, kernel, rng, padding="same", dtype=np.float64):
        self.name = name
        self.padding = kernel // 2 if padding == "same" else int(padding)
        self.W = Parameter(f"{name}.W", init_real_weights((cout, cin, kernel, kernel), rng, dtype))
        self.b = Parameter(f"{name}.b", np.zeros(cout, dtype))

    def forward(self, tape: Tape, x: Node) -> Node:
        return conv2d(x, tape.param(self.W), tape.param(self.b), padding=self.padding)


class Linear(Module):
    def __init__(self, name, din, dout, rng, dtype=np.float64, init_std=None):
        """He-normal weights, or N(0, init_std^2) when ``init_std`` is given."""
        self.name = name
        w = (init_real_weights((dout, din), rng, dtype) if init_std is None
             else (rng.standard_normal((dout, din)) * init_std).astype(dtype))
        self.W = Parameter(f"{name}.W", w)
        self.b = Parameter(f"{name}.b", np.zeros(dout, dtype))

    def forward(self, tape: Tape, x: Node) -> Node:
        return linear(x, tape.param(self.W), tape.param(self.b))


class ComplexConv2d(Module):
    def __init__(self, name, cin, cout, kernel, rng, padding="same", scheme="rayleigh",
                 bias=True, dtype=np.float64):
        if padding == "same" and kernel % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel")
        self.name = name
        self.stride = 1
        self.padding = kernel // 2 if padding == "same" else int(padding)
        a, b = init_complex_weights((cout, cin, kernel, kernel), rng, scheme, dtype)
        self.A = Parameter(f"{name}.A", a)
        self.B = Parameter(f"{name}.B", b)
        self.bias = Parameter(f"{name}.bias", ComplexTensor.zeros((cout,), dtype)) if bias else None

    def forward(self, tape: Tape, x: Node) -> Node:
        bias = tape.param(self.bias) if self.bias is not None else None
        return complex_conv2d(x, tape.param(self.A), tape.param(self.B), bias,
                              stride=self.stride, padding=self.padding)


class ComplexLinear(Module):
    def __init__(self, name, din, dout, rng, scheme="rayleigh", dtype=np.float64):
        self.name = name
        a, b = init_complex_weights((dout, din), rng, scheme, dtype)
        self.A = Parameter(f"{name}.A", a)
        self.B = Parameter(f"{name}.B", b)
        self.bias = Parameter(f"{name}.bias", ComplexTensor.zeros((dout,), dtype))

    def forward(self, tape: Tape, x: Node) -> Node:
        return complex_linear(x, tape.param(self.A), tape.param(self.B), tape.param(self.bias))


class ComplexBatchNorm(Module):
    MODES = ("per_component", "covariance")

    def __init__(self, name, channels, mode="per_component", momentum=0.9, eps=BN_EPS,
                 dtype=np.float64):
        if mode not in self.MODES:
            raise ValueError(f"unknown batch-norm mode {mode!r}")
        self.name = name
        self.mode = mode
        self.momentum = momentum
        self.eps = eps
        self.gamma_r = Parameter(f"{name}.gamma_r", np.ones(channels, dtype))
        self.beta_r = Parameter(f"{name}.beta_r", np.zeros(channels, dtype))
        self.gamma_i = Parameter(f"{name}.gamma_i", np.ones(channels, dtype))
        self.beta_i = Parameter(f"{name}.beta_i", np.zeros(channels, dtype))
        zeros, ones = np.zeros(channels), np.ones(channels)
        if mode == "per_component":
            self.stats = {"mean_r": zeros.copy(), "var_r": ones.copy(),
                          "mean_i": zeros.copy(), "var_i": ones.copy()}
        else:
            self.stats = {"mean_r": zeros.copy(), "mean_i": zeros.copy(),
                          "vrr": ones.copy(), "vri": zeros.copy(), "vii": ones.copy()}

    def forward(self, tape: Tape, x: Node, training: bool) -> Node:
        fn = complex_bn_per_component if self.mode == "per_component" else complex_bn_covariance
        return fn(x, tape.param(self.gamma_r), tape.param(self.beta_r), tape.param(self.gamma_i),
                  tape.param(self.beta_i), self.stats, training, self.momentum, self.eps)


class ComplexResidualBlock(Module):
    """BN -> CRelu -> Conv -> BN -> CRelu -> Conv, plus a skip connection.

    The skip is the identity, or a 1x1 complex convolution when the channel
    count changes.
    """

    def __init__(self, name, cin, cout, rng, bn_mode="per_component", kernel=3,
                 scheme="rayleigh", momentum=0.9, dtype=np.float64):
        self.name = name
        self.bn1 = ComplexBatchNorm(f"{name}.bn1", cin, bn_mode, momentum, dtype=dtype)
        self.conv1 = ComplexConv2d(f"{name}.conv1", cin, cout, kernel, rng, scheme=scheme, dtype=dtype)
        self.bn2 = ComplexBatchNorm(f"{name}.bn2", cout, bn_mode, momentum, dtype=dtype)
        self.conv2 = ComplexConv2d(f"{name}.conv2", cout, cout, kernel, rng, scheme=scheme, dtype=dtype)
        self.projection = (ComplexConv2d(f"{name}.proj", cin, cout, 1, rng, scheme=scheme, dtype=dtype)
                           if cin != cout else None)

    def forward(self, tape: Tape, x: Node, training: bool) -> Node:
        h = self.conv1.forward(tape, crelu(self.bn1.forward(tape, x, training)))
        h = self.conv2.forward(tape, crelu(self.bn2.forward(tape, h, training)))
        skip = self.projection.forward(tape, x) if self.projection is not None else x
        return ag.cadd(h, skip)
