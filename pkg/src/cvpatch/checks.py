"""Built-in verification suites: finite-difference gradients and brute-force oracles.

Every suite looks operations up through their modules at call time, so a
patched (e.g. deliberately broken) operation is what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import ctensor as ct
from . import layers as L
from . import objectives as obj
from .autograd import Parameter, Tape
from .ctensor import ComplexTensor

GRAD_EPS = 1e-5
GRAD_TOL = 1e-4
KINK_MARGIN = 1e-3
SHAPES_PER_OP = 20


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    cases: int
    seconds: float = 0.0
    failures: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<14} {status}  max_err={self.max_error:.3e}  cases={self.cases}"
                f"  time={self.seconds:.1f}s")


# -- naive oracles -----------------------------------------------------------


def naive_dft2d(x: np.ndarray) -> np.ndarray:
    """Direct double sum over the last two axes; returns a numpy complex array."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    out = np.zeros(x.shape, dtype=np.complex128)
    hh = np.arange(h)[:, None]
    ww = np.arange(w)[None, :]
    for u in range(h):
        for v in range(w):
            phase = np.exp(-2j * np.pi * (u * hh / h + v * ww / w))
            out[..., u, v] = np.sum(x * phase, axis=(-2, -1))
    return out


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation by explicit loops; works for real or numpy complex arrays."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, w))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = 0
                    for ci in range(cin):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[i, ci, r * stride + a, c * stride + bb] * w[o, ci, a, bb]
                    out[i, o, r, c] = acc + (0 if b is None else b[o])
    return out


def block_matrix_conv(x: ComplexTensor, a, b, bias=None, stride=1, padding=0) -> ComplexTensor:
    """Complex conv through a real conv on stacked (real, imag) channels with [[A,-B],[B,A]]."""
    cout = a.shape[0]
    kernel = np.concatenate([np.concatenate([a, -b], axis=1), np.concatenate([b, a], axis=1)])
    stacked = np.concatenate([x.real, x.imag], axis=1)
    rb = None if bias is None else np.concatenate([bias.real, bias.imag])
    t = Tape()
    out = L.conv2d(t.constant(stacked), t.constant(kernel),
                   None if rb is None else t.constant(rb), stride, padding).value
    return ComplexTensor(out[:, :cout], out[:, cout:])


def brute_force_fpr95(scores, labels, polarity="larger_is_match") -> float:
    """Try every candidate threshold; keep the lowest FPR among those with TPR >= 0.95."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if polarity == "smaller_is_match":
        s = -s
    pos, neg = y.sum(), (~y).sum()
    best = None
    for t in np.unique(s):
        pred = s >= t
        tp = int((pred & y).sum())
        fp = int((pred & ~y).sum())
        if tp * 20 >= 19 * pos:
            rate = fp / neg
            best = rate if best is None else min(best, rate)
    return float(best)


# -- gradient check ------------------------------------------------------------


def _parts(v):
    return [v.real, v.imag] if isinstance(v, ComplexTensor) else [v]


def _project(out, weights):
    """Real scalar sum(out * W) (per part for complex outputs)."""
    if out.is_complex:
        r = ag.sum(ag.mul(ag.real_part(out), weights[0]))
        i = ag.sum(ag.mul(ag.imag_part(out), weights[1]))
        return ag.add(r, i)
    return ag.sum(ag.mul(out, weights[0]))


@dataclass
class GradCheck:
    max_error: float
    coords: int
    resamples: int


def gradcheck(make, rng, coords_per_part=6, tries=25) -> GradCheck:
    """Compare backward against central finite differences.

    ``make(rng)`` returns (values, fn, params): fresh input values, a function
    fn(tape, *input_nodes) -> Node, and extra existing Parameters that fn uses.
    Inputs are redrawn while any recorded op sits within KINK_MARGIN of a kink.
    """
    for attempt in range(tries):
        values, fn, params = make(rng)
        leaves = [Parameter(f"input{k}", v) for k, v in enumerate(values)]
        tape = Tape()
        out = fn(tape, *[tape.param(p) for p in leaves])
        if tape.min_kink_margin() >= KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw inputs away from kinks")
    weights = [rng.standard_normal(np.shape(p)) for p in _parts(out.value)]
    everything = leaves + list(params)

    def loss_value():
        t = Tape()
        o = fn(t, *[t.param(p) for p in leaves])
        return float(_project(o, weights).value)

    for p in everything:
        p.zero_grad()
    tape = Tape()
    loss = _project(fn(tape, *[tape.param(p) for p in leaves]), weights)
    tape.backward(loss)
    analytic = [[np.array(g, dtype=np.float64) for g in p.grad_parts()] for p in everything]

    worst, count = 0.0, 0
    for p, grads in zip(everything, analytic):
        base = [part.copy() for part in p.parts()]
        for k, part in enumerate(base):
            if part.size == 0:
                continue
            picks = rng.choice(part.size, size=min(coords_per_part, part.size), replace=False)
            for flat in picks:
                idx = np.unravel_index(flat, part.shape)
                vals = []
                for sign in (1.0, -1.0):
                    bumped = [q.copy() for q in base]
                    bumped[k][idx] += sign * GRAD_EPS
                    p.set_parts(bumped)
                    vals.append(loss_value())
                p.set_parts(base)
                fd = (vals[0] - vals[1]) / (2 * GRAD_EPS)
                a = float(grads[k][idx])
                worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
                count += 1
    return GradCheck(worst, count, attempt)


def _shape(rng, lo=1, hi=4, dmax=5):
    return tuple(int(d) for d in rng.integers(1, dmax + 1, size=int(rng.integers(lo, hi + 1))))


def _c(rng, shape, scale=1.0):
    return ComplexTensor(scale * rng.standard_normal(shape), scale * rng.standard_normal(shape))


def _away(rng, shape, lo=0.5, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], size=shape)


def _bshape(rng, shape):
    """The shape itself, or a version with a leading 1 to exercise broadcasting."""
    return shape if rng.random() < 0.5 else (1,) + shape[1:]


def _nchw(rng, cmax=4, smax=8, smin=1):
    return (int(rng.integers(1, 3)), int(rng.integers(1, cmax + 1)),
            int(rng.integers(smin, smax + 1)), int(rng.integers(smin, smax + 1)))


def _binary(op, sampler=None):
    def make(rng):
        s = _shape(rng)
        b = sampler(rng, _bshape(rng, s)) if sampler else rng.standard_normal(_bshape(rng, s))
        return [rng.standard_normal(s), b], lambda t, x, y: getattr(ag, op)(x, y), ()
    return make


def _unary(op, sampler=None, **kw):
    def make(rng):
        s = _shape(rng)
        x = sampler(rng, s) if sampler else rng.standard_normal(s)
        return [x], lambda t, x: getattr(ag, op)(x, **kw), ()
    return make


def _cbinary(op):
    def make(rng):
        s = _shape(rng)
        return [_c(rng, s), _c(rng, _bshape(rng, s))], lambda t, x, y: getattr(ag, op)(x, y), ()
    return make


def _make_scale(rng):
    c = float(rng.normal())
    cplx = rng.random() < 0.5
    s = _shape(rng)
    return [_c(rng, s) if cplx else rng.standard_normal(s)], lambda t, x: ag.scale(x, c), ()


def _make_minimum(rng):
    s = _shape(rng)
    return [rng.standard_normal(s), rng.standard_normal(s)], lambda t, x, y: ag.minimum(x, y), ()


def _make_reduce(op):
    def make(rng):
        s = _shape(rng)
        axis = None if rng.random() < 0.3 else int(rng.integers(len(s)))
        keep = bool(rng.random() < 0.5)
        return [rng.standard_normal(s)], lambda t, x: getattr(ag, op)(x, axis=axis, keepdims=keep), ()
    return make


def _make_reshape(rng):
    s = _shape(rng)
    return [rng.standard_normal(s)], lambda t, x: ag.reshape(x, s[::-1]), ()


def _make_concat(rng):
    s = _shape(rng)
    s2 = (int(rng.integers(1, 4)),) + s[1:]
    return ([rng.standard_normal(s), rng.standard_normal(s2)],
            lambda t, x, y: ag.concat([x, y], axis=0), ())


def _make_take(rng):
    s = _shape(rng)
    a = int(rng.integers(0, s[0]))
    b = int(rng.integers(a + 1, s[0] + 1))
    return [rng.standard_normal(s)], lambda t, x: ag.take(x, np.s_[a:b]), ()


def _make_matmul(rng):
    n, k, m = (int(v) for v in rng.integers(1, 6, size=3))
    return ([rng.standard_normal((n, k)), rng.standard_normal((k, m))],
            lambda t, x, w: ag.matmul(x, w), ())


def _make_mse(rng):
    n = int(rng.integers(1, 9))
    target = rng.random(n)
    return [rng.standard_normal(n)], lambda t, x: ag.mse(x, target), ()


def _cunary(op, **kw):
    def make(rng):
        s = _shape(rng)
        return [_c(rng, s)], lambda t, x: getattr(ag, op)(x, **kw), ()
    return make


def _make_make_complex(rng):
    s = _shape(rng)
    return ([rng.standard_normal(s), rng.standard_normal(s)],
            lambda t, x, y: ag.make_complex(x, y), ())


def _make_creshape(rng):
    s = _shape(rng)
    return [_c(rng, s)], lambda t, x: ag.creshape(x, s[::-1]), ()


def _make_cconcat(rng):
    s = _shape(rng)
    s2 = (int(rng.integers(1, 4)),) + s[1:]
    return [_c(rng, s), _c(rng, s2)], lambda t, x, y: ag.cconcat([x, y], axis=0), ()


def _make_cslice(rng):
    s = _shape(rng)
    axis = int(rng.integers(len(s)))
    a = int(rng.integers(0, s[axis]))
    b = int(rng.integers(a + 1, s[axis] + 1))
    return [_c(rng, s)], lambda t, x: ag.cslice(x, a, b, axis=axis), ()


def _make_dft(rng):
    s = _shape(rng, 2, 4, 6)
    return [rng.standard_normal(s)], lambda t, x: ag.dft2d(x), ()


def _conv_geometry(rng):
    n, cin, h, w = _nchw(rng, smin=3)
    cout = int(rng.integers(1, 5))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    return (n, cin, h, w), (cout, cin, k, k), stride, pad


def _make_conv2d(rng):
    xs, ws, stride, pad = _conv_geometry(rng)
    return ([rng.standard_normal(xs), rng.standard_normal(ws), rng.standard_normal(ws[0])],
            lambda t, x, w, b: L.conv2d(x, w, b, stride, pad), ())


def _make_complex_conv2d(rng):
    xs, ws, stride, pad = _conv_geometry(rng)
    return ([_c(rng, xs), rng.standard_normal(ws), rng.standard_normal(ws), _c(rng, ws[0])],
            lambda t, x, a, b, c: L.complex_conv2d(x, a, b, c, stride, pad), ())


def _make_linear(rng):
    n, din, dout = (int(v) for v in rng.integers(1, 7, size=3))
    return ([rng.standard_normal((n, din)), rng.standard_normal((dout, din)),
             rng.standard_normal(dout)], lambda t, x, w, b: L.linear(x, w, b), ())


def _make_complex_linear(rng):
    n, din, dout = (int(v) for v in rng.integers(1, 7, size=3))
    return ([_c(rng, (n, din)), rng.standard_normal((dout, din)), rng.standard_normal((dout, din)),
             _c(rng, dout)], lambda t, x, a, b, c: L.complex_linear(x, a, b, c), ())


def _make_crelu(rng):
    return [_c(rng, _nchw(rng))], lambda t, x: L.crelu(x), ()


def _make_pool(rng):
    n, c, _, _ = _nchw(rng)
    if rng.random() < 0.7:
        k = s = 2
        h, w = 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5))
    else:
        k, s = 3, int(rng.integers(1, 3))
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    return [_c(rng, (n, c, h, w))], lambda t, x: L.complex_max_pool(x, k, s), ()


def _make_cl2(rng):
    n, d = int(rng.integers(1, 5)), int(rng.integers(1, 9))
    return [_c(rng, (n, d))], lambda t, x: L.cl2_norm(x), ()


def _bn_shape(rng):
    if rng.random() < 0.3:
        return (int(rng.integers(2, 7)), int(rng.integers(1, 5)))
    n, c, h, w = _nchw(rng)
    return (max(n, 2), c, h, w)


def _make_bn(mode, training):
    def make(rng):
        s = _bn_shape(rng)
        c = s[1]
        x = _c(rng, s, scale=float(rng.uniform(0.5, 3.0)))
        x = ComplexTensor(x.real + rng.normal(), x.imag + rng.normal())
        g = [rng.uniform(0.5, 1.5, c), rng.standard_normal(c), rng.uniform(0.5, 1.5, c),
             rng.standard_normal(c)]
        if mode == "per_component":
            stats = {"mean_r": rng.standard_normal(c), "var_r": rng.uniform(0.5, 2, c),
                     "mean_i": rng.standard_normal(c), "var_i": rng.uniform(0.5, 2, c)}
            op = L.complex_bn_per_component
        else:
            vrr, vii = rng.uniform(0.5, 2, c), rng.uniform(0.5, 2, c)
            stats = {"mean_r": rng.standard_normal(c), "mean_i": rng.standard_normal(c),
                     "vrr": vrr, "vii": vii, "vri": rng.uniform(-0.5, 0.5, c) * np.sqrt(vrr * vii)}
            op = L.complex_bn_covariance
        return ([x] + g, lambda t, x, gr, br, gi, bi: getattr(L, op.__name__)(
            x, gr, br, gi, bi, dict(stats), training), ())
    return make


def _make_block(rng):
    n, cin, h, w = _nchw(rng, cmax=3, smax=6, smin=2)
    n = max(n, 2)
    cout = int(rng.choice([cin, cin + 1]))
    mode = str(rng.choice(["per_component", "covariance"]))
    block = L.ComplexResidualBlock("block", cin, cout, rng, bn_mode=mode)
    for conv in (block.conv1, block.conv2):
        conv.bias.value = _c(rng, cout, 0.1)
    return ([_c(rng, (n, cin, h, w))], lambda t, x: block.forward(t, x, True),
            block.parameters())


def _make_distance(mode):
    def make(rng):
        n, d = int(rng.integers(1, 5)), int(rng.integers(1, 9))
        return ([_c(rng, (n, d)), _c(rng, (n, d))],
                lambda t, x, y: getattr(obj, "distance")(x, y, mode), ())
    return make


def _make_softpn(form, mode):
    def make(rng):
        n, d = int(rng.integers(1, 5)), int(rng.integers(1, 9))
        return ([_c(rng, (n, d), 0.3) for _ in range(3)],
                lambda t, a, b, c: obj.softpn_loss(a, b, c, mode, form), ())
    return make


def _make_mse_pair(rng):
    n = int(rng.integers(1, 9))
    labels = (rng.random(n) < 0.5).astype(float)
    return [rng.uniform(0.05, 0.95, n)], lambda t, s: obj.mse_pair_loss(s, labels), ()


def gradient_cases() -> dict:
    """Operation name -> input generator for the gradient suite."""
    pos = lambda rng, s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    return {
        "add": _binary("add"), "sub": _binary("sub"), "mul": _binary("mul"),
        "div": _binary("div", _away), "scale": _make_scale, "square": _unary("square"),
        "sqrt": _unary("sqrt", pos), "exp": _unary("exp"), "sigmoid": _unary("sigmoid"),
        "relu": _unary("relu"), "minimum": _make_minimum, "sum": _make_reduce("sum"),
        "mean": _make_reduce("mean"), "reshape": _make_reshape, "concat": _make_concat,
        "take": _make_take, "matmul": _make_matmul, "mse": _make_mse,
        "cadd": _cbinary("cadd"), "csub": _cbinary("csub"), "cmul": _cbinary("cmul"),
        "modulus": _cunary("modulus"), "real_part": _cunary("real_part"),
        "imag_part": _cunary("imag_part"), "make_complex": _make_make_complex,
        "from_real": _unary("from_real"), "creshape": _make_creshape, "cconcat": _make_cconcat,
        "cslice": _make_cslice, "dft2d": _make_dft,
        "conv2d": _make_conv2d, "linear": _make_linear, "complex_conv2d": _make_complex_conv2d,
        "complex_linear": _make_complex_linear, "crelu": _make_crelu,
        "complex_max_pool": _make_pool, "cl2_norm": _make_cl2,
        "bn_per_component_train": _make_bn("per_component", True),
        "bn_per_component_eval": _make_bn("per_component", False),
        "bn_covariance_train": _make_bn("covariance", True),
        "bn_covariance_eval": _make_bn("covariance", False),
        "residual_block": _make_block,
        "distance_modulus_sum": _make_distance("modulus_sum"),
        "distance_literal_clamped": _make_distance("literal_clamped"),
        "softpn_corrected": _make_softpn("corrected", "modulus_sum"),
        "softpn_literal": _make_softpn("literal", "modulus_sum"),
        "softpn_literal_clamped": _make_softpn("corrected", "literal_clamped"),
        "mse_pair_loss": _make_mse_pair,
    }


# -- suites ---------------------------------------------------------------------


def _timed(name, body) -> SuiteResult:
    t0 = time.perf_counter()
    try:
        passed, worst, cases, failures = body()
    except Exception as e:  # a crash is a failure, reported like any other
        passed, worst, cases, failures = False, float("inf"), 0, [f"{type(e).__name__}: {e}"]
    return SuiteResult(name, passed, worst, cases, time.perf_counter() - t0, failures)


def gradient_suite(seed=0, shapes=SHAPES_PER_OP, only=None) -> SuiteResult:
    def body():
        rng = np.random.default_rng(seed)
        worst, cases, failures = 0.0, 0, []
        for name, make in gradient_cases().items():
            if only is not None and name not in only:
                continue
            op_worst = 0.0
            for _ in range(shapes):
                try:
                    r = gradcheck(make, rng)
                    op_worst = max(op_worst, r.max_error)
                except Exception as e:
                    failures.append(f"{name}: {type(e).__name__}: {e}")
                    op_worst = float("inf")
                    break
                cases += 1
            if op_worst > GRAD_TOL and not any(f.startswith(name + ":") for f in failures):
                failures.append(f"{name}: max relative error {op_worst:.3e}")
            worst = max(worst, op_worst)
        return not failures, worst, cases, failures
    return _timed("gradient", body)


CONV_TOL = 1e-12
NAIVE_TOL = 1e-10


def conv_suite(seed=0, cases=100) -> SuiteResult:
    """Complex conv vs the real block-matrix conv, plus naive loop oracles."""
    def body():
        rng = np.random.default_rng(seed)
        worst, failures = 0.0, []
        for k in range(cases):
            xs, ws, stride, pad = _conv_geometry(rng)
            x = _c(rng, xs)
            a, b = rng.standard_normal(ws), rng.standard_normal(ws)
            bias = _c(rng, ws[0])
            t = Tape()
            got = L.complex_conv2d(t.constant(x), t.constant(a), t.constant(b), t.constant(bias),
                                   stride, pad).value
            ref = block_matrix_conv(x, a, b, bias, stride, pad)
            err = max(np.abs(got.real - ref.real).max(), np.abs(got.imag - ref.imag).max())
            worst = max(worst, err)
            if err > CONV_TOL:
                failures.append(f"block-matrix case {k}: {err:.3e}")
        for k in range(10):
            xs, ws, stride, pad = _conv_geometry(rng)
            x = _c(rng, xs)
            a, b = rng.standard_normal(ws), rng.standard_normal(ws)
            t = Tape()
            got = L.complex_conv2d(t.constant(x), t.constant(a), t.constant(b), None,
                                   stride, pad).value.numpy()
            ref = naive_conv2d(x.numpy(), a + 1j * b, None, stride, pad)
            xr, w = rng.standard_normal(xs), rng.standard_normal(ws)
            got_r = L.conv2d(t.constant(xr), t.constant(w), None, stride, pad).value
            ref_r = naive_conv2d(xr, w, None, stride, pad)
            err = max(np.abs(got - ref).max(), np.abs(got_r - ref_r).max())
            worst = max(worst, err)
            if err > NAIVE_TOL:
                failures.append(f"naive-loop case {k}: {err:.3e}")
        return not failures, worst, cases + 10, failures
    return _timed("conv", body)


BN_MEAN_TOL = 1e-7
BN_VAR_TOL = 1e-6
BN_COV_TOL = 1e-6


def bn_suite(seed=0, trials=5) -> SuiteResult:
    """Per-part moments after per-component BN, and whitened covariance after covariance BN.

    Per-component batches are large standard-normal draws, so the batch
    variance v is close to 1 and v / (v + eps) is within 1e-6 of 1 / (1 + eps).
    Covariance batches have covariance eigenvalues of at least 10, so the
    eps-regularized whitening leaves an identity error below 1e-6.
    """
    def body():
        rng = np.random.default_rng(seed)
        eps = L.BN_EPS
        worst, failures = 0.0, []
        for k in range(trials):
            c = int(rng.integers(1, 5))
            x = _c(rng, (16, c, 16, 16))
            ones, zeros = np.ones(c), np.zeros(c)
            stats = {"mean_r": zeros.copy(), "var_r": ones.copy(), "mean_i": zeros.copy(),
                     "var_i": ones.copy()}
            t = Tape()
            out = L.complex_bn_per_component(t.constant(x), t.constant(ones), t.constant(zeros),
                                             t.constant(ones), t.constant(zeros), stats, True).value
            for part in (out.real, out.imag):
                mean_err = np.abs(part.mean(axis=(0, 2, 3))).max()
                var_err = np.abs(part.var(axis=(0, 2, 3)) - 1.0 / (1.0 + eps)).max()
                worst = max(worst, mean_err, var_err)
                if mean_err > BN_MEAN_TOL or var_err > BN_VAR_TOL:
                    failures.append(f"per-component trial {k}: mean {mean_err:.2e} var {var_err:.2e}")
        for k in range(trials):
            c = int(rng.integers(1, 5))
            shape = (16, c, 8, 8)
            u, v = rng.standard_normal(shape), rng.standard_normal(shape)
            sr = rng.uniform(4, 12, (1, c, 1, 1))
            rho = rng.uniform(-0.8, 0.8, (1, c, 1, 1))
            re = sr * u + rng.normal()
            im = sr * (rho * u + np.sqrt(1 - rho ** 2) * v) * rng.uniform(1, 2) + rng.normal()
            ones, zeros = np.ones(c), np.zeros(c)
            stats = {"mean_r": zeros.copy(), "mean_i": zeros.copy(), "vrr": ones.copy(),
                     "vri": zeros.copy(), "vii": ones.copy()}
            t = Tape()
            out = L.complex_bn_covariance(t.constant(ComplexTensor(re, im)), t.constant(ones),
                                          t.constant(zeros), t.constant(ones), t.constant(zeros),
                                          stats, True).value
            for ch in range(c):
                pair = np.stack([out.real[:, ch].ravel(), out.imag[:, ch].ravel()])
                cov = np.cov(pair, bias=True)
                err = np.abs(cov - np.eye(2)).max()
                worst = max(worst, err)
                if err > BN_COV_TOL:
                    failures.append(f"covariance trial {k} channel {ch}: {err:.2e}")
        return not failures, worst, 2 * trials, failures
    return _timed("batchnorm", body)


DFT_TOL = 1e-10
PARSEVAL_TOL = 1e-8


def dft_suite(seed=0) -> SuiteResult:
    """Naive-sum equality for every size up to 8x8, and Parseval's identity."""
    def body():
        rng = np.random.default_rng(seed)
        worst, failures, cases = 0.0, [], 0
        for h in range(1, 9):
            for w in range(1, 9):
                x = rng.standard_normal((2, 2, h, w))
                got = ct.dft2d(x)
                ref = naive_dft2d(x)
                err = max(np.abs(got.real - ref.real).max(), np.abs(got.imag - ref.imag).max())
                energy = np.sum(got.real ** 2 + got.imag ** 2)
                pars = abs(energy - h * w * np.sum(x * x)) / max(1.0, h * w * np.sum(x * x))
                worst = max(worst, err, pars)
                cases += 1
                if err > DFT_TOL:
                    failures.append(f"{h}x{w}: oracle error {err:.2e}")
                if pars > PARSEVAL_TOL:
                    failures.append(f"{h}x{w}: Parseval error {pars:.2e}")
        return not failures, worst, cases, failures
    return _timed("dft", body)


def loss_suite(seed=0, triples=10_000) -> SuiteResult:
    """Metric properties of the distance and shape properties of SoftPN."""
    def body():
        rng = np.random.default_rng(seed)
        failures = []
        d = int(rng.integers(1, 17))
        f = [_c(rng, (triples, d)) for _ in range(3)]
        worst = 0.0
        for mode in obj.DISTANCE_MODES:
            self_d = np.abs(obj.complex_distance(f[0], f[0], mode)).max()
            sym = np.abs(obj.complex_distance(f[0], f[1], mode)
                         - obj.complex_distance(f[1], f[0], mode)).max()
            worst = max(worst, self_d, sym)
            if self_d != 0.0:
                failures.append(f"{mode}: D(f, f) = {self_d:.2e}")
            if sym > 1e-12:
                failures.append(f"{mode}: asymmetry {sym:.2e}")
        ab = obj.complex_distance(f[0], f[1])
        bc = obj.complex_distance(f[1], f[2])
        ac = obj.complex_distance(f[0], f[2])
        viol = float(np.max(ac - (ab + bc)))
        if viol > 1e-9:
            failures.append(f"triangle inequality violated by {viol:.2e}")
        dd = rng.uniform(0, 20, triples)
        for form in obj.LOSS_FORMS:
            err = np.abs(obj.softpn_value(dd, dd, form) - 0.5).max()
            worst = max(worst, err)
            if err > 1e-12:
                failures.append(f"{form}: loss at Dpos = D* differs from 0.5 by {err:.2e}")
        dp, ds = rng.uniform(0, 20, triples), rng.uniform(0, 20, triples)
        h = 1e-4
        d_star = (obj.softpn_value(dp, ds + h) - obj.softpn_value(dp, ds - h)) / (2 * h)
        d_pos = (obj.softpn_value(dp + h, ds) - obj.softpn_value(dp - h, ds)) / (2 * h)
        if not (d_star < 0).all():
            failures.append(f"corrected loss not decreasing in D* at {(d_star >= 0).sum()} points")
        if not (d_pos > 0).all():
            failures.append(f"corrected loss not increasing in Dpos at {(d_pos <= 0).sum()} points")
        return not failures, worst, triples, failures
    return _timed("loss", body)


def fpr95_suite(seed=0, trials=1000) -> SuiteResult:
    """fpr95 against the threshold sweep on random instances with ties."""
    def body():
        rng = np.random.default_rng(seed)
        worst, failures = 0.0, []
        for k in range(trials):
            n = int(rng.integers(2, 201))
            labels = rng.random(n) < rng.uniform(0.1, 0.9)
            labels[0], labels[1] = True, False
            scores = rng.standard_normal(n) + labels * rng.uniform(0, 3)
            if rng.random() < 0.5:
                scores = np.round(scores, 1)
            polarity = str(rng.choice(obj.POLARITIES))
            got = obj.fpr95(scores, labels, polarity)
            ref = brute_force_fpr95(scores, labels, polarity)
            worst = max(worst, abs(got - ref))
            if got != ref:
                failures.append(f"trial {k}: fpr95 {got} vs sweep {ref}")
        return not failures, worst, trials, failures
    return _timed("fpr95", body)


SUITES = {
    "gradient": gradient_suite,
    "conv": conv_suite,
    "batchnorm": bn_suite,
    "dft": dft_suite,
    "loss": loss_suite,
    "fpr95": fpr95_suite,
}


def run_all(seed=0, names=None) -> list[SuiteResult]:
    return [SUITES[n](seed=seed) for n in (names or SUITES)]
