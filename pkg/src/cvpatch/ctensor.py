"""Complex tensor value type.

A ``ComplexTensor`` keeps the real and imaginary parts as two parallel real
numpy arrays (planar layout). All public operations return new tensors; the
stored arrays are never mutated after construction.

Also holds the binary tensor container used for descriptors, patch stores and
checkpoints.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Iterable, Mapping

import numpy as np

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""


def check_shape(dims: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ShapeError(f"dimensions must be >= 1, got {dims}")
    n = 1
    for d in dims:
        n *= d
        if n > np.iinfo(np.int64).max:
            raise ShapeError(f"element count overflows for shape {dims}")
    return dims


def _as_float(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class ComplexTensor:
    __slots__ = ("real", "imag")

    def __init__(self, real, imag, dtype=None):
        real = _as_float(real, dtype)
        imag = _as_float(imag, dtype if dtype is not None else real.dtype)
        if real.shape != imag.shape:
            raise ShapeError(f"real part {real.shape} and imaginary part {imag.shape} differ")
        if imag.dtype != real.dtype:
            imag = imag.astype(real.dtype)
        self.real = real
        self.imag = imag

    # -- construction -------------------------------------------------
    @classmethod
    def from_real(cls, x, dtype=None) -> "ComplexTensor":
        real = _as_float(x, dtype)
        return cls(real, np.zeros_like(real))

    @classmethod
    def zeros(cls, shape, dtype=DEFAULT_DTYPE) -> "ComplexTensor":
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))

    @classmethod
    def from_numpy(cls, z, dtype=None) -> "ComplexTensor":
        z = np.asarray(z)
        return cls(z.real, z.imag, dtype)

    def numpy(self) -> np.ndarray:
        return self.real + 1j * self.imag

    # -- metadata -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    @property
    def dtype(self):
        return self.real.dtype

    @property
    def ndim(self) -> int:
        return self.real.ndim

    @property
    def size(self) -> int:
        return self.real.size

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.real).all() and np.isfinite(self.imag).all())

    def astype(self, dtype) -> "ComplexTensor":
        return ComplexTensor(self.real.astype(dtype), self.imag.astype(dtype))

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape}, dtype={self.dtype})"

    # -- arithmetic ---------------------------------------------------
    def __add__(self, other):
        return cadd(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return csub(self, _coerce(other))

    def __rsub__(self, other):
        return csub(_coerce(other), self)

    def __mul__(self, other):
        if np.isscalar(other) and not isinstance(other, complex):
            return ComplexTensor(self.real * other, self.imag * other)
        return cmul(self, _coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return ComplexTensor(-self.real, -self.imag)

    def conj(self) -> "ComplexTensor":
        return ComplexTensor(self.real, -self.imag)

    def modulus(self) -> np.ndarray:
        return modulus(self)

    # -- shape ops ----------------------------------------------------
    def reshape(self, *shape) -> "ComplexTensor":
        return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)

    def transpose(self, *axes) -> "ComplexTensor":
        return transpose(self, axes or None)

    def __getitem__(self, idx) -> "ComplexTensor":
        return ComplexTensor(self.real[idx], self.imag[idx])

    def __eq__(self, other):
        if not isinstance(other, ComplexTensor):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.real, other.real)
                and np.array_equal(self.imag, other.imag))

    __hash__ = None


def _coerce(x) -> ComplexTensor:
    if isinstance(x, ComplexTensor):
        return x
    if isinstance(x, complex):
        return ComplexTensor(np.array(x.real), np.array(x.imag))
    return ComplexTensor.from_real(x)


def new(real, imag) -> ComplexTensor:
    return ComplexTensor(real, imag)


def from_real(x) -> ComplexTensor:
    return ComplexTensor.from_real(x)


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    """Allowed broadcasts: equal shapes, a leading batch dim of 1, or a scalar.

    A scalar is any shape with a single element and rank <= 1.
    """
    if a == b:
        return a
    a_scalar = len(a) <= 1 and int(np.prod(a)) == 1
    b_scalar = len(b) <= 1 and int(np.prod(b)) == 1
    if a_scalar:
        return b
    if b_scalar:
        return a
    if len(a) == len(b) and len(a) >= 1 and a[1:] == b[1:] and (a[0] == 1 or b[0] == 1):
        return (max(a[0], b[0]),) + a[1:]
    raise ShapeError(f"shapes {a} and {b} are not broadcastable")


def cadd(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    broadcast_shape(a.shape, b.shape)
    return ComplexTensor(a.real + b.real, a.imag + b.imag)


def csub(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    broadcast_shape(a.shape, b.shape)
    return ComplexTensor(a.real - b.real, a.imag - b.imag)


def cmul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    broadcast_shape(a.shape, b.shape)
    return ComplexTensor(a.real * b.real - a.imag * b.imag,
                         a.real * b.imag + a.imag * b.real)


def modulus(a: ComplexTensor) -> np.ndarray:
    return np.hypot(a.real, a.imag)


def dft2d(x) -> ComplexTensor:
    """Unnormalized 2D DFT over the last two axes, per sample and channel.

    bin(u, v) = sum_{h,w} x[h, w] * exp(-2*pi*i*(u*h/H + v*w/W)).
    """
    x = _as_float(x)
    if x.ndim < 2:
        raise ShapeError("dft2d needs at least two spatial axes")
    z = np.fft.fft2(x, axes=(-2, -1))
    return ComplexTensor(z.real.astype(x.dtype), z.imag.astype(x.dtype))


def concat(tensors: Iterable[ComplexTensor], axis: int = -1) -> ComplexTensor:
    tensors = list(tensors)
    try:
        return ComplexTensor(np.concatenate([t.real for t in tensors], axis=axis),
                             np.concatenate([t.imag for t in tensors], axis=axis))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def slice_(a: ComplexTensor, start: int, stop: int, axis: int = -1) -> ComplexTensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    n = a.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] invalid for axis of length {n}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return a[tuple(idx)]


def reshape(a: ComplexTensor, shape) -> ComplexTensor:
    shape = tuple(shape)
    try:
        return ComplexTensor(a.real.reshape(shape), a.imag.reshape(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def transpose(a: ComplexTensor, axes=None) -> ComplexTensor:
    try:
        return ComplexTensor(np.transpose(a.real, axes), np.transpose(a.imag, axes))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def is_valid(a) -> bool:
    if isinstance(a, ComplexTensor):
        return a.real.shape == a.imag.shape and a.is_finite()
    return bool(np.isfinite(a).all())


# -- binary container -------------------------------------------------
#
# Record layout (all integers little-endian u64):
#   b"CXT1" | dtype code | rank | dims... | payload
# Complex codes store the real part then the imaginary part, row-major.

MAGIC = b"CXT1"
_CODES = {
    1: ("complex", np.dtype("<f8")),
    2: ("complex", np.dtype("<f4")),
    3: ("real", np.dtype("<f8")),
    4: ("real", np.dtype("<f4")),
    5: ("real", np.dtype("<i8")),
}


class FormatError(ValueError):
    """Malformed tensor container."""


def _code_for(tensor) -> int:
    if isinstance(tensor, ComplexTensor):
        return 1 if tensor.dtype == np.float64 else 2
    arr = np.asarray(tensor)
    if arr.dtype == np.float64:
        return 3
    if arr.dtype == np.float32:
        return 4
    if np.issubdtype(arr.dtype, np.integer):
        return 5
    raise FormatError(f"unsupported dtype {arr.dtype}")


def write_tensor(f: BinaryIO, tensor) -> None:
    code = _code_for(tensor)
    kind, dt = _CODES[code]
    shape = tensor.shape
    f.write(MAGIC)
    f.write(struct.pack(f"<{2 + len(shape)}Q", code, len(shape), *shape))
    if kind == "complex":
        f.write(np.ascontiguousarray(tensor.real, dtype=dt).tobytes())
        f.write(np.ascontiguousarray(tensor.imag, dtype=dt).tobytes())
    else:
        f.write(np.ascontiguousarray(tensor, dtype=dt).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of tensor data")
    return buf


def read_tensor(f: BinaryIO):
    if _read_exact(f, 4) != MAGIC:
        raise FormatError("bad tensor magic")
    code, rank = struct.unpack("<2Q", _read_exact(f, 16))
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank)) if rank else ()
    kind, dt = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = count * dt.itemsize

    def part():
        arr = np.frombuffer(_read_exact(f, nbytes), dtype=dt).reshape(shape)
        return arr.astype(dt.newbyteorder("="))

    if kind == "complex":
        return ComplexTensor(part(), part())
    return part()


def save_tensor(path, tensor) -> None:
    with open(path, "wb") as f:
        write_tensor(f, tensor)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)


# Named bundle: b"CXB1" | count | for each: name length | utf-8 name | tensor record
BUNDLE_MAGIC = b"CXB1"


def write_bundle(f: BinaryIO, tensors: Mapping[str, object]) -> None:
    f.write(BUNDLE_MAGIC)
    f.write(struct.pack("<Q", len(tensors)))
    for name, tensor in tensors.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        write_tensor(f, tensor)


def read_bundle(f: BinaryIO) -> dict:
    if _read_exact(f, 4) != BUNDLE_MAGIC:
        raise FormatError("bad bundle magic")
    (count,) = struct.unpack("<Q", _read_exact(f, 8))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<Q", _read_exact(f, 8))
        name = _read_exact(f, n).decode("utf-8")
        out[name] = read_tensor(f)
    return out


def bundle_bytes(tensors: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    write_bundle(buf, tensors)
    return buf.getvalue()
