"""Block floating point codec: shared-exponent blocks of signed mantissas.

A block groups ``block_size`` values under one shared exponent.  Each element
stores a two's-complement mantissa of ``total_bits - exp_bits`` bits (sign
included).  Encoding picks the largest binary exponent in the block, shifts
every element's significand down to that scale and rounds to nearest-even.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ROLES = ("input", "output", "weight")

VALID_TOTAL_BITS = (8, 16)


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class BfpSpec:
    """One block-floating-point format: width, shared-exponent bits, block size.

    ``total_bits`` is the nominal bits-per-element budget (8 or 16).  The
    signed mantissa occupies ``total_bits - exp_bits`` bits; the shared
    exponent is amortized over the block, so the storage cost per element is
    fractional (see :func:`effective_bitwidth`).
    """

    total_bits: int
    exp_bits: int
    block_size: int
    role: str = "weight"
    exp_bias: int = 0

    def __post_init__(self):
        if self.total_bits not in VALID_TOTAL_BITS:
            raise CodecError(f"total_bits must be one of {VALID_TOTAL_BITS}, got {self.total_bits}")
        if self.exp_bits < 1:
            raise CodecError(f"exp_bits must be >= 1, got {self.exp_bits}")
        if self.mantissa_bits < 2:
            raise CodecError(
                f"signed mantissa needs >= 2 bits, got total_bits={self.total_bits} exp_bits={self.exp_bits}"
            )
        if self.block_size < 1:
            raise CodecError(f"block_size must be >= 1, got {self.block_size}")
        if self.role not in ROLES:
            raise CodecError(f"role must be one of {ROLES}, got {self.role!r}")

    @property
    def mantissa_bits(self) -> int:
        """Signed mantissa width in bits, sign included."""
        return self.total_bits - self.exp_bits

    @property
    def fraction_bits(self) -> int:
        """Mantissa bits below the shared scale: decode is mant * 2^(exp - fraction_bits)."""
        return self.mantissa_bits - 2

    @property
    def mantissa_min(self) -> int:
        return -(1 << (self.mantissa_bits - 1))

    @property
    def mantissa_max(self) -> int:
        return (1 << (self.mantissa_bits - 1)) - 1

    @property
    def exp_min(self) -> int:
        """Smallest storable shared exponent (also the all-zero sentinel)."""
        return self.exp_bias - (1 << (self.exp_bits - 1))

    @property
    def exp_max(self) -> int:
        return self.exp_bias + (1 << (self.exp_bits - 1)) - 1


@dataclass(frozen=True)
class BfpBlock:
    """An encoded block: shared exponent plus signed integer mantissas."""

    shared_exponent: int
    mantissas: tuple
    saturated: bool = False


@dataclass
class BfpTensor:
    """A tensor encoded block-by-block over its row-major flattening."""

    shape: tuple
    layout: str
    blocks: list
    spec: BfpSpec
    last_block_fill: int
    saturated_blocks: int = 0

    @property
    def element_count(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 0


def _check_finite(values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise CodecError("values must be finite (no NaN/inf)")


def _max_exponent(values: np.ndarray) -> int | None:
    """Largest binary exponent e with |v| in [2^e, 2^(e+1)) over nonzero values."""
    nz = values[values != 0.0]
    if nz.size == 0:
        return None
    _, exps = np.frexp(nz)
    return int(exps.max()) - 1


def _round_mantissas(values: np.ndarray, spec: BfpSpec, shared_exp: int) -> np.ndarray:
    # Power-of-two scaling is exact in float64; np.rint rounds half to even.
    scaled = np.ldexp(values, spec.fraction_bits - shared_exp)
    return np.rint(scaled)


def encode_block(values, spec: BfpSpec) -> BfpBlock:
    """Encode up to ``block_size`` real values into one shared-exponent block.

    The shared exponent is the largest per-element binary exponent, bumped by
    one when the top element rounds up across the power-of-two boundary (so
    the round-trip error bound holds without mantissa saturation).  Exponents
    outside the storable window saturate and set the block's flag.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise CodecError("cannot encode an empty block")
    if arr.size > spec.block_size:
        raise CodecError(f"block of {arr.size} values exceeds block_size={spec.block_size}")
    _check_finite(arr)

    e_max = _max_exponent(arr)
    if e_max is None:
        return BfpBlock(shared_exponent=spec.exp_min, mantissas=(0,) * arr.size)

    shared = e_max
    mant = _round_mantissas(arr, spec, shared)
    if mant.max(initial=0.0) > spec.mantissa_max:
        # Rounding overflow at the positive boundary: raise the shared scale.
        shared += 1
        mant = _round_mantissas(arr, spec, shared)

    saturated = False
    if shared < spec.exp_min or shared > spec.exp_max:
        saturated = True
        shared = min(max(shared, spec.exp_min), spec.exp_max)
        mant = np.clip(_round_mantissas(arr, spec, shared), spec.mantissa_min, spec.mantissa_max)

    return BfpBlock(
        shared_exponent=shared,
        mantissas=tuple(int(m) for m in mant),
        saturated=saturated,
    )


def decode_block(block: BfpBlock, spec: BfpSpec):
    """Invert :func:`encode_block`.  Decoding itself is exact."""
    mant = np.asarray(block.mantissas, dtype=np.float64)
    if mant.size == 0:
        raise CodecError("cannot decode an empty block")
    ints = np.asarray(block.mantissas)
    if np.any(ints < spec.mantissa_min) or np.any(ints > spec.mantissa_max):
        raise CodecError(
            f"mantissa out of range [{spec.mantissa_min}, {spec.mantissa_max}] for {spec.mantissa_bits}-bit format"
        )
    if not (spec.exp_min <= block.shared_exponent <= spec.exp_max):
        raise CodecError(
            f"shared exponent {block.shared_exponent} outside storable window "
            f"[{spec.exp_min}, {spec.exp_max}]"
        )
    return [float(v) for v in np.ldexp(mant, block.shared_exponent - spec.fraction_bits)]


def roundtrip_error_bound(spec: BfpSpec, shared_exponent: int) -> float:
    """Per-element absolute error bound after encode/decode at a given exponent."""
    return math.ldexp(1.0, shared_exponent - (spec.total_bits - spec.exp_bits - 1))


def encode_tensor(tensor, spec: BfpSpec, layout: str = "flat") -> BfpTensor:
    """Encode a whole tensor, blocking its row-major flattening.

    The final block may be partial; its fill count is recorded so decoding
    restores the exact shape.
    """
    if layout != "flat":
        raise CodecError(f"unsupported layout {layout!r} (supported: 'flat')")
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.size == 0:
        raise CodecError("cannot encode an empty tensor")
    _check_finite(arr)
    flat = arr.reshape(-1)
    bs = spec.block_size
    n_blocks = -(-flat.size // bs)
    fill = flat.size - (n_blocks - 1) * bs

    padded = np.zeros(n_blocks * bs, dtype=np.float64)
    padded[: flat.size] = flat
    grid = padded.reshape(n_blocks, bs)

    # Vectorized variant of encode_block over all rows at once.
    frac, exps = np.frexp(grid)
    exps = np.where(grid != 0.0, exps - 1, np.iinfo(np.int64).min)
    e_max = exps.max(axis=1)
    zero_rows = e_max == np.iinfo(np.int64).min
    shared = np.where(zero_rows, spec.exp_min, e_max)

    mant = np.rint(np.ldexp(grid, spec.fraction_bits - shared[:, None]))
    bump = mant.max(axis=1) > spec.mantissa_max
    if bump.any():
        shared = shared + bump.astype(np.int64)
        mant = np.rint(np.ldexp(grid, spec.fraction_bits - shared[:, None]))

    saturated = (~zero_rows) & ((shared < spec.exp_min) | (shared > spec.exp_max))
    if saturated.any():
        shared = np.clip(shared, spec.exp_min, spec.exp_max)
        mant = np.clip(
            np.rint(np.ldexp(grid, spec.fraction_bits - shared[:, None])),
            spec.mantissa_min,
            spec.mantissa_max,
        )

    blocks = []
    for r in range(n_blocks):
        size = bs if r < n_blocks - 1 else fill
        blocks.append(
            BfpBlock(
                shared_exponent=int(shared[r]),
                mantissas=tuple(int(m) for m in mant[r, :size]),
                saturated=bool(saturated[r]),
            )
        )
    return BfpTensor(
        shape=tuple(arr.shape),
        layout=layout,
        blocks=blocks,
        spec=spec,
        last_block_fill=fill,
        saturated_blocks=int(saturated.sum()),
    )


def decode_tensor(enc: BfpTensor) -> np.ndarray:
    spec = enc.spec
    out = np.empty(enc.element_count, dtype=np.float64)
    pos = 0
    for block in enc.blocks:
        vals = np.ldexp(
            np.asarray(block.mantissas, dtype=np.float64),
            block.shared_exponent - spec.fraction_bits,
        )
        out[pos : pos + vals.size] = vals
        pos += vals.size
    return out.reshape(enc.shape)


def quantize_dequantize(tensor, spec: BfpSpec, layout: str = "flat") -> np.ndarray:
    """encode + decode in one step, without materializing block objects."""
    if layout != "flat":
        raise CodecError(f"unsupported layout {layout!r} (supported: 'flat')")
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.size == 0:
        raise CodecError("cannot quantize an empty tensor")
    _check_finite(arr)
    flat = arr.reshape(-1)
    bs = spec.block_size
    n_blocks = -(-flat.size // bs)
    padded = np.zeros(n_blocks * bs, dtype=np.float64)
    padded[: flat.size] = flat
    grid = padded.reshape(n_blocks, bs)

    _, exps = np.frexp(grid)
    exps = np.where(grid != 0.0, exps - 1, np.iinfo(np.int64).min)
    e_max = exps.max(axis=1)
    shared = np.where(e_max == np.iinfo(np.int64).min, spec.exp_min, e_max)
    mant = np.rint(np.ldexp(grid, spec.fraction_bits - shared[:, None]))
    bump = mant.max(axis=1) > spec.mantissa_max
    if bump.any():
        shared = shared + bump.astype(np.int64)
        mant = np.rint(np.ldexp(grid, spec.fraction_bits - shared[:, None]))
    shared = np.clip(shared, spec.exp_min, spec.exp_max)
    mant = np.clip(
        np.rint(np.ldexp(grid, spec.fraction_bits - shared[:, None])),
        spec.mantissa_min,
        spec.mantissa_max,
    )
    deq = np.ldexp(mant, shared[:, None] - spec.fraction_bits)
    return deq.reshape(-1)[: flat.size].reshape(arr.shape)


def effective_bitwidth(spec: BfpSpec, dims) -> float:
    """Real-valued bits per element: mantissa bits plus the amortized exponent.

    ``dims`` is the role-dependent pair of extents the exponent is shared
    across together with the block: (height, width) of the input or output
    feature map, or (kernel rows, kernel cols) for weights.
    """
    d0, d1 = int(dims[0]), int(dims[1])
    if d0 < 1 or d1 < 1:
        raise CodecError(f"amortizing dims must be >= 1, got {dims}")
    return (spec.total_bits - spec.exp_bits) + spec.exp_bits / (spec.block_size * d0 * d1)


@dataclass(frozen=True)
class QuantError:
    max_abs_error: float
    mse: float
    sqnr_db: float


def quantization_error(tensor, spec: BfpSpec, layout: str = "flat") -> QuantError:
    """Error metrics between a tensor and its encode/decode round trip."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.size == 0:
        raise CodecError("cannot measure an empty tensor")
    deq = quantize_dequantize(arr, spec, layout=layout)
    err = arr - deq
    mse = float(np.mean(err * err))
    signal = float(np.mean(arr * arr))
    if mse == 0.0:
        sqnr = math.inf
    elif signal == 0.0:
        sqnr = -math.inf
    else:
        sqnr = 10.0 * math.log10(signal / mse)
    return QuantError(max_abs_error=float(np.max(np.abs(err))), mse=mse, sqnr_db=sqnr)


def load_tensor_f32(path, shape=None) -> np.ndarray:
    """Read a flat little-endian float32 file, optionally reshaping."""
    data = np.fromfile(path, dtype="<f4").astype(np.float64)
    if shape is not None:
        expect = int(np.prod(shape))
        if data.size != expect:
            raise CodecError(f"{path}: has {data.size} float32 values, expected {expect} for shape {tuple(shape)}")
        data = data.reshape(shape)
    return data
