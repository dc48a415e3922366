"""Truncated Fourier lattices, weighted l1 norms, discrete convolution, mode filters.

Two lattice kinds are used throughout:

* ``fine``      -- the scaled lattice {eps*j : j in Z^d, |j_i| <= M_i} carrying
                   measure weight eps^d per point.  Fields on it represent
                   2*pi/eps-periodic functions of the fast variable x.
* ``amplitude`` -- the integer lattice {j in Z^d, |j_i| <= M_i} with unit
                   weight.  Fields on it represent 2*pi-periodic envelopes of
                   the slow variable X = eps*x.

Transform conventions (fixed once, used by every module):

    u(x)    = w * sum_k  f(k) exp(i k.x),          w = measure weight,
    f(k)    = w^-1 * (1/P^d) sum_m u(x_m) exp(-i k.x_m)   on a P^d grid,

so that pointwise multiplication in physical space corresponds to the
weighted discrete convolution ``(f*g)(k) = w * sum_l f(k-l) g(l)``.

eps is restricted to 1/n with integer n >= 2 so that the carrier exp(i*x_1)
is exactly periodic on the fine cell; this keeps all mode bookkeeping in
integer arithmetic (lattice point eps*j is stored as the integer tuple j).
"""

from dataclasses import dataclass
from functools import lru_cache
import io
import struct

import numpy as np
from scipy import fft as sfft
from scipy.signal import fftconvolve

FINE = "fine"
AMPLITUDE = "amplitude"

# Radius of the critical-mode filters around +-e1, as a fraction num/den.
# Kept rational so band membership is decided in exact integer arithmetic.
BAND_NUM = 1
BAND_DEN = 10

# Direct summation below this many points per axis, FFT above (both exact).
DIRECT_AXIS_LIMIT = 65


class LatticeError(ValueError):
    """Invalid lattice construction or mismatched operands."""


@dataclass(frozen=True)
class LatticeSpec:
    """Geometry of a truncated Fourier lattice.

    d        : spatial dimension (>= 1)
    eps_den  : n with eps = 1/n (n >= 2); kept for ``amplitude`` lattices as
               well, where it records the eps the envelope belongs to.
    cutoff   : per-axis mode bound M_i; stored points are j with |j_i| <= M_i.
    kind     : FINE or AMPLITUDE.
    """

    d: int
    eps_den: int
    cutoff: tuple[int, ...]
    kind: str

    @property
    def eps(self) -> float:
        return 1.0 / self.eps_den

    @property
    def weight(self) -> float:
        """Measure weight of a single lattice point."""
        return self.eps ** self.d if self.kind == FINE else 1.0

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(2 * m + 1 for m in self.cutoff)

    @property
    def spacing(self) -> float:
        """Wavenumber distance between neighbouring points."""
        return self.eps if self.kind == FINE else 1.0

    @property
    def cell(self) -> float:
        """Side length of the physical periodicity cell."""
        return 2.0 * np.pi / self.spacing

    def index_grid(self, axis: int) -> np.ndarray:
        return np.arange(-self.cutoff[axis], self.cutoff[axis] + 1)

    def axis_wavenumbers(self, axis: int) -> np.ndarray:
        return self.spacing * self.index_grid(axis)


def make_lattice(d: int, eps: float, cutoff, kind: str = FINE) -> LatticeSpec:
    """Build a lattice spec, enforcing eps = 1/n commensurability.

    ``cutoff`` is an int (same bound per axis) or a length-d sequence.
    For fine lattices the box must contain the carrier wavenumber e1,
    i.e. eps * cutoff_1 >= 1.
    """
    if d < 1:
        raise LatticeError(f"dimension must be >= 1, got {d}")
    n = eps_denominator(eps)
    if isinstance(cutoff, (int, np.integer)):
        cut = (int(cutoff),) * d
    else:
        cut = tuple(int(c) for c in cutoff)
        if len(cut) != d:
            raise LatticeError(f"cutoff has {len(cut)} axes, expected {d}")
    if min(cut) < 1:
        raise LatticeError(f"cutoff must be >= 1 per axis, got {cut}")
    if kind not in (FINE, AMPLITUDE):
        raise LatticeError(f"unknown lattice kind {kind!r}")
    if kind == FINE and cut[0] < n:
        raise LatticeError(
            f"fine cutoff {cut[0]} cannot represent the carrier e1 (need >= {n})")
    return LatticeSpec(d=d, eps_den=n, cutoff=cut, kind=kind)


def eps_denominator(eps: float) -> int:
    """Return n for eps = 1/n, rejecting non-commensurate values."""
    if not 0.0 < eps < 1.0:
        raise LatticeError(f"eps must lie in (0,1), got {eps}")
    n = round(1.0 / eps)
    if n < 2 or abs(eps - 1.0 / n) > 1e-12:
        raise LatticeError(f"eps must equal 1/n for integer n >= 2, got {eps}")
    return n


@lru_cache(maxsize=None)
def index_mesh(lat: LatticeSpec) -> tuple[np.ndarray, ...]:
    """Integer index grids j_1..j_d, each of shape lat.shape (read-only)."""
    grids = np.meshgrid(*(lat.index_grid(ax) for ax in range(lat.d)), indexing="ij")
    for g in grids:
        g.flags.writeable = False
    return tuple(grids)


@lru_cache(maxsize=None)
def ksq_grid(lat: LatticeSpec) -> np.ndarray:
    """|k|^2 over the lattice box."""
    out = np.zeros(lat.shape)
    s2 = lat.spacing ** 2
    for g in index_mesh(lat):
        out += s2 * g.astype(float) ** 2
    out.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def norm_weights(lat: LatticeSpec, r: float) -> np.ndarray:
    """(1 + |k|^2)^(r/2) over the lattice box."""
    out = (1.0 + ksq_grid(lat)) ** (r / 2.0)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SpectralField:
    """Complex Fourier coefficients over a lattice box.

    ``coeffs[i1,...,id]`` is the coefficient at lattice index
    j = (i1 - M_1, ..., id - M_d).  ``hermitian`` asserts
    coeffs(-j) = conj(coeffs(j)), the condition for a real physical field.
    """

    lattice: LatticeSpec
    coeffs: np.ndarray
    hermitian: bool = False

    def __post_init__(self):
        arr = np.asarray(self.coeffs, dtype=np.complex128)
        if arr.shape != self.lattice.shape:
            raise LatticeError(
                f"coefficient shape {arr.shape} does not match lattice {self.lattice.shape}")
        if not np.all(np.isfinite(arr.view(np.float64))):
            raise LatticeError("non-finite coefficient in spectral field")
        if self.hermitian:
            dev = hermitian_defect(arr)
            scale = max(float(np.abs(arr).max()), 1.0)
            if dev > 1e-12 * scale:
                raise LatticeError(f"hermitian flag set but defect {dev:.3e} exceeds tolerance")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "coeffs", arr)

    def at(self, j) -> complex:
        """Coefficient at integer index tuple j."""
        j = (j,) if isinstance(j, (int, np.integer)) else tuple(j)
        idx = tuple(ji + m for ji, m in zip(j, self.lattice.cutoff))
        return complex(self.coeffs[idx])


def hermitian_defect(coeffs: np.ndarray) -> float:
    """max_j |c(-j) - conj(c(j))| for a centered coefficient box."""
    flipped = coeffs[tuple(slice(None, None, -1) for _ in range(coeffs.ndim))]
    return float(np.abs(flipped - np.conj(coeffs)).max())


def hermitize(coeffs: np.ndarray) -> np.ndarray:
    """Project a coefficient box onto exact Hermitian symmetry."""
    flipped = coeffs[tuple(slice(None, None, -1) for _ in range(coeffs.ndim))]
    return 0.5 * (coeffs + np.conj(flipped))


def zero_field(lat: LatticeSpec, hermitian: bool = False) -> SpectralField:
    return SpectralField(lat, np.zeros(lat.shape, dtype=np.complex128), hermitian)


def field_from_modes(lat: LatticeSpec, modes: dict, hermitian: bool = False) -> SpectralField:
    """Field with the given {index tuple: coefficient} entries, zero elsewhere.

    With hermitian=True the mirrored conjugate entries are filled in
    automatically.
    """
    arr = np.zeros(lat.shape, dtype=np.complex128)
    for j, val in modes.items():
        j = (j,) if isinstance(j, (int, np.integer)) else tuple(j)
        idx = tuple(ji + m for ji, m in zip(j, lat.cutoff))
        arr[idx] = val
        if hermitian:
            nidx = tuple(-ji + m for ji, m in zip(j, lat.cutoff))
            arr[nidx] = np.conj(val)
    return SpectralField(lat, arr, hermitian)


def wiener_norm(f: SpectralField, r: float = 0.0) -> float:
    """Weighted l1 norm  w * sum_k |f(k)| (1+|k|^2)^(r/2)."""
    if r < 0:
        raise LatticeError(f"norm order r must be >= 0, got {r}")
    return float(f.lattice.weight * np.sum(np.abs(f.coeffs) * norm_weights(f.lattice, r)))


def wiener_norm_arr(lat: LatticeSpec, coeffs: np.ndarray, r: float = 0.0) -> float:
    """wiener_norm on a raw coefficient array (solver hot path)."""
    return float(lat.weight * np.sum(np.abs(coeffs) * norm_weights(lat, r)))


# ----------------------------------------------------------------------
# Convolution
# ----------------------------------------------------------------------

def convolve(f: SpectralField, g: SpectralField, method: str = "auto") -> SpectralField:
    """Weighted discrete convolution truncated back to the lattice box.

    (f*g)(k) = w * sum_l f(k-l) g(l).  Both evaluation paths are exact
    (the FFT path zero-pads to the full linear-convolution size, so there
    is no aliasing); they cross-check each other in the tests.
    """
    lat = _common_lattice(f, g)
    if method == "auto":
        method = "direct" if max(lat.shape) <= DIRECT_AXIS_LIMIT else "fft"
    if method == "fft":
        full = fftconvolve(f.coeffs, g.coeffs, mode="same")
    elif method == "direct":
        full = _convolve_direct(f.coeffs, g.coeffs)
    else:
        raise LatticeError(f"unknown convolution method {method!r}")
    herm = f.hermitian and g.hermitian
    out = lat.weight * full
    if herm:
        out = hermitize(out)
    return SpectralField(lat, out, herm)


def _convolve_direct(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """O(N^2) direct summation, central part (same shape as inputs)."""
    out = np.zeros_like(a)
    centre = tuple(s // 2 for s in a.shape)
    for out_idx in np.ndindex(a.shape):
        acc = 0.0 + 0.0j
        # sum over l with both k-l and l inside the box
        ranges = []
        for ax, s in enumerate(a.shape):
            k = out_idx[ax] + centre[ax]        # index in the full conv output
            lo = max(0, k - (s - 1))
            hi = min(s - 1, k)
            ranges.append((k, lo, hi))
        for l_idx in np.ndindex(tuple(hi - lo + 1 for _, lo, hi in ranges)):
            l_full = tuple(lo + li for (_, lo, _), li in zip(ranges, l_idx))
            km_l = tuple(k - l for (k, _, _), l in zip(ranges, l_full))
            acc += a[km_l] * b[l_full]
        out[out_idx] = acc
    return out


def convolve3(lat: LatticeSpec, a: np.ndarray, b: np.ndarray, c: np.ndarray,
              method: str = "auto") -> np.ndarray:
    """Triple weighted convolution w^2 * (a*b*c) truncated to the box.

    Both paths are exact: the FFT path zero-pads to the full linear size,
    the direct path (1-D, small boxes) is plain nested summation.  This is
    the pseudospectral cubic-term kernel used by both solvers.
    """
    shape = lat.shape
    if method == "auto":
        method = "direct" if lat.d == 1 and shape[0] <= 192 else "fft"
    if method == "direct":
        if lat.d != 1:
            raise LatticeError("direct triple convolution is 1-D only")
        full = np.convolve(np.convolve(a, b), c)
        s = shape[0]
        return (lat.weight ** 2) * full[s - 1: 2 * s - 1]
    if method != "fft":
        raise LatticeError(f"unknown convolution method {method!r}")
    pad = tuple(sfft.next_fast_len(3 * s - 2) for s in shape)
    fa = sfft.fftn(a, pad)
    fb = fa if b is a else sfft.fftn(b, pad)
    fc = fa if c is a else (fb if c is b else sfft.fftn(c, pad))
    full = sfft.ifftn(fa * fb * fc)
    # the linear triple convolution occupies indices 0 .. 3s-3 per axis;
    # its centre block of half-width M starts at offset 3M - M = 2M
    sl = tuple(slice(s - 1, 2 * s - 1) for s in shape)
    return (lat.weight ** 2) * full[sl]


def _common_lattice(f: SpectralField, g: SpectralField) -> LatticeSpec:
    if f.lattice != g.lattice:
        raise LatticeError("fields live on different lattices")
    return f.lattice


# ----------------------------------------------------------------------
# Mode filters
# ----------------------------------------------------------------------

P1 = "P1"
PM1 = "Pm1"
PC = "Pc"
PS = "Ps"


@dataclass(frozen=True)
class ProjectionMask:
    """0/1 indicator of a sharp Fourier band on a fine lattice."""

    lattice: LatticeSpec
    kind: str
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        arr = arr.astype(np.float64).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)


def _within_band(mesh, n: int, shift: int) -> np.ndarray:
    """|k - shift*e1| <= 1/10 on the lattice k = j/n, exact in integers.

    Equivalent to 100*((j1 - shift*n)^2 + sum_{i>1} j_i^2) <= n^2, so band
    membership never depends on floating-point rounding of eps*j.
    """
    q = (mesh[0].astype(np.int64) - shift * n) ** 2
    for g in mesh[1:]:
        q = q + g.astype(np.int64) ** 2
    return BAND_DEN ** 2 * q <= BAND_NUM ** 2 * n ** 2


def projection_mask(lat: LatticeSpec, kind: str) -> ProjectionMask:
    """Sharp filters P1 (|k-e1|<=1/10), Pm1, Pc = P1+Pm1, Ps = 1-Pc."""
    if lat.kind != FINE:
        raise LatticeError("projection masks are defined on fine lattices only")
    bands = _band_indicators_cached(lat)
    if kind not in bands:
        raise LatticeError(f"unknown projection kind {kind!r}")
    return ProjectionMask(lat, kind, bands[kind])


@lru_cache(maxsize=None)
def _band_indicators_cached(lat: LatticeSpec) -> dict:
    mesh = index_mesh(lat)
    n = lat.eps_den
    p1 = _within_band(mesh, n, +1)
    pm1 = _within_band(mesh, n, -1)
    pc = p1 | pm1
    out = {P1: p1, PM1: pm1, PC: pc, PS: ~pc}
    for v in out.values():
        v.flags.writeable = False
    return out


def band_values(lat: LatticeSpec, kind: str) -> np.ndarray:
    """Raw 0/1 indicator array for a band (solver hot path)."""
    return _band_indicators_cached(lat)[kind].astype(np.float64)


def apply_mask(mask: ProjectionMask, f: SpectralField) -> SpectralField:
    if f.lattice != mask.lattice:
        raise LatticeError("mask and field lattices differ")
    return SpectralField(f.lattice, f.coeffs * mask.values, f.hermitian)


# ----------------------------------------------------------------------
# Physical-space transforms
# ----------------------------------------------------------------------

def _grid_shape(lat: LatticeSpec, grid_pts) -> tuple[int, ...]:
    if isinstance(grid_pts, (int, np.integer)):
        pts = (int(grid_pts),) * lat.d
    else:
        pts = tuple(int(p) for p in grid_pts)
    for p, s in zip(pts, lat.shape):
        if p < s:
            raise LatticeError(f"grid with {p} points aliases a lattice with {s} modes per axis")
    return pts


def to_physical(f: SpectralField, grid_pts) -> np.ndarray:
    """Sample u(x_m) = w * sum_k f(k) e^{i k.x_m} on a uniform grid.

    The grid covers one periodicity cell [0, cell)^d with grid_pts points per
    axis (>= 2*cutoff+1 so no two stored modes alias).  Hermitian fields
    return real samples; the discarded imaginary part must be < 1e-10.
    """
    pts = _grid_shape(f.lattice, grid_pts)
    spec = np.zeros(pts, dtype=np.complex128)
    idx = np.ix_(*[f.lattice.index_grid(ax) % p for ax, p in enumerate(pts)])
    spec[idx] = f.coeffs
    u = sfft.ifftn(spec) * (np.prod(pts) * f.lattice.weight)
    if f.hermitian:
        im = float(np.abs(u.imag).max())
        if im > 1e-10 * max(1.0, float(np.abs(u.real).max())):
            raise LatticeError(f"hermitian field produced imaginary samples ({im:.3e})")
        return u.real
    return u


def to_fourier(lat: LatticeSpec, samples: np.ndarray, hermitian: bool = False) -> SpectralField:
    """Inverse of to_physical for band-limited samples (round trip <= 1e-12)."""
    samples = np.asarray(samples, dtype=np.complex128)
    pts = _grid_shape(lat, samples.shape)
    spec = sfft.fftn(samples) / (np.prod(pts) * lat.weight)
    idx = np.ix_(*[lat.index_grid(ax) % p for ax, p in enumerate(pts)])
    coeffs = spec[idx]
    if hermitian:
        coeffs = hermitize(coeffs)
    return SpectralField(lat, coeffs, hermitian)


def sup_norm_physical(f: SpectralField, grid_pts) -> float:
    """max_m |u(x_m)|; a lower bound for the true sup norm."""
    return float(np.abs(to_physical(f, grid_pts)).max())


def physical_grid_size(lat: LatticeSpec, oversample: int = 4) -> tuple[int, ...]:
    """FFT-friendly grid comfortably finer than the mode box."""
    return tuple(sfft.next_fast_len(oversample * s) for s in lat.shape)


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------

_MAGIC = b"SHGL"
_VERSION = 1
_KIND_CODE = {FINE: 0, AMPLITUDE: 1}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}


def write_field(fh, f: SpectralField) -> None:
    """Flat binary layout: header, then row-major float64 (re, im) pairs."""
    lat = f.lattice
    fh.write(_MAGIC)
    fh.write(struct.pack("<HHqq", _VERSION, _KIND_CODE[lat.kind], 1, lat.eps_den))
    fh.write(struct.pack("<HH", lat.d, 1 if f.hermitian else 0))
    fh.write(struct.pack(f"<{lat.d}q", *lat.cutoff))
    data = np.ascontiguousarray(f.coeffs, dtype=np.complex128)
    fh.write(data.view(np.float64).tobytes())


def read_field(fh) -> SpectralField:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise LatticeError("not a spectral-field stream")
    version, kind_code, eps_num, eps_den = struct.unpack("<HHqq", fh.read(20))
    if version != _VERSION or eps_num != 1:
        raise LatticeError(f"unsupported field stream (version {version})")
    d, herm = struct.unpack("<HH", fh.read(4))
    cutoff = struct.unpack(f"<{d}q", fh.read(8 * d))
    lat = LatticeSpec(d=d, eps_den=eps_den, cutoff=tuple(cutoff), kind=_KIND_NAME[kind_code])
    count = int(np.prod(lat.shape))
    raw = np.frombuffer(fh.read(16 * count), dtype=np.float64)
    coeffs = raw.view(np.complex128).reshape(lat.shape)
    return SpectralField(lat, coeffs, bool(herm))


def field_to_bytes(f: SpectralField) -> bytes:
    buf = io.BytesIO()
    write_field(buf, f)
    return buf.getvalue()


def field_from_bytes(data: bytes) -> SpectralField:
    return read_field(io.BytesIO(data))


def write_field_csv(fh, f: SpectralField) -> None:
    """Debug CSV: one row per mode, k-tuple then re, im."""
    lat = f.lattice
    fh.write(",".join(f"k{i+1}" for i in range(lat.d)) + ",re,im\n")
    mesh = index_mesh(lat)
    s = lat.spacing
    for idx in np.ndindex(lat.shape):
        ks = (s * mesh[ax][idx] for ax in range(lat.d))
        c = f.coeffs[idx]
        fh.write(",".join(repr(float(k)) for k in ks))
        fh.write(f",{float(c.real)!r},{float(c.imag)!r}\n")
