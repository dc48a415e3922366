"""Spatio-temporal noise on the fine lattice and its amplitude-equation image.

The driving noise is a family of independent complex Wiener processes, one
per fine-lattice mode, with independent real and imaginary components
(Var = h each per step of size h) and Hermitian mirroring
dW(-k) = conj(dW(k)) so every physical realization is real.  At the
self-conjugate origin the increment is purely real.

Increments are produced by a counter-based generator (Philox) keyed by
(seed, stream, step): any (mode, step) value can be regenerated in isolation,
so Monte-Carlo samples, replays and the two coupled solvers can all pull from
one Brownian source without sequencing constraints.

The per-mode noise magnitude is eps^2 * alpha(k) on the critical bands around
+-e1 and eps^beta * alpha(k) (beta > 1) on the damped remainder.  The
amplitude equation sees the same randomness through the slow-time pullback

    W_A(K, T) = eps * W(e1 + eps*K, T / eps^2),

which is again a standard Wiener process in the slow time T, and through the
envelope noise profile alpha_A(K) = eps^d * alpha(e1 + eps*K) supported on
|eps*K| <= 1/10.  The eps^d factor keeps the envelope noise O(1) in the
unit-weight amplitude norms, matching the eps^d-weighted fine-lattice sums.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import lattice as lt

OU_VAR_SERIES_CUT = 0.05   # |a*h| below which the conditional variance uses its series

_STREAM_INCREMENTS = 0
_STREAM_AUX = 1

# Steps drawn per generator construction.  Fixed: the (seed, stream, step)
# -> value map depends on it, so changing it changes every sampled path.
_STEP_BLOCK = 64


class NoiseError(ValueError):
    """Invalid noise configuration or stream usage."""


# ----------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Noise amplitude profile alpha(k), band exponent beta and master seed."""

    lattice: lt.LatticeSpec
    alpha: np.ndarray
    beta: float
    seed: int

    def __post_init__(self):
        if self.lattice.kind != lt.FINE:
            raise NoiseError("noise models live on fine lattices")
        if not self.beta > 1.0:
            raise NoiseError(f"beta must exceed 1, got {self.beta}")
        arr = np.asarray(self.alpha, dtype=np.float64)
        if arr.shape != self.lattice.shape:
            raise NoiseError("alpha shape does not match lattice")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise NoiseError("alpha must be nonnegative and finite")
        flipped = arr[tuple(slice(None, None, -1) for _ in range(arr.ndim))]
        if np.abs(arr - flipped).max() > 1e-12 * max(arr.max(), 1e-300):
            raise NoiseError("alpha must satisfy alpha(-k) = alpha(k)")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "alpha", arr)
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    @property
    def eps(self) -> float:
        return self.lattice.eps

    def alpha_l1_norm(self) -> float:
        return float(self.lattice.weight * self.alpha.sum())


def alpha_profile(lat: lt.LatticeSpec, name: str = "rational", band: str = "all") -> np.ndarray:
    """Named noise profiles, normalized to unit weighted l1 norm.

    rational : alpha(k) proportional to 1/(1+|k|^2)
    flat     : constant
    zero     : no noise

    ``band`` optionally restricts the (already normalized) profile to the
    critical or stable modes, for experiments that drive only one part.
    """
    if name == "zero":
        arr = np.zeros(lat.shape)
    elif name == "rational":
        arr = 1.0 / (1.0 + lt.ksq_grid(lat))
    elif name == "flat":
        arr = np.ones(lat.shape)
    else:
        raise NoiseError(f"unknown alpha profile {name!r}")
    total = lat.weight * arr.sum()
    if total > 0:
        arr = arr / total
    if band == "critical":
        arr = arr * lt.band_values(lat, lt.PC)
    elif band == "stable":
        arr = arr * lt.band_values(lat, lt.PS)
    elif band != "all":
        raise NoiseError(f"unknown band restriction {band!r}")
    return arr


def make_noise_model(lat: lt.LatticeSpec, beta: float, seed: int,
                     profile: str = "rational", band: str = "all",
                     alpha: np.ndarray | None = None) -> NoiseModel:
    if alpha is None:
        alpha = alpha_profile(lat, profile, band)
    return NoiseModel(lattice=lat, alpha=alpha, beta=beta, seed=seed)


# ----------------------------------------------------------------------
# Band amplitudes
# ----------------------------------------------------------------------

def sh_amplitude_array(model: NoiseModel) -> np.ndarray:
    """Per-mode noise magnitude: eps^2*alpha on Pc, eps^beta*alpha on Ps."""
    lat = model.lattice
    pc = lt.band_values(lat, lt.PC)
    mag = model.eps ** 2 * pc + model.eps ** model.beta * (1.0 - pc)
    return mag * model.alpha


def sh_noise_amplitude(model: NoiseModel, j) -> float:
    """Noise magnitude at the lattice point k = eps*j (j an integer tuple)."""
    j = (j,) if isinstance(j, (int, np.integer)) else tuple(j)
    idx = tuple(ji + m for ji, m in zip(j, model.lattice.cutoff))
    return float(sh_amplitude_array(model)[idx])


# ----------------------------------------------------------------------
# Counter-based Gaussian streams
# ----------------------------------------------------------------------

@lru_cache(maxsize=None)
def _half_lattice_mask(lat: lt.LatticeSpec) -> np.ndarray:
    """Lexicographically positive half of the box (origin excluded)."""
    mesh = lt.index_mesh(lat)
    positive = np.zeros(lat.shape, dtype=bool)
    undecided = np.ones(lat.shape, dtype=bool)
    for g in mesh:
        positive |= undecided & (g > 0)
        undecided &= g == 0
    positive.flags.writeable = False
    return positive


def _keyed_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    key = np.array([seed, 0x9E3779B97F4A7C15 ^ stream], dtype=np.uint64)
    counter = np.array([0, block, stream, 0x53484C4142], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def _mirrored_block(lat: lt.LatticeSpec, seed: int, stream: int, block: int,
                    scale: float) -> np.ndarray:
    """_STEP_BLOCK consecutive mirrored draws from one generator construction.

    Values on the positive half-lattice are free; the negative half is the
    exact conjugate mirror and the origin keeps only its real part, so each
    slice is the coefficient field of a real physical realization.
    """
    gen = _keyed_generator(seed, stream, block)
    n = int(np.prod(lat.shape))
    flat = gen.standard_normal(2 * n * _STEP_BLOCK)
    raw = (flat[: n * _STEP_BLOCK] + 1j * flat[n * _STEP_BLOCK:])
    raw = raw.reshape((_STEP_BLOCK,) + lat.shape) * scale
    pos = _half_lattice_mask(lat)
    flipped = raw[(slice(None),) + tuple(slice(None, None, -1) for _ in range(lat.d))]
    out = np.where(pos[None], raw, np.conj(flipped))
    centre = (slice(None),) + tuple(m for m in lat.cutoff)
    out[centre] = raw[centre].real
    return out


def _mirrored_complex(lat: lt.LatticeSpec, seed: int, stream: int, step: int,
                      scale: float, cache: dict | None = None) -> np.ndarray:
    """Mirrored complex Gaussians for one step, component std ``scale``.

    Pure in (seed, stream, step).  A caller-held ``cache`` keeps the current
    generation block so sequential sweeps construct one generator per
    _STEP_BLOCK steps instead of one per step.
    """
    block, offset = divmod(step, _STEP_BLOCK)
    key = (stream, block)
    if cache is not None and key in cache:
        return cache[key][offset]
    data = _mirrored_block(lat, seed, stream, block, scale)
    if cache is not None:
        cache.clear()
        cache[key] = data
    return data[offset]


@dataclass(frozen=True)
class WienerIncrements:
    """Lazy per-step view of the mirrored increment stream.

    step(i) returns the box of complex increments for step i, with
    independent N(0, h) components off the mirror pairing.  Pure in
    (seed, step): calling twice returns bitwise-identical arrays.
    """

    model: NoiseModel
    h: float
    n_steps: int

    def __post_init__(self):
        if self.h <= 0:
            raise NoiseError(f"step size must be positive, got {self.h}")
        if self.n_steps < 1:
            raise NoiseError(f"need at least one step, got {self.n_steps}")
        object.__setattr__(self, "_block_cache", ({}, {}))

    def step(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n_steps:
            raise NoiseError(f"step index {i} outside [0, {self.n_steps})")
        return _mirrored_complex(self.model.lattice, self.model.seed,
                                 _STREAM_INCREMENTS, i, np.sqrt(self.h),
                                 cache=self._block_cache[0])

    def aux(self, i: int) -> np.ndarray:
        """Unit-variance mirrored Gaussians for exact OU conditioning."""
        if not 0 <= i < self.n_steps:
            raise NoiseError(f"step index {i} outside [0, {self.n_steps})")
        return _mirrored_complex(self.model.lattice, self.model.seed,
                                 _STREAM_AUX, i, 1.0,
                                 cache=self._block_cache[1])


def sample_increments(model: NoiseModel, h: float, n_steps: int) -> WienerIncrements:
    return WienerIncrements(model=model, h=h, n_steps=n_steps)


# ----------------------------------------------------------------------
# Amplitude-equation pullback
# ----------------------------------------------------------------------

def critical_window(fine: lt.LatticeSpec, gl: lt.LatticeSpec) -> tuple:
    """Slices mapping the GL box K to the fine box at e1 + eps*K."""
    if fine.kind != lt.FINE or gl.kind != lt.AMPLITUDE:
        raise NoiseError("window maps an amplitude box into a fine box")
    if fine.d != gl.d or fine.eps_den != gl.eps_den:
        raise NoiseError("fine and amplitude lattices disagree on d or eps")
    n = fine.eps_den
    slices = []
    for ax in range(fine.d):
        shift = n if ax == 0 else 0
        lo = fine.cutoff[ax] + shift - gl.cutoff[ax]
        hi = fine.cutoff[ax] + shift + gl.cutoff[ax] + 1
        if lo < 0 or hi > fine.shape[ax]:
            raise NoiseError(
                f"amplitude modes fall outside the fine cutoff on axis {ax}")
        slices.append(slice(lo, hi))
    return tuple(slices)


def gl_alpha(model: NoiseModel, gl: lt.LatticeSpec) -> np.ndarray:
    """Envelope noise profile alpha_A(K) = eps^d * alpha(e1+eps*K) on |eps*K| <= 1/10."""
    win = critical_window(model.lattice, gl)
    p1 = lt.band_values(model.lattice, lt.P1)[win]
    scale = model.eps ** model.lattice.d
    return scale * model.alpha[win] * p1


@dataclass(frozen=True)
class GLIncrements:
    """Slow-time Wiener increments pulled back from the fine-lattice stream.

    dW_A(K) over the GL step H = eps^2*h equals eps * dW(e1+eps*K) over the
    fast step h, so each component again has variance H.
    """

    sh: WienerIncrements
    gl_lattice: lt.LatticeSpec
    window: tuple

    @property
    def h(self) -> float:
        return self.sh.model.eps ** 2 * self.sh.h

    @property
    def n_steps(self) -> int:
        return self.sh.n_steps

    def step(self, i: int) -> np.ndarray:
        return self.sh.model.eps * self.sh.step(i)[self.window]

    def aux(self, i: int) -> np.ndarray:
        return self.sh.aux(i)[self.window]


def gl_noise_from_sh(model: NoiseModel, incr: WienerIncrements, h_gl: float,
                     gl: lt.LatticeSpec) -> GLIncrements:
    """View of the SH increment stream as GL increments over steps H = eps^2*h."""
    if incr.model is not model and incr.model != model:
        raise NoiseError("increments were generated for a different model")
    expected = model.eps ** 2 * incr.h
    if abs(h_gl - expected) > 1e-12 * expected:
        raise NoiseError(
            f"GL step {h_gl} does not match eps^2 * SH step = {expected}")
    return GLIncrements(sh=incr, gl_lattice=gl, window=critical_window(model.lattice, gl))


# ----------------------------------------------------------------------
# Exact Ornstein-Uhlenbeck stepping
# ----------------------------------------------------------------------

def _phi1(z: np.ndarray) -> np.ndarray:
    """(e^z - 1)/z, series-protected near z = 0."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < 1e-4
    safe = np.where(small, 1.0, z)
    series = 1.0 + z / 2.0 + z ** 2 / 6.0 + z ** 3 / 24.0
    return np.where(small, series, np.expm1(safe) / safe)


def _conditional_coefficients(a: np.ndarray, h: float):
    """Exact one-step law of S = int_0^h e^{a(h-s)} dW(s) given dW over [0,h].

    Returns (mean_coef, cond_std) with E[S|dW] = mean_coef*dW per component
    and conditional per-component std cond_std.  Valid for any sign of a,
    with the a -> 0 limits built in.
    """
    a = np.asarray(a, dtype=np.float64)
    z = a * h
    i1 = h * _phi1(z)                     # Cov(S, dW) = amp-free integral
    i2 = h * _phi1(2.0 * z)               # Var(S)
    mean_coef = i1 / h
    # Var(S | dW) = i2 - i1^2/h = h*(phi1(2z) - phi1(z)^2); the difference
    # cancels to z^2/12 * h near zero, so switch to the series there
    diff = i2 - i1 ** 2 / h
    small = np.abs(z) < OU_VAR_SERIES_CUT
    series = h * (z ** 2 / 12.0 + z ** 3 / 12.0 + 17.0 * z ** 4 / 360.0)
    cond_var = np.where(small, series, diff)
    cond_std = np.sqrt(np.maximum(cond_var, 0.0))
    return mean_coef, cond_std


def stochastic_convolution(a, amp, dw, h: float, aux):
    """amp * int_0^h e^{a(h-s)} dW(s), sampled exactly and conditioned on dw.

    ``aux`` supplies the independent unit-variance Gaussians for the
    conditional fluctuation; passing the same (dw, aux) pair to two
    convolutions with different rates keeps them driven by one path.
    """
    mean_coef, cond_std = _conditional_coefficients(a, h)
    return amp * (mean_coef * dw + cond_std * aux)


class ConvolutionPlan:
    """Frozen per-step coefficients of the exact conditional convolution.

    Time steppers reuse one plan for every step, since (rates, amp, h) are
    constant along a run.
    """

    def __init__(self, a, amp, h: float):
        mean_coef, cond_std = _conditional_coefficients(a, h)
        self.mean_coef = np.asarray(amp) * mean_coef
        self.cond_std = np.asarray(amp) * cond_std

    def sample(self, dw, aux):
        return self.mean_coef * dw + self.cond_std * aux


def ou_exact_step(z, lambda_prime, amp, dw, h: float, aux):
    """One exact step of dz = -lambda'*z dt + amp dW, conditioned on dw.

    z' = e^{-lambda' h} z + amp * int_0^h e^{-lambda'(h-s)} dW(s), with the
    stochastic convolution sampled from its exact Gaussian law given the
    plain increment dw.  lambda' must be positive.
    """
    lam = np.asarray(lambda_prime, dtype=np.float64)
    if np.any(lam <= 0):
        raise NoiseError("ou_exact_step requires a positive damping rate")
    return np.exp(-lam * h) * np.asarray(z) + stochastic_convolution(-lam, amp, dw, h, aux)


def ou_variance(lambda_prime, amp, t):
    """Closed-form E|Z(t)|^2 over both components for Z(0) = 0."""
    lam = np.asarray(lambda_prime, dtype=np.float64)
    return np.asarray(amp, dtype=np.float64) ** 2 * (1.0 - np.exp(-2.0 * lam * t)) / lam
