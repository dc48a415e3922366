"""Exponential time integrators for the coupled fast/slow system.

solve_sh advances the stochastic pattern-forming equation

    du = [lambda(k) + eps^2] u dt - (u^3)^ dt + m(k) dW(k, t)

on the fine lattice, with the linear part integrated exactly, the cubic
term treated pseudospectrally by ETD1/ETDRK2, and the additive noise
injected through the exact one-step law of the stochastic convolution
(conditioned on the plain increment, so coupled solvers can share paths).

solve_gl_split advances the amplitude system obtained by separating the
envelope A = B + Z into an Ornstein-Uhlenbeck part and a smooth part:

    dZ(K) = -(1 + 4|K|^2) Z dT + alpha_A(K) dW_A(K, T)
    dB(K) = [(1 - 4|K|^2) B + 2 Z - 3 (|B+Z|^2 (B+Z))^] dT

driven by the slow-time pullback of the same Brownian source, so a fine
run and an amplitude run with equal (model, seed) are pathwise coupled.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import math

import numpy as np

from . import lattice as lt
from . import noise as ns

ETD1 = "etd1"
ETDRK2 = "etdrk2"

STANDARD = "standard"
FRACTIONAL = "fractional"

ESCAPE_NORM = 1.0e6
HERMITIAN_ABORT = 1.0e-8


class SolverError(RuntimeError):
    """Configuration or consistency failure in a solver."""


class EscapedError(RuntimeError):
    """Trajectory left the trusted region (NaN or norm blow-up).

    Solutions only exist locally in time; escapes are reported, not fixed.
    """

    def __init__(self, component: str, t: float, norm: float):
        super().__init__(f"{component} escaped at t={t:.6g} (norm {norm:.3e})")
        self.component = component
        self.t = t
        self.norm = norm


# ----------------------------------------------------------------------
# Dispersion
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Dispersion:
    """Per-mode linear growth rate lambda(k).

    standard   : lambda(k) = -(1 - k1^2)^2 - 4 |k_perp|^2
    fractional : lambda(k) = -((1 - k1^2)^2)^theta - 4 |k_perp|^2, theta > 1/4
                 (the even power keeps the base nonnegative, so the symbol is
                 real for every theta; it vanishes at k = +-e1 like the
                 standard one and decays as -|k1|^(4 theta))
    """

    variant: str = STANDARD
    theta: float | None = None

    def __post_init__(self):
        if self.variant == STANDARD:
            if self.theta is not None:
                raise SolverError("standard dispersion takes no theta")
        elif self.variant == FRACTIONAL:
            if self.theta is None or not self.theta > 0.25:
                raise SolverError("fractional dispersion requires theta > 1/4")
        else:
            raise SolverError(f"unknown dispersion variant {self.variant!r}")

    def symbol(self, lat: lt.LatticeSpec) -> np.ndarray:
        mesh = lt.index_mesh(lat)
        s = lat.spacing
        k1 = s * mesh[0].astype(float)
        kperp_sq = np.zeros(lat.shape)
        for g in mesh[1:]:
            kperp_sq = kperp_sq + (s * g.astype(float)) ** 2
        base = (1.0 - k1 ** 2) ** 2
        if self.variant == FRACTIONAL:
            base = base ** self.theta
        return -base - 4.0 * kperp_sq


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    """Shared setup for a fast-lattice run and its amplitude counterpart.

    The amplitude solver advances with slow steps H = eps^2 * h, one per
    fast step, so the two trajectories stay aligned snapshot by snapshot.
    """

    eps: float
    t0: float                       # slow-time horizon; fast horizon is t0/eps^2
    h: float = 0.1                  # fast-time step
    d: int = 1
    sh_cutoff: tuple[int, ...] = ()
    gl_cutoff: tuple[int, ...] = ()
    dispersion: Dispersion = field(default_factory=Dispersion)
    integrator: str = ETDRK2
    dealiasing: bool = True
    nonlinear: bool = True
    snapshot_stride: int = 5
    escape_norm: float = ESCAPE_NORM

    def __post_init__(self):
        n = lt.eps_denominator(self.eps)
        if not 0 < self.h <= 0.1:
            raise SolverError(f"fast step must lie in (0, 0.1], got {self.h}")
        if self.t0 <= 0:
            raise SolverError("horizon t0 must be positive")
        if self.integrator not in (ETD1, ETDRK2):
            raise SolverError(f"unknown integrator {self.integrator!r}")
        if self.snapshot_stride < 1:
            raise SolverError("snapshot stride must be >= 1")
        if len(self.sh_cutoff) != self.d or len(self.gl_cutoff) != self.d:
            raise SolverError("cutoffs must give one bound per axis (use make_config)")
        gl = self.gl_cutoff
        if min(gl) < math.ceil(n / 10):
            raise SolverError(
                f"gl_cutoff {gl} does not cover the envelope noise support "
                f"(need >= ceil(n/10) = {math.ceil(n / 10)})")
        if max(gl) >= n:
            raise SolverError("gl_cutoff must stay below 1/eps so the carrier bands are disjoint")
        if self.sh_cutoff[0] * self.eps < 3.0 + self.eps:
            raise SolverError(
                f"sh_cutoff {self.sh_cutoff[0]} cannot resolve the third harmonic "
                f"(need eps*cutoff >= 3 + eps)")

    @property
    def h_slow(self) -> float:
        return self.eps ** 2 * self.h

    @property
    def n_steps(self) -> int:
        return int(round(self.t0 / self.h_slow))

    def fine_lattice(self) -> lt.LatticeSpec:
        return lt.make_lattice(self.d, self.eps, self.sh_cutoff, lt.FINE)

    def gl_lattice(self) -> lt.LatticeSpec:
        return lt.make_lattice(self.d, self.eps, self.gl_cutoff, lt.AMPLITUDE)


def make_config(eps: float, t0: float, h: float = 0.1, d: int = 1,
                gl_cutoff=None, sh_cutoff=None, **kw) -> SolverConfig:
    """SolverConfig with derived default cutoffs.

    gl_cutoff defaults to ceil(n/10), exactly the envelope noise support;
    sh_cutoff defaults to 3*(n + gl_cutoff) per axis so every harmonic the
    cubic can reach from the carrier bands is representable.
    """
    n = lt.eps_denominator(eps)
    if gl_cutoff is None:
        gl_cutoff = max(1, math.ceil(n / 10))
    if isinstance(gl_cutoff, (int, np.integer)):
        gl_cutoff = (int(gl_cutoff),) * d
    else:
        gl_cutoff = tuple(int(c) for c in gl_cutoff)
    if sh_cutoff is None:
        sh_cutoff = tuple(3 * (n + g) for g in gl_cutoff)
    elif isinstance(sh_cutoff, (int, np.integer)):
        sh_cutoff = (int(sh_cutoff),) * d
    else:
        sh_cutoff = tuple(int(c) for c in sh_cutoff)
    return SolverConfig(eps=eps, t0=t0, h=h, d=d,
                        sh_cutoff=sh_cutoff, gl_cutoff=gl_cutoff, **kw)


# ----------------------------------------------------------------------
# Trajectories
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Snapshots of one spectral field along a run."""

    lattice: lt.LatticeSpec
    times: np.ndarray
    coeffs: np.ndarray              # (n_snapshots,) + lattice.shape
    component: str
    seed: int
    hermitian: bool = False

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or np.any(np.diff(t) <= 0):
            raise SolverError("snapshot times must be strictly increasing")
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.shape != (t.size,) + self.lattice.shape:
            raise SolverError("snapshot array shape mismatch")
        t.flags.writeable = False
        c.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "coeffs", c)

    def __len__(self) -> int:
        return int(self.times.size)

    def field(self, i: int) -> lt.SpectralField:
        return lt.SpectralField(self.lattice, self.coeffs[i], self.hermitian)


class _SnapshotBuffer:
    def __init__(self, stride: int):
        self.stride = stride
        self.times: list[float] = []
        self.snaps: list[np.ndarray] = []

    def offer(self, step: int, t: float, arr: np.ndarray, last: bool = False):
        if step % self.stride == 0 or last:
            self.times.append(t)
            self.snaps.append(arr.copy())

    def build(self, lat, component, seed, hermitian) -> Trajectory:
        return Trajectory(lattice=lat, times=np.array(self.times),
                          coeffs=np.stack(self.snaps), component=component,
                          seed=seed, hermitian=hermitian)


# ----------------------------------------------------------------------
# ETD coefficients
# ----------------------------------------------------------------------

def _phi2(z: np.ndarray) -> np.ndarray:
    """(e^z - 1 - z)/z^2, series-protected near z = 0."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < 0.25
    safe = np.where(small, 1.0, z)
    direct = (np.expm1(safe) - safe) / safe ** 2
    series = (1.0 / 2.0 + z / 6.0 + z ** 2 / 24.0 + z ** 3 / 120.0
              + z ** 4 / 720.0 + z ** 5 / 5040.0 + z ** 6 / 40320.0)
    return np.where(small, series, direct)


@dataclass(frozen=True)
class _EtdTableau:
    exp_h: np.ndarray
    w1: np.ndarray                  # h * phi1(a h)
    w2: np.ndarray                  # h * phi2(a h)


def _etd_tableau(a: np.ndarray, h: float) -> _EtdTableau:
    z = a * h
    return _EtdTableau(exp_h=np.exp(z), w1=h * ns._phi1(z), w2=h * _phi2(z))


@lru_cache(maxsize=None)
def _dealias_mask(lat: lt.LatticeSpec) -> np.ndarray:
    """2/3-rule indicator: keep modes with |j_i| <= floor(2 M_i / 3)."""
    keep = np.ones(lat.shape, dtype=bool)
    mesh = lt.index_mesh(lat)
    for ax, g in enumerate(mesh):
        keep &= np.abs(g) <= (2 * lat.cutoff[ax]) // 3
    out = keep.astype(np.float64)
    out.flags.writeable = False
    return out


# ----------------------------------------------------------------------
# Fast-lattice solver
# ----------------------------------------------------------------------

def solve_sh(u0: lt.SpectralField, model: ns.NoiseModel, cfg: SolverConfig) -> Trajectory:
    """Advance the fast equation from u0 over t in [0, t0/eps^2]."""
    lat = cfg.fine_lattice()
    if u0.lattice != lat:
        raise SolverError("initial field does not live on the configured fine lattice")
    if not u0.hermitian:
        raise SolverError("fast-lattice initial data must be Hermitian (real field)")
    if model.lattice != lat:
        raise SolverError("noise model lattice does not match the configuration")

    a = cfg.dispersion.symbol(lat) + cfg.eps ** 2
    tab = _etd_tableau(a, cfg.h)
    mag = ns.sh_amplitude_array(model)
    noisy = bool(np.any(mag > 0))
    incr = ns.sample_increments(model, cfg.h, cfg.n_steps) if noisy else None
    plan = ns.ConvolutionPlan(a, mag, cfg.h) if noisy else None
    da = _dealias_mask(lat) if cfg.dealiasing else None

    def nonlin(arr: np.ndarray) -> np.ndarray:
        if not cfg.nonlinear:
            return 0.0
        v = arr * da if da is not None else arr
        return -lt.convolve3(lat, v, v, v)

    u = u0.coeffs.copy()
    buf = _SnapshotBuffer(cfg.snapshot_stride)
    buf.offer(0, 0.0, u)
    for i in range(cfg.n_steps):
        n0 = nonlin(u)
        if cfg.integrator == ETD1:
            u = tab.exp_h * u + tab.w1 * n0
        else:
            pred = tab.exp_h * u + tab.w1 * n0
            u = pred + tab.w2 * (nonlin(pred) - n0)
        if noisy:
            u = u + plan.sample(incr.step(i), incr.aux(i))
        t = (i + 1) * cfg.h
        _guard(lat, u, t, "u", cfg.escape_norm)
        buf.offer(i + 1, t, u, last=i + 1 == cfg.n_steps)
    return buf.build(lat, "u", model.seed, hermitian=True)


def _guard(lat, arr, t, component, escape_norm):
    amax = float(np.abs(arr).max())
    if not np.isfinite(amax):
        raise EscapedError(component, t, float("inf"))
    norm = lt.wiener_norm_arr(lat, arr)
    if norm > escape_norm:
        raise EscapedError(component, t, norm)
    if component == "u":
        defect = lt.hermitian_defect(arr)
        if defect > HERMITIAN_ABORT * max(1.0, amax):
            raise SolverError(f"hermitian symmetry lost at t={t:.6g} (defect {defect:.3e})")


# ----------------------------------------------------------------------
# Amplitude solver
# ----------------------------------------------------------------------

def gl_rhs_deterministic(A: lt.SpectralField) -> lt.SpectralField:
    """Spectral right-hand side (-4|K|^2 + 1) A - 3 (A |A|^2)^."""
    lat = A.lattice
    if lat.kind != lt.AMPLITUDE:
        raise SolverError("gl_rhs_deterministic expects an amplitude-lattice field")
    lin = (1.0 - 4.0 * lt.ksq_grid(lat)) * A.coeffs
    cubic = _gl_cubic(lat, A.coeffs)
    return lt.SpectralField(lat, lin - 3.0 * cubic)


def _gl_cubic(lat, arr):
    """(A |A|^2)^ = A * A * conj-reflected A on the unit-weight lattice."""
    conj_refl = np.conj(arr[tuple(slice(None, None, -1) for _ in range(arr.ndim))])
    return lt.convolve3(lat, arr, arr, conj_refl)


def solve_gl_split(B0: lt.SpectralField, model: ns.NoiseModel,
                   cfg: SolverConfig) -> tuple[Trajectory, Trajectory]:
    """Advance the amplitude pair (B, Z) over T in [0, t0], Z(0) = 0."""
    gl = cfg.gl_lattice()
    if B0.lattice != gl:
        raise SolverError("B0 does not live on the configured amplitude lattice")
    H = cfg.h_slow
    lam_z = 1.0 + 4.0 * lt.ksq_grid(gl)
    a_b = 1.0 - 4.0 * lt.ksq_grid(gl)
    tab = _etd_tableau(a_b, H)
    alpha_a = ns.gl_alpha(model, gl)
    noisy = bool(np.any(alpha_a > 0))
    glincr = None
    if noisy:
        sh_incr = ns.sample_increments(model, cfg.h, cfg.n_steps)
        glincr = ns.gl_noise_from_sh(model, sh_incr, H, gl)
        z_plan = ns.ConvolutionPlan(-lam_z, alpha_a, H)
    z_decay = np.exp(-lam_z * H)

    def nonlin(b_arr, z_arr):
        if not cfg.nonlinear:
            return 2.0 * z_arr
        total = b_arr + z_arr
        return 2.0 * z_arr - 3.0 * _gl_cubic(gl, total)

    b = B0.coeffs.copy()
    z = np.zeros(gl.shape, dtype=np.complex128)
    buf_b = _SnapshotBuffer(cfg.snapshot_stride)
    buf_z = _SnapshotBuffer(cfg.snapshot_stride)
    buf_b.offer(0, 0.0, b)
    buf_z.offer(0, 0.0, z)
    for i in range(cfg.n_steps):
        n0 = nonlin(b, z)
        if noisy:
            z_next = z_decay * z + z_plan.sample(glincr.step(i), glincr.aux(i))
        else:
            z_next = z_decay * z
        if cfg.integrator == ETD1:
            b = tab.exp_h * b + tab.w1 * n0
        else:
            pred = tab.exp_h * b + tab.w1 * n0
            b = pred + tab.w2 * (nonlin(pred, z_next) - n0)
        z = z_next
        t_slow = (i + 1) * H
        _guard(gl, b, t_slow, "B", cfg.escape_norm)
        last = i + 1 == cfg.n_steps
        buf_b.offer(i + 1, t_slow, b, last=last)
        buf_z.offer(i + 1, t_slow, z, last=last)
    return (buf_b.build(gl, "B", model.seed, hermitian=False),
            buf_z.build(gl, "Z_A", model.seed, hermitian=False))


# ----------------------------------------------------------------------
# Two-band approximant
# ----------------------------------------------------------------------

def build_approximation(B: lt.SpectralField, Z_A: lt.SpectralField | None,
                        eps: float, fine: lt.LatticeSpec) -> lt.SpectralField:
    """Fine-lattice field of eps * (B + Z)(X) e^{i x_1} + c.c.

    Places eps * eps^{-d} (B+Z)^(K) at the fine point e1 + eps*K together
    with the conjugate mirror at -e1 - eps*K; the result is Hermitian.
    """
    gl = B.lattice
    if Z_A is not None and Z_A.lattice != gl:
        raise SolverError("B and Z_A live on different lattices")
    if abs(eps - 1.0 / gl.eps_den) > 1e-12:
        raise SolverError("eps does not match the amplitude lattice")
    env = B.coeffs if Z_A is None else B.coeffs + Z_A.coeffs
    arr = place_envelope(env, gl, fine, carrier=1, order=1)
    return lt.SpectralField(fine, arr, hermitian=True)


def place_envelope(env: np.ndarray, gl: lt.LatticeSpec, fine: lt.LatticeSpec,
                   carrier: int, order: int) -> np.ndarray:
    """eps^order * eps^{-d} * env(K) at carrier*e1 + eps*K, plus conjugate mirror."""
    if fine.d != gl.d or fine.eps_den != gl.eps_den:
        raise SolverError("fine and amplitude lattices disagree on d or eps")
    n = fine.eps_den
    arr = np.zeros(fine.shape, dtype=np.complex128)
    slices = []
    for ax in range(fine.d):
        shift = carrier * n if ax == 0 else 0
        lo = fine.cutoff[ax] + shift - gl.cutoff[ax]
        hi = fine.cutoff[ax] + shift + gl.cutoff[ax] + 1
        if lo < 0 or hi > fine.shape[ax]:
            raise SolverError(
                f"amplitude modes fall outside the fine cutoff on axis {ax}")
        slices.append(slice(lo, hi))
    scale = fine.eps ** order / fine.eps ** fine.d
    arr[tuple(slices)] = scale * env
    flipped = arr[tuple(slice(None, None, -1) for _ in range(fine.d))]
    return arr + np.conj(flipped)
