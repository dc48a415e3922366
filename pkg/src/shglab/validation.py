"""Monte-Carlo harness for the amplitude-approximation experiments.

A coupled sample solves the fast equation and the amplitude pair from one
Brownian source, measures the physical sup-norm distance between the fast
solution and the two-band approximant over the whole slow horizon, and
decomposes the rescaled error R = (u - eps*Psi)/eps^beta into

    R_c = P_c R                   (critical part)
    R_Z                           (stable Ornstein-Uhlenbeck part, simulated
                                   from the same noise path)
    R_B = P_s R - R_Z             (regular stable part)

together with the Gronwall monitor S(t) = sup_{tau<=t}||R_c|| +
sup_{tau<=t}||R_B||.  Sweeps over eps feed log-log exponent fits and
threshold-exceedance probabilities with Wilson intervals; the exceedance
constant is calibrated at the coarsest eps since the underlying bounds carry
non-constructive constants.
"""

from dataclasses import dataclass, field, replace
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy import stats

from . import lattice as lt
from . import noise as ns
from . import solvers as sv

B0_PROFILES = ("stationary", "smooth", "zero")
KNOWN_CHECKS = ("zero_time_error", "exponent_fit", "probability_trend",
                "s_bounded", "rz_nongrowth")

WILSON_Z = 1.959963984540054          # two-sided 95%


class ValidationError(ValueError):
    """Invalid experiment plan or unusable inputs."""


# ----------------------------------------------------------------------
# Plans
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPlan:
    """Sweep definition: which eps, how many samples, what to check."""

    eps_list: tuple[float, ...]
    beta: float = 1.5
    n_samples: int = 1
    t0: float = 1.0
    seed: int = 0
    h: float = 0.1
    d: int = 1
    gl_cutoff: int | None = None          # per-axis cap; None = 3 * noise support
    sh_cutoff: tuple[int, ...] | None = None
    b0_profile: str = "stationary"
    alpha_profile: str = "rational"
    alpha_band: str = "all"
    snapshot_stride: int = 5
    calibration_quantile: float = 0.95
    b_norm_order: float = 2.5             # W_A^{3-delta'} event norm with delta' = 1/2
    dispersion: sv.Dispersion = field(default_factory=sv.Dispersion)
    integrator: str = sv.ETDRK2
    dealiasing: bool = True
    checks: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.eps_list:
            raise ValidationError("eps_list must not be empty")
        for eps in self.eps_list:
            lt.eps_denominator(eps)
        if not self.beta > 1.0:
            raise ValidationError(f"beta must exceed 1, got {self.beta}")
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if self.b0_profile not in B0_PROFILES:
            raise ValidationError(f"unknown b0 profile {self.b0_profile!r}")
        for c in self.checks:
            if c not in KNOWN_CHECKS:
                raise ValidationError(f"unknown check {c!r} (known: {KNOWN_CHECKS})")

    def config_for(self, eps: float) -> sv.SolverConfig:
        n = lt.eps_denominator(eps)
        support = max(1, math.ceil(n / 10))
        want = 3 * support if self.gl_cutoff is None else self.gl_cutoff
        gl_cut = max(support, min(want, n - 1))
        return sv.make_config(eps=eps, t0=self.t0, h=self.h, d=self.d,
                              gl_cutoff=gl_cut, sh_cutoff=self.sh_cutoff,
                              dispersion=self.dispersion, integrator=self.integrator,
                              dealiasing=self.dealiasing,
                              snapshot_stride=self.snapshot_stride)

    def sample_seed(self, eps: float, index: int) -> int:
        n = lt.eps_denominator(eps)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(n, index))
        return int(ss.generate_state(1, np.uint64)[0])


def b0_field(gl: lt.LatticeSpec, profile: str, scale: float = 1.0) -> lt.SpectralField:
    """Named initial envelopes; modes along the first axis only."""
    stat = 1.0 / np.sqrt(3.0)
    if profile == "zero":
        modes = {}
    elif profile == "stationary":
        modes = {(0,) * gl.d: stat}
    elif profile == "smooth":
        def j(k1):
            return (k1,) + (0,) * (gl.d - 1)
        modes = {j(0): 0.9 * stat, j(1): 0.12 + 0.05j, j(-1): 0.08j}
    else:
        raise ValidationError(f"unknown b0 profile {profile!r}")
    modes = {k: scale * v for k, v in modes.items()}
    return lt.field_from_modes(gl, modes)


# ----------------------------------------------------------------------
# Per-sample records
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorSeries:
    """Snapshot-aligned error decomposition of one coupled run."""

    times_fast: np.ndarray
    sup_error: np.ndarray           # sup_x |u - eps*Psi| at each snapshot
    w_error: np.ndarray             # weighted-l1 norm of the same difference
    r_c: np.ndarray                 # ||P_c R||
    r_b: np.ndarray                 # ||P_s R - R_Z||
    r_z: np.ndarray                 # ||R_Z||
    s_monitor: np.ndarray           # running sup r_c + running sup r_b
    z_w1: np.ndarray                # ||Z_A||_{W_A^1}
    b_norm: np.ndarray              # ||B||_{W_A^{3-delta'}}


@dataclass(frozen=True)
class SampleRecord:
    eps: float
    seed: int
    escaped: bool
    escape_time: float | None
    sup_error: float
    t_at_max: float
    sup_s: float
    ass3_stat: float
    error_t0: float
    series: ErrorSeries | None

    def row(self) -> dict:
        return {
            "eps": self.eps, "seed": self.seed, "escaped": int(self.escaped),
            "sup_error": self.sup_error, "t_at_max": self.t_at_max,
            "sup_S": self.sup_s, "ass3_stat": self.ass3_stat,
            "error_t0": self.error_t0,
        }


def run_coupled_sample(eps: float, seed: int, plan: ExperimentPlan) -> SampleRecord:
    """One coupled fast/amplitude run; escapes are recorded, not raised."""
    cfg = plan.config_for(eps)
    fine = cfg.fine_lattice()
    gl = cfg.gl_lattice()
    model = ns.make_noise_model(fine, plan.beta, seed,
                                profile=plan.alpha_profile, band=plan.alpha_band)
    B0 = b0_field(gl, plan.b0_profile)
    u0 = sv.build_approximation(B0, None, eps, fine)
    try:
        traj_u = sv.solve_sh(u0, model, cfg)
        traj_b, traj_z = sv.solve_gl_split(B0, model, cfg)
    except sv.EscapedError as exc:
        return SampleRecord(eps=eps, seed=seed, escaped=True, escape_time=exc.t,
                            sup_error=float("inf"), t_at_max=float("nan"),
                            sup_s=float("inf"), ass3_stat=float("inf"),
                            error_t0=0.0, series=None)
    series = error_decomposition(traj_u, traj_b, traj_z, model, cfg, plan.beta,
                                 b_norm_order=plan.b_norm_order)
    imax = int(np.argmax(series.sup_error))
    return SampleRecord(
        eps=eps, seed=seed, escaped=False, escape_time=None,
        sup_error=float(series.sup_error[imax]),
        t_at_max=float(series.times_fast[imax]),
        sup_s=float(series.s_monitor[-1]),
        ass3_stat=float(series.z_w1.max() + series.b_norm.max()),
        error_t0=float(series.sup_error[0]),
        series=series)


def error_decomposition(u_traj: sv.Trajectory, b_traj: sv.Trajectory,
                        z_traj: sv.Trajectory, model: ns.NoiseModel,
                        cfg: sv.SolverConfig, beta: float,
                        b_norm_order: float = 2.5) -> ErrorSeries:
    """Split the rescaled error along aligned trajectories (see module docstring).

    The stable OU component R_Z is re-simulated here from the identical
    keyed noise stream the fast solver consumed, with damping -lambda(k) and
    amplitude eps^{-beta} * m(k) on the stable band (= alpha(k) there for the
    standard band magnitudes).
    """
    fine = u_traj.lattice
    gl = b_traj.lattice
    if len(u_traj) != len(b_traj) or len(u_traj) != len(z_traj):
        raise ValidationError("trajectories have different snapshot counts")
    if np.abs(b_traj.times - u_traj.times * cfg.eps ** 2).max() > 1e-9:
        raise ValidationError("fast and slow snapshot times are not aligned")

    eps = cfg.eps
    ps = lt.band_values(fine, lt.PS)
    pc = lt.band_values(fine, lt.PC)
    lam = cfg.dispersion.symbol(fine)
    rz_amp = eps ** (-beta) * ns.sh_amplitude_array(model) * ps
    noisy = bool(np.any(rz_amp > 0))
    incr = ns.sample_increments(model, cfg.h, cfg.n_steps) if noisy else None
    rz_plan = ns.ConvolutionPlan(lam, rz_amp, cfg.h) if noisy else None
    rz_decay = np.exp(lam * cfg.h)
    grid = lt.physical_grid_size(fine)
    w1 = lt.norm_weights(gl, 1.0)
    wb = lt.norm_weights(gl, b_norm_order)

    n_snap = len(u_traj)
    out = {name: np.zeros(n_snap) for name in
           ("sup_error", "w_error", "r_c", "r_b", "r_z", "s_monitor", "z_w1", "b_norm")}

    rz = np.zeros(fine.shape, dtype=np.complex128)
    step = 0
    run_sup_c = run_sup_b = 0.0
    snap_steps = np.rint(u_traj.times / cfg.h).astype(int)
    for i in range(n_snap):
        while step < snap_steps[i]:
            if noisy:
                rz = np.exp(lam * cfg.h) * rz + ns.stochastic_convolution(
                    lam, rz_amp, incr.step(step), cfg.h, incr.aux(step))
            step += 1
        psi = sv.build_approximation(b_traj.field(i), z_traj.field(i), eps, fine)
        diff = u_traj.coeffs[i] - psi.coeffs
        err_field = lt.SpectralField(fine, diff, hermitian=True)
        out["sup_error"][i] = lt.sup_norm_physical(err_field, grid)
        out["w_error"][i] = lt.wiener_norm_arr(fine, diff)
        r = diff / eps ** beta
        out["r_c"][i] = lt.wiener_norm_arr(fine, pc * r)
        out["r_z"][i] = lt.wiener_norm_arr(fine, rz)
        out["r_b"][i] = lt.wiener_norm_arr(fine, ps * r - rz)
        run_sup_c = max(run_sup_c, out["r_c"][i])
        run_sup_b = max(run_sup_b, out["r_b"][i])
        out["s_monitor"][i] = run_sup_c + run_sup_b
        out["z_w1"][i] = float((np.abs(z_traj.coeffs[i]) * w1).sum())
        out["b_norm"][i] = float((np.abs(b_traj.coeffs[i]) * wb).sum())
    return ErrorSeries(times_fast=u_traj.times.copy(), **out)


# ----------------------------------------------------------------------
# Fits and probabilities
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    n_used: int
    n_dropped: int

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept,
                "ci_low": self.ci_low, "ci_high": self.ci_high,
                "n_used": self.n_used, "n_dropped": self.n_dropped}


def fit_exponent(pairs) -> ExponentFit:
    """Least-squares slope of log(error) vs log(eps) with a 95% CI."""
    pairs = [(float(e), float(v)) for e, v in pairs]
    usable = [(e, v) for e, v in pairs if v > 0 and np.isfinite(v)]
    dropped = len(pairs) - len(usable)
    if len({e for e, _ in usable}) < 3:
        raise ValidationError("exponent fit needs at least 3 distinct usable eps values")
    x = np.log([e for e, _ in usable])
    y = np.log([v for _, v in usable])
    res = stats.linregress(x, y)
    if len(usable) > 2 and np.isfinite(res.stderr) and res.stderr > 0:
        tq = stats.t.ppf(0.975, len(usable) - 2)
        ci = (res.slope - tq * res.stderr, res.slope + tq * res.stderr)
    else:
        ci = (res.slope, res.slope)
    return ExponentFit(slope=float(res.slope), intercept=float(res.intercept),
                       ci_low=float(ci[0]), ci_high=float(ci[1]),
                       n_used=len(usable), n_dropped=dropped)


def wilson_interval(successes: int, n: int, z: float = WILSON_Z) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1 + z ** 2 / n
    centre = (p + z ** 2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z ** 2 / (4 * n ** 2)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


@dataclass(frozen=True)
class ProbabilityEstimate:
    threshold: float
    n: int
    n_success: int
    p_hat: float | None
    wilson_low: float | None
    wilson_high: float | None
    small_sample: bool
    all_escaped: bool

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "n": self.n, "n_success": self.n_success,
                "p_hat": self.p_hat, "wilson_low": self.wilson_low,
                "wilson_high": self.wilson_high, "small_sample": self.small_sample,
                "all_escaped": self.all_escaped}


def estimate_probability(errors, threshold: float) -> ProbabilityEstimate:
    """Fraction of samples with error <= threshold; escapes (inf) count as failures."""
    errors = np.asarray(errors, dtype=float)
    n = errors.size
    all_escaped = bool(n > 0 and not np.any(np.isfinite(errors)))
    if all_escaped:
        return ProbabilityEstimate(threshold=threshold, n=n, n_success=0, p_hat=None,
                                   wilson_low=None, wilson_high=None,
                                   small_sample=n < 30, all_escaped=True)
    k = int(np.sum(errors <= threshold))
    low, high = wilson_interval(k, n)
    return ProbabilityEstimate(threshold=threshold, n=n, n_success=k, p_hat=k / n,
                               wilson_low=low, wilson_high=high,
                               small_sample=n < 30, all_escaped=False)


def calibrate_threshold_constant(errors_coarse, eps_coarse: float, beta: float,
                                 quantile: float = 0.95) -> float:
    """C such that C * eps^beta is the given error quantile at the coarsest eps."""
    errors = np.asarray(errors_coarse, dtype=float)
    if not np.any(np.isfinite(errors)):
        raise ValidationError("cannot calibrate: every calibration sample escaped")
    q = float(np.quantile(errors, quantile))
    return q / eps_coarse ** beta


# ----------------------------------------------------------------------
# OU moment check
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class OUMomentRow:
    K: tuple
    T: float
    amp: float
    empirical: float
    analytic: float
    z_score: float

    def to_dict(self) -> dict:
        return {"K": list(self.K), "T": self.T, "amp": self.amp,
                "empirical": self.empirical, "analytic": self.analytic,
                "z_score": self.z_score}


def ou_moment_check(K_list, T_list, n_paths: int, amp=1.0, seed: int = 0,
                    n_steps: int = 16) -> list[OUMomentRow]:
    """Empirical vs closed-form E|Z(T)|^2 for the envelope OU modes.

    Each (K, T) pair is simulated with the exact conditional stepper over
    ``n_steps`` substeps; amp may be a scalar or a callable K -> alpha_A(K).
    """
    if n_paths < 1000:
        raise ValidationError("need at least 1e3 paths for a stable z-score")
    rows = []
    for idx_k, K in enumerate(K_list):
        Kt = (K,) if isinstance(K, (int, np.integer, float)) else tuple(K)
        lam = 1.0 + 4.0 * float(sum(k ** 2 for k in Kt))
        a = float(amp(Kt) if callable(amp) else amp)
        for idx_t, T in enumerate(T_list):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(idx_k, idx_t)))
            h = T / n_steps
            z = np.zeros(n_paths, dtype=complex)
            for _ in range(n_steps):
                dw = np.sqrt(h) * (rng.standard_normal(n_paths)
                                   + 1j * rng.standard_normal(n_paths))
                aux = rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)
                z = ns.ou_exact_step(z, lam, a, dw, h, aux)
            m2 = np.abs(z) ** 2
            analytic = float(ns.ou_variance(lam, a, T))
            se = float(m2.std() / np.sqrt(n_paths))
            zsc = 0.0 if se == 0 else (float(m2.mean()) - analytic) / se
            rows.append(OUMomentRow(K=Kt, T=float(T), amp=a,
                                    empirical=float(m2.mean()), analytic=analytic,
                                    z_score=float(zsc)))
    return rows


# ----------------------------------------------------------------------
# Plan execution and aggregate checks
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationReport:
    plan: ExperimentPlan
    records: tuple[SampleRecord, ...]
    aggregates: dict
    checks: dict

    @property
    def passed(self) -> bool:
        return all(v.get("passed", True) for v in self.checks.values())

    def records_for(self, eps: float) -> list[SampleRecord]:
        return [r for r in self.records if r.eps == eps]


def _run_sample_args(args) -> SampleRecord:
    eps, seed, plan = args
    return run_coupled_sample(eps, seed, plan)


def run_plan(plan: ExperimentPlan, max_workers: int = 1) -> ValidationReport:
    """Execute the sweep and evaluate the enabled aggregate checks.

    (plan, seed) determines every record; worker count never changes results
    because samples are keyed independently and reduced in fixed order.
    """
    jobs = [(eps, plan.sample_seed(eps, i), plan)
            for eps in plan.eps_list for i in range(plan.n_samples)]
    if max_workers > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            records = tuple(pool.map(_run_sample_args, jobs, chunksize=1))
    else:
        records = tuple(_run_sample_args(j) for j in jobs)

    aggregates = summarize(plan, records)
    checks = {name: run_check(name, plan, records, aggregates) for name in plan.checks}
    return ValidationReport(plan=plan, records=records, aggregates=aggregates, checks=checks)


def summarize(plan: ExperimentPlan, records) -> dict:
    by_eps = {}
    for eps in plan.eps_list:
        errs = np.array([r.sup_error for r in records if r.eps == eps])
        finite = errs[np.isfinite(errs)]
        by_eps[eps] = {
            "n": int(errs.size),
            "n_escaped": int(np.sum(~np.isfinite(errs))),
            "median_error": float(np.median(finite)) if finite.size else None,
            "q95_error": float(np.quantile(finite, 0.95)) if finite.size else None,
            "max_error": float(finite.max()) if finite.size else None,
        }
    agg: dict = {"by_eps": by_eps}
    pairs = [(r.eps, r.sup_error) for r in records if np.isfinite(r.sup_error)]
    distinct = {e for e, v in pairs if v > 0}
    if len(distinct) >= 3:
        agg["exponent_fit"] = fit_exponent(pairs).to_dict()

    if len(plan.eps_list) >= 2:
        eps_coarse = max(plan.eps_list)
        coarse_errors = [r.sup_error for r in records if r.eps == eps_coarse]
        try:
            c2 = calibrate_threshold_constant(coarse_errors, eps_coarse, plan.beta,
                                              plan.calibration_quantile)
            agg["threshold_constant"] = c2
            ass3_coarse = [r.ass3_stat for r in records
                           if r.eps == eps_coarse and np.isfinite(r.ass3_stat)]
            c1 = float(np.quantile(ass3_coarse, plan.calibration_quantile)) \
                if ass3_coarse else None
            agg["event_constant"] = c1
            prob = {}
            for eps in plan.eps_list:
                recs = [r for r in records if r.eps == eps]
                errs = [r.sup_error for r in recs]
                est = estimate_probability(errs, c2 * eps ** plan.beta)
                entry = {"unconditional": est.to_dict()}
                if c1 is not None:
                    cond = [r.sup_error for r in recs if r.ass3_stat <= c1]
                    entry["conditioned"] = estimate_probability(
                        cond, c2 * eps ** plan.beta).to_dict()
                prob[eps] = entry
            agg["probability"] = prob
        except ValidationError:
            agg["threshold_constant"] = None
    return agg


def run_check(name: str, plan: ExperimentPlan, records, aggregates) -> dict:
    if name == "zero_time_error":
        worst = max((r.error_t0 for r in records), default=0.0)
        return {"passed": worst <= 1e-12, "worst_t0_error": worst}
    if name == "exponent_fit":
        fit = aggregates.get("exponent_fit")
        return {"passed": fit is not None, **(fit or {})}
    if name == "probability_trend":
        prob = aggregates.get("probability")
        if not prob:
            return {"passed": False, "reason": "no probability table"}
        eps_sorted = sorted(prob, reverse=True)
        ps = [prob[e]["unconditional"]["p_hat"] for e in eps_sorted]
        if any(p is None for p in ps):
            return {"passed": False, "reason": "undefined p_hat (all escaped)"}
        # non-decreasing as eps shrinks, allowing one inversion inside
        # overlapping Wilson intervals
        inversions = 0
        ok = True
        for a, b in zip(eps_sorted, eps_sorted[1:]):
            pa, pb = prob[a]["unconditional"], prob[b]["unconditional"]
            if pb["p_hat"] < pa["p_hat"]:
                overlap = pb["wilson_high"] >= pa["wilson_low"]
                inversions += 1
                if inversions > 1 or not overlap:
                    ok = False
        return {"passed": ok, "p_by_eps": {e: prob[e]["unconditional"]["p_hat"]
                                           for e in eps_sorted}}
    if name == "s_bounded":
        meds = {}
        for eps in plan.eps_list:
            vals = [r.sup_s for r in records if r.eps == eps and np.isfinite(r.sup_s)]
            if vals:
                meds[eps] = float(np.median(vals))
        if len(meds) < 2:
            return {"passed": False, "reason": "not enough eps points"}
        ratio = max(meds.values()) / min(meds.values())
        return {"passed": ratio <= 3.0, "ratio": ratio, "medians": meds}
    if name == "rz_nongrowth":
        worst = 0.0
        for eps in plan.eps_list:
            series = [r.series.r_z for r in records
                      if r.eps == eps and r.series is not None]
            if not series:
                continue
            mat = np.stack(series)                     # (samples, times)
            if not np.any(mat > 0):
                continue
            q99 = np.quantile(mat, 0.99, axis=0)
            nt = q99.size
            first = q99[nt // 4: nt // 2]
            second = q99[nt // 2:]
            if first.size and second.size and first.max() > 0:
                worst = max(worst, float(second.max() / first.max()))
        return {"passed": worst <= 1.3, "worst_half_ratio": worst}
    raise ValidationError(f"unknown check {name!r}")
