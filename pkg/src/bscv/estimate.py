"""Population fitting and fixed-parameter evaluation.

The marginal likelihood of each subject is approximated by the Laplace
method: an inner damped-Newton solve finds the conditional mode of the
random effects (the empirical Bayes estimate), and the log-determinant
of the conditional Hessian supplies the correction. The approximation
is exact for models linear in the random effects with Gaussian error,
which is what the unit oracles check. Importance sampling around the
mode provides a more accurate estimate when requested.

Population parameters are estimated by a restarted Nelder-Mead search
on a log/Cholesky-angle transformed vector, so positivity and
correlation constraints hold by construction.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import gammaln

from .data import Channel, Dataset, Subject
from .modelspec import (
    ErrorForm,
    ModelSpec,
    StructuralKind,
    batched_predictor,
    concentration_curve,
    error_sd_array,
    individual_parameters,
    omega_covariance,
    resolve_theta,
    spec_theta,
)

LOG_2PI = math.log(2.0 * math.pi)


class InnerNonConvergence(RuntimeError):
    pass


class NonFiniteObjective(RuntimeError):
    pass


class OuterNonConvergence(RuntimeWarning):
    pass


class DegenerateWeights(RuntimeError):
    pass


class ChainStuck(RuntimeError):
    pass


class MissingSubjectEbes(KeyError):
    pass


class LlMode(Enum):
    LAPLACE = "laplace"
    IMPORTANCE = "importance"


@dataclass(frozen=True)
class FitOptions:
    outer_max_iters: int = 2000
    outer_tolerance: float = 1e-5
    inner_tolerance: float = 1e-6
    multistart_count: int = 2
    ll_mode: LlMode = LlMode.LAPLACE
    is_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.outer_tolerance <= 0 or self.inner_tolerance <= 0:
            raise ValueError("tolerances must be > 0")
        if self.ll_mode is LlMode.IMPORTANCE and self.is_samples < 100:
            raise ValueError("is_samples must be >= 100 for importance sampling")


@dataclass
class FitResult:
    theta_hat: dict[str, float]
    minus2ll: float
    ebes: dict[str, tuple[float, ...]]
    converged: bool
    n_obs: int
    p_count: int
    mode: str = "laplace"
    seed: int = 0
    mc_se: float = 0.0
    objective_trace: tuple[float, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "theta": dict(self.theta_hat),
            "minus2ll": self.minus2ll,
            "ebes": {k: list(v) for k, v in self.ebes.items()},
            "converged": self.converged,
            "n_obs": self.n_obs,
            "p_count": self.p_count,
            "mode": self.mode,
            "seed": self.seed,
            "mc_se": self.mc_se,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitResult":
        return cls(
            theta_hat=dict(d["theta"]),
            minus2ll=float(d["minus2ll"]),
            ebes={k: tuple(v) for k, v in d["ebes"].items()},
            converged=bool(d["converged"]),
            n_obs=int(d["n_obs"]),
            p_count=int(d["p_count"]),
            mode=d.get("mode", "laplace"),
            seed=int(d.get("seed", 0)),
            mc_se=float(d.get("mc_se", 0.0)),
        )


@dataclass
class TestEvaluation:
    """Fixed-parameter evaluation: fresh EBEs, predictions, -2LL."""

    minus2ll: float
    ebes: dict[str, tuple[float, ...]]
    ipred: dict[str, tuple[float, ...]]
    gpred: dict[str, tuple[float, ...]]
    n_obs: int
    order: tuple[str, ...]
    failed_subjects: tuple[str, ...] = ()
    mode: str = "laplace"
    seed: int = 0
    mc_se: float = 0.0

    def ipred_flat(self) -> np.ndarray:
        if not self.order:
            return np.empty(0)
        return np.concatenate([np.asarray(self.ipred[i]) for i in self.order])

    def gpred_flat(self) -> np.ndarray:
        if not self.order:
            return np.empty(0)
        return np.concatenate([np.asarray(self.gpred[i]) for i in self.order])

    def to_dict(self) -> dict:
        return {
            "minus2ll": self.minus2ll,
            "ebes": {k: list(v) for k, v in self.ebes.items()},
            "ipred": {k: list(v) for k, v in self.ipred.items()},
            "gpred": {k: list(v) for k, v in self.gpred.items()},
            "n_obs": self.n_obs,
            "order": list(self.order),
            "failed_subjects": list(self.failed_subjects),
            "mode": self.mode,
            "seed": self.seed,
            "mc_se": self.mc_se,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TestEvaluation":
        return cls(
            minus2ll=float(d["minus2ll"]),
            ebes={k: tuple(v) for k, v in d["ebes"].items()},
            ipred={k: tuple(v) for k, v in d["ipred"].items()},
            gpred={k: tuple(v) for k, v in d["gpred"].items()},
            n_obs=int(d["n_obs"]),
            order=tuple(d["order"]),
            failed_subjects=tuple(d.get("failed_subjects", ())),
            mode=d.get("mode", "laplace"),
            seed=int(d.get("seed", 0)),
            mc_se=float(d.get("mc_se", 0.0)),
        )


def derive_subject_seed(seed: int, subject_id: str) -> int:
    """Stable per-subject RNG seed; independent of subject position."""
    digest = hashlib.sha256(f"{seed}:{subject_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# per-subject workspace
# ---------------------------------------------------------------------------

class _SubjectWork:
    """Static, theta-independent pieces of one subject's likelihood."""

    def __init__(self, spec: ModelSpec, subject: Subject, driver=None):
        self.subject = subject
        obs = subject.observations_for(spec.channel)
        self.y = np.array([o.value for o in obs], dtype=float)
        self.n = self.y.size
        self.predict = batched_predictor(spec, subject, conc_driver=driver)
        # eta -> parameter-column selector
        p = len(spec.parameters)
        eta_names = spec.eta_names
        self.d = len(eta_names)
        self.M = np.zeros((self.d, p))
        for k, name in enumerate(eta_names):
            self.M[k, spec.param_names.index(name)] = 1.0
        self.logmask = np.array(
            [pp.distribution == "lognormal" for pp in spec.parameters]
        )
        # covariate shift terms: (column, theta key, transform value)
        self.shifts: list[tuple[int, str, float]] = []
        for j, pp in enumerate(spec.parameters):
            for eff in pp.covariate_effects:
                self.shifts.append(
                    (j, f"beta_{pp.name}_{eff.tag}", eff.value(subject.covariates))
                )

    def base(self, spec: ModelSpec, theta: Mapping[str, float]) -> np.ndarray:
        """Link-scale typical value per parameter (log for lognormal)."""
        vals = np.empty(len(spec.parameters))
        for j, pp in enumerate(spec.parameters):
            pop = theta[pp.name]
            vals[j] = math.log(pop) if pp.distribution == "lognormal" else pop
        for j, key, x in self.shifts:
            vals[j] += theta[key] * x
        return vals


class _OmegaState:
    def __init__(self, cov: np.ndarray):
        self.cov = cov
        self.chol = cholesky(cov, lower=True)
        d = cov.shape[0]
        eye = np.eye(d)
        self.inv = cho_solve((self.chol, True), eye)
        self.sum_log_diag = float(np.sum(np.log(np.diag(self.chol))))
        self.logdet_2pi = d * LOG_2PI + 2.0 * self.sum_log_diag
        # inner solves run in prior-whitened coordinates z = chol^-1 eta,
        # where the prior curvature is the identity; tiny omega entries
        # then cannot produce ill-scaled valleys
        self.inv_chol = solve_triangular(self.chol, eye, lower=True)

    def whiten_h(self, h: Callable[..., np.ndarray]):
        chol_t = self.chol.T

        def h_z(zs: np.ndarray, *args) -> np.ndarray:
            return h(np.asarray(zs) @ chol_t, *args)

        return h_z

    def eta_from_z(self, z: np.ndarray) -> np.ndarray:
        return z @ self.chol.T

    def z_from_eta(self, eta: np.ndarray) -> np.ndarray:
        return eta @ self.inv_chol.T

    def hess_from_z(self, hess_z: np.ndarray) -> np.ndarray:
        return self.inv_chol.T @ hess_z @ self.inv_chol


def _make_h(
    work: _SubjectWork,
    base: np.ndarray,
    error_params: tuple[float, float, float, ErrorForm],
    omega: Optional[_OmegaState],
) -> Callable[[np.ndarray], np.ndarray]:
    """Conditional -2*log-joint h(eta) evaluated for a batch of etas."""
    a, b, c, form = error_params
    y = work.y
    logmask = work.logmask
    M = work.M
    predict = work.predict

    def h(etas: np.ndarray) -> np.ndarray:
        etas = np.atleast_2d(np.asarray(etas, dtype=float))
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            z = base[None, :] + (etas @ M if work.d else 0.0)
            psi = np.where(logmask[None, :], np.exp(z), z)
            if y.size:
                f = predict(psi)
                g = error_sd_array(f, a, b, c, form)
                ok = np.all(np.isfinite(f), axis=1) & np.all(g > 0, axis=1)
                g_safe = np.where(g > 0, g, 1.0)
                ll = np.sum(
                    LOG_2PI + 2.0 * np.log(g_safe) + ((y[None, :] - f) / g_safe) ** 2,
                    axis=1,
                )
                ll = np.where(ok & np.isfinite(ll), ll, np.inf)
            else:
                ll = np.zeros(etas.shape[0])
                bad = ~np.all(np.isfinite(psi), axis=1)
                ll[bad] = np.inf
            if omega is not None and work.d:
                quad = np.einsum("ki,ij,kj->k", etas, omega.inv, etas)
                ll = ll + omega.logdet_2pi + quad
        return ll

    return h


# ---------------------------------------------------------------------------
# inner MAP problem (damped Newton with batched finite-difference stencil)
# ---------------------------------------------------------------------------

_FD_STEP = 1e-3
_LINE_FRACTIONS = np.array([1.0, 0.5, 0.25, 0.1, 0.03, 0.01])


def _stencil(eta: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Rows: center, +/-e_i, and the four corners per (i, j) pair."""
    d = eta.size
    rows = [eta]
    for i in range(d):
        step = np.zeros(d)
        step[i] = delta[i]
        rows.append(eta + step)
        rows.append(eta - step)
    for i in range(d):
        for j in range(i):
            si = np.zeros(d)
            sj = np.zeros(d)
            si[i] = delta[i]
            sj[j] = delta[j]
            rows.extend([eta + si + sj, eta + si - sj, eta - si + sj, eta - si - sj])
    return np.array(rows)


def _fd_derivatives(h, eta, delta):
    d = eta.size
    vals = h(_stencil(eta, delta))
    f0 = vals[0]
    grad = np.empty(d)
    hess = np.empty((d, d))
    for i in range(d):
        fp, fm = vals[1 + 2 * i], vals[2 + 2 * i]
        grad[i] = (fp - fm) / (2.0 * delta[i])
        hess[i, i] = (fp - 2.0 * f0 + fm) / delta[i] ** 2
    idx = 1 + 2 * d
    for i in range(d):
        for j in range(i):
            fpp, fpm, fmp, fmm = vals[idx : idx + 4]
            idx += 4
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (
                4.0 * delta[i] * delta[j]
            )
    return f0, grad, hess


def _nearest_pd(hess: np.ndarray) -> np.ndarray:
    """Clip eigenvalues so the returned matrix is symmetric PD."""
    sym = 0.5 * (hess + hess.T)
    vals, vecs = np.linalg.eigh(sym)
    floor = max(1e-10, 1e-10 * float(np.max(np.abs(vals), initial=1.0)))
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def _newton_map(
    h: Callable[[np.ndarray], np.ndarray],
    d: int,
    start: np.ndarray,
    tol: float,
    max_iter: int = 40,
) -> tuple[np.ndarray, np.ndarray, float, float, bool]:
    """Minimize h; returns (eta, hessian, value, grad_norm, converged)."""
    eta = np.asarray(start, dtype=float).copy()
    if d == 0:
        val = float(h(np.zeros((1, 0)))[0])
        return np.zeros(0), np.zeros((0, 0)), val, 0.0, True

    if not np.isfinite(h(eta[None, :])[0]):
        eta = np.zeros(d)

    f0 = grad = hess = None
    for _ in range(max_iter):
        delta = _FD_STEP * (1.0 + np.abs(eta))
        f0, grad, hess = _fd_derivatives(h, eta, delta)
        if not np.isfinite(f0):
            raise NonFiniteObjective("conditional objective non-finite at start")
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
            # stencil straddles an infeasible region; pull toward the prior mode
            eta = 0.5 * eta
            continue
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= tol:
            return eta, _nearest_pd(hess), float(f0), gnorm, True
        ridge = 0.0
        step = None
        for _ in range(6):
            try:
                cf = cho_factor(hess + ridge * np.eye(d), lower=True)
                step = -cho_solve(cf, grad)
                break
            except np.linalg.LinAlgError:
                ridge = max(2.0 * ridge, 1e-4 * (1.0 + float(np.max(np.abs(hess)))))
        if step is None or float(step @ grad) >= 0.0:
            step = -grad / max(1.0, gnorm)
        # the finite-difference gradient carries an O(delta^2) bias, so a
        # tiny expected Newton gain means the mode is already resolved
        if -0.5 * float(step @ grad) < 1e-10 * (1.0 + abs(f0)):
            return eta, _nearest_pd(hess), float(f0), gnorm, True
        cands = eta[None, :] + _LINE_FRACTIONS[:, None] * step[None, :]
        fc = h(cands)
        resolution = 1e-11 * (1.0 + abs(f0))
        better = np.where(np.isfinite(fc) & (fc < f0 - resolution))[0]
        if better.size == 0:
            # no resolvable descent along the Newton/gradient direction:
            # local optimum within finite-difference resolution
            return eta, _nearest_pd(hess), float(f0), gnorm, gnorm <= max(tol, 1e-4)
        eta = cands[better[0]]

    delta = _FD_STEP * (1.0 + np.abs(eta))
    f0, grad, hess = _fd_derivatives(h, eta, delta)
    gnorm = float(np.max(np.abs(grad))) if np.all(np.isfinite(grad)) else np.inf
    return eta, _nearest_pd(hess), float(f0), gnorm, gnorm <= max(tol, 1e-4)


def _map_full(
    spec: ModelSpec,
    theta: Mapping[str, float],
    work: _SubjectWork,
    omega: Optional[_OmegaState],
    inner_tolerance: float,
    multistart: int = 1,
    seed: int = 0,
    warm: Optional[np.ndarray] = None,
    strict: bool = True,
):
    """Best conditional mode over one or more starts."""
    d = work.d
    base = work.base(spec, resolve_theta(spec, dict(theta)))
    err = (theta["error_a"], theta["error_b"], theta["error_c"], spec.error.form)
    h = _make_h(work, base, err, omega)
    if d == 0:
        eta, hess, val, gn, _ = _newton_map(h, 0, np.zeros(0), inner_tolerance)
        if not math.isfinite(val):
            raise NonFiniteObjective(f"subject {work.subject.id}: non-finite likelihood")
        return eta, hess, val, h

    if work.n == 0:
        # prior mode, analytic curvature: hessian of h is 2 * inv(Omega)
        return np.zeros(d), 2.0 * omega.inv, omega.logdet_2pi, h

    h_z = omega.whiten_h(h)
    have_warm = warm is not None and np.all(np.isfinite(warm))
    starts = [omega.z_from_eta(np.asarray(warm, dtype=float)) if have_warm else np.zeros(d)]
    if have_warm and multistart > 1:
        starts.append(np.zeros(d))
    extra = multistart - len(starts)
    if extra > 0:
        rng = np.random.Generator(
            np.random.PCG64(derive_subject_seed(seed, work.subject.id))
        )
        for _ in range(extra):
            starts.append(rng.standard_normal(d))  # unit prior in z-space

    best = None
    for start in starts:
        try:
            z, hess_z, val, gnorm, conv = _newton_map(h_z, d, start, inner_tolerance)
        except NonFiniteObjective:
            continue
        if conv and (best is None or val < best[2]):
            best = (z, hess_z, val)
    if best is None:
        if strict:
            raise InnerNonConvergence(
                f"subject {work.subject.id}: inner solve failed to reach "
                f"gradient norm {inner_tolerance}"
            )
        # relaxed path used inside the outer search: best effort value
        z, hess_z, val, gnorm, conv = _newton_map(h_z, d, starts[0], inner_tolerance)
        if not math.isfinite(val):
            raise NonFiniteObjective(f"subject {work.subject.id}: non-finite likelihood")
        best = (z, hess_z, val)
    z, hess_z, val = best
    return omega.eta_from_z(z), _nearest_pd(omega.hess_from_z(hess_z)), val, h


def map_etas(
    spec: ModelSpec,
    theta: Mapping[str, float],
    subject: Subject,
    inner_tolerance: float = 1e-6,
    driver=None,
    multistart: int = 1,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mode of the random effects and Hessian of the
    conditional -2*log-joint at that mode."""
    theta = resolve_theta(spec, dict(theta))
    work = _SubjectWork(spec, subject, driver=driver)
    omega = _OmegaState(omega_covariance(spec, theta)) if work.d else None
    eta, hess, _, _ = _map_full(
        spec, theta, work, omega, inner_tolerance, multistart=multistart, seed=seed
    )
    return eta, hess


def _laplace_contribution(d: int, hess: np.ndarray, hval: float) -> float:
    """-2 log of the Laplace-approximate marginal for one subject.

    hess is the Hessian of the -2*log joint; the Gaussian integral uses
    half of it, giving hval + logdet((hess/2) / (2*pi)).
    """
    if d == 0:
        return hval
    chol = cholesky(hess / 2.0, lower=True)
    logdet_half = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return hval + logdet_half - d * LOG_2PI


def laplace_m2ll(
    spec: ModelSpec,
    theta: Mapping[str, float],
    dataset: Dataset,
    drivers: Optional[Mapping[str, Callable[[float], float]]] = None,
    inner_tolerance: float = 1e-6,
    multistart: int = 1,
    seed: int = 0,
) -> float:
    """Laplace approximation of the dataset's -2 log marginal likelihood."""
    theta = resolve_theta(spec, dict(theta))
    total = 0.0
    omega_ready = None
    for subject in dataset.subjects:
        work = _SubjectWork(
            spec, subject, driver=drivers.get(subject.id) if drivers else None
        )
        if work.d and omega_ready is None:
            omega_ready = _OmegaState(omega_covariance(spec, theta))
        eta, hess, hval, _ = _map_full(
            spec, theta, work, omega_ready if work.d else None, inner_tolerance,
            multistart=multistart, seed=seed,
        )
        total += _laplace_contribution(work.d, hess, hval)
    return total


def _mvt_logpdf(etas, loc, chol_cov, df):
    d = loc.size
    z = solve_triangular(chol_cov, (etas - loc[None, :]).T, lower=True)
    m = np.sum(z * z, axis=0)
    const = (
        gammaln((df + d) / 2.0)
        - gammaln(df / 2.0)
        - 0.5 * d * math.log(df * math.pi)
        - float(np.sum(np.log(np.diag(chol_cov))))
    )
    return const - 0.5 * (df + d) * np.log1p(m / df)


def _is_subject(h, d, eta, hess, rng, n_samples, df=5):
    """Importance-sample -2 log marginal; returns (value, mc standard error)."""
    if d == 0:
        return float(h(np.zeros((1, 0)))[0]), 0.0
    cov = np.linalg.inv(hess / 2.0)
    chol_cov = cholesky(0.5 * (cov + cov.T) + 1e-12 * np.eye(d), lower=True)
    u = rng.standard_normal((n_samples, d))
    w = rng.chisquare(df, n_samples)
    etas = eta[None, :] + (u * np.sqrt(df / w)[:, None]) @ chol_cov.T
    log_w = -0.5 * h(etas) - _mvt_logpdf(etas, eta, chol_cov, df)
    finite = np.isfinite(log_w)
    if not np.any(finite):
        raise DegenerateWeights("all importance weights vanished")
    log_w = np.where(finite, log_w, -np.inf)
    a_max = float(np.max(log_w))
    wt = np.exp(log_w - a_max)
    s = float(np.sum(wt))
    ess = s * s / float(np.sum(wt * wt))
    if ess < 10.0:
        raise DegenerateWeights(f"effective sample size {ess:.2f} < 10")
    log_m = a_max + math.log(s / n_samples)
    se_log_m = float(np.std(wt)) / (math.sqrt(n_samples) * s / n_samples)
    return -2.0 * log_m, 2.0 * se_log_m


def importance_sampling_m2ll(
    spec: ModelSpec,
    theta: Mapping[str, float],
    dataset: Dataset,
    is_samples: int,
    seed: int,
    drivers: Optional[Mapping[str, Callable[[float], float]]] = None,
    inner_tolerance: float = 1e-6,
    df: int = 5,
) -> tuple[float, float]:
    """Self-normalized importance-sampling estimate of -2LL and its MC SE.

    The proposal is a Student-t (df=5) centered at each subject's
    conditional mode with the Laplace covariance; per-subject seeds are
    derived from the subject id so the estimate is additive over
    subjects and deterministic given the seed.
    """
    theta = resolve_theta(spec, dict(theta))
    total = 0.0
    var = 0.0
    omega_ready = None
    for subject in dataset.subjects:
        work = _SubjectWork(
            spec, subject, driver=drivers.get(subject.id) if drivers else None
        )
        if work.d and omega_ready is None:
            omega_ready = _OmegaState(omega_covariance(spec, theta))
        eta, hess, hval, h = _map_full(
            spec, theta, work, omega_ready if work.d else None, inner_tolerance
        )
        rng = np.random.Generator(
            np.random.PCG64(derive_subject_seed(seed, subject.id))
        )
        value, se = _is_subject(h, work.d, eta, hess, rng, is_samples, df=df)
        total += value
        var += se * se
    return total, math.sqrt(var)


# ---------------------------------------------------------------------------
# packing the population parameter vector
# ---------------------------------------------------------------------------

def _corr_to_angles(corr: np.ndarray) -> list[float]:
    k = corr.shape[0]
    lo = cholesky(corr, lower=True)
    angles = []
    for i in range(1, k):
        prod = 1.0
        for j in range(i):
            val = lo[i, j] / prod if prod > 1e-300 else 0.0
            phi = math.acos(min(1.0, max(-1.0, val)))
            angles.append(phi)
            prod *= math.sin(phi)
    return angles


def _angles_to_corr(angles: Sequence[float], k: int) -> np.ndarray:
    lo = np.zeros((k, k))
    lo[0, 0] = 1.0
    idx = 0
    for i in range(1, k):
        prod = 1.0
        for j in range(i):
            phi = angles[idx]
            idx += 1
            lo[i, j] = math.cos(phi) * prod
            prod *= math.sin(phi)
        lo[i, i] = prod
    return lo @ lo.T


def _phi_to_x(phi: float) -> float:
    p = min(max(phi / math.pi, 1e-12), 1.0 - 1e-12)
    return math.log(p / (1.0 - p))


def _x_to_phi(x: float) -> float:
    return math.pi / (1.0 + math.exp(-x))


class _Packer:
    """Bijection between estimated scalars (natural space, keyed by name)
    and the unconstrained optimization vector."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.scalar_entries: list[tuple[str, str]] = []  # (key, "log" | "id")
        for p in spec.parameters:
            if not p.fixed:
                self.scalar_entries.append(
                    (p.name, "log" if p.distribution == "lognormal" else "id")
                )
            for eff in p.covariate_effects:
                self.scalar_entries.append((f"beta_{p.name}_{eff.tag}", "id"))
        for e in spec.omega.entries:
            if not e.fixed:
                self.scalar_entries.append((f"omega_{e.name}", "log"))
        if spec.error.estimate_a:
            self.scalar_entries.append(("error_a", "log"))
        if spec.error.estimate_b:
            self.scalar_entries.append(("error_b", "log"))
        if spec.error.estimate_c:
            self.scalar_entries.append(("error_c", "log"))
        self.blocks = spec.omega.blocks

    @property
    def keys(self) -> list[str]:
        out = [k for k, _ in self.scalar_entries]
        for block in self.blocks:
            out.extend(block.pair_keys())
        return out

    @property
    def size(self) -> int:
        return len(self.scalar_entries) + sum(len(b.rhos) for b in self.blocks)

    def pack(self, theta: Mapping[str, float]) -> np.ndarray:
        x = []
        for key, kind in self.scalar_entries:
            v = theta[key]
            x.append(math.log(v) if kind == "log" else v)
        for block in self.blocks:
            k = len(block.names)
            corr = np.eye(k)
            idx = 0
            for i in range(1, k):
                for j in range(i):
                    corr[i, j] = corr[j, i] = theta[block.pair_keys()[idx]]
                    idx += 1
            x.extend(_phi_to_x(phi) for phi in _corr_to_angles(corr))
        return np.array(x)

    def unpack(self, x: np.ndarray) -> dict[str, float]:
        theta: dict[str, float] = {}
        i = 0
        for key, kind in self.scalar_entries:
            theta[key] = math.exp(x[i]) if kind == "log" else float(x[i])
            i += 1
        for block in self.blocks:
            k = len(block.names)
            m = k * (k - 1) // 2
            corr = _angles_to_corr([_x_to_phi(v) for v in x[i : i + m]], k)
            i += m
            idx = 0
            for bi in range(1, k):
                for bj in range(bi):
                    theta[block.pair_keys()[idx]] = float(corr[bi, bj])
                    idx += 1
        return theta


def default_initial_values(
    spec: ModelSpec, dataset: Dataset
) -> dict[str, float]:
    """Conventional starting point: config pop values, betas 0, omega
    sds 0.3, correlations 0, proportional error 0.1, additive error at
    10% of the observation spread."""
    init: dict[str, float] = {}
    for p in spec.parameters:
        if not p.fixed:
            init[p.name] = p.pop_value
        for eff in p.covariate_effects:
            init[f"beta_{p.name}_{eff.tag}"] = 0.0
    for e in spec.omega.entries:
        if not e.fixed:
            init[f"omega_{e.name}"] = 0.3
    for block in spec.omega.blocks:
        for key in block.pair_keys():
            init[key] = 0.0
    if spec.error.estimate_a or spec.error.estimate_b or spec.error.estimate_c:
        values = [
            o.value
            for s in dataset.subjects
            for o in s.observations_for(spec.channel)
        ]
        sd = float(np.std(values)) if len(values) > 1 else 0.0
        if spec.error.estimate_a:
            init["error_a"] = 0.1 * sd if sd > 0 else 0.1
        if spec.error.estimate_b:
            init["error_b"] = 0.1
        if spec.error.estimate_c:
            init["error_c"] = 1.0
    return init


# ---------------------------------------------------------------------------
# synchronized inner solves for the outer search
#
# All subjects advance through damped-Newton sweeps together; subjects
# sharing a sampling design (same observation times and doses) are
# stacked into one batched prediction call, which removes almost all
# per-subject Python overhead from the hot loop.
# ---------------------------------------------------------------------------

def _stencil_offsets(d: int) -> np.ndarray:
    """Unit offset rows: center, +/-e_i, then (+-e_i +-e_j) per pair."""
    rows = [np.zeros(d)]
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        rows.append(e)
        rows.append(-e)
    for i in range(d):
        for j in range(i):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = 1.0
            ej[j] = 1.0
            rows.extend([ei + ej, ei - ej, -ei + ej, -ei - ej])
    return np.array(rows)


def _batch_derivatives(vals: np.ndarray, deltas: np.ndarray, d: int):
    """Gradients/Hessians from stencil values; vals (S, m), deltas (S, d)."""
    f0 = vals[:, 0]
    grad = np.empty((vals.shape[0], d))
    hess = np.empty((vals.shape[0], d, d))
    for i in range(d):
        fp, fm = vals[:, 1 + 2 * i], vals[:, 2 + 2 * i]
        grad[:, i] = (fp - fm) / (2.0 * deltas[:, i])
        hess[:, i, i] = (fp - 2.0 * f0 + fm) / deltas[:, i] ** 2
    idx = 1 + 2 * d
    for i in range(d):
        for j in range(i):
            fpp, fpm, fmp, fmm = (vals[:, idx + k] for k in range(4))
            idx += 4
            hij = (fpp - fpm - fmp + fmm) / (4.0 * deltas[:, i] * deltas[:, j])
            hess[:, i, j] = hess[:, j, i] = hij
    return f0, grad, hess


_SYNC_LINE_FRACTIONS = np.array([1.0, 0.5, 0.2, 0.05, 0.01])


class _DesignGroup:
    """Subjects whose likelihood shares one batched prediction call."""

    def __init__(self, works: list[tuple[int, _SubjectWork]]):
        self.slots = [i for i, _ in works]
        self.works = [w for _, w in works]
        self.predict = self.works[0].predict
        self.y = np.stack([w.y for w in self.works])  # (S, n)
        self.size = len(self.works)
        self.n = self.works[0].n

    def make_h(self, spec, theta, omega):
        bases = np.stack([w.base(spec, theta) for w in self.works])  # (S, p)
        logmask = self.works[0].logmask
        M = self.works[0].M
        a, b, c = theta["error_a"], theta["error_b"], theta["error_c"]
        form = spec.error.form
        y = self.y
        predict = self.predict
        n = self.n

        def h(etas: np.ndarray, rows: Optional[np.ndarray] = None) -> np.ndarray:
            """etas (S, K, d) -> h values (S, K); rows selects subjects."""
            s, k, d = etas.shape
            base_s = bases if rows is None else bases[rows]
            y_s = y if rows is None else y[rows]
            with np.errstate(over="ignore", under="ignore", invalid="ignore"):
                z = base_s[:, None, :] + (etas @ M if d else 0.0)
                psi = np.where(logmask[None, None, :], np.exp(z), z)
                f = predict(psi.reshape(s * k, -1)).reshape(s, k, n)
                g = error_sd_array(f, a, b, c, form)
                ok = np.all(np.isfinite(f), axis=2) & np.all(g > 0, axis=2)
                g = np.where(g > 0, g, 1.0)
                ll = np.sum(
                    LOG_2PI + 2.0 * np.log(g) + ((y_s[:, None, :] - f) / g) ** 2,
                    axis=2,
                )
                ll = np.where(ok & np.isfinite(ll), ll, np.inf)
                if omega is not None and d:
                    ll = ll + omega.logdet_2pi + np.einsum(
                        "skd,de,ske->sk", etas, omega.inv, etas
                    )
            return ll

        return h


class _GroupedObjective:
    """Laplace -2LL over a dataset, evaluated with synchronized inner
    Newton sweeps; carries warm-start etas between evaluations."""

    def __init__(self, spec: ModelSpec, works: Sequence[_SubjectWork],
                 inner_tolerance: float, max_sweeps: int = 40):
        self.spec = spec
        self.d = spec.n_eta
        self.tol = inner_tolerance
        self.max_sweeps = max_sweeps
        # zero-observation subjects contribute exactly 0 for every theta
        active = [(i, w) for i, w in enumerate(works) if w.n > 0]
        by_key: dict = {}
        for i, w in active:
            by_key.setdefault(self._key(w), []).append((i, w))
        self.groups = [_DesignGroup(v) for v in by_key.values()]
        self.warm = {i: np.zeros(self.d) for i, _ in active}
        self.offsets = _stencil_offsets(self.d) if self.d else None

    def _key(self, work: _SubjectWork):
        # drivers are per-subject, so turnover models cannot share calls
        if self.spec.kind is StructuralKind.IRM:
            return ("solo", work.subject.id)
        times = tuple(
            float(o.time)
            for o in work.subject.observations_for(self.spec.channel)
        )
        doses = tuple((d.time, d.amount) for d in work.subject.doses)
        return (times, doses)

    def __call__(self, theta: Mapping[str, float], omega: Optional[_OmegaState]) -> float:
        d = self.d
        total = 0.0
        for group in self.groups:
            h = group.make_h(self.spec, theta, omega)
            if d == 0:
                vals = h(np.zeros((group.size, 1, 0)))[:, 0]
                if not np.all(np.isfinite(vals)):
                    return np.inf
                total += float(np.sum(vals))
                continue
            h_z = omega.whiten_h(h)
            zs = omega.z_from_eta(np.stack([self.warm[i] for i in group.slots]))
            zs, hvals, hess_z, ok = self._solve_group(h_z, zs)
            if not ok:
                return np.inf
            etas = omega.eta_from_z(zs)
            for row, slot in enumerate(group.slots):
                self.warm[slot] = etas[row]
            # -2 log marginal per subject: h + logdet((H_eta/2) / (2 pi));
            # in whitened coordinates logdet(H_eta) = logdet(H_z) - 2 log|L|
            try:
                chols = np.linalg.cholesky(hess_z / 2.0)
                logdets = 2.0 * np.sum(
                    np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1
                )
            except np.linalg.LinAlgError:
                logdets = np.empty(group.size)
                for row in range(group.size):
                    fixed = _nearest_pd(hess_z[row]) / 2.0
                    logdets[row] = 2.0 * float(
                        np.sum(np.log(np.diag(cholesky(fixed, lower=True))))
                    )
            contribution = float(
                np.sum(hvals + logdets - 2.0 * omega.sum_log_diag - d * LOG_2PI)
            )
            if not math.isfinite(contribution):
                return np.inf
            total += contribution
        return total

    def _solve_group(self, h, etas):
        d = self.d
        s = etas.shape[0]
        done = np.zeros(s, dtype=bool)
        out_h = np.full(s, np.inf)
        out_hess = np.zeros((s, d, d))
        eye = np.eye(d)
        for _ in range(self.max_sweeps):
            idx = np.where(~done)[0]
            if idx.size == 0:
                break
            cur = etas[idx]
            deltas = _FD_STEP * (1.0 + np.abs(cur))
            stencil = cur[:, None, :] + self.offsets[None, :, :] * deltas[:, None, :]
            vals = h(stencil, idx)
            f0, grad, hess = _batch_derivatives(vals, deltas, d)
            finite = (
                np.isfinite(f0)
                & np.all(np.isfinite(grad), axis=1)
                & np.all(np.isfinite(hess), axis=(1, 2))
            )
            if not np.all(finite):
                bad_global = idx[~finite]
                # infeasible stencil: pull toward the prior mode and retry,
                # unless already there (then the objective is infeasible)
                stuck = np.all(np.abs(etas[bad_global]) < 1e-8, axis=1)
                if np.any(stuck & ~np.isfinite(f0[~finite])):
                    return etas, out_h, out_hess, False
                etas[bad_global] *= 0.5
                idx = idx[finite]
                if idx.size == 0:
                    continue
                f0, grad, hess = f0[finite], grad[finite], hess[finite]
                cur = etas[idx]
            gnorm = np.max(np.abs(grad), axis=1)
            conv = gnorm <= self.tol
            if np.any(conv):
                g_idx = idx[conv]
                done[g_idx] = True
                out_h[g_idx] = f0[conv]
                out_hess[g_idx] = hess[conv]
            rem = ~conv
            idx = idx[rem]
            if idx.size == 0:
                continue
            f0r, gradr, hessr = f0[rem], grad[rem], hess[rem]
            ridge = 1e-9 * (1.0 + np.abs(hessr).max(axis=(1, 2)))
            step = None
            for _ in range(6):
                try:
                    step = np.linalg.solve(
                        hessr + ridge[:, None, None] * eye[None], -gradr[..., None]
                    )[..., 0]
                    break
                except np.linalg.LinAlgError:
                    ridge = ridge * 100.0 + 1e-4
            if step is None:
                step = -gradr
            descent = np.einsum("ad,ad->a", step, gradr) < 0
            norm = np.maximum(np.max(np.abs(gradr), axis=1), 1.0)
            step = np.where(descent[:, None], step, -gradr / norm[:, None])
            # expected Newton gain below objective resolution: mode reached
            # within finite-difference accuracy
            expected = -0.5 * np.einsum("ad,ad->a", step, gradr)
            resolved = expected < 1e-10 * (1.0 + np.abs(f0r))
            if np.any(resolved):
                r_idx = idx[resolved]
                done[r_idx] = True
                out_h[r_idx] = f0r[resolved]
                out_hess[r_idx] = hessr[resolved]
                keep = ~resolved
                idx = idx[keep]
                if idx.size == 0:
                    continue
                f0r, gradr, hessr, step = f0r[keep], gradr[keep], hessr[keep], step[keep]
            cands = etas[idx][:, None, :] + _SYNC_LINE_FRACTIONS[None, :, None] * step[:, None, :]
            fc = h(cands, idx)
            resolution = 1e-11 * (1.0 + np.abs(f0r))
            improving = np.isfinite(fc) & (fc < (f0r - resolution)[:, None])
            any_improve = np.any(improving, axis=1)
            pick = np.argmax(improving, axis=1)
            # stalled subjects: local optimum at finite-difference resolution
            stalled = idx[~any_improve]
            if stalled.size:
                sel = ~any_improve
                done[stalled] = True
                out_h[stalled] = f0r[sel]
                out_hess[stalled] = hessr[sel]
            moved = idx[any_improve]
            etas[moved] = cands[any_improve, pick[any_improve]]
        # sweeps exhausted: freeze whatever is left at its current value
        idx = np.where(~done)[0]
        if idx.size:
            cur = etas[idx]
            deltas = _FD_STEP * (1.0 + np.abs(cur))
            stencil = cur[:, None, :] + self.offsets[None, :, :] * deltas[:, None, :]
            f0, grad, hess = _batch_derivatives(h(stencil, idx), deltas, d)
            out_h[idx] = f0
            out_hess[idx] = hess
        if not np.all(np.isfinite(out_h)):
            return etas, out_h, out_hess, False
        return etas, out_h, out_hess, True


# ---------------------------------------------------------------------------
# population fit and fixed-parameter evaluation
# ---------------------------------------------------------------------------

_MAX_RESTART_ROUNDS = 8


def fit_population(
    spec: ModelSpec,
    dataset: Dataset,
    options: FitOptions,
    drivers: Optional[Mapping[str, Callable[[float], float]]] = None,
    initial: Optional[Mapping[str, float]] = None,
) -> FitResult:
    """Maximize the Laplace-approximate marginal likelihood over the
    transformed parameter vector with a restarted Nelder-Mead search."""
    works = [
        _SubjectWork(spec, s, driver=drivers.get(s.id) if drivers else None)
        for s in dataset.subjects
    ]
    packer = _Packer(spec)
    init = default_initial_values(spec, dataset)
    if initial:
        unknown = set(initial) - set(init)
        if unknown:
            raise ValueError(f"initial values for unknown/fixed scalars: {sorted(unknown)}")
        init.update(initial)
    x0 = packer.pack(init)
    d = spec.n_eta
    grouped = _GroupedObjective(spec, works, options.inner_tolerance)
    memo: dict[bytes, float] = {}
    trace: list[float] = []

    def objective(x: np.ndarray) -> float:
        theta = resolve_theta(spec, packer.unpack(x))
        try:
            omega = _OmegaState(omega_covariance(spec, theta)) if d else None
            total = grouped(theta, omega)
        except (NonFiniteObjective, np.linalg.LinAlgError):
            return np.inf
        memo[x.tobytes()] = total
        return total

    if not math.isfinite(objective(x0)):
        raise NonFiniteObjective("objective is non-finite at the initial values")

    def on_iteration(xk):
        val = memo.get(np.asarray(xk).tobytes())
        if val is not None:
            trace.append(val)

    x_best = x0
    f_best = np.inf
    converged = False
    remaining = options.outer_max_iters
    for round_idx in range(_MAX_RESTART_ROUNDS):
        if remaining <= 0:
            break
        # NM's default simplex hardly moves zero-valued coordinates
        # (error exponent, covariate betas start at 0 in transformed
        # space); seed every coordinate with a useful spread instead
        step = 0.25 if round_idx == 0 else 0.05
        simplex = np.vstack([x_best, x_best + step * np.eye(x_best.size)])
        res = minimize(
            objective,
            x_best,
            method="Nelder-Mead",
            callback=on_iteration,
            options={
                "maxiter": remaining,
                "xatol": 1e-6,
                "fatol": 0.1 * options.outer_tolerance,
                "adaptive": True,
                "initial_simplex": simplex,
            },
        )
        remaining -= res.nit
        improved = f_best - res.fun
        if res.fun <= f_best:
            x_best, f_best = res.x, float(res.fun)
        if improved < options.outer_tolerance * max(1.0, abs(f_best)):
            converged = True
            break
    if not converged:
        warnings.warn(
            f"{spec.label}: outer search not converged within "
            f"{options.outer_max_iters} iterations",
            OuterNonConvergence,
        )

    theta_hat = packer.unpack(x_best)
    full = resolve_theta(spec, theta_hat)
    omega = _OmegaState(omega_covariance(spec, full)) if d else None
    ebes: dict[str, tuple[float, ...]] = {}
    contributions = 0.0
    for i, work in enumerate(works):
        eta, hess, hval, _ = _map_full(
            spec, full, work, omega if work.d else None, options.inner_tolerance,
            multistart=options.multistart_count, seed=options.seed,
            warm=grouped.warm.get(i),
        )
        ebes[work.subject.id] = tuple(float(v) for v in eta)
        contributions += _laplace_contribution(work.d, hess, hval)

    mc_se = 0.0
    if options.ll_mode is LlMode.IMPORTANCE:
        minus2ll, mc_se = importance_sampling_m2ll(
            spec, full, dataset, options.is_samples, options.seed,
            drivers=drivers, inner_tolerance=options.inner_tolerance,
        )
    else:
        minus2ll = contributions

    return FitResult(
        theta_hat=theta_hat,
        minus2ll=float(minus2ll),
        ebes=ebes,
        converged=converged,
        n_obs=dataset.n_observations(spec.channel),
        p_count=spec.p_count,
        mode=options.ll_mode.value,
        seed=options.seed,
        mc_se=mc_se,
        objective_trace=tuple(trace),
    )


def evaluate_fixed(
    spec: ModelSpec,
    theta: Mapping[str, float],
    dataset: Dataset,
    options: FitOptions,
    drivers: Optional[Mapping[str, Callable[[float], float]]] = None,
) -> TestEvaluation:
    """Evaluate a dataset under fixed population parameters.

    No population updates happen: per-subject conditional modes are
    freshly computed, predictions and error sds are returned aligned
    with each subject's channel observations, and -2LL is computed in
    the requested mode. Subjects whose inner solve fails are excluded
    and reported.
    """
    theta = dict(theta)  # defensive copy; caller's mapping is never touched
    full = resolve_theta(spec, theta)
    omega = None
    total = 0.0
    var = 0.0
    ebes: dict[str, tuple[float, ...]] = {}
    ipred: dict[str, tuple[float, ...]] = {}
    gpred: dict[str, tuple[float, ...]] = {}
    order: list[str] = []
    failed: list[str] = []
    n_obs = 0
    for subject in dataset.subjects:
        try:
            work = _SubjectWork(
                spec, subject, driver=drivers.get(subject.id) if drivers else None
            )
            if work.d and omega is None:
                omega = _OmegaState(omega_covariance(spec, full))
            eta, hess, hval, h = _map_full(
                spec, full, work, omega if work.d else None,
                options.inner_tolerance, multistart=options.multistart_count,
                seed=options.seed,
            )
            if options.ll_mode is LlMode.IMPORTANCE:
                rng = np.random.Generator(
                    np.random.PCG64(derive_subject_seed(options.seed, subject.id))
                )
                value, se = _is_subject(h, work.d, eta, hess, rng, options.is_samples)
                var += se * se
            else:
                value = _laplace_contribution(work.d, hess, hval)
            base = work.base(spec, full)
            with np.errstate(over="ignore", under="ignore"):
                z = base[None, :] + (eta[None, :] @ work.M if work.d else 0.0)
                psi = np.where(work.logmask[None, :], np.exp(z), z)
                f = work.predict(psi)[0] if work.n else np.empty(0)
                g = error_sd_array(
                    f, full["error_a"], full["error_b"], full["error_c"],
                    spec.error.form,
                )
        except (InnerNonConvergence, NonFiniteObjective, DegenerateWeights,
                np.linalg.LinAlgError) as exc:
            failed.append(subject.id)
            warnings.warn(f"{spec.label}: subject {subject.id} excluded: {exc}")
            continue
        total += value
        ebes[subject.id] = tuple(float(v) for v in eta)
        ipred[subject.id] = tuple(float(v) for v in f)
        gpred[subject.id] = tuple(float(v) for v in g)
        order.append(subject.id)
        n_obs += work.n
    return TestEvaluation(
        minus2ll=float(total),
        ebes=ebes,
        ipred=ipred,
        gpred=gpred,
        n_obs=n_obs,
        order=tuple(order),
        failed_subjects=tuple(failed),
        mode=options.ll_mode.value,
        seed=options.seed,
        mc_se=math.sqrt(var),
    )


def sample_conditional(
    spec: ModelSpec,
    theta: Mapping[str, float],
    subject: Subject,
    ndraws: int,
    seed: int,
    driver=None,
    burn: int = 250,
    thin: int = 5,
    inner_tolerance: float = 1e-6,
) -> np.ndarray:
    """Draws from the conditional distribution of eta given the data.

    Random-walk Metropolis targeting exp(-h/2), initialized at the
    conditional mode with steps scaled by the Laplace covariance.
    """
    full = resolve_theta(spec, dict(theta))
    work = _SubjectWork(spec, subject, driver=driver)
    d = work.d
    if d == 0:
        return np.zeros((ndraws, 0))
    omega = _OmegaState(omega_covariance(spec, full))
    eta, hess, hval, h = _map_full(spec, full, work, omega, inner_tolerance)
    cov = np.linalg.inv(hess / 2.0)
    chol_cov = cholesky(0.5 * (cov + cov.T) + 1e-12 * np.eye(d), lower=True)
    scale = 2.38 / math.sqrt(d)
    rng = np.random.Generator(np.random.PCG64(seed))

    current = eta.copy()
    h_cur = float(h(current[None, :])[0])
    draws = np.empty((ndraws, d))
    n_total = burn + thin * ndraws
    accepted = 0
    k = 0
    for step in range(n_total):
        prop = current + scale * (chol_cov @ rng.standard_normal(d))
        h_prop = float(h(prop[None, :])[0])
        if math.log(rng.uniform()) < 0.5 * (h_cur - h_prop):
            current = prop
            h_cur = h_prop
            accepted += 1
        if step >= burn and (step - burn) % thin == thin - 1:
            draws[k] = current
            k += 1
    if accepted < 0.01 * n_total:
        raise ChainStuck(
            f"subject {subject.id}: acceptance rate {accepted / n_total:.4f} < 1%"
        )
    return draws


def sequential_pd_prepare(
    pk_fit: FitResult,
    pk_spec: ModelSpec,
    dataset: Dataset,
) -> dict[str, Callable[[float], float]]:
    """Frozen individual concentration drivers for sequential PD fitting.

    Each subject's driver is the closed-form curve at its own PK
    parameters (population estimates, covariates, conditional mode).
    Bootstrap copies resolve through their origin id.
    """
    drivers: dict[str, Callable[[float], float]] = {}
    for subject in dataset.subjects:
        key = subject.origin_id
        if key not in pk_fit.ebes:
            raise MissingSubjectEbes(
                f"subject {key!r} missing from the PK fit's conditional modes"
            )
        eta = np.array(pk_fit.ebes[key], dtype=float)
        psi = individual_parameters(pk_spec, pk_fit.theta_hat, subject.covariates, eta)
        drivers[subject.id] = concentration_curve(pk_spec, psi, subject)
    return drivers
