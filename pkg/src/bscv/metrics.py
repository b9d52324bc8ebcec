"""Summary statistics computed per dataset role (original/training/testing).

Nine statistics form the comparison basis: -2LL, AIC, BIC, RSS, RMSE,
SAD, MAD, SMPQ and epsilon-shrinkage (the last in an EBE-based and a
simulation-based variant). All residual statistics use individual
predictions; logs are natural throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import Dataset
from .estimate import _SubjectWork, TestEvaluation, derive_subject_seed, sample_conditional
from .modelspec import ModelSpec, error_sd_array, resolve_theta

R2_CLAMP = 1.0 - 1e-12


class EmptyVectors(ValueError):
    pass


class DegenerateVectors(ValueError):
    pass


class NonPositiveWeight(ValueError):
    pass


class TooFewResiduals(ValueError):
    pass


def residual_metrics(obs: Sequence[float], ipred: Sequence[float]):
    """(rss, rmse, sad, mad); mad is the median absolute residual."""
    y = np.asarray(obs, dtype=float)
    f = np.asarray(ipred, dtype=float)
    if y.size == 0 or y.shape != f.shape:
        raise EmptyVectors(f"need equal non-empty vectors, got {y.shape} vs {f.shape}")
    r = y - f
    rss = float(np.sum(r * r))
    rmse = math.sqrt(rss / y.size)
    sad = float(np.sum(np.abs(r)))
    mad = float(np.median(np.abs(r)))
    return rss, rmse, sad, mad


def zero_intercept_r2(obs: Sequence[float], ipred: Sequence[float]) -> float:
    """Uncentered r^2 of the through-origin observed-vs-predicted fit,
    clamped into [0, 1 - 1e-12]."""
    y = np.asarray(obs, dtype=float)
    f = np.asarray(ipred, dtype=float)
    if y.size < 2 or y.shape != f.shape:
        raise EmptyVectors(f"need equal vectors of length >= 2, got {y.shape} vs {f.shape}")
    sy = float(np.dot(y, y))
    sf = float(np.dot(f, f))
    if sy == 0.0 or sf == 0.0:
        raise DegenerateVectors("all-zero vector in through-origin fit")
    r2 = float(np.dot(y, f)) ** 2 / (sy * sf)
    return min(max(r2, 0.0), R2_CLAMP)


def smpq(r2: float) -> float:
    """Simple metric for prediction quality: -log(1 - r^2)."""
    if not (0.0 <= r2 < 1.0):
        raise ValueError(f"r2 must lie in [0, 1), got {r2}")
    return -math.log1p(-r2)


def iwres(obs: Sequence[float], ipred: Sequence[float], gpred: Sequence[float]) -> np.ndarray:
    """Individual weighted residuals (y - yhat) / sd."""
    y = np.asarray(obs, dtype=float)
    f = np.asarray(ipred, dtype=float)
    g = np.asarray(gpred, dtype=float)
    if y.shape != f.shape or y.shape != g.shape:
        raise EmptyVectors("obs, ipred and gpred must have identical shapes")
    if np.any(g <= 0):
        raise NonPositiveWeight("all prediction sds must be > 0")
    return (y - f) / g


def eps_shrinkage(values: Sequence[float]) -> float:
    """1 - sample standard deviation of the weighted residuals.

    Near 0 for rich data; positive when residuals shrink, negative when
    their spread exceeds the error model.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise TooFewResiduals(f"need >= 2 residuals, got {v.size}")
    return 1.0 - float(np.std(v, ddof=1))


def eps_shrinkage_sim(
    spec: ModelSpec,
    theta: Mapping[str, float],
    dataset: Dataset,
    ndraws: int,
    seed: int,
    drivers=None,
) -> float:
    """Shrinkage from conditional draws instead of the conditional mode.

    For every subject, eta is sampled from its conditional distribution;
    weighted residuals at each draw are pooled across draws and subjects
    before taking 1 - SD.
    """
    full = resolve_theta(spec, dict(theta))
    pooled: list[np.ndarray] = []
    for subject in dataset.subjects:
        driver = drivers.get(subject.id) if drivers else None
        work = _SubjectWork(spec, subject, driver=driver)
        if work.n == 0:
            continue
        draws = sample_conditional(
            spec, full, subject, ndraws, derive_subject_seed(seed, subject.id),
            driver=driver,
        )
        if work.d == 0:
            draws = draws[:1]  # conditional distribution is a point mass
        base = work.base(spec, full)
        z = base[None, :] + draws @ work.M
        psi = np.where(work.logmask[None, :], np.exp(z), z)
        f = work.predict(psi)
        g = error_sd_array(f, full["error_a"], full["error_b"], full["error_c"], spec.error.form)
        pooled.append(((work.y[None, :] - f) / g).ravel())
    if not pooled:
        raise TooFewResiduals("no observations on the spec's channel")
    return eps_shrinkage(np.concatenate(pooled))


@dataclass
class MetricSet:
    minus2ll: float
    aic: float
    bic: float
    rss: float
    rmse: float
    sad: float
    mad: float
    smpq: float
    eps_shrink_ebe: float
    eps_shrink_sim: Optional[float]
    n_obs: int
    p_count: int

    def to_dict(self) -> dict:
        return {
            "minus2ll": self.minus2ll,
            "aic": self.aic,
            "bic": self.bic,
            "rss": self.rss,
            "rmse": self.rmse,
            "sad": self.sad,
            "mad": self.mad,
            "smpq": self.smpq,
            "eps_shrink_ebe": self.eps_shrink_ebe,
            "eps_shrink_sim": self.eps_shrink_sim,
            "n_obs": self.n_obs,
            "p_count": self.p_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricSet":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def assemble_metric_set(
    record: TestEvaluation,
    obs: Sequence[float],
    spec: ModelSpec,
    eps_shrink_sim: Optional[float] = None,
) -> MetricSet:
    """Populate every statistic from an evaluation's predictions.

    AIC = -2LL + 2p and BIC = -2LL + ln(n_obs) * p with p the number of
    estimated scalars.
    """
    y = np.asarray(obs, dtype=float)
    f = record.ipred_flat()
    g = record.gpred_flat()
    rss, rmse, sad, mad = residual_metrics(y, f)
    r2 = zero_intercept_r2(y, f)
    p = spec.p_count
    return MetricSet(
        minus2ll=record.minus2ll,
        aic=record.minus2ll + 2.0 * p,
        bic=record.minus2ll + math.log(record.n_obs) * p,
        rss=rss,
        rmse=rmse,
        sad=sad,
        mad=mad,
        smpq=smpq(r2),
        eps_shrink_ebe=eps_shrinkage(iwres(y, f, g)),
        eps_shrink_sim=eps_shrink_sim,
        n_obs=record.n_obs,
        p_count=p,
    )
