"""Structural models: closed-form compartmental PK and turnover PD.

PK curves are the standard oral first-order absorption solutions (one
compartment with optional lag, two compartments via macro constants).
PD is the indirect-response family: a turnover equation whose input or
output rate is modulated by concentration through a sigmoid factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import odesolve

ArrayLike = Union[float, np.ndarray]

# relative |ka - ke| below which the one-compartment formula switches to
# its analytic limit (avoids catastrophic cancellation)
RATE_COLLISION_RTOL = 1e-8


class DegenerateRates(ValueError):
    pass


def _require_positive(**kwargs: float) -> None:
    for name, value in kwargs.items():
        if not (math.isfinite(value) and value > 0):
            raise ValueError(f"{name} must be finite and > 0, got {value}")


@dataclass(frozen=True)
class Pk1Params:
    ka: float
    V: float
    Cl: float
    tlag: float = 0.0

    def __post_init__(self):
        _require_positive(ka=self.ka, V=self.V, Cl=self.Cl)
        if not (math.isfinite(self.tlag) and self.tlag >= 0):
            raise ValueError(f"tlag must be >= 0, got {self.tlag}")

    @property
    def ke(self) -> float:
        return self.Cl / self.V


@dataclass(frozen=True)
class Pk2Params:
    ka: float
    Cl: float
    V1: float
    Q: float
    V2: float
    tlag: float = 0.0

    def __post_init__(self):
        _require_positive(ka=self.ka, Cl=self.Cl, V1=self.V1, Q=self.Q, V2=self.V2)
        if not (math.isfinite(self.tlag) and self.tlag >= 0):
            raise ValueError(f"tlag must be >= 0, got {self.tlag}")


@dataclass(frozen=True)
class MacroConstants:
    """Biexponential disposition constants (alpha >= beta > 0)."""

    alpha: float
    beta: float
    A: float
    B: float

    def __post_init__(self):
        if not (self.alpha >= self.beta > 0):
            raise ValueError(
                f"need alpha >= beta > 0, got alpha={self.alpha}, beta={self.beta}"
            )


class IrmVariant(Enum):
    INHIBIT_INPUT = "inhibit_input"
    STIMULATE_OUTPUT = "stimulate_output"
    INHIBIT_INPUT_FULL_IMAX = "inhibit_input_full_imax"
    COMBINED = "combined"


@dataclass(frozen=True)
class IrmParams:
    """Turnover model parameters; kin is implied as R0*kout.

    Imax/IC50 gate the input-side factor, Emax/EC50 the output-side one;
    each is required only by the variants that use it.
    """

    R0: float
    kout: float
    Imax: Optional[float] = None
    IC50: Optional[float] = None
    Emax: Optional[float] = None
    EC50: Optional[float] = None
    gamma_i: float = 1.0
    gamma_e: float = 1.0

    def __post_init__(self):
        _require_positive(R0=self.R0, kout=self.kout, gamma_i=self.gamma_i, gamma_e=self.gamma_e)
        if self.Imax is not None and not (0 < self.Imax <= 1):
            raise ValueError(f"Imax must be in (0, 1], got {self.Imax}")
        for name in ("IC50", "EC50"):
            v = getattr(self, name)
            if v is not None:
                _require_positive(**{name: v})
        if self.Emax is not None and self.Emax < 0:
            raise ValueError(f"Emax must be >= 0, got {self.Emax}")

    @property
    def kin(self) -> float:
        return self.R0 * self.kout


def pk_one_compartment(
    t: ArrayLike, dose: float, params: Pk1Params, limit_branch: bool = True
) -> ArrayLike:
    """Concentration after a single oral dose, one-compartment model.

    Zero for t <= tlag. When ka and ke collide the formula degenerates;
    the analytic limit D*ka*tau*exp(-ka*tau)/V is used instead unless
    limit_branch is disabled, in which case DegenerateRates is raised.
    """
    ka, V, ke, tlag = params.ka, params.V, params.ke, params.tlag
    scalar = np.isscalar(t)
    tau = np.atleast_1d(np.asarray(t, dtype=float)) - tlag
    degenerate = abs(ka - ke) < RATE_COLLISION_RTOL * ke
    if degenerate and not limit_branch:
        raise DegenerateRates(f"ka={ka} collides with ke={ke}")
    with np.errstate(under="ignore"):
        if degenerate:
            conc = dose * ka * tau * np.exp(-ka * tau) / V
        else:
            conc = (
                dose
                * ka
                / (V * (ka - ke))
                * (np.exp(-ke * tau) - np.exp(-ka * tau))
            )
    conc = np.where(tau > 0, np.maximum(conc, 0.0), 0.0)
    return float(conc[0]) if scalar else conc


def pk_two_compartment_macro(params: Pk2Params) -> MacroConstants:
    """Macro constants for the two-compartment oral model.

    beta is the smaller root of x^2 - S x + P = 0 with
    S = Q/V1 + Q/V2 + Cl/V1 and P = (Q/V2)(Cl/V1); alpha = P/beta.
    """
    ka, Cl, V1, Q, V2 = params.ka, params.Cl, params.V1, params.Q, params.V2
    k12 = Q / V1
    k21 = Q / V2
    ke = Cl / V1
    s = k12 + k21 + ke
    p = k21 * ke
    disc = s * s - 4.0 * p
    if disc <= 0:
        raise DegenerateRates(f"coincident disposition rates (S={s}, P={p})")
    beta = 0.5 * (s - math.sqrt(disc))
    alpha = p / beta
    for root in (alpha, beta):
        if abs(ka - root) < 1e-10 * max(ka, root):
            raise DegenerateRates(f"ka={ka} collides with disposition rate {root}")
    if abs(alpha - beta) < 1e-10 * alpha:
        raise DegenerateRates(f"alpha={alpha} collides with beta={beta}")
    a = ka / V1 * (k21 - alpha) / ((ka - alpha) * (beta - alpha))
    b = ka / V1 * (k21 - beta) / ((ka - beta) * (alpha - beta))
    return MacroConstants(alpha=alpha, beta=beta, A=a, B=b)


def pk_two_compartment_conc(
    t: ArrayLike, dose: float, macro: MacroConstants, ka: float, tlag: float = 0.0
) -> ArrayLike:
    """Triple-exponential concentration; zero for t <= tlag."""
    scalar = np.isscalar(t)
    tau = np.atleast_1d(np.asarray(t, dtype=float)) - tlag
    with np.errstate(under="ignore"):
        conc = dose * (
            macro.A * np.exp(-macro.alpha * tau)
            + macro.B * np.exp(-macro.beta * tau)
            - (macro.A + macro.B) * np.exp(-ka * tau)
        )
    conc = np.where(tau > 0, np.maximum(conc, 0.0), 0.0)
    return float(conc[0]) if scalar else conc


def _hill(conc: float, half: float, gamma: float) -> float:
    if conc <= 0:
        return 0.0
    cg = conc**gamma
    return cg / (half**gamma + cg)


def irm_derivative(R: float, C: float, params: IrmParams, variant: IrmVariant) -> float:
    """dR/dt of the turnover equation at response R and concentration C."""
    kin = params.kin
    kout = params.kout
    inhibition = 1.0
    stimulation = 1.0
    if variant in (IrmVariant.INHIBIT_INPUT, IrmVariant.COMBINED):
        if params.Imax is None or params.IC50 is None:
            raise ValueError(f"{variant.value} requires Imax and IC50")
        inhibition = 1.0 - params.Imax * _hill(C, params.IC50, params.gamma_i)
    elif variant is IrmVariant.INHIBIT_INPUT_FULL_IMAX:
        if params.IC50 is None:
            raise ValueError(f"{variant.value} requires IC50")
        inhibition = 1.0 - _hill(C, params.IC50, params.gamma_i)
    if variant in (IrmVariant.STIMULATE_OUTPUT, IrmVariant.COMBINED):
        if params.Emax is None or params.EC50 is None:
            raise ValueError(f"{variant.value} requires Emax and EC50")
        stimulation = 1.0 + params.Emax * _hill(C, params.EC50, params.gamma_e)
    return kin * inhibition - kout * stimulation * R


def solve_irm(
    conc_fn: Callable[[float], float],
    params: IrmParams,
    variant: IrmVariant,
    times: Sequence[float],
    rtol: float = 1e-8,
    atol: float = 1e-10,
) -> np.ndarray:
    """Integrate the turnover equation from R(0) = R0 over sorted times."""
    times = np.asarray(times, dtype=float)

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        c = max(float(conc_fn(t)), 0.0)
        return np.array([irm_derivative(y[0], c, params, variant)])

    sol = odesolve.integrate(rhs, 0.0, [params.R0], times, rtol=rtol, atol=atol)
    return sol[:, 0]


def solve_irm_batch(
    conc_fn: Callable[[float], float],
    variant: IrmVariant,
    cols: dict,
    times: Sequence[float],
    rtol: float = 1e-8,
    atol: float = 1e-10,
) -> np.ndarray:
    """Integrate K turnover curves jointly; one driver call per stage.

    ``cols`` maps parameter names to (K,) arrays. Values are not
    range-checked (the estimator explores, e.g., Imax slightly above 1
    through the lognormal individual model); callers mask non-finite
    parameter rows beforehand.
    """
    times = np.asarray(times, dtype=float)
    r0 = np.asarray(cols["R0"], dtype=float)
    kout = np.asarray(cols["kout"], dtype=float)
    kin = r0 * kout
    one = np.ones_like(r0)
    gi = np.asarray(cols.get("gamma_i", one), dtype=float)
    ge = np.asarray(cols.get("gamma_e", one), dtype=float)
    inhibits = variant in (
        IrmVariant.INHIBIT_INPUT,
        IrmVariant.INHIBIT_INPUT_FULL_IMAX,
        IrmVariant.COMBINED,
    )
    stimulates = variant in (IrmVariant.STIMULATE_OUTPUT, IrmVariant.COMBINED)
    if inhibits:
        imax = (
            one
            if variant is IrmVariant.INHIBIT_INPUT_FULL_IMAX
            else np.asarray(cols["Imax"], dtype=float)
        )
        ic50_g = np.asarray(cols["IC50"], dtype=float) ** gi
    if stimulates:
        emax = np.asarray(cols["Emax"], dtype=float)
        ec50_g = np.asarray(cols["EC50"], dtype=float) ** ge

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        c = max(float(conc_fn(t)), 0.0)
        inflow = kin
        outflow = kout
        if c > 0.0:
            if inhibits:
                cg = c**gi
                inflow = kin * (1.0 - imax * cg / (ic50_g + cg))
            if stimulates:
                cg = c**ge
                outflow = kout * (1.0 + emax * cg / (ec50_g + cg))
        return inflow - outflow * y

    sol = odesolve.integrate(rhs, 0.0, r0, times, rtol=rtol, atol=atol)
    return sol.T  # (K, n)
