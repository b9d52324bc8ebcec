"""Model specifications: structural kind x error model x individual model.

A ModelSpec is the unit of comparison: it names the structural model,
the residual error model for its observation channel, the population
parameters (with optional covariate effects), and the random-effect
standard deviations/correlations. Specs are read from INI-style config
files with sections [structural], [error], [parameters], [omega],
[covariates].
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .data import Channel, Covariates, Subject, transform_covariate
from .structural import (
    IrmParams,
    IrmVariant,
    MacroConstants,
    Pk1Params,
    Pk2Params,
    RATE_COLLISION_RTOL,
    pk_one_compartment,
    pk_two_compartment_conc,
    pk_two_compartment_macro,
    solve_irm,
    solve_irm_batch,
)


class ModelSpecError(ValueError):
    pass


class MissingCovariate(KeyError):
    pass


class MissingDriver(ValueError):
    pass


class NonPositiveSd(ValueError):
    pass


class StructuralKind(Enum):
    PK1 = "pk1"
    PK2 = "pk2"
    IRM = "irm"
    CONSTANT = "constant"


class ErrorForm(Enum):
    COMBINED1 = "combined1"
    COMBINED2 = "combined2"


@dataclass(frozen=True)
class ErrorSpec:
    """Residual error model: sd = a + b*f^c or sqrt(a^2 + (b*f^c)^2)."""

    form: ErrorForm
    a: float
    b: float
    c: float = 1.0
    estimate_a: bool = True
    estimate_b: bool = True
    estimate_c: bool = False

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or self.a + self.b <= 0:
            raise ModelSpecError(
                f"need a >= 0, b >= 0, a + b > 0; got a={self.a}, b={self.b}"
            )
        if self.c <= 0:
            raise ModelSpecError(f"error exponent c must be > 0, got {self.c}")

    @property
    def n_estimated(self) -> int:
        return int(self.estimate_a) + int(self.estimate_b) + int(self.estimate_c)


@dataclass(frozen=True)
class CovariateEffect:
    """One centered-log covariate effect, e.g. lnwt70 = log(weight/70)."""

    covariate: str  # "weight" | "age"
    reference: float
    beta: float = 0.0

    def __post_init__(self):
        if self.covariate not in ("weight", "age"):
            raise ModelSpecError(f"unsupported covariate {self.covariate!r}")
        if self.reference <= 0:
            raise ModelSpecError(f"reference must be > 0, got {self.reference}")

    @property
    def tag(self) -> str:
        stem = "wt" if self.covariate == "weight" else "age"
        return f"ln{stem}{self.reference:g}"

    def value(self, covariates: Covariates) -> float:
        raw = covariates.weight if self.covariate == "weight" else covariates.age
        if raw is None:
            raise MissingCovariate(
                f"covariate {self.covariate!r} absent but required by effect {self.tag}"
            )
        return transform_covariate(raw, self.reference)


def parse_effect_tag(tag: str, beta: float = 0.0) -> CovariateEffect:
    """Parse tags like lnwt70 or lnage31 into a CovariateEffect."""
    t = tag.strip().lower()
    for prefix, covariate in (("lnwt", "weight"), ("lnage", "age")):
        if t.startswith(prefix):
            try:
                ref = float(t[len(prefix):])
            except ValueError:
                break
            return CovariateEffect(covariate=covariate, reference=ref, beta=beta)
    raise ModelSpecError(f"cannot parse covariate transform tag {tag!r}")


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    pop_value: float
    covariate_effects: tuple[CovariateEffect, ...] = ()
    has_random_effect: bool = False
    fixed: bool = False
    distribution: str = "lognormal"  # "lognormal" | "normal"

    def __post_init__(self):
        if self.distribution not in ("lognormal", "normal"):
            raise ModelSpecError(f"unknown distribution {self.distribution!r}")
        if self.distribution == "lognormal" and self.pop_value <= 0:
            raise ModelSpecError(
                f"{self.name}: lognormal parameters need pop_value > 0, got {self.pop_value}"
            )
        if not math.isfinite(self.pop_value):
            raise ModelSpecError(f"{self.name}: pop_value must be finite")


@dataclass(frozen=True)
class OmegaEntry:
    name: str
    sd: float
    fixed: bool = False

    def __post_init__(self):
        if self.sd <= 0 or not math.isfinite(self.sd):
            raise ModelSpecError(f"omega sd for {self.name} must be > 0, got {self.sd}")


@dataclass(frozen=True)
class CorrelationBlock:
    names: tuple[str, ...]
    rhos: tuple[float, ...]  # lower-triangular row-major pairwise correlations

    def __post_init__(self):
        k = len(self.names)
        if k < 2:
            raise ModelSpecError("correlation block needs at least two parameters")
        if len(set(self.names)) != k:
            raise ModelSpecError(f"repeated name in correlation block {self.names}")
        if len(self.rhos) != k * (k - 1) // 2:
            raise ModelSpecError(
                f"block {self.names} needs {k * (k - 1) // 2} correlations, got {len(self.rhos)}"
            )
        for r in self.rhos:
            if not (-1.0 < r < 1.0):
                raise ModelSpecError(f"correlation must lie in (-1, 1), got {r}")

    def matrix(self) -> np.ndarray:
        k = len(self.names)
        m = np.eye(k)
        idx = 0
        for i in range(1, k):
            for j in range(i):
                m[i, j] = m[j, i] = self.rhos[idx]
                idx += 1
        return m

    def pair_keys(self) -> list[str]:
        keys = []
        for i in range(1, len(self.names)):
            for j in range(i):
                keys.append(f"corr_{self.names[j]}_{self.names[i]}")
        return keys


@dataclass(frozen=True)
class OmegaSpec:
    entries: tuple[OmegaEntry, ...] = ()
    blocks: tuple[CorrelationBlock, ...] = ()

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ModelSpecError(f"duplicate omega entries: {names}")
        seen: set[str] = set()
        for block in self.blocks:
            for n in block.names:
                if n not in names:
                    raise ModelSpecError(f"correlation block references unknown {n!r}")
                if n in seen:
                    raise ModelSpecError(f"{n!r} appears in more than one correlation block")
                seen.add(n)

    def entry(self, name: str) -> Optional[OmegaEntry]:
        for e in self.entries:
            if e.name == name:
                return e
        return None


_STRUCTURAL_PARAMS = {
    StructuralKind.PK1: (("ka", "V", "Cl"), ("tlag",)),
    StructuralKind.PK2: (("ka", "Cl", "V1", "Q", "V2"), ("tlag",)),
    StructuralKind.CONSTANT: (("base",), ()),
}
_IRM_PARAMS = {
    IrmVariant.INHIBIT_INPUT: (("R0", "kout", "Imax", "IC50"), ("gamma_i",)),
    IrmVariant.STIMULATE_OUTPUT: (("R0", "kout", "Emax", "EC50"), ("gamma_e",)),
    IrmVariant.INHIBIT_INPUT_FULL_IMAX: (("R0", "kout", "IC50"), ("gamma_i",)),
    IrmVariant.COMBINED: (
        ("R0", "kout", "Imax", "IC50", "Emax", "EC50"),
        ("gamma_i", "gamma_e"),
    ),
}


def structural_parameter_names(
    kind: StructuralKind, variant: Optional[IrmVariant] = None
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """(required, optional) structural parameter names for a model kind."""
    if kind is StructuralKind.IRM:
        if variant is None:
            raise ModelSpecError("IRM models need a variant")
        return _IRM_PARAMS[variant]
    return _STRUCTURAL_PARAMS[kind]


@dataclass(frozen=True)
class ModelSpec:
    label: str
    kind: StructuralKind
    channel: Channel
    error: ErrorSpec
    parameters: tuple[ParameterSpec, ...]
    omega: OmegaSpec = OmegaSpec()
    irm_variant: Optional[IrmVariant] = None

    def __post_init__(self):
        required, optional = structural_parameter_names(self.kind, self.irm_variant)
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise ModelSpecError(f"duplicate parameter names: {names}")
        for r in required:
            if r not in names:
                raise ModelSpecError(f"{self.label}: missing structural parameter {r!r}")
        allowed = set(required) | set(optional)
        for n in names:
            if n not in allowed:
                raise ModelSpecError(f"{self.label}: unexpected parameter {n!r}")
        by_name = {p.name: p for p in self.parameters}
        for e in self.omega.entries:
            if e.name not in by_name:
                raise ModelSpecError(f"omega entry {e.name!r} has no parameter")
            if not by_name[e.name].has_random_effect:
                raise ModelSpecError(
                    f"{e.name!r} has an omega entry but has_random_effect is False"
                )
        for p in self.parameters:
            if p.has_random_effect and self.omega.entry(p.name) is None:
                raise ModelSpecError(
                    f"{p.name!r} flagged has_random_effect but no omega entry exists"
                )
        if self.p_count < 1:
            raise ModelSpecError(f"{self.label}: no estimated scalars")

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parameters)

    @property
    def eta_names(self) -> tuple[str, ...]:
        """Random-effect dimension names, in parameter order."""
        return tuple(p.name for p in self.parameters if p.has_random_effect)

    @property
    def n_eta(self) -> int:
        return len(self.eta_names)

    @property
    def p_count(self) -> int:
        """Number of estimated scalars (pops, betas, omegas, correlations, error)."""
        n = sum(1 for p in self.parameters if not p.fixed)
        n += sum(len(p.covariate_effects) for p in self.parameters)
        n += sum(1 for e in self.omega.entries if not e.fixed)
        n += sum(len(b.rhos) for b in self.omega.blocks)
        n += self.error.n_estimated
        return n

    def parameter(self, name: str) -> ParameterSpec:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)


# ---------------------------------------------------------------------------
# theta dictionaries (natural-space scalar values keyed by name)
# ---------------------------------------------------------------------------

def spec_theta(spec: ModelSpec) -> dict[str, float]:
    """All scalar values implied by the spec itself (fixed and initial)."""
    theta: dict[str, float] = {}
    for p in spec.parameters:
        theta[p.name] = p.pop_value
        for eff in p.covariate_effects:
            theta[f"beta_{p.name}_{eff.tag}"] = eff.beta
    for e in spec.omega.entries:
        theta[f"omega_{e.name}"] = e.sd
    for block in spec.omega.blocks:
        for key, rho in zip(block.pair_keys(), block.rhos):
            theta[key] = rho
    theta["error_a"] = spec.error.a
    theta["error_b"] = spec.error.b
    theta["error_c"] = spec.error.c
    return theta


def resolve_theta(spec: ModelSpec, theta: Optional[Mapping[str, float]]) -> dict[str, float]:
    """Spec values overridden by any provided estimates."""
    full = spec_theta(spec)
    if theta:
        unknown = set(theta) - set(full)
        if unknown:
            raise ModelSpecError(f"unknown theta entries: {sorted(unknown)}")
        full.update(theta)
    return full


def resolve_error(spec: ModelSpec, theta: Mapping[str, float]) -> ErrorSpec:
    return replace(
        spec.error, a=theta["error_a"], b=theta["error_b"], c=theta["error_c"]
    )


def omega_covariance(spec: ModelSpec, theta: Mapping[str, float]) -> np.ndarray:
    """Random-effect covariance implied by omega sds and correlation blocks."""
    names = spec.eta_names
    d = len(names)
    corr = np.eye(d)
    pos = {n: i for i, n in enumerate(names)}
    for block in spec.omega.blocks:
        for key, (a, b) in zip(
            block.pair_keys(),
            [
                (block.names[j], block.names[i])
                for i in range(1, len(block.names))
                for j in range(i)
            ],
        ):
            rho = theta[key]
            corr[pos[a], pos[b]] = corr[pos[b], pos[a]] = rho
    sds = np.array([theta[f"omega_{n}"] for n in names])
    cov = corr * np.outer(sds, sds)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ModelSpecError("omega covariance is not positive definite") from None
    return cov


# ---------------------------------------------------------------------------
# individual parameters and predictions
# ---------------------------------------------------------------------------

def individual_parameters(
    spec: ModelSpec,
    theta: Mapping[str, float],
    covariates: Covariates,
    eta: Sequence[float],
) -> dict[str, float]:
    """Individual parameter map at random-effect vector eta.

    Lognormal parameters: value = exp(log(pop) + sum(beta * x) + eta);
    normal ones use the identity link. Parameters without random effects
    take eta = 0.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (spec.n_eta,):
        raise ValueError(f"eta must have shape ({spec.n_eta},), got {eta.shape}")
    values = resolve_theta(spec, dict(theta))
    eta_by_name = dict(zip(spec.eta_names, eta))
    out: dict[str, float] = {}
    for p in spec.parameters:
        pop = values[p.name]
        shift = sum(
            values[f"beta_{p.name}_{eff.tag}"] * eff.value(covariates)
            for eff in p.covariate_effects
        )
        e = eta_by_name.get(p.name, 0.0)
        if p.distribution == "lognormal":
            out[p.name] = math.exp(math.log(pop) + shift + e)
        else:
            out[p.name] = pop + shift + e
    return out


def error_sd(f: float, spec: ErrorSpec) -> float:
    """Residual standard deviation at prediction f."""
    if f < 0:
        raise ValueError(f"prediction must be >= 0, got {f}")
    if spec.form is ErrorForm.COMBINED1:
        sd = spec.a + spec.b * f**spec.c
    else:
        sd = math.sqrt(spec.a**2 + (spec.b * f**spec.c) ** 2)
    if sd <= 0:
        raise NonPositiveSd(f"error sd {sd} at prediction {f}")
    return sd


def error_sd_array(
    f: np.ndarray, a: float, b: float, c: float, form: ErrorForm
) -> np.ndarray:
    """Vectorized residual sd; predictions are clipped at zero first."""
    fp = np.maximum(f, 0.0)
    with np.errstate(under="ignore"):
        if form is ErrorForm.COMBINED1:
            return a + b * fp**c
        return np.sqrt(a * a + (b * fp**c) ** 2)


def _psi_to_pk1(psi: Mapping[str, float]) -> Pk1Params:
    return Pk1Params(
        ka=psi["ka"], V=psi["V"], Cl=psi["Cl"], tlag=psi.get("tlag", 0.0)
    )


def _psi_to_pk2(psi: Mapping[str, float]) -> Pk2Params:
    return Pk2Params(
        ka=psi["ka"], Cl=psi["Cl"], V1=psi["V1"], Q=psi["Q"], V2=psi["V2"],
        tlag=psi.get("tlag", 0.0),
    )


def _psi_to_irm(psi: Mapping[str, float], variant: IrmVariant) -> IrmParams:
    imax = 1.0 if variant is IrmVariant.INHIBIT_INPUT_FULL_IMAX else psi.get("Imax")
    return IrmParams(
        R0=psi["R0"],
        kout=psi["kout"],
        Imax=imax,
        IC50=psi.get("IC50"),
        Emax=psi.get("Emax"),
        EC50=psi.get("EC50"),
        gamma_i=psi.get("gamma_i", 1.0),
        gamma_e=psi.get("gamma_e", 1.0),
    )


def concentration_curve(
    spec: ModelSpec, psi: Mapping[str, float], subject: Subject
) -> Callable[[float], float]:
    """Continuous t -> concentration for a PK spec (superposed doses)."""
    if spec.kind not in (StructuralKind.PK1, StructuralKind.PK2):
        raise ModelSpecError(f"{spec.kind} is not a concentration model")
    if not subject.doses:
        raise ModelSpecError(f"subject {subject.id} has no dose events")
    doses = subject.doses
    if spec.kind is StructuralKind.PK1:
        params = _psi_to_pk1(psi)

        def curve(t):
            return sum(
                pk_one_compartment(t - d.time, d.amount, params) for d in doses
            )

    else:
        params = _psi_to_pk2(psi)
        macro = pk_two_compartment_macro(params)

        def curve(t):
            return sum(
                pk_two_compartment_conc(t - d.time, d.amount, macro, params.ka, params.tlag)
                for d in doses
            )

    return curve


def predict_subject(
    spec: ModelSpec,
    psi: Mapping[str, float],
    subject: Subject,
    conc_driver: Optional[Callable[[float], float]] = None,
    rtol: float = 1e-8,
    atol: float = 1e-10,
) -> np.ndarray:
    """Predictions at the subject's observation times on spec.channel."""
    times = np.array(
        [o.time for o in subject.observations_for(spec.channel)], dtype=float
    )
    if spec.kind in (StructuralKind.PK1, StructuralKind.PK2):
        curve = concentration_curve(spec, psi, subject)
        return np.array([curve(t) for t in times])
    if spec.kind is StructuralKind.IRM:
        if conc_driver is None:
            raise MissingDriver(
                f"PD spec {spec.label!r} needs a concentration driver for {subject.id}"
            )
        params = _psi_to_irm(psi, spec.irm_variant)
        return solve_irm(conc_driver, params, spec.irm_variant, times, rtol=rtol, atol=atol)
    # constant baseline
    return np.full(times.shape, float(psi["base"]))


# ---------------------------------------------------------------------------
# batched predictions (K parameter vectors at once) for the estimator
# ---------------------------------------------------------------------------

def batched_predictor(
    spec: ModelSpec,
    subject: Subject,
    conc_driver: Optional[Callable[[float], float]] = None,
    rtol: float = 1e-8,
    atol: float = 1e-10,
) -> Callable[[np.ndarray], np.ndarray]:
    """Build psi_matrix (K, p) -> predictions (K, n) for one subject.

    Column order follows spec.parameters. Parameter rows that degenerate
    (coincident rates) yield NaN rows, which callers treat as an infinite
    objective.
    """
    times = np.array(
        [o.time for o in subject.observations_for(spec.channel)], dtype=float
    )
    col = {p.name: i for i, p in enumerate(spec.parameters)}
    n = times.size

    if spec.kind is StructuralKind.CONSTANT:
        def predict_const(psi: np.ndarray) -> np.ndarray:
            return np.repeat(psi[:, col["base"]][:, None], n, axis=1)

        return predict_const

    if spec.kind is StructuralKind.IRM:
        if conc_driver is None:
            raise MissingDriver(
                f"PD spec {spec.label!r} needs a concentration driver for {subject.id}"
            )
        variant = spec.irm_variant

        def predict_irm(psi: np.ndarray) -> np.ndarray:
            out = np.full((psi.shape[0], n), np.nan)
            valid = np.where(
                np.all(np.isfinite(psi), axis=1) & np.all(psi > 0, axis=1)
            )[0]
            if valid.size == 0:
                return out
            cols = {name: psi[valid, col[name]] for name in col}
            try:
                out[valid] = solve_irm_batch(
                    conc_driver, variant, cols, times, rtol=rtol, atol=atol
                )
            except (ValueError, RuntimeError):
                # one pathological row can sink the joint solve; retry rows
                # alone so only the offenders stay NaN (infeasible)
                for k in valid:
                    row = {name: psi[k : k + 1, col[name]] for name in col}
                    try:
                        out[k] = solve_irm_batch(
                            conc_driver, variant, row, times, rtol=rtol, atol=atol
                        )[0]
                    except (ValueError, RuntimeError):
                        pass
            return out

        return predict_irm

    if not subject.doses:
        raise ModelSpecError(f"subject {subject.id} has no dose events")
    doses = subject.doses
    has_tlag = "tlag" in col

    if spec.kind is StructuralKind.PK1:
        def predict_pk1(psi: np.ndarray) -> np.ndarray:
            ka = psi[:, col["ka"]][:, None]
            v = psi[:, col["V"]][:, None]
            ke = psi[:, col["Cl"]][:, None] / v
            tlag = psi[:, col["tlag"]][:, None] if has_tlag else 0.0
            out = np.zeros((psi.shape[0], n))
            for d in doses:
                tau = times[None, :] - d.time - tlag
                with np.errstate(under="ignore", over="ignore", invalid="ignore"):
                    diff = ka - ke
                    safe = np.where(np.abs(diff) < RATE_COLLISION_RTOL * ke, np.inf, diff)
                    general = d.amount * ka / (v * safe) * (
                        np.exp(-ke * tau) - np.exp(-ka * tau)
                    )
                    limit = d.amount * ka * tau * np.exp(-ka * tau) / v
                    conc = np.where(np.isinf(safe), limit, general)
                out += np.where(tau > 0, np.maximum(conc, 0.0), 0.0)
            return out

        return predict_pk1

    def predict_pk2(psi: np.ndarray) -> np.ndarray:
        ka = psi[:, col["ka"]]
        cl = psi[:, col["Cl"]]
        v1 = psi[:, col["V1"]]
        q = psi[:, col["Q"]]
        v2 = psi[:, col["V2"]]
        tlag = psi[:, col["tlag"]] if has_tlag else np.zeros_like(ka)
        k12 = q / v1
        k21 = q / v2
        ke = cl / v1
        s = k12 + k21 + ke
        p = k21 * ke
        disc = s * s - 4.0 * p
        with np.errstate(invalid="ignore", divide="ignore", under="ignore"):
            beta = 0.5 * (s - np.sqrt(np.maximum(disc, 0.0)))
            alpha = p / beta
            bad = (
                (disc <= 0)
                | (np.abs(ka - alpha) < 1e-10 * np.maximum(ka, alpha))
                | (np.abs(ka - beta) < 1e-10 * np.maximum(ka, beta))
                | (np.abs(alpha - beta) < 1e-10 * alpha)
            )
            a = ka / v1 * (k21 - alpha) / ((ka - alpha) * (beta - alpha))
            b = ka / v1 * (k21 - beta) / ((ka - beta) * (alpha - beta))
        out = np.zeros((psi.shape[0], n))
        for d in doses:
            tau = times[None, :] - d.time - tlag[:, None]
            with np.errstate(under="ignore", over="ignore", invalid="ignore"):
                conc = d.amount * (
                    a[:, None] * np.exp(-alpha[:, None] * tau)
                    + b[:, None] * np.exp(-beta[:, None] * tau)
                    - (a + b)[:, None] * np.exp(-ka[:, None] * tau)
                )
            out += np.where(tau > 0, np.maximum(conc, 0.0), 0.0)
        out[bad] = np.nan
        return out

    return predict_pk2


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_FLAG_TOKENS = {"fixed", "estimate", "normal", "lognormal"}


def _parse_value_flags(raw: str, context: str) -> tuple[float, set[str]]:
    tokens = raw.replace(",", " ").split()
    if not tokens:
        raise ModelSpecError(f"{context}: empty value")
    try:
        value = float(tokens[0])
    except ValueError:
        raise ModelSpecError(f"{context}: expected a number, got {tokens[0]!r}") from None
    flags = {t.lower() for t in tokens[1:]}
    unknown = flags - _FLAG_TOKENS
    if unknown:
        raise ModelSpecError(f"{context}: unknown flags {sorted(unknown)}")
    return value, flags


def _parse_correlations(raw: str) -> tuple[CorrelationBlock, ...]:
    blocks = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            names_part, rhos_part = chunk.split(":")
        except ValueError:
            raise ModelSpecError(f"bad correlation block {chunk!r}") from None
        names = tuple(n.strip() for n in names_part.split(",") if n.strip())
        rhos = tuple(float(r) for r in rhos_part.split(",") if r.strip())
        blocks.append(CorrelationBlock(names=names, rhos=rhos))
    return tuple(blocks)


def load_model_config(source: Union[str, Path]) -> ModelSpec:
    """Read a ModelSpec from an INI config file (path) or raw text."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # parameter names are case-sensitive
    if isinstance(source, Path) or (
        "\n" not in str(source) and Path(str(source)).exists()
    ):
        path = Path(source)
        parser.read_string(path.read_text(encoding="utf-8"))
        default_label = path.stem
    else:
        parser.read_string(str(source))
        default_label = "model"

    if "structural" not in parser:
        raise ModelSpecError("config needs a [structural] section")
    st = parser["structural"]
    kind = StructuralKind(st.get("kind", "").strip().lower())
    label = st.get("label", default_label).strip()
    channel = {"y1": Channel.Y1_PK, "y2": Channel.Y2_PD}.get(
        st.get("channel", "y1").strip().lower()
    )
    if channel is None:
        raise ModelSpecError(f"channel must be y1 or y2, got {st.get('channel')!r}")
    variant = None
    if kind is StructuralKind.IRM:
        variant = IrmVariant(st.get("variant", "").strip().lower())

    if "error" not in parser:
        raise ModelSpecError("config needs an [error] section")
    er = parser["error"]
    form = ErrorForm(er.get("form", "combined1").strip().lower())
    a, a_flags = _parse_value_flags(er.get("a", "0.1"), "[error] a")
    b, b_flags = _parse_value_flags(er.get("b", "0.1"), "[error] b")
    c, c_flags = _parse_value_flags(er.get("c", "1.0"), "[error] c")
    error = ErrorSpec(
        form=form, a=a, b=b, c=c,
        estimate_a="fixed" not in a_flags,
        estimate_b="fixed" not in b_flags,
        estimate_c="estimate" in c_flags,
    )

    omega_entries: list[OmegaEntry] = []
    blocks: tuple[CorrelationBlock, ...] = ()
    if "omega" in parser:
        for key, raw in parser["omega"].items():
            if key == "correlations":
                blocks = _parse_correlations(raw)
                continue
            sd, flags = _parse_value_flags(raw, f"[omega] {key}")
            omega_entries.append(OmegaEntry(name=key, sd=sd, fixed="fixed" in flags))
    omega = OmegaSpec(entries=tuple(omega_entries), blocks=blocks)
    re_names = {e.name for e in omega_entries}

    effects: dict[str, list[CovariateEffect]] = {}
    if "covariates" in parser:
        for pname, raw in parser["covariates"].items():
            effs = []
            for chunk in raw.split(","):
                chunk = chunk.strip()
                if not chunk:
                    continue
                if ":" in chunk:
                    tag, beta_raw = chunk.split(":")
                    effs.append(parse_effect_tag(tag, beta=float(beta_raw)))
                else:
                    effs.append(parse_effect_tag(chunk))
            effects[pname] = effs

    if "parameters" not in parser:
        raise ModelSpecError("config needs a [parameters] section")
    params: list[ParameterSpec] = []
    for pname, raw in parser["parameters"].items():
        value, flags = _parse_value_flags(raw, f"[parameters] {pname}")
        params.append(
            ParameterSpec(
                name=pname,
                pop_value=value,
                covariate_effects=tuple(effects.pop(pname, ())),
                has_random_effect=pname in re_names,
                fixed="fixed" in flags,
                distribution="normal" if "normal" in flags else "lognormal",
            )
        )
    if effects:
        raise ModelSpecError(f"[covariates] references unknown parameters: {sorted(effects)}")

    return ModelSpec(
        label=label,
        kind=kind,
        channel=channel,
        error=error,
        parameters=tuple(params),
        omega=omega,
        irm_variant=variant,
    )
