"""Synthetic datasets drawn from a model spec (for tests and demos)."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .data import Covariates, Dataset, DoseEvent, Observation, Subject
from .estimate import derive_subject_seed
from .modelspec import (
    ModelSpec,
    StructuralKind,
    error_sd,
    individual_parameters,
    omega_covariance,
    predict_subject,
    resolve_error,
    resolve_theta,
    spec_theta,
)


@dataclass(frozen=True)
class SimDesign:
    dose_amount: float = 100.0
    dose_time: float = 0.0
    times: tuple[float, ...] = (0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 9.0, 12.0, 24.0, 48.0)
    weight_mean: float = 70.0
    weight_cv: float = 0.15
    age_low: float = 21.0
    age_high: float = 41.0


def load_sim_design(source: Union[str, Path]) -> Optional[SimDesign]:
    """Read a [simulation] section from a model config, if present."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    text = Path(source).read_text(encoding="utf-8") if Path(str(source)).exists() else str(source)
    parser.read_string(text)
    if "simulation" not in parser:
        return None
    sec = parser["simulation"]
    kwargs = {}
    if "dose" in sec:
        kwargs["dose_amount"] = sec.getfloat("dose")
    if "dose_time" in sec:
        kwargs["dose_time"] = sec.getfloat("dose_time")
    if "times" in sec:
        kwargs["times"] = tuple(float(t) for t in sec["times"].split(",") if t.strip())
    for key in ("weight_mean", "weight_cv", "age_low", "age_high"):
        if key in sec:
            kwargs[key] = sec.getfloat(key)
    return SimDesign(**kwargs)


def simulate_dataset(
    spec: ModelSpec,
    n_subjects: int,
    seed: int,
    design: SimDesign = SimDesign(),
) -> Dataset:
    """Draw subjects from the spec's population model.

    The spec's own values (pop values, betas, omega sds, error
    parameters) act as the generative truth. Concentration and constant
    models are supported; turnover PD needs a driver and is not.
    """
    if spec.kind is StructuralKind.IRM:
        raise ValueError("simulation of turnover PD models is not supported")
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    truth = resolve_theta(spec, None)
    err = resolve_error(spec, truth)
    d = spec.n_eta
    cov = omega_covariance(spec, truth) if d else np.zeros((0, 0))
    chol = np.linalg.cholesky(cov) if d else cov
    sigma_w = math.sqrt(math.log(1.0 + design.weight_cv**2))
    width = int(math.ceil(math.log10(max(n_subjects, 2))))

    subjects = []
    for i in range(n_subjects):
        sid = f"S{i + 1:0{width}d}"
        rng = np.random.Generator(np.random.PCG64(derive_subject_seed(seed, sid)))
        covariates = Covariates(
            weight=design.weight_mean * math.exp(sigma_w * rng.standard_normal()),
            age=float(rng.uniform(design.age_low, design.age_high)),
            sex="M" if rng.uniform() < 0.8 else "F",
        )
        eta = chol @ rng.standard_normal(d) if d else np.zeros(0)
        psi = individual_parameters(spec, truth, covariates, eta)
        doses = (
            ()
            if spec.kind is StructuralKind.CONSTANT
            else (DoseEvent(time=design.dose_time, amount=design.dose_amount),)
        )
        skeleton = Subject(
            id=sid,
            doses=doses,
            observations=tuple(
                Observation(time=t, value=0.0, channel=spec.channel)
                for t in design.times
            ),
            covariates=covariates,
        )
        f = predict_subject(spec, psi, skeleton)
        noise = rng.standard_normal(f.size)
        values = [
            fi + error_sd(max(fi, 0.0), err) * z for fi, z in zip(f, noise)
        ]
        subjects.append(
            Subject(
                id=sid,
                doses=doses,
                observations=tuple(
                    Observation(time=t, value=float(v), channel=spec.channel)
                    for t, v in zip(design.times, values)
                ),
                covariates=covariates,
            )
        )
    return Dataset(
        subjects=tuple(subjects),
        provenance=f"simulated from {spec.label} (seed {seed})",
    )
