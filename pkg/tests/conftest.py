import numpy as np
import pytest

from bscv.data import Channel, Covariates, Dataset, DoseEvent, Observation, Subject
from bscv.modelspec import (
    ErrorForm,
    ErrorSpec,
    ModelSpec,
    OmegaEntry,
    OmegaSpec,
    ParameterSpec,
    StructuralKind,
)


def make_toy_spec(theta0=0.0, omega=1.0, sigma=1.0, estimate_pop=True):
    """y_ij = theta + eta_i + eps_ij with known omega and sigma.

    Linear in eta with Gaussian error, so the Laplace approximation is
    exact and every marginal quantity has a closed form.
    """
    return ModelSpec(
        label="linear_toy",
        kind=StructuralKind.CONSTANT,
        channel=Channel.Y1_PK,
        error=ErrorSpec(
            form=ErrorForm.COMBINED1, a=sigma, b=0.0,
            estimate_a=False, estimate_b=False,
        ),
        parameters=(
            ParameterSpec(
                name="base", pop_value=theta0, distribution="normal",
                has_random_effect=True, fixed=not estimate_pop,
            ),
        ),
        omega=OmegaSpec(entries=(OmegaEntry(name="base", sd=omega, fixed=True),)),
    )


def make_toy_subject(sid, values, times=None):
    times = times if times is not None else list(range(len(values)))
    return Subject(
        id=sid,
        doses=(),
        observations=tuple(
            Observation(time=float(t), value=float(v), channel=Channel.Y1_PK)
            for t, v in zip(times, values)
        ),
        covariates=Covariates(),
    )


def toy_marginal_m2ll(values, theta0=0.0, omega=1.0, sigma=1.0):
    """Analytic -2 log marginal for the toy: y_i ~ N(theta0*1, sigma^2 I
    + omega^2 J) per subject; values is a list of per-subject arrays."""
    total = 0.0
    for y in values:
        y = np.asarray(y, dtype=float)
        n = y.size
        if n == 0:
            continue
        cov = sigma**2 * np.eye(n) + omega**2 * np.ones((n, n))
        resid = y - theta0
        sign, logdet = np.linalg.slogdet(2.0 * np.pi * cov)
        total += logdet + float(resid @ np.linalg.solve(cov, resid))
    return total


PK1_CFG = """
[structural]
label = pk1_test
kind = pk1
channel = y1

[error]
a = 0.4
b = 0.12

[parameters]
ka = 1.0
V = 10.0
Cl = 1.0

[omega]
ka = 0.3
V = 0.25
Cl = 0.3
"""

SMALL_CSV = """ID,TIME,AMT,DV,DVID,WT,AGE,SEX
1,0,100,.,.,70,30,M
1,1,.,5.1,1,70,30,M
1,2,.,4.2,1,70,30,M
1,24,.,12.5,2,70,30,M
2,0,100,.,.,82,44,F
2,1,.,6.3,1,82,44,F
2,3,.,3.3,1,82,44,F
"""


@pytest.fixture
def toy_spec():
    return make_toy_spec()


@pytest.fixture
def small_dataset():
    from bscv.data import parse_dataset

    return parse_dataset(SMALL_CSV)
