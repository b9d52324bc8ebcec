import json
import math
import warnings

import numpy as np
import pytest

from bscv.data import Channel, Covariates, Dataset, Observation, Subject
from bscv.estimate import (
    FitOptions,
    FitResult,
    LlMode,
    MissingSubjectEbes,
    TestEvaluation,
    evaluate_fixed,
    fit_population,
    importance_sampling_m2ll,
    laplace_m2ll,
    map_etas,
    sample_conditional,
    sequential_pd_prepare,
)
from bscv.modelspec import (
    ErrorForm,
    ErrorSpec,
    ModelSpec,
    ParameterSpec,
    StructuralKind,
    individual_parameters,
    load_model_config,
    predict_subject,
    spec_theta,
)
from bscv.simulate import SimDesign, simulate_dataset
from conftest import PK1_CFG, make_toy_spec, make_toy_subject, toy_marginal_m2ll


def quiet_fit(*args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fit_population(*args, **kwargs)


# --- conditional modes ---------------------------------------------------------

def test_map_etas_zero_observations(toy_spec):
    eta, hess = map_etas(toy_spec, spec_theta(toy_spec), make_toy_subject("s", []))
    assert eta == pytest.approx([0.0])
    assert hess == pytest.approx(np.array([[2.0]]))  # 2 * inv(Omega) for omega = 1


def test_map_etas_linear_posterior_mode(toy_spec):
    # posterior mode omega^2 y / (omega^2 + sigma^2) = 1.0 for y = 2
    eta, hess = map_etas(toy_spec, spec_theta(toy_spec), make_toy_subject("s", [2.0]))
    assert eta[0] == pytest.approx(1.0, abs=1e-7)
    assert hess[0, 0] == pytest.approx(4.0, rel=1e-6)


def test_map_etas_multistart_invariant():
    spec = make_toy_spec(omega=0.8, sigma=0.5)
    subject = make_toy_subject("rich", [1.2, 0.8, 1.1, 0.9, 1.3, 0.7])
    theta = spec_theta(spec)
    eta1, _ = map_etas(spec, theta, subject, multistart=1)
    eta2, _ = map_etas(spec, theta, subject, multistart=2, seed=99)
    assert eta1 == pytest.approx(eta2, abs=1e-6)


# --- laplace -------------------------------------------------------------------

def test_laplace_exact_on_linear_model(toy_spec):
    ds = Dataset(subjects=(make_toy_subject("s1", [0.0]),))
    value = laplace_m2ll(toy_spec, spec_theta(toy_spec), ds)
    assert value == pytest.approx(math.log(4 * math.pi), rel=1e-8)


def test_laplace_exact_multiple_observations():
    spec = make_toy_spec(theta0=0.7, omega=0.6, sigma=1.3)
    values = [[0.1, 1.4, -0.3], [2.0], [0.5, 0.9]]
    ds = Dataset(
        subjects=tuple(make_toy_subject(f"s{i}", v) for i, v in enumerate(values))
    )
    got = laplace_m2ll(spec, spec_theta(spec), ds)
    want = toy_marginal_m2ll(values, theta0=0.7, omega=0.6, sigma=1.3)
    assert got == pytest.approx(want, rel=1e-8)


def test_laplace_additive_over_subjects(toy_spec):
    theta = spec_theta(toy_spec)
    one = Dataset(subjects=(make_toy_subject("s1", [0.0]),))
    two = Dataset(
        subjects=(make_toy_subject("s1", [0.0]), make_toy_subject("s2", [0.0]))
    )
    assert laplace_m2ll(toy_spec, theta, two) == pytest.approx(
        2 * laplace_m2ll(toy_spec, theta, one), rel=1e-14
    )


def test_laplace_without_random_effects_is_gaussian_m2ll():
    # no omega entries: the marginal is the plain Gaussian likelihood
    spec = ModelSpec(
        label="fe",
        kind=StructuralKind.CONSTANT,
        channel=Channel.Y1_PK,
        error=ErrorSpec(ErrorForm.COMBINED1, a=0.5, b=0.0, estimate_a=False, estimate_b=False),
        parameters=(ParameterSpec("base", 1.5, distribution="normal"),),
    )
    ds = Dataset(subjects=(make_toy_subject("s", [1.0, 2.0, 1.5]),))
    got = laplace_m2ll(spec, spec_theta(spec), ds)
    resid = np.array([1.0, 2.0, 1.5]) - 1.5
    want = float(np.sum(np.log(2 * np.pi * 0.25) + resid**2 / 0.25))
    assert got == pytest.approx(want, rel=1e-12)


# --- importance sampling ---------------------------------------------------------

def test_importance_sampling_within_three_se(toy_spec):
    ds = Dataset(
        subjects=(make_toy_subject("s1", [0.0]), make_toy_subject("s2", [1.0, -0.4]))
    )
    want = toy_marginal_m2ll([[0.0], [1.0, -0.4]])
    est, se = importance_sampling_m2ll(toy_spec, spec_theta(toy_spec), ds, 10000, seed=42)
    assert abs(est - want) <= 3 * se


def test_importance_sampling_deterministic(toy_spec):
    ds = Dataset(subjects=(make_toy_subject("s1", [0.3]),))
    theta = spec_theta(toy_spec)
    a = importance_sampling_m2ll(toy_spec, theta, ds, 1000, seed=7)
    b = importance_sampling_m2ll(toy_spec, theta, ds, 1000, seed=7)
    assert a == b


def test_importance_sampling_additive_by_subject_seed(toy_spec):
    theta = spec_theta(toy_spec)
    ds_a = Dataset(subjects=(make_toy_subject("s1", [0.4]),))
    ds_b = Dataset(subjects=(make_toy_subject("s2", [1.1, 0.2]),))
    ds_ab = Dataset(subjects=ds_a.subjects + ds_b.subjects)
    est_a, _ = importance_sampling_m2ll(toy_spec, theta, ds_a, 2000, seed=5)
    est_b, _ = importance_sampling_m2ll(toy_spec, theta, ds_b, 2000, seed=5)
    est_ab, _ = importance_sampling_m2ll(toy_spec, theta, ds_ab, 2000, seed=5)
    assert est_ab == pytest.approx(est_a + est_b, rel=1e-14)


def test_importance_sampling_se_scaling(toy_spec):
    ds = Dataset(subjects=(make_toy_subject("s1", [0.8, -0.1]),))
    theta = spec_theta(toy_spec)
    ratios = []
    for seed in range(20):
        _, se_small = importance_sampling_m2ll(toy_spec, theta, ds, 2500, seed=seed)
        _, se_big = importance_sampling_m2ll(toy_spec, theta, ds, 10000, seed=seed)
        ratios.append(se_big / se_small)
    assert 0.35 <= float(np.mean(ratios)) <= 0.7


def test_importance_sampling_consistency_spread(toy_spec):
    ds = Dataset(subjects=(make_toy_subject("s1", [0.0]),))
    theta = spec_theta(toy_spec)
    values = [
        importance_sampling_m2ll(toy_spec, theta, ds, 10000, seed=s)[0]
        for s in range(20)
    ]
    assert max(values) - min(values) < 0.1


# --- population fit --------------------------------------------------------------

def test_fit_recovers_simulated_truth():
    spec = load_model_config(PK1_CFG)
    design = SimDesign(dose_amount=100.0, times=(0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 24.0))
    ds = simulate_dataset(spec, 32, seed=123, design=design)
    opts = FitOptions(outer_max_iters=2000, outer_tolerance=1e-3,
                      inner_tolerance=1e-5, multistart_count=1, seed=5)
    fit = quiet_fit(spec, ds, opts)
    truth = spec_theta(spec)
    for name in ("ka", "V", "Cl"):
        assert fit.theta_hat[name] == pytest.approx(truth[name], rel=0.15)
    assert fit.n_obs == 224
    assert fit.p_count == 8


def test_fit_objective_trace_monotone_and_fixed_point(toy_spec):
    ds = Dataset(
        subjects=tuple(
            make_toy_subject(f"s{i}", v)
            for i, v in enumerate([[0.2], [1.4, 0.3], [-0.6], [0.9, 1.1]])
        )
    )
    opts = FitOptions(outer_max_iters=300, outer_tolerance=1e-6, seed=1)
    fit = quiet_fit(toy_spec, ds, opts)
    trace = fit.objective_trace
    assert len(trace) > 1
    assert all(a >= b - 1e-9 for a, b in zip(trace, trace[1:]))
    refit = quiet_fit(toy_spec, ds, opts, initial=fit.theta_hat)
    scale = max(1.0, abs(fit.minus2ll))
    assert fit.minus2ll - refit.minus2ll < opts.outer_tolerance * scale + 1e-8
    # analytic optimum: theta maximizing the marginal is the weighted mean
    assert refit.minus2ll <= fit.minus2ll + 1e-9


def test_fit_without_random_effects_matches_independent_nls_oracle():
    # omega empty: the objective is the fixed-effects Gaussian -2LL; an
    # independently coded objective + optimizer must find the same optimum
    cfg = """
[structural]
label = nls
kind = pk1
channel = y1

[error]
a = 0.4
b = 0.1

[parameters]
ka = 1.2
V = 9.0
Cl = 0.9
"""
    spec = load_model_config(cfg)
    design = SimDesign(dose_amount=100.0, times=(0.5, 1.0, 3.0, 8.0, 24.0))
    ds = simulate_dataset(spec, 12, seed=21, design=design)
    opts = FitOptions(outer_max_iters=1500, outer_tolerance=1e-6, seed=2)
    fit = quiet_fit(spec, ds, opts)

    # independent oracle: own closed form, own objective, scipy Powell
    from scipy.optimize import minimize

    times = np.array([o.time for o in ds.subjects[0].observations])
    ys = np.stack(
        [[o.value for o in s.observations] for s in ds.subjects]
    )

    def objective(x):
        ka, v, cl, a, b = np.exp(x)
        ke = cl / v
        conc = 100.0 * ka / (v * (ka - ke)) * (np.exp(-ke * times) - np.exp(-ka * times))
        g = a + b * conc
        if np.any(g <= 0):
            return np.inf
        return float(
            np.sum(np.log(2 * np.pi * g**2)[None, :] + (ys - conc[None, :]) ** 2 / g**2)
        )

    x0 = np.log([1.2, 9.0, 0.9, 0.3, 0.1])
    res = minimize(objective, x0, method="Powell",
                   options={"xtol": 1e-10, "ftol": 1e-12, "maxiter": 20000})
    assert fit.minus2ll == pytest.approx(res.fun, rel=1e-4)


# --- fixed-parameter evaluation ---------------------------------------------------

def test_evaluate_matches_fit_objective():
    spec = load_model_config(PK1_CFG)
    design = SimDesign(dose_amount=100.0, times=(1.0, 4.0, 12.0))
    ds = simulate_dataset(spec, 8, seed=9, design=design)
    opts = FitOptions(outer_max_iters=400, outer_tolerance=1e-3, seed=4)
    fit = quiet_fit(spec, ds, opts)
    ev = evaluate_fixed(spec, fit.theta_hat, ds, opts)
    assert ev.minus2ll == pytest.approx(fit.minus2ll, rel=1e-6)
    assert ev.n_obs == fit.n_obs
    assert not ev.failed_subjects


def test_evaluate_zero_observation_subject(toy_spec):
    ds = Dataset(subjects=(make_toy_subject("empty", []),))
    ev = evaluate_fixed(toy_spec, spec_theta(toy_spec), ds, FitOptions())
    assert ev.minus2ll == 0.0
    assert ev.ipred["empty"] == ()


def test_evaluate_never_mutates_theta(toy_spec):
    ds = Dataset(subjects=(make_toy_subject("s", [0.5]),))
    theta = spec_theta(toy_spec)
    frozen = json.dumps(theta, sort_keys=True)
    evaluate_fixed(toy_spec, theta, ds, FitOptions())
    assert json.dumps(theta, sort_keys=True) == frozen


def test_evaluate_heldout_matches_analytic(toy_spec):
    values = [1.7, -0.2, 0.4]
    ds = Dataset(subjects=(make_toy_subject("held", values),))
    ev = evaluate_fixed(toy_spec, spec_theta(toy_spec), ds, FitOptions())
    assert ev.minus2ll == pytest.approx(toy_marginal_m2ll([values]), rel=1e-8)


def test_evaluate_importance_mode_consistent_with_direct_call(toy_spec):
    ds = Dataset(subjects=(make_toy_subject("s", [0.9]),))
    theta = spec_theta(toy_spec)
    opts = FitOptions(ll_mode=LlMode.IMPORTANCE, is_samples=2000, seed=13)
    ev = evaluate_fixed(toy_spec, theta, ds, opts)
    direct, se = importance_sampling_m2ll(toy_spec, theta, ds, 2000, seed=13)
    assert ev.minus2ll == direct
    assert ev.mc_se == se


# --- conditional sampling ----------------------------------------------------------

def test_sample_conditional_prior_when_no_data(toy_spec):
    draws = sample_conditional(
        toy_spec, spec_theta(toy_spec), make_toy_subject("s", []), 1000, seed=3
    )
    assert draws.shape == (1000, 1)
    # prior is N(0, 1); allow for chain autocorrelation in the SE
    assert abs(float(draws.mean())) < 0.3
    assert float(draws.std(ddof=1)) == pytest.approx(1.0, rel=0.2)


def test_sample_conditional_matches_analytic_posterior(toy_spec):
    draws = sample_conditional(
        toy_spec, spec_theta(toy_spec), make_toy_subject("s", [2.0]), 10000, seed=17
    )
    # posterior N(1, 0.5)
    assert float(draws.mean()) == pytest.approx(1.0, rel=0.05)
    assert float(draws.var(ddof=1)) == pytest.approx(0.5, rel=0.05)


def test_sample_conditional_deterministic(toy_spec):
    subject = make_toy_subject("s", [2.0])
    theta = spec_theta(toy_spec)
    a = sample_conditional(toy_spec, theta, subject, 50, seed=23)
    b = sample_conditional(toy_spec, theta, subject, 50, seed=23)
    assert np.array_equal(a, b)


# --- sequential PD preparation ------------------------------------------------------

def pk_fit_fixture():
    spec = load_model_config(PK1_CFG)
    design = SimDesign(dose_amount=100.0, times=(0.5, 2.0, 8.0, 24.0))
    ds = simulate_dataset(spec, 6, seed=31, design=design)
    opts = FitOptions(outer_max_iters=500, outer_tolerance=1e-3, seed=8)
    return spec, ds, quiet_fit(spec, ds, opts), opts


def test_driver_matches_fit_predictions():
    spec, ds, fit, _ = pk_fit_fixture()
    drivers = sequential_pd_prepare(fit, spec, ds)
    for subject in ds.subjects:
        psi = individual_parameters(
            spec, fit.theta_hat, subject.covariates, np.array(fit.ebes[subject.id])
        )
        ipred = predict_subject(spec, psi, subject)
        times = [o.time for o in subject.observations_for(Channel.Y1_PK)]
        driven = np.array([drivers[subject.id](t) for t in times])
        assert driven == pytest.approx(ipred, abs=1e-10)


def test_driver_at_zero_eta_is_population_curve():
    spec = load_model_config(PK1_CFG)
    design = SimDesign(dose_amount=100.0, times=(1.0, 6.0))
    ds = simulate_dataset(spec, 2, seed=1, design=design)
    theta = spec_theta(spec)
    fake = FitResult(
        theta_hat=theta, minus2ll=0.0,
        ebes={s.id: (0.0, 0.0, 0.0) for s in ds.subjects},
        converged=True, n_obs=4, p_count=spec.p_count,
    )
    drivers = sequential_pd_prepare(fake, spec, ds)
    for subject in ds.subjects:
        psi = individual_parameters(spec, theta, subject.covariates, np.zeros(3))
        pop = predict_subject(spec, psi, subject)
        times = [o.time for o in subject.observations]
        assert [drivers[subject.id](t) for t in times] == pytest.approx(list(pop))


def test_missing_subject_ebes_raises():
    spec, ds, fit, _ = pk_fit_fixture()
    clipped = FitResult(
        theta_hat=fit.theta_hat, minus2ll=fit.minus2ll,
        ebes={k: v for k, v in fit.ebes.items() if k != ds.subjects[0].id},
        converged=True, n_obs=fit.n_obs, p_count=fit.p_count,
    )
    with pytest.raises(MissingSubjectEbes):
        sequential_pd_prepare(clipped, spec, ds)


def test_oob_etas_match_direct_map():
    spec, ds, fit, opts = pk_fit_fixture()
    held = Dataset(subjects=(ds.subjects[0],))
    ev = evaluate_fixed(spec, fit.theta_hat, held, opts)
    eta, _ = map_etas(
        spec, fit.theta_hat, ds.subjects[0],
        inner_tolerance=opts.inner_tolerance,
        multistart=opts.multistart_count, seed=opts.seed,
    )
    assert ev.ebes[ds.subjects[0].id] == pytest.approx(tuple(eta), abs=1e-6)


# --- serialization -------------------------------------------------------------------

def test_fit_result_roundtrip():
    fr = FitResult(
        theta_hat={"ka": 1.2}, minus2ll=34.5, ebes={"s1": (0.1, -0.2)},
        converged=True, n_obs=10, p_count=3, mode="laplace", seed=9,
    )
    assert FitResult.from_dict(fr.to_dict()) == fr


def test_test_evaluation_roundtrip():
    ev = TestEvaluation(
        minus2ll=12.0, ebes={"a": (0.0,)}, ipred={"a": (1.0, 2.0)},
        gpred={"a": (0.5, 0.5)}, n_obs=2, order=("a",),
        failed_subjects=("b",), mode="laplace", seed=1,
    )
    assert TestEvaluation.from_dict(ev.to_dict()) == ev
