from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmadetect.data import Arm, NetworkDataset, ObservedProportions, Study, observed_proportions
from nmadetect.detect import (
    DegenerateProportionPool,
    DetectionThresholds,
    PPPValue,
    check_convergence,
    detect,
    f_gelman_chi2,
    f_likelihood,
    f_sdo,
    ppp_value,
    replicate,
    replicate_events,
    replicate_proportions,
    _all_ppp_values,
)
from nmadetect.mcmc import SamplerConfig, SamplerDiagnosticError, sample
from nmadetect.model import ModelSpec, ParameterState
from nmadetect.simulate import SimScenario, generate


def _two_study_ds():
    return NetworkDataset(
        (
            Study(id="1", arms=(Arm(1, 12, 40), Arm(2, 20, 40))),
            Study(id="2", arms=(Arm(1, 9, 35), Arm(2, 14, 30))),
        ),
        num_treatments=2,
    )


def _state_for(ds, mu=None, theta=None):
    return ParameterState(
        mu=np.asarray(mu if mu is not None else np.zeros(len(ds.studies)), dtype=float),
        theta=np.asarray(theta if theta is not None else np.zeros(ds.num_treatments - 1),
                         dtype=float),
        delta=tuple(np.zeros(len(s.arms) - 1) for s in ds.studies),
        tau2=1.0,
    )


# --- discrepancies ---


def test_f_likelihood_hand_value():
    ds = NetworkDataset((Study(id="1", arms=(Arm(1, 1, 2),)),), num_treatments=1)
    state = _state_for(ds, theta=np.zeros(0))
    d = f_likelihood(ds, "1", state)
    assert d.kind == "likelihood"
    assert d.value == pytest.approx(math.log(0.5), abs=1e-12)


def test_f_likelihood_matches_quadrature_oracle():
    """Per-arm contributions: baseline arm is a plain log-pmf, non-baseline
    arms integrate the random effect out; oracle by adaptive quadrature."""
    from scipy import integrate as spi
    from scipy import stats as sps

    rng = np.random.default_rng(5)
    ds = _two_study_ds()
    for _ in range(12):
        tau2 = float(rng.uniform(0.05, 2.0))
        state = ParameterState(
            mu=rng.normal(size=2), theta=rng.normal(size=1),
            delta=(rng.normal(size=1) * 0.3, rng.normal(size=1) * 0.3), tau2=tau2,
        )
        mine = f_likelihood(ds, "2", state).value
        lp0 = float(state.mu[1])
        anchor = float(state.mu[1] + state.theta[0])
        tau = math.sqrt(tau2)

        def integrand(d):
            p = 1 / (1 + math.exp(-(anchor + d)))
            return sps.binom.pmf(14, 30, p) * sps.norm.pdf(d, scale=tau)

        marg, _ = spi.quad(integrand, -9 * tau - 8, 9 * tau + 8, limit=300)
        oracle = sps.binom.logpmf(9, 35, 1 / (1 + math.exp(-lp0))) + math.log(marg)
        # trapezoid tolerance of the compiled integrator is ~1e-3 in logs
        assert mine == pytest.approx(oracle, abs=5e-3)


def test_f_likelihood_tau_zero_reduces_to_conditional():
    from scipy import stats as sps

    ds = _two_study_ds()
    state = ParameterState(mu=np.array([0.1, -0.4]), theta=np.array([0.6]),
                           delta=(np.zeros(1), np.zeros(1)), tau2=0.0)
    mine = f_likelihood(ds, "2", state).value
    oracle = (
        sps.binom.logpmf(9, 35, 1 / (1 + math.exp(0.4)))
        + sps.binom.logpmf(14, 30, 1 / (1 + math.exp(-(-0.4 + 0.6))))
    )
    assert mine == pytest.approx(oracle, abs=1e-9)


def test_f_sdo_hand_values():
    pool = ObservedProportions((
        ("1", 1, 0.1), ("2", 1, 0.2), ("3", 1, 0.3), ("4", 1, 0.4), ("5", 1, 0.5),
    ))
    d = f_sdo(pool, "5")
    assert d.value == pytest.approx(2.0)
    center = f_sdo(pool, "3")
    assert center.value == pytest.approx(0.0)


@settings(max_examples=100, deadline=None)
@given(
    scale=st.floats(0.05, 0.45),
    shift=st.floats(0.0, 0.5),
    seed=st.integers(0, 9999),
)
def test_f_sdo_affine_invariance(scale, shift, seed):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0, 1, size=12)
    if np.median(np.abs(values - np.median(values))) < 1e-6:
        values = values + np.linspace(0, 0.5, 12)
    ids = [str(i // 2 + 1) for i in range(12)]
    pool = ObservedProportions(tuple((sid, 1 + i % 2, float(v))
                                     for i, (sid, v) in enumerate(zip(ids, values))))
    mapped = ObservedProportions(tuple((sid, t, float(scale * v + shift))
                                       for sid, t, v in pool.values))
    for study in ("1", "3", "6"):
        assert f_sdo(pool, study).value == pytest.approx(
            f_sdo(mapped, study).value, rel=1e-9)


def test_f_sdo_degenerate_pool_errors():
    pool = ObservedProportions((("1", 1, 0.3), ("1", 2, 0.3), ("2", 1, 0.3)))
    with pytest.raises(DegenerateProportionPool):
        f_sdo(pool, "1")


def test_f_gelman_chi2_hand_value_and_symmetry():
    ds = NetworkDataset((Study(id="1", arms=(Arm(1, 60, 100),)),), num_treatments=1)
    state = _state_for(ds, theta=np.zeros(0))
    d = f_gelman_chi2(ds, "1", state)
    assert d.value == pytest.approx(4.0)
    ds_lo = NetworkDataset((Study(id="1", arms=(Arm(1, 40, 100),)),), num_treatments=1)
    d_lo = f_gelman_chi2(ds_lo, "1", _state_for(ds_lo, theta=np.zeros(0)))
    assert d_lo.value == pytest.approx(d.value)
    exact = NetworkDataset((Study(id="1", arms=(Arm(1, 50, 100),)),), num_treatments=1)
    assert f_gelman_chi2(exact, "1", _state_for(exact, theta=np.zeros(0))).value == 0.0


def test_f_gelman_chi2_rejects_boundary_probability():
    ds = NetworkDataset((Study(id="1", arms=(Arm(1, 60, 100),)),), num_treatments=1)
    state = _state_for(ds, mu=np.array([-800.0]), theta=np.zeros(0))
    with pytest.raises(ValueError, match="exactly 0 or 1"):
        f_gelman_chi2(ds, "1", state)


# --- replicates ---


def test_replicate_deterministic_and_bounded(fast_cfg):
    ds = _two_study_ds()
    s = sample(ds, ModelSpec.standard(), fast_cfg)
    r1 = replicate(ds, s, 5, seed=9)
    r2 = replicate(ds, s, 5, seed=9)
    assert np.array_equal(r1.events, r2.events)
    r3 = replicate(ds, s, 5, seed=10)
    assert not np.array_equal(r1.events, r3.events)
    batch = replicate_events(ds, s, seed=9)
    assert np.array_equal(batch.events[5], r1.events[0])
    n = np.array([a.total for st_ in ds.studies for a in st_.arms])
    assert np.all(batch.events >= 0)
    assert np.all(batch.events <= n)


def test_replicate_zero_probability_gives_zero_events(fast_cfg):
    ds = _two_study_ds()
    s = sample(ds, ModelSpec.standard(), fast_cfg)
    s.mu[:, :, :] = -800.0
    s.theta[:, :, :] = 0.0
    s.delta[:, :, :] = 0.0
    rep = replicate(ds, s, 3, seed=1)
    assert np.all(rep.events == 0)


def test_replicate_mean_matches_binomial_mean(fast_cfg):
    """At a fixed draw, averaging replicates over seeds recovers
    n * E[expit(anchor + redrawn effect)] (independent forward MC oracle)."""
    ds = _two_study_ds()
    s = sample(ds, ModelSpec.standard(), fast_cfg)
    from scipy.special import expit

    fixed = 7
    pm = s.packed
    mu = s.mu.reshape(-1, 2)[fixed]
    theta = s.theta.reshape(-1, 1)[fixed]
    tau = math.sqrt(s.tau2.reshape(-1)[fixed])
    theta_full = np.array([0.0, theta[0]])
    anchors = mu[pm.arm_study] + theta_full[pm.arm_t] - theta_full[pm.arm_b]
    n = np.array([a.total for st_ in ds.studies for a in st_.arms], dtype=float)

    sums = np.zeros(len(n))
    trials = 400
    for seed in range(trials):
        sums += replicate(ds, s, fixed, seed=seed).events[0]
    mean_emp = sums / trials

    rng = np.random.default_rng(4242)
    acc = np.zeros(len(n))
    oracle_trials = 4000
    for _ in range(oracle_trials):
        eff = np.zeros(len(n))
        eff[pm.arm_delta > 0] = tau * rng.standard_normal(int((pm.arm_delta > 0).sum()))
        acc += n * expit(anchors + eff)
    oracle = acc / oracle_trials
    se = np.sqrt(n * 0.25 / trials) + np.sqrt(n * n * 0.05 / oracle_trials)
    assert np.all(np.abs(mean_emp - oracle) < 4 * np.maximum(se, 0.1))


def test_replicate_pipeline_matches_forward_simulation_oracle(fast_cfg):
    """Mean replicated proportions agree with a brute-force forward simulation
    (fresh effects + binomials) from the same posterior draws."""
    ds = _two_study_ds()
    s = sample(ds, ModelSpec.standard(), fast_cfg)
    from nmadetect.detect import _anchor_matrix, _pooled_draws
    from scipy.special import expit

    batch = replicate_events(ds, s, seed=3).events
    n = np.array([a.total for st_ in ds.studies for a in st_.arms], dtype=float)
    mine = (batch / n).mean(axis=0)

    pm = s.packed
    mu, theta, _, tau2 = _pooled_draws(s)
    anchors = _anchor_matrix(pm, mu, theta)
    rng = np.random.default_rng(999)
    oracle = np.zeros(len(n))
    mask = pm.arm_delta > 0
    for row, t2 in zip(anchors, tau2):
        eff = np.zeros(len(n))
        eff[mask] = math.sqrt(t2) * rng.standard_normal(int(mask.sum()))
        oracle += rng.binomial(n.astype(int), expit(row + eff)) / n
    oracle /= anchors.shape[0]
    se = np.sqrt(0.3 / anchors.shape[0])
    assert np.all(np.abs(mine - oracle) < 5 * se)


# --- p-values ---


def test_ppp_value_granularity_and_range(fast_cfg):
    ds = _two_study_ds()
    s = sample(ds, ModelSpec.standard(), fast_cfg)
    total = s.n_chains * s.n_draws
    for kind in ("likelihood", "sdo", "gelman_chi2"):
        p = ppp_value(ds, s, "1", kind, seed=4, min_draws=1000)
        assert 0.0 <= p.value <= 1.0
        assert p.num_draws == total
        # integer multiple of 1/S
        assert abs(p.value * total - round(p.value * total)) < 1e-9


def test_ppp_value_requires_enough_draws(fast_cfg):
    ds = _two_study_ds()
    s = sample(ds, ModelSpec.standard(), fast_cfg)
    with pytest.raises(ValueError, match="post-burn-in draws"):
        ppp_value(ds, s, "1", "likelihood", min_draws=10 ** 9)


def test_p_sdo_data_only_reduction_two_code_paths(fast_cfg):
    """Eq-style per-draw comparison equals the plain fraction of replicates
    beating the constant observed score."""
    rng = np.random.default_rng(40)
    studies = tuple(
        Study(id=str(i), arms=(Arm(1, int(rng.integers(5, 30)), 60),
                               Arm(2, int(rng.integers(10, 50)), 70)))
        for i in range(1, 7)
    )
    ds = NetworkDataset(studies, num_treatments=2)
    s = sample(ds, ModelSpec.standard(), fast_cfg)
    seed = 11
    p = ppp_value(ds, s, "1", "sdo", seed=seed)
    rep = replicate_events(ds, s, seed=seed)
    obs_score = f_sdo(observed_proportions(ds), "1").value
    count = 0
    total = rep.events.shape[0]
    for k in range(total):
        props = replicate_proportions(rep, k)
        count += f_sdo(props, "1").value >= obs_score
    assert p.value == pytest.approx(count / total)


def test_ppp_orientation_low_likelihood_is_small_p():
    """An induced outlier gets a smaller p_L than the typical clean study."""
    gen = generate(SimScenario(geometry="unbalanced_poor_15", tau2=0.0, num_outliers=1,
                               severity=3.0, seed=123))
    ds = gen.dataset
    cfg = SamplerConfig(iterations=4000, burn_in=1000, chains=2, seed=6)
    s = sample(ds, ModelSpec.standard(), cfg)
    table = _all_ppp_values(ds, s, seed=8)
    out = gen.outlier_ids[0]
    others = [st_.id for st_ in ds.studies if st_.id != out]
    p_out = table["likelihood"][out].value
    p_oth = float(np.median([table["likelihood"][sid].value for sid in others]))
    assert p_out < p_oth
    assert table["sdo"][out].value <= 0.2


def test_frozen_pool_flag_changes_replicate_scoring(fast_cfg):
    ds = _two_study_ds()
    s = sample(ds, ModelSpec.standard(), fast_cfg)
    a = ppp_value(ds, s, "1", "sdo", seed=2, freeze_sdo_pool=False)
    b = ppp_value(ds, s, "1", "sdo", seed=2, freeze_sdo_pool=True)
    assert a.value != b.value  # different scoring pools on the replicate side


# --- detection report ---


def test_detect_flags_injected_outlier_and_schema(tmp_path):
    gen = generate(SimScenario(geometry="unbalanced_poor_15", tau2=0.0, num_outliers=1,
                               severity=3.0, seed=2024))
    cfg = SamplerConfig(iterations=10_000, burn_in=2000, chains=2, seed=3)
    report = detect(gen.dataset, cfg)
    assert len(report.rows) == gen.dataset.n_studies
    assert gen.outlier_ids[0] in report.flagged_ids
    row = report.row(gen.outlier_ids[0])
    assert row.bayes_factor.value > 3.2
    out_csv = tmp_path / "report.csv"
    report.to_csv(out_csv)
    header = out_csv.read_text().splitlines()[0]
    assert header == "study,bf,bf_class,p_L,p_SDO,p_G,flagged"
    doc = report.to_json(tmp_path / "report.json")
    assert doc["thresholds"] == {"bf": 3.2, "p": 0.05}
    assert len(doc["studies"]) == gen.dataset.n_studies


def test_detect_identical_studies_no_flags():
    studies = tuple(
        Study(id=str(i), arms=(Arm(1, 10, 50), Arm(2, 20, 50)))
        for i in range(1, 9)
    )
    ds = NetworkDataset(studies, num_treatments=2)
    cfg = SamplerConfig(iterations=5000, burn_in=1000, chains=2, seed=17)
    report = detect(ds, cfg)
    assert report.flagged_ids == ()
    for row in report.rows:
        assert row.bayes_factor.value < 3.2


def test_detect_deterministic(fast_cfg):
    gen = generate(SimScenario(geometry="unbalanced_poor_15", tau2=0.0, num_outliers=1,
                               severity=3.0, seed=77))
    cfg = SamplerConfig(iterations=10_000, burn_in=2000, chains=2, seed=5)
    r1 = detect(gen.dataset, cfg)
    r2 = detect(gen.dataset, cfg)
    for a, b in zip(r1.rows, r2.rows):
        assert a.bayes_factor.log_value == b.bayes_factor.log_value
        assert a.p_L.value == b.p_L.value
        assert a.flagged == b.flagged


def test_convergence_gate_raises_with_dump(fast_cfg):
    ds = _two_study_ds()
    s = sample(ds, ModelSpec.standard(), fast_cfg)
    s.__dict__["rhats"] = {"mu[1]": 1.5, "theta[2]": 1.02}
    with pytest.raises(SamplerDiagnosticError) as err:
        check_convergence(s)
    assert "mu[1]" in str(err.value)
    assert err.value.dump["rhat"]["mu[1]"] == 1.5


def test_monotone_severity_paired_simulations():
    """Raising the contamination multiplier from 2.5 to 3.0 with the same seed
    stream never increases the injected outlier's p_L (ties allowed)."""
    worse = 0
    pairs = 20
    for rep in range(pairs):
        ps = {}
        for severity in (2.5, 3.0):
            gen = generate(SimScenario(geometry="unbalanced_poor_15", tau2=0.096,
                                       num_outliers=1, severity=severity, seed=5000 + rep))
            cfg = SamplerConfig(iterations=3000, burn_in=1000, chains=2, seed=31 + rep)
            s = sample(gen.dataset, ModelSpec.standard(), cfg)
            table = _all_ppp_values(gen.dataset, s, seed=rep, min_draws=1000)
            ps[severity] = table["likelihood"][gen.outlier_ids[0]].value
        if ps[3.0] > ps[2.5]:
            worse += 1
    assert worse == 0


def test_report_completeness(smoking, fast_cfg):
    report = detect(smoking, SamplerConfig(iterations=10_000, burn_in=2000, chains=2, seed=1),
                    studies=["3", "5"])
    assert [r.study for r in report.rows] == ["3", "5"]
