import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import gammaln

from fluxmem.bmm import (
    BetaMixture, _log_beta_norm, _safeguarded_step, decide_fusion, decide_threshold, log_beta_pdf, moment_match,
    normalize_scores,
)

mpmath.mp.dps = 40


def mp_log_beta_pdf(x, a, b):
    x, a, b = mpmath.mpf(x), mpmath.mpf(a), mpmath.mpf(b)
    return float((a - 1) * mpmath.log(x) + (b - 1) * mpmath.log(1 - x)
                 + mpmath.loggamma(a + b) - mpmath.loggamma(a) - mpmath.loggamma(b))


# -- normalization ------------------------------------------------------------

def test_normalize_examples():
    assert normalize_scores([0.3, 0.3, 0.3]).tolist() == [0.5, 0.5, 0.5]
    assert normalize_scores([0.0, 1.0], 0.01) == pytest.approx([0.01, 0.99], abs=1e-15)
    with pytest.raises(ValueError):
        normalize_scores([])
    with pytest.raises(ValueError):
        normalize_scores([1, 2], eps=0.5)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_normalize_strictly_inside_unit_interval(scores):
    x = normalize_scores(scores)
    assert np.all(x > 0) and np.all(x < 1)


# -- log density --------------------------------------------------------------

def test_log_beta_pdf_examples():
    assert log_beta_pdf(0.5, 1, 1) == pytest.approx(0.0, abs=1e-12)
    assert log_beta_pdf(0.5, 2, 2) == pytest.approx(math.log(1.5), abs=1e-12)
    with pytest.raises(ValueError):
        log_beta_pdf(1.0, 2, 2)
    with pytest.raises(ValueError):
        log_beta_pdf(0.5, 0, 2)


def test_density_integrates_to_one():
    n = 10_000
    grid = (np.arange(n) + 0.5) / n
    assert np.exp(log_beta_pdf(grid, 2, 5)).sum() / n == pytest.approx(1.0, abs=1e-3)


def test_log_gamma_against_mpmath():
    rng = np.random.default_rng(0)
    small = np.exp(rng.uniform(math.log(0.01), math.log(100.0), 300))
    for z in small:
        ref = float(mpmath.loggamma(mpmath.mpf(float(z))))
        assert abs(gammaln(z) - ref) <= 1e-8
        assert abs(math.lgamma(z) - ref) <= 1e-8
    for z in rng.uniform(100.0, 1e4, 100):
        ref = float(mpmath.loggamma(mpmath.mpf(float(z))))
        # above 100 the value itself is large; hold the routine to double precision
        assert abs(gammaln(z) - ref) <= 1e-13 * abs(ref)


def test_log_beta_pdf_against_mpmath():
    rng = np.random.default_rng(1)
    for _ in range(200):
        x = rng.uniform(1e-4, 1 - 1e-4)
        a, b = np.exp(rng.uniform(math.log(0.01), math.log(1e3), 2))
        ref = mp_log_beta_pdf(x, a, b)
        assert log_beta_pdf(x, a, b) == pytest.approx(ref, abs=1e-8, rel=1e-12)
        norm_ref = float(mpmath.loggamma(a + b) - mpmath.loggamma(a) - mpmath.loggamma(b))
        assert _log_beta_norm(a, b) == pytest.approx(norm_ref, abs=1e-8, rel=1e-12)


# -- moment matching ----------------------------------------------------------

@given(st.floats(0.05, 0.95), st.floats(0.001, 0.02))
def test_moment_match_recovers_moments(mu, var):
    var = min(var, 0.9 * mu * (1 - mu))
    a, b, clamped = moment_match(mu, var)
    if not clamped:
        assert a / (a + b) == pytest.approx(mu, rel=1e-9)
        assert a * b / ((a + b) ** 2 * (a + b + 1)) == pytest.approx(var, rel=1e-9)


def test_moment_match_clamps():
    a, b, clamped = moment_match(0.5, 0.0)
    assert clamped and 0.01 <= a <= 1e4 and 0.01 <= b <= 1e4
    a, b, clamped = moment_match(0.5, 0.3)     # var above mu(1-mu) gives kappa < 0
    assert clamped and a == pytest.approx(0.01) and b == pytest.approx(0.01)


# -- fitting -----------------------------------------------------------------

def test_bimodal_four_points():
    m = BetaMixture().fit([0.01, 0.0854, 0.9146, 0.99])
    assert m.means_[1] > 0.8 and m.means_[0] < 0.2
    assert m.pi == pytest.approx(0.5, abs=0.1)


def test_degenerate_input():
    m = BetaMixture().fit([0.5] * 5)
    assert m.degenerate_ and m.pi == 0.5
    assert m.means_ == pytest.approx([0.5, 0.5], abs=1e-6)


def test_planted_recovery_and_gating():
    rng = np.random.default_rng(42)
    hi, lo = rng.beta(8, 2, 500), rng.beta(2, 8, 500)
    x = np.concatenate([hi, lo])
    m = BetaMixture().fit(x)
    assert m.means_ == pytest.approx([0.2, 0.8], abs=0.05)
    truth = np.r_[np.ones(500), np.zeros(500)]
    assert np.mean((m.gate(x) >= 0.5) == truth) >= 0.95


def test_fit_input_errors():
    with pytest.raises(ValueError):
        BetaMixture().fit([0.5])
    with pytest.raises(ValueError):
        BetaMixture().fit([0.2, 1.0])


@given(st.lists(st.floats(0.001, 0.999), min_size=2, max_size=64))
def test_em_ascent_and_invariants(xs):
    m = BetaMixture().fit(xs)
    hist = np.array(m.loglik_history_)
    assert np.all(np.diff(hist) >= -1e-6)
    assert 1e-6 <= m.pi <= 1 - 1e-6 or m.degenerate_
    assert m.means_[1] >= m.means_[0]
    assert np.all((m.alphas_ >= 0.01) & (m.alphas_ <= 1e4))
    assert np.all((m.betas_ >= 0.01) & (m.betas_ <= 1e4))
    post = m.predict_proba(xs)
    assert np.all((post >= 0) & (post <= 1))
    assert np.allclose(post.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_fit_is_deterministic():
    xs = np.random.default_rng(3).uniform(0.01, 0.99, 30)
    a, b = BetaMixture().fit(xs), BetaMixture().fit(xs)
    assert a.to_dict() == b.to_dict()


# -- gate -----------------------------------------------------------------------

SYM = BetaMixture.from_params(0.5, 2, 8, 8, 2)


def test_gate_examples():
    assert SYM.gate(0.5) == pytest.approx(0.5, abs=1e-12)
    assert SYM.gate(0.9) > 0.95


def test_gate_monotone_for_matched_concentrations():
    g = SYM.gate(np.linspace(0.001, 0.999, 2000))
    assert np.all(np.diff(g) >= -1e-15)


@given(st.floats(1e-4, 1 - 1e-4))
def test_gate_and_low_posterior_sum_to_one(x):
    post = SYM.predict_proba([x])[0]
    assert post[0] + post[1] == pytest.approx(1.0, abs=1e-12)


# -- decisions ------------------------------------------------------------------

def test_reference_decision():
    d = decide_fusion([0.2, 0.25, 0.8, 0.85], threshold=0.5, min_keep=1)
    assert d.retained == (2, 3) and d.target == 3 and d.merge and d.fitted


def test_single_candidate_merges_through_min_keep():
    d = decide_fusion([0.9])
    assert d.retained == (0,) and d.target == 0 and d.merge
    assert d.normalized == (0.5,) and not d.fitted


def test_floor_forces_new_session():
    d = decide_fusion([0.05, 0.06])
    assert not d.merge and d.outcome == "new_session"
    assert d.target == 1          # the best retained index is still reported


def test_empty_scores_new_session():
    d = decide_fusion([])
    assert d.retained == () and d.target is None and not d.merge


@pytest.mark.parametrize("m_min", [1, 2, 3])
def test_all_equal_scores_keep_exactly_min_keep(m_min):
    d = decide_fusion([0.4] * 5, min_keep=m_min)
    assert d.retained == tuple(range(m_min))


def test_decide_argument_checks():
    with pytest.raises(ValueError):
        decide_fusion([0.1, 0.2], threshold=1.0)
    with pytest.raises(ValueError):
        decide_fusion([0.1, 0.2], min_keep=0)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.integers(1, 4))
def test_min_keep_respected(scores, m_min):
    d = decide_fusion(scores, min_keep=m_min)
    assert len(d.retained) >= min(m_min, len(scores))
    assert set(d.retained) <= set(range(len(scores)))


@given(st.lists(st.floats(-1, 1).map(lambda v: round(v, 3)), min_size=1, max_size=16),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_affine_rescaling_keeps_decision(scores, a, b):
    base = decide_fusion(scores, floor=-math.inf)
    moved = decide_fusion([a * s + b for s in scores], floor=-math.inf)
    assert moved.retained == base.retained and moved.target == base.target


def test_threshold_gate():
    d = decide_threshold([0.2, 0.6, 0.55], 0.5)
    assert d.retained == (1, 2) and d.target == 1 and d.merge
    assert not decide_threshold([0.1], 0.5).merge


@given(st.lists(st.floats(0.001, 0.999), min_size=2, max_size=40),
       st.tuples(st.floats(0.05, 50), st.floats(0.05, 50)),
       st.tuples(st.floats(0.05, 50), st.floats(0.05, 50)))
def test_safeguard_never_misses_an_improving_step(xs, old, cand):
    x = np.array(xs)
    stats = (float(np.log(x).sum()), float(np.log1p(-x).sum()), float(x.size))

    def q(a, b):
        return (a - 1) * stats[0] + (b - 1) * stats[1] + stats[2] * (
            math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b))

    got = _safeguarded_step(stats, old, cand)
    assert q(*got) >= q(*old)
    if got == (float(old[0]), float(old[1])):
        ladder = [0.5 ** i for i in range(30)]
        assert all(q(old[0] + t * (cand[0] - old[0]), old[1] + t * (cand[1] - old[1])) <= q(*old) + 1e-9 * (1 + abs(q(*old)))
                   for t in ladder)
