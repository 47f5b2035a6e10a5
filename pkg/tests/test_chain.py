from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ttsalab.chain import (
    ChainSampler,
    MarkovChain,
    build_chain,
    certification_horizon,
    kernel_from_csv,
    kernel_to_csv,
    mixing_time,
    random_chain,
    stationary_distribution,
)
from ttsalab.errors import ErgodicityError, ValidationError


def synthetic_chain(rho, c_rho):
    """Only rho and c_rho matter to mixing_time."""
    p = np.array([[1.0]])
    return MarkovChain(p, np.array([1.0]), rho, c_rho, p.copy(), p.copy())


def tv_by_power_iteration(p, pi, n):
    """Propagate each point mass forward n steps, one vector-matrix product at a time."""
    worst = 0.0
    for i in range(p.shape[0]):
        v = np.zeros(p.shape[0])
        v[i] = 1.0
        for _ in range(n):
            v = v @ p
        worst = max(worst, np.abs(v - pi).sum())
    return worst


# -- build_chain --------------------------------------------------------------

def test_identity_kernel_is_reducible():
    with pytest.raises(ErgodicityError):
        build_chain(np.eye(2))


def test_periodic_kernel_rejected():
    with pytest.raises(ErgodicityError):
        build_chain([[0.0, 1.0], [1.0, 0.0]])


def test_rank_one_kernel_mixes_in_one_step():
    ch = build_chain([[0.5, 0.5], [0.5, 0.5]])
    np.testing.assert_allclose(ch.stationary, [0.5, 0.5])
    assert ch.rho == 0.0
    assert ch.c_rho == 1.0


def test_random_ten_state_chain_tv_decay():
    ch = random_chain(10, 5)
    p, pi = ch.kernel, ch.stationary
    # left eigenvector for eigenvalue 1, computed independently
    w, v = np.linalg.eig(p.T)
    ref = np.real(v[:, np.argmin(np.abs(w - 1))])
    np.testing.assert_allclose(pi, ref / ref.sum(), atol=1e-12)
    mods = np.sort(np.abs(np.linalg.eigvals(p)))
    assert ch.rho == pytest.approx(mods[-2], rel=1e-12)
    for n in (1, 2, 4, 8):
        dev = tv_by_power_iteration(p, pi, n)
        assert dev <= ch.c_rho * ch.rho**n + 1e-10
        assert dev == pytest.approx(ch.tv_deviation(n), abs=1e-12)


def test_build_chain_validation():
    with pytest.raises(ValidationError):
        build_chain([[0.5, 0.6], [0.5, 0.5]])
    with pytest.raises(ValidationError):
        build_chain([[1.5, -0.5], [0.5, 0.5]])
    with pytest.raises(ValidationError):
        build_chain([[np.nan, 1.0], [0.5, 0.5]])
    with pytest.raises(ValidationError):
        build_chain([[1.0, 0.0]])


def test_kernel_rows_renormalized_within_tolerance():
    ch = build_chain([[0.5 + 1e-10, 0.5], [0.25, 0.75]])
    np.testing.assert_allclose(ch.kernel.sum(axis=1), 1.0, atol=1e-15)
    assert ch.source_kernel[0, 0] == 0.5 + 1e-10


def test_stationary_distribution_two_state():
    p = np.array([[0.9, 0.1], [0.3, 0.7]])
    np.testing.assert_allclose(stationary_distribution(p), [0.75, 0.25], atol=1e-15)


# -- random_chain -------------------------------------------------------------

def test_singleton_chain():
    ch = random_chain(1, 0)
    np.testing.assert_array_equal(ch.kernel, [[1.0]])
    np.testing.assert_array_equal(ch.stationary, [1.0])
    assert ch.rho == 0.0


def test_random_chain_deterministic():
    a, b = random_chain(10, 42, 0.01), random_chain(10, 42, 0.01)
    assert np.array_equal(a.kernel, b.kernel)
    assert np.all(a.kernel >= 0.01 - 1e-15)
    assert not np.array_equal(a.kernel, random_chain(10, 43, 0.01).kernel)


def test_random_chain_near_uniform_rows():
    ch = random_chain(2, 9, min_entry=0.4)
    p, q = ch.kernel[0, 1], ch.kernel[1, 0]
    assert p >= 0.4 - 1e-15 and q >= 0.4 - 1e-15
    assert ch.rho == pytest.approx(abs(1 - p - q), abs=1e-12)
    assert ch.rho <= 0.2 + 1e-12


def test_random_chain_rejects_infeasible_floor():
    with pytest.raises(ValidationError):
        random_chain(4, 0, min_entry=0.3)
    with pytest.raises(ValidationError):
        random_chain(0, 0)


# -- mixing_time --------------------------------------------------------------

def test_mixing_time_exact_power():
    assert mixing_time(synthetic_chain(0.5, 1.0), 2.0**-10, 1.0) == 10


def test_mixing_time_instant_mixing():
    assert mixing_time(synthetic_chain(0.0, 1.0), 1e-4, 1.0) == 1


def test_mixing_time_numeric():
    expected = math.ceil(math.log(1e-4 / 2) / math.log(0.9))
    assert expected == 94
    assert mixing_time(synthetic_chain(0.9, 2.0), 1e-4, 1.0) == 94


def test_mixing_time_large_stepsize():
    assert mixing_time(synthetic_chain(0.5, 1.0), 2.0, 1.0) == 1


def test_certification_horizon():
    tau = math.floor(math.log(1e-6) / math.log(0.5)) + 1
    assert 0.5**tau < 1e-6 <= 0.5 ** (tau - 1)
    assert certification_horizon(0.5) == 4 * tau


# -- sampler ------------------------------------------------------------------

def test_sampler_frequencies_match_stationary_law():
    ch = random_chain(5, 11)
    n = 1_000_000
    states = ChainSampler(ch, seed=3).sample(n)
    freq = np.bincount(states, minlength=5) / n
    band = 3 * np.sqrt(ch.stationary * (1 - ch.stationary) / n)
    # the states are correlated, so allow a generous multiple of the iid band
    assert np.all(np.abs(freq - ch.stationary) <= 4 * band)


def test_sampler_transition_frequencies():
    ch = random_chain(3, 12)
    s = ChainSampler(ch, seed=4, state=0)
    path = np.concatenate([[0], s.sample(400_000)])
    counts = np.zeros((3, 3))
    np.add.at(counts, (path[:-1], path[1:]), 1)
    np.testing.assert_allclose(counts / counts.sum(axis=1, keepdims=True), ch.kernel, atol=0.01)


def test_sampler_determinism_and_seed_sensitivity():
    ch = random_chain(10, 1)
    a = ChainSampler(ch, seed=5, state=2).sample(1000)
    b = ChainSampler(ch, seed=5, state=2).sample(1000)
    c = ChainSampler(ch, seed=6, state=2).sample(1000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sampler_chunking_is_transparent():
    ch = random_chain(4, 2)
    s1 = ChainSampler(ch, seed=8, state=1)
    whole = s1.sample(100)
    s2 = ChainSampler(ch, seed=8, state=1)
    # the generator's uniforms are drawn in the same order either way
    parts = np.concatenate([s2.sample(40), s2.sample(60)])
    assert np.array_equal(whole, parts)


def test_sampler_rejects_bad_state():
    with pytest.raises(IndexError):
        ChainSampler(random_chain(3, 0), seed=0, state=3)


def test_kernel_csv_round_trip():
    ch = random_chain(6, 21)
    assert np.array_equal(kernel_from_csv(kernel_to_csv(ch)), ch.kernel)


# -- properties ---------------------------------------------------------------

@given(st.integers(1, 12), st.integers(0, 2**32 - 1), st.floats(0.001, 0.05))
def test_random_chain_invariants(n, seed, min_entry):
    ch = random_chain(n, seed, min_entry)
    p, pi = ch.kernel, ch.stationary
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(pi @ p, pi, atol=1e-10)
    assert np.all(pi >= 0) and abs(pi.sum() - 1) < 1e-12
    mods = np.sort(np.abs(np.linalg.eigvals(p)))[::-1]
    assert mods[0] == pytest.approx(1.0)
    if n > 1:
        assert mods[1] < 1 - 1e-9


@given(st.integers(2, 8), st.integers(0, 2**32 - 1), st.floats(0.0, 0.9))
def test_mixing_bound_holds_on_point_masses(n, seed, sparsity):
    gen = np.random.default_rng(seed)
    p = gen.random((n, n)) * (gen.random((n, n)) > sparsity)
    # keep the chain primitive: a positive diagonal plus a cycle
    p += np.eye(n) * 0.05 + np.roll(np.eye(n), 1, axis=1) * 0.05
    p /= p.sum(axis=1, keepdims=True)
    ch = build_chain(p)
    if ch.rho == 0.0:
        tau = 1
    else:
        tau = math.floor(math.log(1e-6) / math.log(ch.rho)) + 1
    assert ch.c_rho >= 1.0
    pn = np.eye(n)
    for k in range(1, 3 * tau + 1):
        pn = pn @ ch.kernel
        dev = np.abs(pn - ch.stationary).sum(axis=1).max()
        assert dev <= ch.c_rho * ch.rho**k + 1e-10
