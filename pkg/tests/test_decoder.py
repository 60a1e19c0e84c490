"""Decoding: step distributions, greedy/sample/beam, probabilities, CVRP."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chain_log_prob_ref, masked_softmax_ref
from tournet.decoder import (BeamConfig, beam_decode, cvrp_decode, greedy_decode,
                             greedy_decode_batch, sample_decode, step_distribution,
                             tour_log_prob)
from tournet.instances import (CvrpInstance, InstanceError, TspInstance,
                               distance_matrix, generate_cvrp, tour_length,
                               validate_cvrp_solution)
from tournet.model import ModelOutput


def _random_output(n, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return ModelOutput(beta=rng.normal(size=n) * scale,
                       A=rng.normal(size=(n, n)) * scale)


def _cycle_output(n, start):
    """One-hot scores forcing start -> start+1 -> ... (mod n)."""
    beta = np.full(n, -10.0)
    beta[start] = 10.0
    A = np.full((n, n), -10.0)
    for i in range(n):
        A[i, (i + 1) % n] = 10.0
    return ModelOutput(beta=beta, A=A)


def test_step_distribution_uniform_two_left():
    A = np.zeros((4, 4))
    visited = np.array([True, False, True, False])
    gamma = step_distribution(A, visited, current=0)
    assert np.allclose(gamma, [0.0, 0.5, 0.0, 0.5])


def test_step_distribution_single_choice():
    A = np.random.default_rng(0).normal(size=(3, 3))
    gamma = step_distribution(A, np.array([True, True, False]), current=1)
    assert np.allclose(gamma, [0.0, 0.0, 1.0])


def test_step_distribution_all_visited_errors():
    with pytest.raises(ValueError):
        step_distribution(np.zeros((2, 2)), np.array([True, True]), current=0)


def test_step_distribution_matches_independent_softmax():
    rng = np.random.default_rng(1)
    for seed in range(50):
        A = rng.normal(size=(6, 6))
        visited = np.zeros(6, dtype=bool)
        visited[rng.choice(6, size=3, replace=False)] = True
        cur = int(rng.integers(6))
        got = step_distribution(A, visited, cur)
        ref = masked_softmax_ref(list(A[cur]), list(visited))
        assert np.allclose(got, ref, atol=1e-7)


def test_greedy_follows_forced_cycle():
    out = _cycle_output(5, start=2)
    trace = greedy_decode(out)
    assert np.array_equal(trace.tour, [2, 3, 4, 0, 1])
    assert np.all(trace.step_probs > 0.99)


def test_greedy_hand_traced_four_nodes():
    beta = np.array([0.1, 0.9, 0.2, 0.3])
    A = np.array([
        [0.0, 0.2, 0.9, 0.1],
        [0.5, 0.0, 0.1, 0.8],
        [0.3, 0.4, 0.0, 0.6],
        [0.9, 0.2, 0.7, 0.0],
    ])
    trace = greedy_decode(ModelOutput(beta=beta, A=A))
    # by hand: start 1; from 1 mask {1}: argmax row1 -> 3; from 3 mask {1,3}:
    # row3 best unvisited is 0; remaining node is 2
    assert np.array_equal(trace.tour, [1, 3, 0, 2])
    p0 = masked_softmax_ref(list(beta), [False] * 4)[1]
    p1 = masked_softmax_ref(list(A[1]), [False, True, False, False])[3]
    assert trace.step_probs[0] == pytest.approx(p0, abs=1e-12)
    assert trace.step_probs[1] == pytest.approx(p1, abs=1e-12)
    assert trace.log_prob == pytest.approx(np.log(trace.step_probs).sum())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 3, 7, 20]))
def test_greedy_and_sample_always_permutations(seed, n):
    out = _random_output(n, seed)
    g = greedy_decode(out)
    s = sample_decode(out, seed)
    for trace in (g, s):
        assert np.array_equal(np.sort(trace.tour), np.arange(n))
        assert np.all(trace.step_probs > 0)
        assert np.all(trace.step_probs <= 1.0)


def test_sample_deterministic_per_seed():
    out = _random_output(9, 4)
    a = sample_decode(out, 123)
    b = sample_decode(out, 123)
    assert np.array_equal(a.tour, b.tour)


def test_sample_one_hot_matches_greedy():
    out = _cycle_output(6, start=1)
    assert np.array_equal(sample_decode(out, 0).tour, greedy_decode(out).tour)


def test_sample_first_node_frequencies():
    rng = np.random.default_rng(7)
    out = ModelOutput(beta=np.array([0.5, -0.3, 1.1]), A=rng.normal(size=(3, 3)))
    probs = np.exp(out.beta) / np.exp(out.beta).sum()
    n_samples = 100_000
    counts = np.zeros(3)
    master = np.random.default_rng(0)
    for _ in range(n_samples):
        counts[sample_decode(out, master).tour[0]] += 1
    freq = counts / n_samples
    sigma = np.sqrt(probs * (1 - probs) / n_samples)
    assert np.all(np.abs(freq - probs) < 3 * sigma + 1e-9)


def test_beam_width_one_equals_greedy():
    for seed in range(50):
        out = _random_output(8, seed)
        g = greedy_decode(out).tour
        b = beam_decode(out, BeamConfig(width=1, final_rule="highest_prob"))
        assert np.array_equal(g, b)


def test_beam_width_one_equals_greedy_with_ties():
    # constant scores: every step is a tie; lowest index must win everywhere
    out = ModelOutput(beta=np.zeros(6), A=np.zeros((6, 6)))
    g = greedy_decode(out).tour
    b = beam_decode(out, BeamConfig(width=1, final_rule="highest_prob"))
    assert np.array_equal(g, np.arange(6))
    assert np.array_equal(b, g)
    # coarse quantization provokes partial ties
    for seed in range(20):
        rng = np.random.default_rng(seed)
        out = ModelOutput(beta=np.round(rng.normal(size=7), 1),
                          A=np.round(rng.normal(size=(7, 7)), 1))
        assert np.array_equal(greedy_decode(out).tour,
                              beam_decode(out, BeamConfig(width=1,
                                                          final_rule="highest_prob")))


@pytest.mark.parametrize("n", [5, 6])
def test_beam_exhaustive_finds_most_probable_tour(n):
    import math
    for seed in range(5):
        out = _random_output(n, seed)
        width = n * math.factorial(n - 1)  # covers every decode sequence
        got = beam_decode(out, BeamConfig(width=width, final_rule="highest_prob"))
        best = max(
            ((chain_log_prob_ref(out.beta, out.A, (s,) + p), (s,) + p)
             for s in range(n)
             for p in itertools.permutations([x for x in range(n) if x != s])),
        )
        assert tuple(got) == best[1]


def test_beam_shortest_rule_never_longer_than_highest_prob():
    for seed in range(20):
        out = _random_output(7, seed)
        inst = TspInstance(coords=np.random.default_rng(seed).random((7, 2)))
        dm = distance_matrix(inst)
        cfg = dict(width=5)
        short = beam_decode(out, BeamConfig(final_rule="shortest_tour", **cfg), dm=dm)
        prob = beam_decode(out, BeamConfig(final_rule="highest_prob", **cfg), dm=dm)
        assert tour_length(short, dm) <= tour_length(prob, dm) + 1e-12


def test_beam_shortest_rule_requires_distances():
    with pytest.raises(ValueError):
        beam_decode(_random_output(4, 0), BeamConfig(width=2))


def test_tour_log_prob_one_hot_chain_is_certain():
    out = _cycle_output(5, start=0)
    assert tour_log_prob(out, np.arange(5)) == pytest.approx(0.0, abs=1e-4)


def test_tour_log_prob_matches_trace_product():
    for seed in range(20):
        out = _random_output(8, seed)
        trace = greedy_decode(out)
        assert np.exp(tour_log_prob(out, trace.tour)) == \
            pytest.approx(np.prod(trace.step_probs), abs=1e-9)


def test_tour_probabilities_sum_to_one_n5():
    out = _random_output(5, 3)
    total = sum(
        np.exp(tour_log_prob(out, np.array((s,) + p)))
        for s in range(5)
        for p in itertools.permutations([x for x in range(5) if x != s])
    )
    assert total == pytest.approx(1.0, abs=1e-6)


def test_tour_log_prob_rejects_repeats():
    out = _random_output(4, 0)
    with pytest.raises(InstanceError):
        tour_log_prob(out, np.array([0, 1, 1, 2]))


def test_greedy_batch_matches_single():
    rng = np.random.default_rng(5)
    beta = rng.normal(size=(10, 9))
    A = rng.normal(size=(10, 9, 9))
    batch = greedy_decode_batch(beta, A)
    for i in range(10):
        single = greedy_decode(ModelOutput(beta=beta[i], A=A[i])).tour
        assert np.array_equal(batch[i], single)


# ---------------------------------------------------------------------------
# CVRP

def test_cvrp_full_demand_forces_singleton_routes():
    inst = CvrpInstance(depot=np.array([0.5, 0.5]),
                        coords=np.random.default_rng(0).random((5, 2)),
                        demands=np.ones(5), capacity=1.0)
    out = ModelOutput(beta=np.zeros(6),
                      A=np.random.default_rng(1).normal(size=(6, 6)))
    sol = cvrp_decode(out, inst, policy="greedy")
    validate_cvrp_solution(sol, inst)
    assert len(sol.routes) == 5
    assert all(len(r) == 1 for r in sol.routes)


def test_cvrp_decodes_are_capacity_feasible():
    for seed in range(60):
        inst = generate_cvrp(12, seed=seed)
        out = ModelOutput(beta=np.zeros(13),
                          A=np.random.default_rng(seed).normal(size=(13, 13)))
        for policy in ("greedy", "sample"):
            sol = cvrp_decode(out, inst, policy=policy, seed=seed)
            validate_cvrp_solution(sol, inst)


def test_cvrp_single_chain_when_capacity_allows():
    n = 6
    inst = CvrpInstance(depot=np.array([0.0, 0.0]),
                        coords=np.random.default_rng(2).random((n, 2)),
                        demands=np.full(n, 0.1), capacity=1.0)
    A = np.full((n + 1, n + 1), -10.0)
    for i in range(n + 1):
        A[i, (i + 1) % (n + 1)] = 10.0  # depot -> 1 -> 2 -> ... -> n
    sol = cvrp_decode(ModelOutput(beta=np.zeros(n + 1), A=A), inst)
    validate_cvrp_solution(sol, inst)
    assert sol.routes == ((1, 2, 3, 4, 5, 6),)


def test_cvrp_never_revisits_depot_consecutively():
    for seed in range(20):
        inst = generate_cvrp(8, seed=seed)
        out = ModelOutput(beta=np.zeros(9),
                          A=np.random.default_rng(seed + 100).normal(size=(9, 9)))
        sol = cvrp_decode(out, inst, policy="sample", seed=seed)
        assert all(len(r) >= 1 for r in sol.routes)
