import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csislab.poison import (InsufficientDistinctHashes, KModesConfig, NonConvergence, kmodes_select,
                            load_poisons, markov_bound_check, objective, random_select, save_poisons, select,
                            snap_modes)


def _brute_objective(poisons, scene):
    total = 0
    for s in scene:
        total += min(int(sum(a != b for a, b in zip(p, s))) for p in poisons)
    return total


def _clustered(seed, n=120, bits=64, centres=4, flip=0.08):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 2, (centres, bits), dtype=np.uint8)
    pick = rng.integers(0, centres, n)
    return c[pick] ^ (rng.random((n, bits)) < flip).astype(np.uint8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 30))
def test_objective_equals_double_loop(seed, k, n):
    rng = np.random.default_rng(seed)
    p = rng.integers(0, 2, (k, 32), dtype=np.uint8)
    s = rng.integers(0, 2, (n, 32), dtype=np.uint8)
    total, mins = objective(p, s)
    assert total == _brute_objective(p, s)
    assert mins.sum() == total


def test_kmodes_trace_non_increasing_and_poisons_are_scene_hashes():
    scene = _clustered(1)
    ps = kmodes_select(scene, KModesConfig(k=4, restarts=3, seed=2))
    for log in ps.trace:
        assert all(b <= a for a, b in zip(log, log[1:]))
    assert len({r.tobytes() for r in ps.bits}) == 4
    for row, src in zip(ps.bits, ps.source_index):
        assert np.array_equal(row, scene[src])
    assert ps.objective == objective(ps.bits, scene)[0] == min(ps.restart_objectives)


def test_kmodes_beats_random_subsets():
    for seed in range(3):
        scene = _clustered(10 + seed, n=60)
        ps = kmodes_select(scene, KModesConfig(k=3, restarts=5, seed=seed))
        rng = np.random.default_rng(seed)
        best = min(objective(scene[rng.choice(len(scene), 3, replace=False)], scene)[0] for _ in range(1000))
        assert ps.objective <= best


def test_restart_seeds_nest():
    scene = _clustered(4)
    one = kmodes_select(scene, KModesConfig(k=3, restarts=1, seed=7))
    many = kmodes_select(scene, KModesConfig(k=3, restarts=4, seed=7))
    assert many.restart_objectives[0] == one.objective
    assert many.objective <= one.objective


def test_determinism_and_random_baseline():
    scene = _clustered(5)
    a, b = select(scene, "kmodes", 5, seed=3), select(scene, "kmodes", 5, seed=3)
    assert np.array_equal(a.bits, b.bits)
    r = random_select(scene, 5, seed=1)
    assert np.array_equal(r.bits, random_select(scene, 5, seed=1).bits)
    assert r.strategy == "random" and len(r) == 5
    with pytest.raises(ValueError):
        select(scene, "greedy", 2)


def test_k_equals_distinct_count_gives_zero_objective():
    scene = np.repeat(_clustered(6, n=5), 3, axis=0)
    ps = kmodes_select(scene, KModesConfig(k=5, restarts=2))
    assert ps.objective == 0
    with pytest.raises(InsufficientDistinctHashes):
        kmodes_select(scene, KModesConfig(k=6))
    with pytest.raises(InsufficientDistinctHashes):
        random_select(scene, 6)


def test_snap_is_unique():
    pts = np.array([[0, 0, 0, 0], [0, 0, 0, 1], [1, 1, 1, 1]], np.uint8)
    modes = np.array([[0, 0, 0, 0], [0, 0, 0, 0]], np.uint8)
    chosen, dist = snap_modes(modes, pts, np.arange(3))
    assert sorted(chosen.tolist()) == [0, 1]
    assert sorted(dist.tolist()) == [0, 1]


def test_non_convergence_warns():
    scene = _clustered(7, n=200, flip=0.3)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        kmodes_select(scene, KModesConfig(k=8, restarts=1, max_iterations=1))
    assert any(issubclass(w.category, NonConvergence) for w in caught)


def test_markov_bound_examples():
    scene = np.array([[0, 0, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1]], np.uint8)
    poisons = np.array([[0, 0, 0, 0]], np.uint8)
    rep = markov_bound_check(poisons, scene, 2)
    assert rep.empirical_miss_rate == Fraction(2, 3)
    assert rep.expected_min_over_t == Fraction(6, 3) / 2
    assert rep.holds
    with pytest.raises(ValueError):
        markov_bound_check(poisons, scene, 0)


def test_poison_file_round_trip(tmp_path):
    scene = _clustered(8)
    ps = select(scene, "kmodes", 3, seed=1, restarts=2)
    save_poisons(tmp_path / "p.jsonl", ps)
    back = load_poisons(tmp_path / "p.jsonl", scene)
    assert np.array_equal(back.bits, ps.bits)
    assert np.array_equal(back.source_index, ps.source_index)
    assert back.objective == ps.objective
