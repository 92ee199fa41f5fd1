import numpy as np
import pytest
from scipy import stats

from app.core.exceptions import DomainError, ScenarioValidationError, StabilityError
from app.core.sim.blocks import LagControllerParams
from app.core.sim.choice import choice_probabilities
from app.core.sim.loop import (
    InitialConditionPolicy,
    count_columns,
    init,
    initial_probabilities,
    parse_policy,
    run,
    run_batch,
    run_generator,
    stability_report,
    step,
)
from tests.conftest import make_profile, open_loop, small_closed_loop


ALL_CITY = InitialConditionPolicy.all_at(2, 2)


def test_first_step_from_all_city(paper):
    sim = run(paper, steps=5, seed=1, policy=ALL_CITY)
    assert sim.totals()[0].tolist() == [0, 0, 100]
    assert sim.counts[0].tolist() == [[0, 0, 20], [0, 0, 80]]
    assert sim.filtered[0].tolist() == [0.0, 0.0]
    assert sim.errors[0].tolist() == [25.0, 35.0]
    assert sim.incentives[0] == pytest.approx([3.75, 7.0], abs=1e-12)


def test_filtered_output_is_previous_count(paper):
    sim = run(paper, steps=50, seed=3)
    suburbs = sim.totals()[:, :2].astype(float)
    assert np.array_equal(sim.filtered[1:], suburbs[:-1])
    assert np.array_equal(sim.errors, np.asarray(paper.references) - sim.filtered)


def test_same_seed_same_run(paper):
    a = run(paper, steps=100, seed=42)
    b = run(paper, steps=100, seed=42)
    assert a.digest() == b.digest()
    assert np.array_equal(a.counts, b.counts)
    assert np.array_equal(a.incentives, b.incentives)


def test_different_seed_different_run(paper):
    assert run(paper, steps=100, seed=1).digest() != run(paper, steps=100, seed=2).digest()


def test_run_index_selects_independent_stream():
    a = run_generator(7, 0).random(5)
    b = run_generator(7, 1).random(5)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, run_generator(7, 0).random(5))


def test_conservation_every_step(paper):
    sim = run(paper, steps=200, seed=5)
    assert np.all(sim.totals().sum(axis=1) == paper.n_drivers)
    per_profile = sim.counts.sum(axis=2)
    assert np.all(per_profile == np.array([p.population_size for p in paper.profiles]))
    assert np.all(sim.counts >= 0)


def test_absorbing_city_keeps_everyone_there():
    scenario = small_closed_loop(
        profiles=[make_profile("drivers", 30, [(1.0, -1.0)], city_bias=1e6)]
    )
    sim = run(scenario, steps=200, seed=0, policy=InitialConditionPolicy.all_at(1, 1))
    assert np.all(sim.totals() == np.array([0, 30]))
    assert np.all(sim.city_counts == 30)


def test_errors_do_not_depend_on_current_decisions(paper):
    left, right = init(paper, run_generator(9)), init(paper, run_generator(9))
    rng_left, rng_right = run_generator(10), run_generator(10)
    for _ in range(5):
        step(paper, left, rng_left)
        step(paper, right, rng_right)

    right.driver_states = np.full_like(right.driver_states, 2)
    a, b = step(paper, left, rng_left), step(paper, right, rng_right)
    assert np.array_equal(a.errors, b.errors)
    assert np.array_equal(a.incentives, b.incentives)
    assert b.totals.tolist() == [0, 0, 100]


def test_open_loop_counts_are_binomial(class_2):
    scenario = open_loop([class_2], [5.0, 0.0])
    sim = run(scenario, steps=10_000, seed=123)
    assert np.all(sim.incentives == np.array([5.0, 0.0]))

    p = choice_probabilities(class_2, [5.0, 0.0]).p
    suburb_1 = sim.totals()[1:, 0]
    n = class_2.population_size
    sigma = np.sqrt(n * p[0] * (1 - p[0]) / suburb_1.size)
    assert abs(suburb_1.mean() - n * p[0]) <= 4 * sigma

    pooled = sim.totals()[1:].sum(axis=0)
    assert pooled[1] == 0
    expected = pooled.sum() * np.array([p[0], p[2]]) / (p[0] + p[2])
    _, p_value = stats.chisquare(pooled[[0, 2]], expected)
    assert p_value > 0.001


def test_random_simplex_draws_are_uniform(class_1, class_2):
    rng = run_generator(31)
    draws = np.vstack(
        [initial_probabilities(InitialConditionPolicy.random_simplex(), [class_1, class_2], rng) for _ in range(10000)]
    )
    assert draws.shape == (20000, 3)
    assert np.allclose(draws.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(draws.mean(axis=0), 1 / 3, atol=0.01)


def test_fixed_policy_applies_to_every_profile(paper):
    rng = run_generator(0)
    p0 = initial_probabilities(ALL_CITY, paper.profiles, rng)
    assert p0.tolist() == [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]

    per_profile = InitialConditionPolicy(
        kind="fixed", per_profile={"class_1": [1.0, 0.0, 0.0], "class_2": [0.0, 1.0, 0.0]}
    )
    state = init(paper, 0, per_profile)
    assert state.profile_counts().tolist() == [[20, 0, 0], [0, 80, 0]]


def test_decimation_holds_incentive_and_controller_state():
    scenario = small_closed_loop(decimation=3)
    sim = run(scenario, steps=7, seed=4)
    pi = sim.incentives[:, 0]
    assert pi[1] == pi[0] and pi[2] == pi[0]
    assert pi[4] == pi[3] and pi[5] == pi[3]
    # one controller update between k=0 and k=3: x = e[0]
    c, d = 0.1 * (0.5 - 0.0), 0.1
    assert pi[0] == pytest.approx(d * sim.errors[0, 0])
    assert pi[3] == pytest.approx(c * sim.errors[0, 0] + d * sim.errors[3, 0])
    assert np.array_equal(sim.errors[:, 0], 10.0 - sim.filtered[:, 0])


def test_run_shapes_and_labels(paper):
    sim = run(paper, steps=1, seed=0)
    assert sim.steps == 1
    assert sim.counts.shape == (1, 2, 3)
    assert sim.expected.shape == (1, 3)
    labels = sim.labels()
    assert labels[:6] == ["e_1", "e_2", "pi_1", "pi_2", "yhat_1", "yhat_2"]
    assert "count_class_1_suburb_1" in labels and "total_city" in labels
    assert labels[-3:] == ["expected_suburb_1", "expected_suburb_2", "expected_city"]
    assert sim.stack().shape == (1, len(labels))
    assert count_columns(paper.profile_names, 2).tolist() == list(range(6, 15))


def test_expected_totals_are_logit_expectation(paper):
    sim = run(paper, steps=3, seed=2)
    for k in range(3):
        pi = sim.incentives[k]
        expected = sum(p.population_size * choice_probabilities(p, pi).p for p in paper.profiles)
        np.testing.assert_allclose(sim.expected[k], expected, rtol=1e-12)
    assert sim.expected.sum(axis=1) == pytest.approx([paper.n_drivers] * 3, rel=1e-12)


def test_batched_runs_match_single_runs(paper):
    batch = run_batch(paper, steps=40, seed=12, run_indices=[3, 4, 5, 6, 7])
    for sim in batch:
        alone = run(paper, steps=40, seed=12, run_index=sim.run_index)
        assert np.array_equal(sim.stack(), alone.stack())
        assert sim.digest() == alone.digest()

    pair = run_batch(paper, steps=40, seed=12, run_indices=[5, 6])
    assert np.array_equal(pair[0].stack(), batch[2].stack())


def test_unbatched_step_matches_batch_row(paper):
    rng = run_generator(12, 3)
    state = init(paper, rng)
    assert state.driver_states.shape == (paper.n_drivers,)
    records = [step(paper, state, rng) for _ in range(10)]
    sim = run_batch(paper, steps=10, seed=12, run_indices=[3])[0]
    assert np.array_equal(np.array([r.incentives for r in records]), sim.incentives)
    assert np.array_equal(np.array([r.counts for r in records]), sim.counts)


def test_run_rejects_zero_steps(paper):
    with pytest.raises(DomainError):
        run(paper, steps=0, seed=0)


def test_unstable_controller_blocks_run(paper):
    unstable = paper.model_copy(
        update={
            "controllers": [
                LagControllerParams(alpha=-0.01, beta=1.2, kappa=0.15),
                paper.controllers[1],
            ]
        }
    )
    rows = stability_report(unstable)
    assert [r["stable"] for r in rows] == [False, True, True, True]
    with pytest.raises(StabilityError) as info:
        run(unstable, steps=5, seed=0)
    assert info.value.unstable[0][:2] == ("controller", 0)


@pytest.mark.parametrize(
    "overrides, section",
    [
        ({"references": [10.0, 5.0]}, "controllers"),
        ({"references": [40.0]}, "references"),
        ({"references": [-1.0]}, "references"),
        ({"profiles": [make_profile("tiny", 1, [(1.0, 0.0)])], "references": [0.0]}, "profiles"),
        ({"profiles": [make_profile("two", 30, [(1.0, 0.0), (1.0, 0.0)])]}, "profiles"),
    ],
)
def test_invalid_scenarios_name_the_section(overrides, section):
    scenario = small_closed_loop(**overrides)
    with pytest.raises(ScenarioValidationError) as info:
        run(scenario, steps=5, seed=0)
    assert section in {err.section for err in info.value.errors}


def test_bad_policy_is_located(paper):
    with pytest.raises(ScenarioValidationError) as info:
        run(paper, steps=5, seed=0, policy=InitialConditionPolicy.fixed([0.5, 0.5]))
    assert info.value.errors[0].key == "ic_policy.probabilities"


def test_parse_policy_shorthands():
    assert parse_policy("random-simplex", 2).describe() == "random-simplex"
    assert parse_policy("city", 2).probabilities == [0.0, 0.0, 1.0]
    assert parse_policy("suburb-1", 2).probabilities == [1.0, 0.0, 0.0]
    assert parse_policy("fixed:0.2,0.3,0.5", 2).describe() == "fixed:0.2,0.3,0.5"
    for bad in ("suburb-3", "suburb-x", "fixed:0.5,0.5", "fixed:0.5,0.6,0.1", "bogus"):
        with pytest.raises(DomainError):
            parse_policy(bad, 2)


def test_policy_changes_scenario_digest(paper):
    assert paper.with_policy(ALL_CITY).digest() != paper.digest()
    assert paper.digest() == paper.model_copy().digest()
