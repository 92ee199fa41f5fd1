import math

import numpy as np
import pytest
from scipy import stats

from app.core.exceptions import DomainError, NumericError
from app.core.sim.choice import (
    Attribute,
    AttributeBundle,
    ChoiceOutcome,
    ChoiceProbabilities,
    DriverProfile,
    LocationUtilityParams,
    aggregate_counts,
    choice_probabilities,
    coefficient_matrix,
    count_by_profile,
    expected_totals,
    population_probabilities,
    probability_surface,
    sample_choice,
    sample_choices,
    sample_population,
    utility,
)
from app.core.sim.loop import run_generator
from tests.conftest import make_profile


GRID = np.linspace(0.0, 10.0, 10)


def test_utility_examples(class_1, class_2):
    assert utility(class_1, 0, 0.0) == pytest.approx(-62.28)
    assert utility(class_2, 2, 123.0) == 0.0
    assert utility(class_1, 2) == pytest.approx(-18.12)

    flat = make_profile("flat", 5, [(0.0, -3.5), (0.0, 2.0)])
    for pi in (-100.0, 0.0, 7.5):
        assert utility(flat, 0, pi) == -3.5
        assert utility(flat, 1, pi) == 2.0


@pytest.mark.parametrize("location", [-1, 3, 10])
def test_utility_rejects_out_of_range_location(class_1, location):
    with pytest.raises(DomainError):
        utility(class_1, location, 0.0)


def test_choice_probability_examples(class_1, class_2):
    p = choice_probabilities(class_1, [0.0, 0.0])
    assert p.city == pytest.approx(1.0 - 7.3e-20, abs=1e-15)
    assert p.suburb(0) == pytest.approx(math.exp(-44.16), rel=1e-6)

    p = choice_probabilities(class_2, [5.0, 0.0])
    assert p.suburb(0) == pytest.approx(0.18243, abs=1e-5)
    assert p.city == pytest.approx(0.81757, abs=1e-5)
    assert p.suburb(1) < 1e-26

    p = choice_probabilities(class_2, [5.15, 0.0])
    assert p.suburb(0) == pytest.approx(0.5, abs=1e-9)
    assert p.city == pytest.approx(0.5, abs=1e-9)


def test_non_finite_utility_names_location(class_2):
    with pytest.raises(NumericError) as info:
        choice_probabilities(class_2, [0.0, math.inf])
    assert info.value.location == 1


def test_wrong_incentive_length(class_2):
    with pytest.raises(DomainError):
        choice_probabilities(class_2, [1.0])


@pytest.mark.parametrize("profile_name", ["class_1", "class_2"])
def test_probabilities_normalised_on_grid(profile_name, request):
    profile = request.getfixturevalue(profile_name)
    for pi_1 in GRID:
        for pi_2 in GRID:
            p = choice_probabilities(profile, [pi_1, pi_2]).p
            assert np.all(p >= 0.0) and np.all(p <= 1.0)
            assert abs(p.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("profile_name", ["class_1", "class_2"])
def test_monotone_in_incentives(profile_name, request):
    profile = request.getfixturevalue(profile_name)
    h = 1e-3
    interior = (1e-12, 1.0 - 1e-12)

    for pi_1 in GRID:
        for pi_2 in GRID:
            base = choice_probabilities(profile, [pi_1, pi_2]).p
            for j, bumped in enumerate(([pi_1 + h, pi_2], [pi_1, pi_2 + h])):
                moved = choice_probabilities(profile, bumped).p
                other = 1 - j
                assert moved[j] >= base[j]
                assert moved[other] <= base[other]
                assert moved[2] <= base[2]
                # strict where neither value is saturated in double precision
                if interior[0] < base[j] < interior[1] and interior[0] < base[2] < interior[1]:
                    assert moved[j] > base[j]
                    assert moved[2] < base[2]


def test_translation_invariance(class_2):
    shifted = DriverProfile(
        name="shifted",
        population_size=class_2.population_size,
        suburb_params=[
            LocationUtilityParams(incentive_weight=s.incentive_weight, base=s.base + 17.0)
            for s in class_2.suburb_params
        ],
        city_params=LocationUtilityParams(
            city_bias=class_2.city_params.city_bias, base=class_2.city_params.base + 17.0
        ),
    )
    for pi in ([0.0, 0.0], [5.0, 1.0], [9.0, 9.0]):
        a = choice_probabilities(class_2, pi).p
        b = choice_probabilities(shifted, pi).p
        assert np.max(np.abs(a - b)) <= 1e-9


def test_stable_softmax_matches_naive_form(class_2):
    for pi_1 in GRID:
        for pi_2 in GRID:
            pi = np.array([pi_1, pi_2])
            u = np.array(
                [10.0 * pi_1 - 51.5, 10.0 * pi_2 - 61.0, 0.0]
            )
            naive = np.exp(u) / np.exp(u).sum()
            assert np.max(np.abs(choice_probabilities(class_2, pi).p - naive)) <= 1e-12


def test_sample_choice_degenerate():
    rng = run_generator(7)
    always_first = ChoiceProbabilities.validated([1.0, 0.0, 0.0])
    always_city = ChoiceProbabilities.validated([0.0, 0.0, 1.0])
    assert all(sample_choice(always_first, rng).location_index == 0 for _ in range(200))
    assert all(sample_choice(always_city, rng).location_index == 2 for _ in range(200))


def test_sample_choices_frequencies_within_binomial_bound():
    probs = ChoiceProbabilities.validated([0.5, 0.25, 0.25])
    n = 10**6
    draws = sample_choices(probs, run_generator(2024), n)
    freq = np.bincount(draws, minlength=3) / n
    bound = 3 * np.sqrt(probs.p * (1 - probs.p) / n)
    assert np.all(np.abs(freq - probs.p) <= bound)


def test_sample_choices_matches_scalar_sampling():
    probs = ChoiceProbabilities.validated([0.2, 0.3, 0.5])
    vectorised = sample_choices(probs, run_generator(5), 50)
    rng = run_generator(5)
    scalar = [sample_choice(probs, rng).location_index for _ in range(50)]
    assert vectorised.tolist() == scalar


GRID_POINTS = [(i, j) for i in range(GRID.size) for j in range(GRID.size)]
# 0.001 across every grid point of both profiles
FAMILY_ALPHA = 0.001 / (2 * len(GRID_POINTS))


@pytest.mark.parametrize("profile_name", ["class_1", "class_2"])
@pytest.mark.parametrize("i, j", GRID_POINTS)
def test_chi_square_fit(profile_name, i, j, request):
    profile = request.getfixturevalue(profile_name)
    n = 10**5
    weights, offsets = coefficient_matrix([profile])
    probs = population_probabilities(weights, offsets, np.array([GRID[i], GRID[j]]))
    rng = run_generator(1000 + 10 * i + j)
    states = sample_population(probs, rng.random(n), np.zeros(n, dtype=np.int64))
    counts = np.bincount(states, minlength=3)

    # cells expecting fewer than 5 draws are pooled; one usable cell leaves nothing to test
    expected = n * probs[0]
    keep = expected >= 5.0
    observed = list(counts[keep])
    predicted = list(expected[keep])
    if (~keep).any() and expected[~keep].sum() >= 5.0:
        observed.append(counts[~keep].sum())
        predicted.append(expected[~keep].sum())
    if len(observed) < 2:
        pytest.skip("probability mass concentrated in one location")

    predicted = np.array(predicted) * sum(observed) / sum(predicted)
    _, p_value = stats.chisquare(observed, predicted)
    assert p_value > FAMILY_ALPHA


def test_aggregate_counts_examples():
    assert aggregate_counts([], 3).tolist() == [0, 0, 0]
    outcomes = [ChoiceOutcome(0), ChoiceOutcome(0), ChoiceOutcome(2)]
    assert aggregate_counts(outcomes, 3).tolist() == [2, 0, 1]
    assert aggregate_counts([ChoiceOutcome(2)] * 100, 3).tolist() == [0, 0, 100]


def test_outcome_as_basis_vector():
    assert ChoiceOutcome(1).as_vector(3).tolist() == [0, 1, 0]


def test_validated_rejects_bad_vectors():
    with pytest.raises(DomainError):
        ChoiceProbabilities.validated([0.5, 0.6, -0.1])
    with pytest.raises(DomainError):
        ChoiceProbabilities.validated([0.5, 0.4, 0.05])


def test_attribute_bundle_collapses_to_weighted_sum():
    assert AttributeBundle().base_utility() == 0.0
    bundle = AttributeBundle.from_mapping(
        {Attribute.TRAVEL_TIME: -0.5, Attribute.PARKING_FEE: -2.0},
        {Attribute.TRAVEL_TIME: 40.0, Attribute.PARKING_FEE: 3.0},
    )
    assert [e.label for e in bundle.entries] == ["travel-time", "parking-fee"]
    assert bundle.base_utility() == pytest.approx(-26.0)

    params = LocationUtilityParams.from_bundle(bundle, incentive_weight=10.0)
    assert params.base == pytest.approx(-26.0)


def test_attribute_bundle_needs_weight_and_value():
    with pytest.raises(DomainError):
        AttributeBundle.from_mapping({"travel-time": 1.0}, {"parking-fee": 1.0})


def test_profile_rejects_city_incentive():
    with pytest.raises(ValueError):
        DriverProfile(
            name="bad",
            population_size=3,
            suburb_params=[LocationUtilityParams(incentive_weight=1.0)],
            city_params=LocationUtilityParams(incentive_weight=1.0),
        )


def test_probability_surface_matches_pointwise(class_2):
    grid = np.array([0.0, 5.0, 5.15])
    surface = probability_surface(class_2, grid, grid)
    assert surface.shape == (3, 3, 3)
    for a, pi_1 in enumerate(grid):
        for b, pi_2 in enumerate(grid):
            expected = choice_probabilities(class_2, [pi_1, pi_2]).p
            assert np.allclose(surface[a, b], expected, atol=1e-15)


def test_population_kernels_accept_a_run_axis(paper):
    weights, offsets = coefficient_matrix(paper.profiles)
    pi = np.array([[0.0, 0.0], [5.0, 1.0], [9.0, 9.0]])
    batched = population_probabilities(weights, offsets, pi)
    assert batched.shape == (3, 2, 3)
    for row in range(3):
        assert np.array_equal(batched[row], population_probabilities(weights, offsets, pi[row]))

    membership = np.array([0, 0, 1, 1, 1])
    uniforms = run_generator(3).random((3, 5))
    states = sample_population(batched, uniforms, membership)
    for row in range(3):
        assert np.array_equal(states[row], sample_population(batched[row], uniforms[row], membership))

    counts = count_by_profile(states, membership, 2, 3)
    assert counts.shape == (3, 2, 3)
    assert counts.sum(axis=(1, 2)).tolist() == [5, 5, 5]
    assert np.array_equal(counts[1], count_by_profile(states[1], membership, 2, 3))


def test_non_finite_population_utility_names_run(paper):
    weights, offsets = coefficient_matrix(paper.profiles)
    pi = np.array([[0.0, 0.0], [0.0, 0.0], [math.inf, 0.0]])
    with pytest.raises(NumericError) as info:
        population_probabilities(weights, offsets, pi)
    assert info.value.row == 2
    assert info.value.location == 0


def test_expected_totals_weight_by_population():
    probs = np.array([[[0.5, 0.0, 0.5], [0.1, 0.2, 0.7]]])
    np.testing.assert_allclose(expected_totals(probs, [20, 80]), [[18.0, 16.0, 66.0]])
