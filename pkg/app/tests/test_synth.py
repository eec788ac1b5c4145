import pytest

from app.core.config import SynthParams
from app.core.exceptions import InfeasibleParametersError
from app.services.synth import null_params, synth_corpus

SMALL = SynthParams(n_musicians=30, n_leaders=4, n_years=2, sessions_per_year=10, max_size=5)


def test_corpus_shape():
    corpus = synth_corpus(SMALL, seed=1)

    assert len(corpus) == 20
    assert corpus.years == [1950, 1951]
    for s in corpus:
        assert SMALL.min_size <= s.size <= SMALL.max_size
        assert s.leader_id in s.musicians
        assert s.releases >= 1
        assert all(e.instruments for e in s.personnel)


def test_same_seed_same_corpus():
    assert synth_corpus(SMALL, seed=9) == synth_corpus(SMALL, seed=9)
    assert synth_corpus(SMALL, seed=9).digest() == synth_corpus(SMALL, seed=9).digest()


def test_different_seeds_differ():
    assert synth_corpus(SMALL, seed=1).digest() != synth_corpus(SMALL, seed=2).digest()


def test_flat_success_without_dispersion():
    params = SMALL.model_copy(update={"success_base": -20.0, "success_alpha": 0.0})

    assert {s.releases for s in synth_corpus(params, seed=3)} == {1}


def test_null_params():
    params = SMALL.model_copy(update={"loyalty": 0.9, "success_linear": 3.0, "success_quadratic": -3.0})
    null = null_params(params)

    assert (null.loyalty, null.success_linear, null.success_quadratic) == (0.0, 0.0, 0.0)
    assert null.n_musicians == params.n_musicians
    assert null.success_base == params.success_base


@pytest.mark.parametrize(
    "update",
    [
        {"n_leaders": 40},
        {"roster_size": 30},
        {"max_size": 25, "activity": 0.5},
    ],
)
def test_infeasible_parameters(update):
    with pytest.raises(InfeasibleParametersError):
        synth_corpus(SMALL.model_copy(update=update), seed=0)


def test_size_bounds_are_validated():
    with pytest.raises(ValueError):
        SynthParams(min_size=6, max_size=4)
