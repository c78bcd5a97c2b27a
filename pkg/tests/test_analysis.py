import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from zeuslab.analysis import (InsufficientDataError, ProbeConfig, UndefinedCorrelationError,
                              average_ranks, distance_report, identifiability_probe,
                              pairwise_context_matrix, spearman, upper_triangle)
from zeuslab.families import PointMassFamily, SlipGrid
from zeuslab.mdp import ValidationError
from zeuslab.training import build_model


def test_spearman_examples():
    x = [1.0, 2.0, 3.0, 4.0]
    assert spearman(x, x) == 1.0
    assert spearman(x, x[::-1]) == -1.0
    assert spearman(x, [1, 3, 2, 4]) == pytest.approx(0.8)


def test_spearman_errors():
    with pytest.raises(ValidationError):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        spearman([1, 1, 1], [1, 2, 3])


def test_average_ranks_ties():
    assert list(average_ranks([10, 20, 20, 30])) == [1.0, 2.5, 2.5, 4.0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=3, max_size=15), st.integers(0, 2**31))
def test_spearman_matches_scipy_and_is_bounded(xs, seed):
    x = np.array(xs, dtype=float)
    y = np.random.default_rng(seed).integers(-3, 4, size=len(x)).astype(float)
    if np.all(x == x[0]) or np.all(y == y[0]):
        return
    rho = spearman(x, y)
    assert -1.0 <= rho <= 1.0
    assert rho == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)
    # invariant under strictly monotone transforms
    assert spearman(np.exp(x), y ** 3) == pytest.approx(rho, abs=1e-12)


def test_oracle_embedding_gives_rho_one():
    ctx = [0.5, 1.0, 2.0, 4.0]
    emb = [np.full((3, 1), c) for c in ctx]
    rep = distance_report(ctx, emb)
    assert rep.spearman_rho == pytest.approx(1.0)


def test_report_matrices():
    rng = np.random.default_rng(0)
    ctx = [1.0, 1.0, 3.0]
    emb = [rng.normal(size=(5, 2)) for _ in ctx]
    rep = distance_report(ctx, emb)
    for m in (rep.embedding_distance, rep.context_distance):
        assert np.max(np.abs(m - m.T)) <= 1e-12
        assert np.all(np.diag(m) == 0)
    assert rep.context_distance[0, 1] == 0.0
    assert rep.embedding_distance[0, 1] > 0


def test_empty_context_rejected():
    with pytest.raises(InsufficientDataError):
        distance_report([1.0, 2.0], [np.zeros((2, 3)), np.zeros((0, 3))])


def test_upper_triangle_order():
    m = np.arange(9.0).reshape(3, 3)
    assert list(upper_triangle(m)) == [1.0, 2.0, 5.0]


def test_untrained_encoder_baseline():
    """Recorded no-training baseline; only the report invariants are asserted."""
    fam = PointMassFamily()
    model = build_model(fam, {}, np.random.default_rng(0))
    rep = pairwise_context_matrix(model, fam, fam.default_split().train, 8, seed=0, policy="random")
    assert -1.0 <= rep.spearman_rho <= 1.0
    assert rep.embedding_distance.shape == (6, 6)


class FrozenSlipGrid(SlipGrid):
    """SlipGrid whose generator ignores the context."""

    def _build(self, c):
        return SlipGrid._build(self, [0.3])


def test_constant_family_not_identifiable():
    res = identifiability_probe(FrozenSlipGrid(size=3), [0.1, 0.3, 0.5, 0.7], 5,
                                ProbeConfig(windows_per_context=100, steps=800), seed=0)
    assert not res["identifiable"]
    assert res["test_mse"] >= 0.8 * res["label_variance"]


def test_probe_needs_data():
    with pytest.raises(InsufficientDataError):
        identifiability_probe(PointMassFamily(), [1.0], 5, ProbeConfig(windows_per_context=2, steps=1))
