import itertools

import numpy as np
import pytest

from avemo.data import SyntheticEmbeddingProvider
from avemo.errors import ConfigError, DataError
from avemo.fusion import (
    STREAMS,
    EnsembleSpec,
    FusionDims,
    StreamFeatures,
    ensemble_predict,
    fuse_providers,
    fuse_streams,
    grid_search_weights,
    simplex_grid,
)
from avemo.metrics import accuracy, macro_f1, total_expr

PATTERNS = [p for p in itertools.product([False, True], repeat=3) if any(p)]


@pytest.mark.parametrize("presence", PATTERNS)
def test_fusion_zero_spans(presence):
    dims = FusionDims()
    rng = np.random.default_rng(0)
    vecs = {name: rng.uniform(0.5, 1.5, 2048) if on else None for name, on in zip(STREAMS, presence)}
    fv = fuse_streams(StreamFeatures(**vecs), dims)
    assert fv.values.shape == (6144,)
    assert fv.presence == presence
    for k, name in enumerate(STREAMS):
        span = fv.values[2048 * k: 2048 * (k + 1)]
        if presence[k]:
            np.testing.assert_array_equal(span, vecs[name])
        else:
            assert not span.any()


def test_fusion_errors():
    with pytest.raises(DataError):
        fuse_streams(StreamFeatures(frame_index=4))
    with pytest.raises(ValueError):
        fuse_streams(StreamFeatures(face=np.zeros(100)))
    with pytest.raises(ValueError):
        fuse_streams(StreamFeatures(face=np.full(2048, np.nan)))


def test_fuse_providers_small_dims():
    dims = FusionDims(3, 2, 4)
    providers = {
        "face": SyntheticEmbeddingProvider(3, seed=1, missing_rate=0.5),
        "context": SyntheticEmbeddingProvider(2, seed=2),
        "body": SyntheticEmbeddingProvider(4, seed=3, missing_rate=0.5),
    }
    X, present = fuse_providers(providers, range(20), dims)
    assert X.shape == (20, 9) and present[:, 1].all()
    for t in range(20):
        face = providers["face"].get(t)
        np.testing.assert_array_equal(X[t, :3], face if face is not None else np.zeros(3))


def test_ensemble_examples():
    a, b = np.array([[0.8, 0.2]]), np.array([[0.2, 0.8]])
    out = ensemble_predict([a, b], EnsembleSpec(["a", "b"], [1.0, 0.0], "expr"))
    assert out.tobytes() == a.tobytes()
    np.testing.assert_allclose(ensemble_predict([a, b], EnsembleSpec(["a", "b"], [0.5, 0.5], "expr")), [[0.5, 0.5]])


def test_identical_members_are_a_fixed_point():
    rng = np.random.default_rng(1)
    m = rng.dirichlet(np.ones(7), 10)
    for w in simplex_grid(3, 0.25):
        np.testing.assert_allclose(ensemble_predict([m, m, m], EnsembleSpec(list("abc"), list(w), "expr")), m, atol=1e-15)


def test_ensemble_preserves_agreed_argmax():
    rng = np.random.default_rng(2)
    base = rng.dirichlet(np.ones(7), 50)
    m1 = base.copy()
    m2 = base ** 2 / (base ** 2).sum(1, keepdims=True)  # same argmax, sharper
    for w in (0.1, 0.5, 0.9):
        out = ensemble_predict([m1, m2], EnsembleSpec(["a", "b"], [w, 1 - w], "expr"))
        np.testing.assert_array_equal(out.argmax(1), base.argmax(1))


def test_ensemble_spec_validation():
    with pytest.raises(ConfigError):
        EnsembleSpec(["a", "b"], [0.6, 0.6], "expr")
    with pytest.raises(ConfigError):
        EnsembleSpec(["a"], [1.0], "pose")
    with pytest.raises(ConfigError):
        EnsembleSpec(["a", "b"], [1.5, -0.5], "va")
    with pytest.raises(ValueError):
        ensemble_predict([np.zeros(2), np.zeros(3)], EnsembleSpec(["a", "b"], [0.5, 0.5], "va"))
    spec = EnsembleSpec(["a", "b"], [0.3, 0.7], "va", validation_total=0.5)
    assert EnsembleSpec.from_json(spec.to_json()) == spec
    with pytest.raises(ConfigError):
        EnsembleSpec.from_json('{"members": ["a"], "weights": [1], "task": "va", "extra": 1}')


def test_simplex_grid():
    g = simplex_grid(3, 0.5)
    assert g == sorted(g) and len(g) == 6
    assert all(abs(sum(w) - 1) < 1e-12 for w in simplex_grid(4, 0.1))
    assert len(simplex_grid(4, 0.1)) == 286  # C(13, 3)
    with pytest.raises(ValueError):
        simplex_grid(2, 0.3)


def test_grid_single_member():
    spec = grid_search_weights([np.eye(7)[[0, 1, 2]]], [0, 1, 2], "expr")
    assert spec.weights == [1.0]


def test_grid_dominant_member():
    gold = np.arange(10) % 7
    perfect = np.eye(7)[gold]
    wrong = np.eye(7)[(gold + 1) % 7]
    spec = grid_search_weights([perfect, wrong], gold, "expr", step=0.1)
    assert spec.weights[0] == 1.0
    # independent exhaustive oracle over the same grid
    best = max(
        (total_expr(macro_f1(p.argmax(1), gold), accuracy(p.argmax(1), gold)), w)
        for w in (k / 10 for k in range(11))
        for p in [w * perfect + (1 - w) * wrong]
    )
    assert spec.validation_total == pytest.approx(best[0])


def test_grid_identical_members_tie_break():
    gold = np.array([0, 1, 2, 3])
    m = np.eye(7)[gold]
    spec = grid_search_weights([m, m, m], gold, "expr", step=0.5)
    assert spec.weights == [0.0, 0.0, 1.0]


def test_grid_va_beats_pure_members():
    rng = np.random.default_rng(3)
    gold = rng.uniform(-1, 1, (60, 2))
    a = gold + rng.normal(0, 0.3, gold.shape)
    b = gold + rng.normal(0, 0.3, gold.shape)
    spec = grid_search_weights([a, b], gold, "va", step=0.1)
    from avemo.fusion import _score

    assert spec.validation_total >= max(_score("va", a, gold), _score("va", b, gold))


def test_grid_drops_sentinels_and_rejects_empty():
    gold = np.array([0, -1, 1])
    m = np.eye(7)[[0, 5, 1]]
    assert grid_search_weights([m], gold, "expr").validation_total == pytest.approx(total_expr(2 / 7, 1.0))
    with pytest.raises(DataError):
        grid_search_weights([m], [-1, -1, -1], "expr")
