import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from met_tab.backbone import ModelConfig, ModelParams
from met_tab.data import DataError
from met_tab.downstream import (
    HeadConfig,
    HeadParams,
    accuracy,
    evaluate,
    export_representations,
    label_fraction_subsample,
    mean_interclass_distance,
    represent,
    train_head,
)

CFG = ModelConfig(d=10, e=8, fw=16, enc_depth=2, dec_depth=1)


def params(seed=0):
    p = ModelParams.init(CFG, seed)
    rng = np.random.default_rng(seed)
    return ModelParams(CFG, {k: v + rng.normal(scale=0.1, size=v.shape) for k, v in p.arrays.items()})


def test_concat_width_and_average_consistency():
    p = params()
    X = np.random.default_rng(0).normal(size=(7, 10))
    cat = represent(p, X)
    avg = represent(p, X, "average")
    assert cat.shape == (7, 90) and avg.shape == (7, 9)
    np.testing.assert_allclose(avg, cat.reshape(7, 10, 9).mean(axis=1), atol=1e-12, rtol=0)


def test_represent_is_deterministic_and_batch_independent():
    p = params()
    X = np.random.default_rng(1).normal(size=(9, 10))
    a = represent(p, X, batch_size=4)
    assert a.tobytes() == represent(p, X, batch_size=4).tobytes()
    np.testing.assert_allclose(a, represent(p, X, batch_size=100), atol=1e-12)


def test_represent_checks_width():
    with pytest.raises(DataError):
        represent(params(), np.zeros((2, 9)))
    with pytest.raises(ValueError):
        represent(params(), np.zeros((2, 10)), mode="max")


def test_interclass_distance_examples():
    reps = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    assert mean_interclass_distance(reps, [0, 0, 1, 1]) == 5.0
    assert mean_interclass_distance(np.ones((4, 3)), [0, 1, 0, 1]) == 0.0
    with pytest.raises(ValueError):
        mean_interclass_distance(reps, [0, 0, 0, 0])


def test_interclass_distance_multiclass_pair_mean():
    reps = np.array([[0.0], [1.0], [3.0]])
    assert mean_interclass_distance(reps, [0, 1, 2]) == pytest.approx((1 + 3 + 2) / 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-100, 100))
def test_interclass_distance_translation_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    reps, labels = rng.normal(size=(20, 4)), np.arange(20) % 3
    assert mean_interclass_distance(reps + shift, labels) == pytest.approx(
        mean_interclass_distance(reps, labels), abs=1e-9)


def test_export_representations(tmp_path):
    path = export_representations(tmp_path / "r.csv", np.array([[0.1, 2.0]]), np.array([1]))
    assert path.read_text().splitlines() == ["rep_0,rep_1,label", "0.10000000000000001,2,1"]


def test_depth_zero_head_is_logistic_regression():
    head = train_head(np.random.default_rng(0).normal(size=(20, 5)), np.arange(20) % 3, HeadConfig(hidden_layers=0, epochs=1))
    assert [w.shape for w in head.weights] == [(5, 3)]


def test_hidden_width_default():
    head = train_head(np.zeros((4, 300)), np.array([0, 1, 0, 1]), HeadConfig(hidden_layers=2, epochs=1))
    assert [w.shape for w in head.weights] == [(300, 256), (256, 256), (256, 2)]


def test_separable_fixture_reaches_99_percent():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 2000)
    reps = rng.normal(size=(2000, 6))
    # margin of at least 2 along the first axis
    reps[:, 0] = np.where(y == 1, 1.0, -1.0) * (1.0 + np.abs(reps[:, 0]))
    head = train_head(reps, y, HeadConfig(hidden_layers=0, epochs=200))
    assert head.train_accuracy[-1] >= 0.99
    assert len(head.train_accuracy) == 200


def test_deeper_head_fits_nonlinear_fixture_better():
    # XOR-like classes: depth 0 cannot exceed chance by much, depth 2 can
    rng = np.random.default_rng(1)
    reps = rng.uniform(-1, 1, size=(600, 2))
    y = ((reps[:, 0] > 0) ^ (reps[:, 1] > 0)).astype(int)
    accs = {d: accuracy(train_head(reps, y, HeadConfig(hidden_layers=d, hidden_width=32, epochs=60, lr=1e-2)), reps, y)
            for d in (0, 2)}
    assert accs[2] >= accs[0] + 0.2


def test_head_rejects_bad_labels():
    with pytest.raises(ValueError):
        train_head(np.zeros((2, 3)), np.array([0, 5]), HeadConfig(epochs=1), k=2)
    with pytest.raises(ValueError):
        train_head(np.zeros((2, 3)), np.array([0, -1]), HeadConfig(epochs=1))


def test_head_training_is_seeded():
    rng = np.random.default_rng(2)
    reps, y = rng.normal(size=(50, 4)), rng.integers(0, 2, 50)
    a = train_head(reps, y, HeadConfig(epochs=3, seed=7))
    b = train_head(reps, y, HeadConfig(epochs=3, seed=7))
    assert all(x.tobytes() == z.tobytes() for x, z in zip(a.weights, b.weights))


def test_head_training_leaves_encoder_untouched():
    p = params()
    digest = p.digest()
    X = np.random.default_rng(3).normal(size=(30, 10))
    head = train_head(represent(p, X), np.arange(30) % 2, HeadConfig(epochs=2))
    evaluate(p, head, X, np.arange(30) % 2)
    assert p.digest() == digest


def test_perfect_head_scores_one_and_is_order_invariant():
    y = np.array([0, 2, 1, 1, 0])
    head = HeadParams([np.eye(3)], [np.zeros(3)])
    reps = np.eye(3)[y]
    assert accuracy(head, reps, y) == 1.0
    perm = np.random.default_rng(0).permutation(5)
    y_noisy = y.copy()
    y_noisy[0] = 1
    assert accuracy(head, reps[perm], y_noisy[perm]) == accuracy(head, reps, y_noisy)


def test_ties_break_to_lowest_class():
    head = HeadParams([np.zeros((2, 3))], [np.zeros(3)])
    assert head.predict(np.ones((4, 2))).tolist() == [0, 0, 0, 0]


def test_random_head_is_at_chance():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(10), 100)
    reps = rng.normal(size=(1000, 20))
    accs = []
    for seed in range(5):
        r = np.random.default_rng(seed)
        accs.append(accuracy(HeadParams([r.normal(size=(20, 10))], [np.zeros(10)]), reps, y))
    assert abs(np.mean(accs) - 0.10) <= 0.02


def test_empty_test_set():
    with pytest.raises(ValueError):
        accuracy(HeadParams([np.eye(2)], [np.zeros(2)]), np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_label_fraction_examples():
    y = np.repeat([0, 1], 5000)
    assert label_fraction_subsample(y, 1.0).tolist() == list(range(10000))
    sub = label_fraction_subsample(y, 0.2, seed=3)
    assert np.bincount(y[sub]).tolist() == [1000, 1000]
    with pytest.raises(ValueError):
        label_fraction_subsample(np.array([0, 0, 0, 0, 1]), 0.2)
    with pytest.raises(ValueError):
        label_fraction_subsample(y, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.2, 0.6), st.floats(0.0, 0.4))
def test_label_fractions_are_nested(seed, small, extra):
    y = np.random.default_rng(seed).integers(0, 3, 300)
    y[:3] = [0, 1, 2]
    a = label_fraction_subsample(y, small, seed)
    b = label_fraction_subsample(y, min(1.0, small + extra), seed)
    assert set(a.tolist()) <= set(b.tolist())
    assert label_fraction_subsample(y, small, seed).tolist() == a.tolist()
