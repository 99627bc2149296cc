import time
from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fluxmem.core import STRUCTURES, StructureKind
from fluxmem.selector import (
    N_FEATURES, LabeledExample, StructureSelector, argmax_label, compute_reward,
    extract_features, forward, label_dataset, loss_and_grad, read_examples, select_structure,
    train, write_examples,
)


def fixed_model(W1=None, b1=None, W2=None, b2=None):
    d = {"W1": np.zeros((4, N_FEATURES)) if W1 is None else W1,
         "b1": np.zeros(4) if b1 is None else b1,
         "W2": np.zeros((3, 4)) if W2 is None else W2,
         "b2": np.zeros(3) if b2 is None else b2}
    m = StructureSelector()
    m._set_params(d)
    m.scaler_mean_, m.scaler_std_ = np.zeros(N_FEATURES), np.ones(N_FEATURES)
    m.classes_, m.n_features_in_ = np.arange(3), N_FEATURES
    return m


def shipped_separable():
    path = resources.files("fluxmem.data").joinpath("separable_300.jsonl")
    with resources.as_file(path) as p:
        return read_examples(p)


# -- features -------------------------------------------------------------

def test_singleton_window_features(page_factory, extractor):
    f = extract_features([page_factory("the weather is mild", "ok")], extractor)
    assert f.shape == (N_FEATURES,)
    assert f[0] == 1 and f[4] == 1 and f[5] == 0 and f[11] == 0


def test_qna_pattern(page_factory, extractor):
    pages = [page_factory(f"what is item {i}?", "fine", ts=i) for i in range(4)]
    assert extract_features(pages, extractor)[6] == 1.0


def test_entity_centric_three_of_four(page_factory, extractor):
    pages = [page_factory("I met Alice at noon.", "ok"), page_factory("Alice likes tea.", "ok"),
             page_factory("we saw Alice there", "ok"), page_factory("the sky is grey", "ok")]
    assert extract_features(pages, extractor)[8] == 1.0


def test_decision_tree_and_time_features(page_factory, extractor):
    pages = [page_factory("if it rains we stay", "ok", ts=0),
             page_factory("else choose the bus", "ok", ts=1800),
             page_factory("which option is cheaper", "ok", ts=3600)]
    f = extract_features(pages, extractor)
    assert f[7] == 1.0
    assert f[9] == pytest.approx(1.0) and f[10] == pytest.approx(3.0)


def test_relation_cues_counted(page_factory, extractor):
    f = extract_features([page_factory("late because of rain and after lunch", "ok")], extractor)
    assert f[3] == 2.0


def test_empty_window_rejected(extractor):
    with pytest.raises(ValueError):
        extract_features([], extractor)


# -- forward and selection ------------------------------------------------

def test_forward_zero_weights_uniform():
    probs = fixed_model().predict_proba(np.ones(N_FEATURES))
    np.testing.assert_allclose(probs, [[1 / 3] * 3], atol=1e-15)


def test_forward_bias_only():
    probs = fixed_model(b2=np.array([10.0, 0, 0])).predict_proba(np.zeros(N_FEATURES))[0]
    expected = np.exp(10) / (np.exp(10) + 2)
    assert probs[0] == pytest.approx(expected, abs=1e-12) and probs[0] > 0.9999


@given(arrays(float, N_FEATURES, elements=st.floats(-1e6, 1e6)), st.integers(0, 2**31 - 1))
def test_forward_simplex(x, seed):
    rng = np.random.default_rng(seed)
    params = StructureSelector().init_params(rng)
    probs, _ = forward(params, x[None, :] * 10)
    assert np.all(probs >= 0) and abs(probs.sum() - 1) < 1e-9


def test_select_tie_break_and_argmax():
    assert select_structure(fixed_model(), np.zeros(N_FEATURES)) is StructureKind.LINEAR
    graphy = fixed_model(b2=np.log([0.1, 0.7, 0.2]))
    assert select_structure(graphy, np.zeros(N_FEATURES)) is StructureKind.GRAPH
    assert select_structure(graphy, np.zeros(N_FEATURES),
                            [StructureKind.LINEAR, StructureKind.HIERARCHICAL]) \
        is StructureKind.HIERARCHICAL


def test_select_shift_invariance():
    base = np.array([0.3, 1.2, -0.4])
    for c in (-5.0, 0.0, 7.5):
        assert select_structure(fixed_model(b2=base + c), np.zeros(N_FEATURES)) \
            is StructureKind.GRAPH


def test_wrong_feature_count_rejected():
    with pytest.raises(ValueError):
        fixed_model().predict_proba(np.zeros(5))


# -- reward and labelling ---------------------------------------------------

def test_compute_reward_examples():
    assert compute_reward(1, 1, 0.7, 0.3) == pytest.approx(1.0)
    assert compute_reward(0, 0) == 0
    assert compute_reward(0.8, 0.5, 0.7, 0.3) == pytest.approx(0.71, abs=1e-12)
    with pytest.raises(ValueError):
        compute_reward(1, 1, -0.1, 0.3)


def test_argmax_label_examples():
    assert argmax_label((0.9, 0.2, 0.1)) is StructureKind.LINEAR
    assert argmax_label((0.5, 0.5, 0.5)) is StructureKind.LINEAR
    assert argmax_label((0.1, 0.4, 0.4)) is StructureKind.GRAPH


def test_label_dataset_rows_share_label():
    class Conv:
        id = "c0"

    scores = {StructureKind.LINEAR: (0.0, 0.0), StructureKind.GRAPH: (0.0, 1.0),
              StructureKind.HIERARCHICAL: (0.0, 0.5)}
    out = label_dataset([Conv()], lambda c, k: scores[k], lambda c: np.ones((3, N_FEATURES)))
    assert len(out) == 3
    assert {ex.label for ex in out} == {StructureKind.GRAPH}
    assert out[0].rewards == pytest.approx((0.0, 0.3, 0.15))


def test_temporal_case_labels_linear():
    import random

    from fluxmem.evalkit import label_cases
    from fluxmem.synthetic import temporal_case
    examples = label_cases([temporal_case(random.Random(3), "t0", 1_700_000_000)])
    assert examples and all(ex.label is StructureKind.LINEAR for ex in examples)


# -- gradients --------------------------------------------------------------

def numeric_grad(params, X, y, h=1e-5):
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            up = loss_and_grad(params, X, y)[0]
            v[idx] = orig - h
            down = loss_and_grad(params, X, y)[0]
            v[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out[k] = g
    return out


def relative_error(a, b):
    fa = np.concatenate([a[k].ravel() for k in sorted(a)])
    fb = np.concatenate([b[k].ravel() for k in sorted(b)])
    return float(np.linalg.norm(fa - fb) / max(np.linalg.norm(fa) + np.linalg.norm(fb), 1e-12))


def test_gradient_check_twenty_pairs():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        params = StructureSelector().init_params(rng)
        X = rng.normal(size=(1, N_FEATURES))
        y = rng.integers(0, 3, 1)
        _, analytic = loss_and_grad(params, X, y)
        worst = max(worst, relative_error(analytic, numeric_grad(params, X, y)))
    assert worst < 1e-4


# -- training ---------------------------------------------------------------

def test_memorize_single_example():
    ex = LabeledExample(tuple(float(i) for i in range(N_FEATURES)), StructureKind.GRAPH,
                        (0.0, 1.0, 0.0))
    model = train([ex], epochs=200)
    assert model.train_loss_ < 0.01
    assert model.select(ex.features) is StructureKind.GRAPH


def test_separable_dataset_accuracy_and_determinism():
    data = shipped_separable()
    assert len(data) == 300
    t0 = time.perf_counter()
    a = train(data, epochs=200, seed=42)
    assert time.perf_counter() - t0 < 10
    X = np.array([ex.features for ex in data])
    y = np.array([STRUCTURES.index(ex.label) for ex in data])
    assert np.mean(a.predict(X) == y) >= 0.95
    b = train(data, epochs=200, seed=42)
    assert a.to_dict() == b.to_dict()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train([])


def test_affine_feature_maps_preserve_predictions():
    data = shipped_separable()[:90]
    X = np.array([ex.features for ex in data])
    y = [ex.label for ex in data]
    scale, shift = np.linspace(0.5, 3.0, N_FEATURES), np.linspace(-4, 4, N_FEATURES)
    a = StructureSelector(epochs=30).fit(X, y)
    b = StructureSelector(epochs=30).fit(X * scale + shift, y)
    np.testing.assert_array_equal(a.predict(X), b.predict(X * scale + shift))


# -- persistence ------------------------------------------------------------

def test_model_round_trip(tmp_path):
    model = train(shipped_separable()[:30], epochs=5)
    path = tmp_path / "m.json"
    model.save(path)
    again = StructureSelector.load(path)
    X = np.array([ex.features for ex in shipped_separable()[:30]])
    np.testing.assert_array_equal(model.predict_proba(X), again.predict_proba(X))


def test_loader_rejects_bad_shapes():
    d = train(shipped_separable()[:30], epochs=5).to_dict()
    with pytest.raises(ValueError):
        StructureSelector.from_dict({**d, "W1": d["W1"][:-1]})
    with pytest.raises(ValueError):
        StructureSelector.from_dict({**d, "input_dim": 11})
    with pytest.raises(ValueError):
        StructureSelector.from_dict({**d, "scaler_std": [0.0] * N_FEATURES})
    with pytest.raises(ValueError):
        StructureSelector.from_dict({**d, "format": "other"})


def test_examples_round_trip(tmp_path):
    data = shipped_separable()[:5]
    write_examples(tmp_path / "e.jsonl", data)
    assert read_examples(tmp_path / "e.jsonl") == data
    (tmp_path / "bad.jsonl").write_text('{"features": [1, 2], "label": "linear", "rewards": [1, 0, 0]}\n')
    with pytest.raises(ValueError, match=":1:"):
        read_examples(tmp_path / "bad.jsonl")
