import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nearlight.errors import DivergenceError, EmptyMaskError, FormatError, NumericError, ParameterError
from nearlight.net import (
    BN_EPS,
    DEFAULT_DIMS,
    MlpModel,
    TrainConfig,
    backward,
    forward,
    infer_image,
    load_model,
    loss_cos,
    save_model,
    train,
)


def unit(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def smooth_dataset(n, seed):
    """Inputs in the calibration ranges with a known smooth normal field as target."""
    r = np.random.default_rng(seed)
    x = np.column_stack([r.uniform(-1, 1, (n, 2)), r.uniform(0, 1, (n, 3))])
    t = np.column_stack([0.3 * x[:, 0] + 0.2 * (x[:, 2] - x[:, 3]),
                         0.3 * x[:, 1] + 0.2 * (x[:, 4] - x[:, 3]),
                         np.ones(n)])
    return x, unit(t)


# --- forward ---------------------------------------------------------------------------


def test_default_architecture():
    m = MlpModel()
    assert m.dims == DEFAULT_DIMS == (5, 256, 256, 128, 3)
    assert [l["W"].shape for l in m.layers] == [(5, 256), (256, 256), (256, 128), (128, 3)]
    assert m.dropout == 0.2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 40), st.sampled_from(["train", "eval"]))
def test_output_unit_length(seed, n, mode):
    r = np.random.default_rng(seed)
    m = MlpModel((5, 16, 8, 3), seed=seed % 1000)
    m.mode = mode
    out = forward(m, r.uniform(-1, 1, (n, 5)), rng=r if mode == "train" else None)
    assert np.all(np.abs(np.linalg.norm(out.astype(float), axis=1) - 1) < 1e-6)


def test_eval_repeatable():
    m = MlpModel(seed=3).eval_mode()
    x = np.random.default_rng(0).random((7, 5))
    np.testing.assert_array_equal(forward(m, x), forward(m, x))


def test_hand_computed_reduced_network():
    m = MlpModel((5, 1, 3), dtype=np.float64).eval_mode()
    L0, L1 = m.layers
    L0["W"][:] = np.array([[1.0], [-2.0], [0.5], [0.0], [1.0]])
    L0["b"][:] = [0.25]
    L0["gamma"][:] = [2.0]
    L0["beta"][:] = [0.5]
    L0["running_mean"][:] = [1.0]
    L0["running_var"][:] = [4.0 - BN_EPS]
    L1["W"][:] = np.array([[3.0, 0.0, 4.0]])
    L1["b"][:] = [0.0, 0.0, 0.0]
    x = np.array([[1.0, 0.5, 2.0, 7.0, 1.0], [0.0, 1.0, 0.0, 0.0, 0.0]])
    # row 0: a = 1 - 1 + 1 + 1 + 0.25 = 2.25 -> bn = 2 * 1.25 / 2 + 0.5 = 1.75 -> (3, 0, 4) / 5
    # row 1: a = -2 + 0.25 -> bn = 2 * -2.75 / 2 + 0.5 < 0 -> relu 0 -> zero vector stays zero
    out = forward(m, x)
    np.testing.assert_allclose(out[0], [0.6, 0.0, 0.8], atol=1e-15)
    np.testing.assert_array_equal(out[1], [0.0, 0.0, 0.0])


def test_forward_errors():
    m = MlpModel((5, 4, 3))
    with pytest.raises(NumericError):
        forward(m, np.full((3, 5), np.nan))
    with pytest.raises(ParameterError):
        forward(m, np.zeros((1, 5)))
    with pytest.raises(ParameterError):
        forward(m, np.zeros((4, 6)))


# --- loss ------------------------------------------------------------------------------


def test_loss_cases(rng):
    t = unit(rng.normal(size=(20, 3)))
    assert loss_cos(t, t) == pytest.approx(0.0, abs=1e-15)
    assert loss_cos(-t, t) == pytest.approx(2.0, abs=1e-15)
    perp = unit(np.cross(t, rng.normal(size=(20, 3))))
    assert loss_cos(perp, t) == pytest.approx(1.0, abs=1e-15)
    mask = np.zeros(20, bool)
    mask[:5] = True
    mixed = np.where(mask[:, None], t, -t)
    assert loss_cos(mixed, t, mask) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(EmptyMaskError):
        loss_cos(t, t, np.zeros(20, bool))


# --- backward ------------------------------------------------------------------------------


def _loss(model, x, y, mask=None):
    return loss_cos(forward(model, x), y, mask)


@pytest.mark.parametrize("dims,seed", [((5, 8, 3), 0), ((5, 8, 6, 3), 1), ((5, 7, 5, 4, 3), 2),
                                       ((5, 8, 3), 3), ((5, 6, 6, 3), 4)])
def test_gradient_check(dims, seed):
    r = np.random.default_rng(seed)
    m = MlpModel(dims, dropout=0.0, seed=seed, dtype=np.float64)
    for layer in m.layers:
        if "gamma" in layer:
            layer["gamma"][:] = r.uniform(0.5, 1.5, layer["gamma"].shape)
            layer["beta"][:] = r.uniform(-0.5, 0.5, layer["beta"].shape)
    x = r.uniform(-1, 1, (16, 5))
    y = unit(r.normal(size=(16, 3)))
    mask = r.random(16) > 0.2
    cache = []
    forward(m, x, cache=cache)
    grads = backward(m, cache, y, mask)
    h = 1e-4
    for key in m.param_keys():
        p = m.layers[key[0]][key[1]]
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = _loss(m, x, y, mask)
            p[idx] = old - h
            lm = _loss(m, x, y, mask)
            p[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        g = grads[key]
        # biases feeding batch-norm have an exactly-zero gradient; the floor keeps
        # finite-difference round-off from dominating the ratio there
        err = np.linalg.norm(g - fd) / max(np.linalg.norm(g) + np.linalg.norm(fd), 1e-7)
        assert err < 1e-3, (key, err)


def test_zero_loss_gives_zero_output_gradient():
    m = MlpModel((5, 8, 3), dropout=0.0, dtype=np.float64)
    x = np.random.default_rng(0).uniform(-1, 1, (10, 5))
    cache = []
    target = forward(m, x, cache=cache).copy()
    g = backward(m, cache, target)
    assert np.abs(g[(1, "W")]).max() < 1e-12 and np.abs(g[(1, "b")]).max() < 1e-12


def test_gradient_deterministic_given_seed():
    x, y = smooth_dataset(32, 0)
    out = []
    for _ in range(2):
        m = MlpModel((5, 16, 8, 3), seed=1)
        cache = []
        forward(m, x, rng=np.random.default_rng(9), cache=cache)
        out.append(backward(m, cache, y))
    for k in out[0]:
        np.testing.assert_array_equal(out[0][k], out[1][k])


# --- training ---------------------------------------------------------------------------------


def test_zero_epochs_returns_initial_model():
    x, y = smooth_dataset(50, 0)
    m, hist = train((x, y), (x, y), TrainConfig(epochs=0, rng_seed=4), dims=(5, 8, 3))
    ref = MlpModel((5, 8, 3), seed=4)
    assert hist == []
    for a, b in zip(m.layers, ref.layers):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


def test_training_is_deterministic():
    tr, va = smooth_dataset(400, 0), smooth_dataset(100, 1)
    cfg = TrainConfig(epochs=3, batch_size=64, rng_seed=2)
    _, h1 = train(tr, va, cfg, dims=(5, 32, 16, 3))
    _, h2 = train(tr, va, cfg, dims=(5, 32, 16, 3))
    assert h1 == h2


def test_learns_smooth_mapping():
    tr, va = smooth_dataset(8000, 0), smooth_dataset(2000, 1)
    model, hist = train(tr, va, TrainConfig(epochs=15, batch_size=128, rng_seed=0))
    best = min(h["val_aae"] for h in hist)
    assert best <= 5.0
    assert model.mode == "eval"


def test_sgd_momentum_runs():
    tr, va = smooth_dataset(500, 0), smooth_dataset(100, 1)
    _, hist = train(tr, va, TrainConfig(epochs=3, optimizer="sgd_momentum", learning_rate=0.01),
                    dims=(5, 16, 3))
    assert hist[-1]["train_loss"] < hist[0]["train_loss"] * 1.5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    x, y = smooth_dataset(100, 0)
    y[:] = 0.0
    with pytest.raises(DivergenceError):
        train((x, y), (x, y), TrainConfig(epochs=2, learning_rate=1e3), dims=(5, 8, 3))


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=1)
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ParameterError):
        TrainConfig(optimizer="rmsprop")


# --- inference ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    tr, va = smooth_dataset(2000, 0), smooth_dataset(300, 1)
    model, _ = train(tr, va, TrainConfig(epochs=2, rng_seed=5))
    return model


def test_infer_empty_and_single_pixel(trained):
    img = np.random.default_rng(0).random((10, 12, 3))
    empty = infer_image(trained, img, np.zeros((10, 12), bool))
    assert not empty.mask.any() and not empty.n.any()
    m = np.zeros((10, 12), bool)
    m[4, 7] = True
    one = infer_image(trained, img, m)
    assert one.mask.sum() == 1 and np.count_nonzero(np.abs(one.n).sum(-1)) == 1


def test_batched_equals_per_pixel(trained):
    from nearlight.calibration import normalized_coords

    img = np.random.default_rng(1).random((40, 60, 3))
    mask = np.random.default_rng(2).random((40, 60)) > 0.3
    nm = infer_image(trained, img, mask)
    U, V = normalized_coords(mask.shape)
    for r, c in zip(*np.nonzero(mask)):
        x = np.array([[U[r, c], V[r, c], *img[r, c]]], dtype=np.float32)
        assert np.array_equal(forward(trained, x)[0].astype(float), nm.n[r, c])


def test_infer_requirements(trained):
    with pytest.raises(ParameterError):
        infer_image(trained, np.zeros((4, 4, 3)), np.ones((5, 4), bool))
    m = trained.copy().train_mode()
    with pytest.raises(ParameterError):
        infer_image(m, np.zeros((4, 4, 3)), np.ones((4, 4), bool))


def test_save_load_round_trip(tmp_path, trained):
    save_model(trained, tmp_path / "model.nlnw", {"seed": 5})
    back = load_model(tmp_path / "model.nlnw", expected_dims=DEFAULT_DIMS)
    assert back.mode == trained.mode and back.dims == trained.dims
    for a, b in zip(trained.layers, back.layers):
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
    img = np.random.default_rng(3).random((16, 16, 3))
    mask = np.ones((16, 16), bool)
    np.testing.assert_array_equal(infer_image(trained, img, mask).n, infer_image(back, img, mask).n)
    assert (tmp_path / "model.json").exists()


def test_load_errors(tmp_path, trained):
    save_model(trained, tmp_path / "m.nlnw")
    raw = (tmp_path / "m.nlnw").read_bytes()
    (tmp_path / "bad.nlnw").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_model(tmp_path / "bad.nlnw")
    with pytest.raises(FormatError, match="dims"):
        load_model(tmp_path / "m.nlnw", expected_dims=(5, 8, 3))
    (tmp_path / "short.nlnw").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_model(tmp_path / "short.nlnw")


def test_inference_throughput(trained):
    x = np.random.default_rng(0).random((100_000, 5)).astype(np.float32)
    t0 = time.perf_counter()
    forward(trained, x)
    rate = x.shape[0] / (time.perf_counter() - t0)
    print(f"eval throughput: {rate:,.0f} px/s")
    assert math.isfinite(rate)
