import numpy as np
import pytest
from oracles import numeric_grad

from ternkit.errors import DomainError, TrainingError
from ternkit.network import build_toy, forward as infer
from ternkit.training import (
    MasterWeights,
    TrainConfig,
    dice,
    evaluate,
    mean_dice,
    synth_dataset,
    train,
    train_step,
    weighted_cross_entropy,
)
from ternkit.training import graph
from ternkit.training.data import ellipse_radius
from ternkit.training.layers import softmax_ce_forward
from ternkit.training.trainer import write_outputs

W = (0.5, 2.5)


# --- loss and metric ------------------------------------------------------------

def test_ce_closed_forms():
    scores = np.zeros((2, 4, 4))
    assert weighted_cross_entropy(scores, np.ones((4, 4))) == pytest.approx(2.5 * np.log(2))
    assert weighted_cross_entropy(scores, np.zeros((4, 4))) == pytest.approx(0.5 * np.log(2))
    assert round(weighted_cross_entropy(scores, np.ones((4, 4))), 3) == 1.733
    confident = np.stack([np.full((4, 4), -50.0), np.full((4, 4), 50.0)])
    assert weighted_cross_entropy(confident, np.ones((4, 4))) < 1e-20


def test_ce_shape_errors():
    with pytest.raises(DomainError):
        weighted_cross_entropy(np.zeros((2, 4, 4)), np.zeros((4, 5)))
    with pytest.raises(DomainError):
        weighted_cross_entropy(np.zeros((3, 4, 4)), np.zeros((4, 4)))


def test_ce_batch_matches_training_loss():
    rng = np.random.default_rng(0)
    s, t = rng.normal(size=(3, 2, 5, 5)), rng.integers(0, 2, size=(3, 5, 5))
    loss, _ = softmax_ce_forward(s, t, W)
    assert loss == pytest.approx(weighted_cross_entropy(s, t))


def test_dice_examples():
    a = np.zeros((20, 20), bool)
    a[:10, :10] = True
    assert dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[10:, 10:] = True
    assert dice(a, b) == 0.0
    c = np.zeros_like(a)
    c[5:15, :10] = True
    assert dice(a, c) == pytest.approx(0.5)
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert mean_dice([a, a], [a, b]) == pytest.approx(0.5)


# --- data -----------------------------------------------------------------------

def test_dataset_deterministic():
    a = synth_dataset(3, 5)
    b = synth_dataset(3, 5)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
    assert synth_dataset(4, 5)[0].tobytes() != a[0].tobytes()


def test_dataset_density_and_shapes():
    x, m, e = synth_dataset(11, 1000)
    assert x.shape == (1000, 3, 64, 64) and x.dtype == np.float32
    assert m.shape == (1000, 64, 64) and m.dtype == np.uint8
    density = m.reshape(1000, -1).mean(axis=1)
    assert density.min() >= 0.01 and density.max() <= 0.12
    assert np.allclose(x.mean(axis=(1, 2, 3)), 0, atol=1e-5)


def test_mask_is_rasterised_ellipse():
    _, m, e = synth_dataset(12, 10, size=(48, 40))
    for mask, (cy, cx, a, b, th) in zip(m, e):
        assert np.array_equal(mask, ellipse_radius(48, 40, cy, cx, a, b, th) <= 1.0)


def test_foreground_brighter_than_background():
    x, m, _ = synth_dataset(13, 20)
    centre = x[:, 1]
    assert centre[m == 1].mean() > centre[m == 0].mean() + 1.0


# --- gradients ------------------------------------------------------------------

def micro_net():
    # every layer kind: conv, batch norm, activation, pool, upsample, concat, prediction
    return build_toy(width=2, in_slices=2, levels=2, size=4)


@pytest.mark.parametrize("activation", ["tanh", "tern_tanh", "tanh_beta"])
def test_micro_net_gradients(activation):
    spec = micro_net()
    rng = np.random.default_rng(1)
    params, buffers = graph.init_params(spec, rng, dtype=np.float64)
    for k in params:
        if k.endswith((".gain", ".shift", ".b")):
            params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    x = rng.normal(size=(2, 2, 4, 4))
    target = rng.integers(0, 2, size=(2, 4, 4))
    policy = graph.Policy("float", activation)
    beta = 2.0

    def loss():
        scores, _ = graph.forward(spec, params, dict(buffers), x, policy, beta)
        return softmax_ce_forward(scores, target, W)[0]

    scores, tape = graph.forward(spec, params, dict(buffers), x, policy, beta)
    _, dscores = softmax_ce_forward(scores, target, W)
    grads = graph.backward(tape, dscores, input_grad=True)
    assert set(params) <= set(grads)
    for name, arr in list(params.items()) + [("input", x)]:
        flat_idx = rng.choice(arr.size, size=min(arr.size, 6), replace=False)
        an = np.array([grads[name].flat[i] for i in flat_idx])
        fd = np.array([numeric_grad(loss, arr, np.unravel_index(i, arr.shape)) for i in flat_idx])
        rel = np.linalg.norm(an - fd) / max(np.linalg.norm(an), np.linalg.norm(fd), 1e-12)
        assert rel < 1e-3, (name, an, fd)


def test_weight_gradient_passes_alpha_scaled():
    spec = micro_net()
    rng = np.random.default_rng(2)
    params, buffers = graph.init_params(spec, rng, dtype=np.float64)
    x = rng.normal(size=(1, 2, 4, 4))
    t = rng.integers(0, 2, size=(1, 4, 4))
    tern = graph.Policy("ternary", "tern_tanh")
    scores, tape = graph.forward(spec, params, dict(buffers), x, tern, 3.0)
    g_q = graph.backward(tape, softmax_ce_forward(scores, t, W)[1])
    eff = {l.name: graph.quantised_filters(params[f"{l.name}.w"], tern) for l in spec.conv_layers}
    scores2, tape2 = graph.forward(spec, params, dict(buffers), x, graph.Policy("float", "tern_tanh"), 3.0,
                                   weights_override={k: v[0] for k, v in eff.items()})
    assert np.array_equal(scores, scores2)
    g_eff = graph.backward(tape2, softmax_ce_forward(scores2, t, W)[1])
    for name, (_, alpha) in eff.items():
        assert np.allclose(g_q[f"{name}.w"], g_eff[f"{name}.w"] * alpha[:, None, None, None])


# --- optimisation ---------------------------------------------------------------

def tiny_config(**kw):
    base = dict(epochs=2, iters_per_epoch=3, width=2, size=16, n_train=12, n_val=4, batch_size=4)
    base.update(kw)
    return TrainConfig(**base)


def test_master_weight_integrity():
    config = tiny_config()
    spec = config.network()
    master = MasterWeights.init(spec, np.random.default_rng(3))
    x, y, _ = synth_dataset(4, 4, size=16)
    before = master.copy()
    scores, tape = graph.forward(spec, before.params, before.copy().buffers, x, config.policy(), 3.0)
    grads = graph.backward(tape, softmax_ce_forward(scores, y, W)[1].astype(scores.dtype))
    _, master = train_step(master, (x, y), config, 0)
    b1, b2 = config.adam_betas
    lr = config.learning_rate(0)
    for k, p0 in before.params.items():
        g = grads[k].astype(np.float32)
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        expected = p0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + config.adam_eps)
        assert np.allclose(master.params[k], expected, rtol=1e-5, atol=1e-7), k
    w = master.params["conv2.w"]
    assert len(np.unique(np.abs(w))) > 10  # never overwritten by alpha * codes


def test_quantised_forward_matches_prequantised_weights():
    config = tiny_config()
    spec = config.network()
    master = MasterWeights.init(spec, np.random.default_rng(4))
    x, _, _ = synth_dataset(5, 2, size=16)
    policy = config.policy()
    a, _ = graph.forward(spec, master.params, master.copy().buffers, x, policy, 3.0)
    override = {l.name: graph.quantised_filters(master.params[f"{l.name}.w"], policy)[0]
                for l in spec.conv_layers}
    b, _ = graph.forward(spec, master.params, master.copy().buffers, x, graph.Policy("float", "tern_tanh"),
                         3.0, weights_override=override)
    assert np.array_equal(a, b)


def test_overfit_one_batch():
    config = TrainConfig(width=4, size=32, n_train=8, n_val=2, lr_final=1.0)
    master = MasterWeights.init(config.network(), np.random.default_rng(5))
    x, y, _ = synth_dataset(6, 8, size=32)
    losses = []
    for _ in range(50):
        loss, master = train_step(master, (x, y), config, 0)
        losses.append(loss)
    assert losses[-1] < 0.5 * losses[0]
    windows = np.array(losses).reshape(5, 10).mean(axis=1)
    assert np.all(np.diff(windows) < 0)


def test_non_finite_loss_raises():
    config = tiny_config(mode="float")
    master = MasterWeights.init(config.network(), np.random.default_rng(6))
    x, y, _ = synth_dataset(7, 2, size=16)
    x[0, 0, 0, 0] = np.inf
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="non-finite loss"):
        train_step(master, (x, y), config, 0)
    master.params["conv1.w"][:] = np.nan
    with pytest.raises(TrainingError, match="conv1.w"):
        train_step(master, (x, y), tiny_config(), 0)


def test_config_validation():
    with pytest.raises(DomainError):
        TrainConfig(lr=0)
    with pytest.raises(DomainError):
        TrainConfig(mode="quaternary")
    assert TrainConfig(mode="ternary").mode == "ternary-full"
    c = TrainConfig()
    assert (c.lr, c.batch_size, c.epochs, c.iters_per_epoch, c.w_bg, c.w_fg) == (0.0025, 10, 40, 150, 0.5, 2.5)
    assert c.schedule.beta(0) == 3.0 and c.schedule.beta(39) == 8.0
    assert c.learning_rate(0) == 0.0025


@pytest.mark.parametrize("mode", ["float", "ternary-full", "ternary-weights-only", "binary-full"])
def test_short_training_run(mode, tmp_path):
    config = tiny_config(mode=mode)
    result = train(config, out_dir=tmp_path)
    assert len(result.metrics) == config.epochs
    n_conv = len(config.network().conv_layers)
    assert len(result.sparsity) == config.epochs * n_conv
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,beta,train_loss,val_dice,mean_weight_sparsity"
    assert len(lines) == config.epochs + 1
    for name in ("sparsity.csv", "master.tnn", "model.tnn"):
        assert (tmp_path / name).is_file()
    assert 0.0 <= result.metrics[-1]["val_dice"] <= 1.0


def test_training_deterministic(tmp_path):
    for sub in ("a", "b"):
        write_outputs(train(tiny_config(seed=7)), tmp_path / sub)
    for name in ("metrics.csv", "sparsity.csv", "model.tnn"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_evaluate_uses_packed_inference_path():
    config = tiny_config()
    master = MasterWeights.init(config.network(), np.random.default_rng(8))
    x, y, _ = synth_dataset(9, 3, size=16)
    from ternkit.network import predict_mask, quantize_model

    model = quantize_model(master.to_model(), "ternary")
    expected = mean_dice(predict_mask(infer(model, x)), y)
    assert evaluate(master, x, y, config) == pytest.approx(expected)
