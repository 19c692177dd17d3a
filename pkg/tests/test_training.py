import math

import numpy as np
import pytest

from conftest import tiny_backbone
from ssar.autodiff import NonFiniteError, Tensor
from ssar.data import Manifest, ManifestRow, PipelineConfig, generate_corpus, generate_phantom, prepare_sequence, write_volume
from ssar.gradcheck import numerical_grad
from ssar.models import SliceSeqAgeNet, Volumetric3DNet, load_weights
from ssar.training import (
    AdamState,
    ConfigError,
    TrainConfig,
    adam_step,
    lr_at,
    mae_loss,
    make_model,
    model_input,
    read_log,
    train,
)

PIPE = PipelineConfig(axis=2, target_hw=(8, 8), n_slices=6)


def tiny_net(seed=0):
    return SliceSeqAgeNet(6, 3, 8, tiny_backbone(), seed=seed)


def phantom_inputs(ages, noise=0.1):
    return [model_input(prepare_sequence(generate_phantom(a, (8, 8, 8), noise, seed=i), PIPE), "sliceseq") for i, a in enumerate(ages)]


# loss -----------------------------------------------------------------------------------


def test_mae_loss_examples():
    assert mae_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert mae_loss(Tensor([1.5, 2.5]), [1.0, 2.0]).item() == 0.5
    with pytest.raises(ValueError):
        mae_loss(Tensor(np.zeros(0)), [])


def test_mae_loss_gradient(f64):
    pred = Tensor([3.0, -1.0, 0.25], requires_grad=True)
    target = np.array([1.0, 0.0, 0.0])
    mae_loss(pred, target).backward()
    np.testing.assert_allclose(pred.grad, [1 / 3, -1 / 3, 1 / 3])
    numeric = numerical_grad(lambda: float(np.mean(np.abs(pred.data - target))), pred.data)
    np.testing.assert_allclose(pred.grad, numeric, atol=1e-8)


def test_mae_loss_tie_subgradient_is_zero(f64):
    pred = Tensor([2.0], requires_grad=True)
    mae_loss(pred, [2.0]).backward()
    assert pred.grad[0] == 0.0


# adam ------------------------------------------------------------------------------------


def scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, theta=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adam_three_step_trace(f64):
    p = Tensor([0.0], requires_grad=True)
    state = AdamState.for_params([p])
    for _ in range(3):
        p.grad = np.array([1.0])
        adam_step([p], state, lr=0.1)
    assert abs(p.data[0] - scalar_adam([1, 1, 1], 0.1)) < 1e-10
    # each bias-corrected step with a constant gradient is lr / (1 + eps)
    assert abs(p.data[0] + 0.3) < 1e-6
    assert state.step == 3 and p.grad is None


@pytest.mark.parametrize("g", [1e-3, -2.0, 7.5])
def test_adam_first_step_is_lr(f64, g):
    p = Tensor(np.full(4, 1.0), requires_grad=True)
    state = AdamState.for_params([p])
    p.grad = np.full(4, g)
    adam_step([p], state, lr=1e-4)
    np.testing.assert_allclose(p.data - 1.0, -np.sign(g) * 1e-4, rtol=1e-4)


def test_adam_zero_gradient_leaves_params(f64):
    p = Tensor(np.arange(3.0), requires_grad=True)
    state = AdamState.for_params([p])
    for _ in range(5):
        p.grad = np.zeros(3)
        adam_step([p], state, lr=0.1)
    np.testing.assert_array_equal(p.data, np.arange(3.0))


def test_adam_nan_gradient_names_parameter():
    p, q = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    p.grad, q.grad = np.ones(2), np.array([1.0, np.nan])
    with pytest.raises(NonFiniteError, match="lstm_f.W_ix"):
        adam_step([p, q], AdamState.for_params([p, q]), 1e-3, names=["a", "lstm_f.W_ix"])
    np.testing.assert_array_equal(p.data, np.ones(2))


# schedule and config -------------------------------------------------------------------


def test_lr_schedule():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr0, cfg.halve_every) == (60, 1, 1e-4, 15)
    assert [lr_at(e, cfg) for e in (0, 14, 15, 29, 30, 45)] == [1e-4, 1e-4, 5e-5, 5e-5, 2.5e-5, 1.25e-5]
    lrs = [lr_at(e, cfg) for e in range(60)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lr_at(59, TrainConfig(halve_every=math.inf)) == 1e-4


@pytest.mark.parametrize(
    "kw", [{"epochs": 0}, {"lr0": 0.0}, {"batch_size": 0}, {"adam_beta1": 1.0}, {"adam_beta2": 0.0}]
)
def test_train_config_rejects(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_make_model_kinds():
    assert isinstance(make_model("sliceseq", PIPE, backbone=tiny_backbone()), SliceSeqAgeNet)
    assert isinstance(make_model("vol3d", PIPE, backbone=tiny_backbone(3)), Volumetric3DNet)
    with pytest.raises(ConfigError):
        make_model("rnn", PIPE)


# optimisation sanity --------------------------------------------------------------------


def run_steps(net, xs, ages, steps, lr):
    named = net.named_parameters()
    params = [p for _, p in named]
    state = AdamState.for_params(params)
    for s in range(steps):
        i = s % len(xs)
        mae_loss(net(xs[i]), ages[i]).backward()
        adam_step(params, state, lr, names=[n for n, _ in named])
        assert all(np.isfinite(p.data).all() for p in params)


def mean_loss(net, xs, ages):
    return float(np.mean([mae_loss(net(x), a).item() for x, a in zip(xs, ages)]))


def test_overfit_single_sample():
    net = tiny_net()
    xs, ages = phantom_inputs([3.7]), [3.7]
    run_steps(net, xs, ages, 200, lr=1e-2)
    assert mean_loss(net, xs, ages) < 1e-2


# full loop ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(root, 10, age_max=6.0, dims=(8, 8, 8), noise_sigma=0.1, seed=4)
    from ssar.data import read_manifest

    return read_manifest(root / "manifest.csv")


def test_train_writes_log_and_checkpoints(corpus, tmp_path):
    cfg = TrainConfig(lr0=1e-3, epochs=4, checkpoint_every=2, seed=1)
    res = train(tiny_net(), corpus, cfg, PIPE, tmp_path, {"pipeline.n_slices": "6"})
    assert [r["epoch"] for r in res.log] == [1, 2, 3, 4]
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["best.ssar", "ckpt_epoch2.ssar", "ckpt_epoch4.ssar", "final.ssar", "train_log.csv"]
    assert (tmp_path / "train_log.csv").read_text().splitlines()[0] == "epoch,lr,train_mae,test_mae,seconds"
    assert read_log(tmp_path / "train_log.csv")[3]["test_mae"] == res.log[3]["test_mae"]
    best = load_weights(tmp_path / "best.ssar")
    assert 1 <= res.best_epoch <= 4
    assert best.metadata["pipeline.n_slices"] == "6"
    assert (tmp_path / "final.ssar").read_bytes() == (tmp_path / "ckpt_epoch4.ssar").read_bytes()


def test_train_is_deterministic(corpus):
    cfg = TrainConfig(lr0=1e-3, epochs=2, seed=3)
    a = train(tiny_net(), corpus, cfg, PIPE)
    b = train(tiny_net(), corpus, cfg, PIPE)
    strip = lambda log: [{k: v for k, v in r.items() if k != "seconds"} for r in log]  # noqa: E731
    assert strip(a.log) == strip(b.log)
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_train_batch_accumulation(corpus):
    res = train(tiny_net(), corpus, TrainConfig(lr0=1e-3, epochs=1, batch_size=3), PIPE)
    assert math.isfinite(res.log[0]["train_mae"])


def test_train_fails_fast_on_mismatch(corpus):
    with pytest.raises(ConfigError, match="seq_len"):
        train(SliceSeqAgeNet(9, 3, 8, tiny_backbone()), corpus, TrainConfig(epochs=1), PIPE)
    # a pipeline whose slices are too small for the stem kernel fails on the first sample
    small = PipelineConfig(2, (2, 2), 6)
    with pytest.raises(ConfigError, match="first sample"):
        train(tiny_net(), corpus, TrainConfig(epochs=1), small)


def test_train_requires_train_split(tmp_path):
    v = generate_phantom(1.0, (8, 8, 8))
    write_volume(v, tmp_path / "a.raw")
    m = Manifest([ManifestRow(v.subject_id, "a.raw", 1.0, split="test")], tmp_path)
    with pytest.raises(ConfigError, match="train split"):
        train(tiny_net(), m, TrainConfig(epochs=1), PIPE)
