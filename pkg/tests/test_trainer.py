"""Configs, model assembly, optimizers, determinism, checkpoints and training diagnostics."""

import numpy as np
import pytest

from invstreams.autodiff import ShapeError, Tensor
from invstreams.checkpoint import CheckpointError, load_checkpoint
from invstreams.data import synth_generate
from invstreams.experiments import e2_arch, scale_arch, std_arch
from invstreams.nn import Parameter
from invstreams.trainer import (
    SGD,
    Adam,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    build_model,
    evaluate,
    load_network,
    train,
)

TINY = std_arch(widths=(2, 2, 2), size=12, classifier_only=True)


@pytest.fixture(scope="module")
def data():
    return synth_generate(40, "scale", seed=0, size=12)


def _params(net):
    return {k: np.array(v) for k, v in net.state_dict().items()}


def test_config_validation():
    for bad in [dict(lr=-1.0), dict(optimizer="rmsprop"), dict(milestones=(5, 5)), dict(batch_size=0),
                dict(dropout=1.0), dict(betas=(0.9, 1.0)), dict(augment_scale=(0.0, 1.0)), dict(lr=float("nan")),
                dict(pruning_schedule=((5, 3), (2, 1)))]:
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.1, "learning_rate": 0.1})
    cfg = TrainConfig(milestones=(20, 40), augment_scale=(0.5, 2.0), pruning_schedule=((0, 25), (5, 12)))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig.from_dict(cfg.to_dict()).hash() == cfg.hash()


def test_milestone_schedule():
    cfg = TrainConfig(lr=1.0, epochs=60, milestones=(20, 40))
    lrs = [cfg.lr_at(e) for e in range(60)]
    assert lrs[19] == 1.0 and lrs[20] == pytest.approx(0.1) and lrs[39] == pytest.approx(0.1)
    assert lrs[40] == pytest.approx(0.01) and lrs[59] == pytest.approx(0.01)


def _quadratic_step(opt, theta, a, steps, lr):
    """Minimise 0.5 * a * theta^2 with ``opt``; returns the parameter trajectory."""
    p = Parameter(np.array([theta]))
    out = []
    for _ in range(steps):
        p.grad = a * p.data
        opt.step([("theta", p)], lr)
        out.append(float(p.data[0]))
    return out


def test_sgd_momentum_matches_closed_form():
    theta, v, mu, lr, a = 2.0, 0.0, 0.9, 0.1, 3.0
    want = []
    for _ in range(3):
        v = mu * v - lr * a * theta
        theta += v
        want.append(theta)
    assert _quadratic_step(SGD(mu), 2.0, a, 3, lr) == pytest.approx(want, abs=1e-15)


def test_adam_matches_closed_form():
    theta, m, v, a, lr = 2.0, 0.0, 0.0, 3.0, 0.05
    b1, b2, eps = 0.9, 0.999, 1e-8
    want = []
    for t in range(1, 4):
        g = a * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        want.append(theta)
    assert _quadratic_step(Adam(), 2.0, a, 3, lr) == pytest.approx(want, abs=1e-15)


def test_weight_decay_adds_l2_gradient():
    plain = _quadratic_step(SGD(0.0, weight_decay=0.5), 1.0, 2.0, 2, 0.1)
    assert plain == pytest.approx(_quadratic_step(SGD(0.0), 1.0, 2.5, 2, 0.1), abs=1e-15)


def test_lr_zero_leaves_parameters_unchanged(data):
    net = build_model(TINY, 0)
    before = {k: np.array(p.data) for k, p in net.named_parameters()}
    train(net, data, TrainConfig(optimizer="sgd", lr=0.0, epochs=1, batch_size=16))
    for k, p in net.named_parameters():
        np.testing.assert_array_equal(p.data, before[k])


def test_training_is_bit_deterministic(data):
    cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-2, augment_scale=(0.5, 1.0), dropout=0.2)
    a, b = build_model(TINY, 3, cfg.dropout), build_model(TINY, 3, cfg.dropout)
    ra, rb = train(a, data, cfg), train(b, data, cfg)
    assert ra.metrics == rb.metrics
    pa, pb = _params(a), _params(b)
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k])


def test_resume_reproduces_uninterrupted_run(data, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=16, lr=1e-2, milestones=(2,), augment_scale=(0.5, 1.0))
    full = build_model(TINY, 1)
    train(full, data, cfg)
    ckpt = tmp_path / "run.ckpt"
    part = build_model(TINY, 1)
    train(part, data, cfg, checkpoint_path=ckpt, stop_after=1)
    resumed = build_model(TINY, 1)
    res = train(resumed, data, cfg, checkpoint_path=ckpt, resume_from=ckpt)
    assert [r["epoch"] for r in res.metrics] == [1, 2, 3]
    pf, pr = _params(full), _params(resumed)
    for k in pf:
        np.testing.assert_array_equal(pr[k], pf[k])
    with pytest.raises(ConfigError):
        train(build_model(TINY, 1), data, TrainConfig(epochs=3, lr=0.5), resume_from=ckpt)


def test_checkpoint_round_trip(data, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=16, arch=TINY)
    net = build_model(TINY, 2)
    train(net, data, cfg, checkpoint_path=tmp_path / "a.ckpt")
    loaded, cfg2, header, _ = load_network(tmp_path / "a.ckpt")
    assert cfg2 == cfg and header["epoch"] == 1
    net.eval()
    loaded.eval()
    x = Tensor(data.images[:5])
    np.testing.assert_array_equal(loaded(x).data, net(x).data)
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_nan_loss_names_the_layer(data):
    net = build_model(TINY, 0)
    name, p = next((n, p) for n, p in net.named_parameters() if "conv1" in n)
    p.data = np.full(p.shape, np.nan)
    with pytest.raises(TrainingDiverged, match="conv1"):
        train(net, data, TrainConfig(epochs=1, batch_size=16))


def test_metrics_rows_and_eval(data, tmp_path):
    net = build_model(TINY, 0)
    res = train(net, data, TrainConfig(epochs=2, batch_size=16), eval_set=data, metrics_path=tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_error,eval_error" and len(lines) == 3
    assert res.metrics[-1]["eval_error"] == evaluate(net, data)


def test_full_width_scale_model_on_56px_input():
    net = build_model(scale_arch(widths=(8, 16, 24), upsample=True, size=28), 0)
    net.eval()
    assert net(Tensor(np.random.default_rng(0).uniform(size=(1, 1, 28, 28)))).shape == (1, 10)
    net = build_model(scale_arch(widths=(8, 16, 24), size=56), 0)
    net.eval()
    assert net(Tensor(np.random.default_rng(0).uniform(size=(1, 1, 56, 56)))).shape == (1, 10)


def test_trivial_conv_dense_model():
    arch = {"input_shape": [1, 6, 6], "n_classes": 3,
            "layers": [{"type": "conv", "channels": 2}, {"type": "pool", "mode": "avg"}, {"type": "dense", "units": 3}]}
    net = build_model(arch, 0)
    assert net(Tensor(np.zeros((2, 1, 6, 6)))).shape == (2, 3)


def test_e2_model_feature_width_feeds_dense():
    net = build_model(e2_arch(widths=(4, 6, 8), size=16), 0)
    assert net.feature_width == 8
    first_dense = next(m for n, m in net.head.layers() if n == "dense1")
    assert first_dense.n_in == 8


def test_shape_errors_name_the_layer():
    arch = {"input_shape": [1, 8, 8], "layers": [{"type": "conv", "channels": 2, "name": "c0"},
                                                 {"type": "dense", "units": 3, "name": "fc"}]}
    with pytest.raises(ShapeError, match="fc"):
        build_model(arch, 0)
    arch = {"input_shape": [1, 8, 8], "layers": [{"type": "conv", "channels": 2, "name": "c0"},
                                                 {"type": "gconv", "channels": 2, "name": "g1"}]}
    with pytest.raises(ShapeError, match="g1"):
        build_model(arch, 0)
    with pytest.raises(ConfigError):
        build_model({"layers": []}, 0)
    with pytest.raises(ConfigError):
        build_model({"input_shape": [1, 8, 8], "layers": [{"type": "warp"}]}, 0)
    with pytest.raises(ShapeError):
        build_model({"input_shape": [1, 8, 8], "n_classes": 4, "layers": [
            {"type": "pool"}, {"type": "dense", "units": 3}]}, 0)


def test_pruning_hook_fires_on_schedule(data, tmp_path):
    arch = scale_arch("scale-ii-monomial", widths=(2, 2, 2), size=12, classifier_only=True)
    net = build_model(arch, 0)
    layer = net.monomial_layers()[0][1]
    assert len(layer.terms) == 25
    cfg = TrainConfig(epochs=3, batch_size=20, pruning_schedule=((0, 25), (1, 12), (2, 5)), arch=arch)
    train(net, data, cfg, checkpoint_path=tmp_path / "p.ckpt")
    assert len(layer.terms) == 5
    loaded = load_network(tmp_path / "p.ckpt")[0]
    assert [t.to_dict() for t in loaded.monomial_layers()[0][1].terms] == [t.to_dict() for t in layer.terms]
