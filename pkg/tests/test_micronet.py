import numpy as np
import pytest

from ordinal_depth.errors import (
    CheckpointMismatch, InvalidConfig, NonFiniteLoss, OddSpatialDim, ShapeMismatch,
)
from ordinal_depth.micronet import ops
from ordinal_depth.micronet.gradcheck import grad_check
from ordinal_depth.micronet.layers import Bottleneck, DenseBlock, Linear, named_layers
from ordinal_depth.micronet.model import (
    INPUT_SIZES, STREAM_PRESETS, ModelConfig, OrdinalNet, build_model, forward,
    stream_output_shape,
)
from ordinal_depth.micronet.train import (
    TrainTrace, load_checkpoint, save_checkpoint, sgd_step, step_lr, train,
)


def random_inputs(rng, n, streams=STREAM_PRESETS["all"], dtype=np.float32):
    out = {}
    for name in streams:
        size = INPUT_SIZES[name]
        c = 2 if name == "masks" else 3
        x = rng.random((n, size, size, c))
        out[name] = (x > 0.7 if name == "masks" else x).astype(dtype)
    return out


class ArrayData:
    def __init__(self, inputs, labels):
        self.inputs, self.labels = inputs, np.asarray(labels)

    def __len__(self):
        return len(self.labels)

    def batch(self, idx):
        return {k: v[idx] for k, v in self.inputs.items()}, self.labels[idx]


# --- ops --------------------------------------------------------------------

def test_conv_examples():
    x = np.random.default_rng(0).random((1, 3, 3, 1))
    w = np.zeros((3, 3, 1, 1))
    w[1, 1] = 1
    out, _ = ops.conv2d_forward(x, w, None, 1, 1)
    np.testing.assert_allclose(out, x)
    assert ops.conv_output_size(32, 3, 2, 0) == 15
    out, _ = ops.conv2d_forward(np.zeros((1, 32, 32, 2)), np.zeros((3, 3, 2, 4)), None, 2, 0)
    assert out.shape == (1, 15, 15, 4)
    out, _ = ops.conv2d_forward(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1)), None, 1, 0)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9
    with pytest.raises(ShapeMismatch):
        ops.conv2d_forward(np.ones((1, 3, 3, 2)), np.ones((3, 3, 1, 1)), None)


def test_conv_adjoint():
    # <conv(x), y> == <x, conv^T(y)> for every path through the conv code
    rng = np.random.default_rng(1)
    for stride, pad, kernel, cin, cout in [(1, 1, 3, 4, 3), (2, 1, 3, 3, 5), (1, 0, 1, 6, 2),
                                           (2, 0, 3, 3, 3), (1, 1, 3, 2, 8)]:
        x = rng.standard_normal((2, 9, 9, cin))
        w = rng.standard_normal((kernel, kernel, cin, cout))
        y, cache = ops.conv2d_forward(x, w, None, stride, pad)
        g = rng.standard_normal(y.shape)
        dx, dw, _ = ops.conv2d_backward(g, cache)
        assert np.sum(y * g) == pytest.approx(np.sum(x * dx), rel=1e-10)
        assert np.sum(y * g) == pytest.approx(np.sum(w * dw), rel=1e-10)


def test_small_ops():
    out, _ = ops.relu_forward(np.array([-1.0, 2.0]))
    assert out.tolist() == [0.0, 2.0]
    np.testing.assert_allclose(ops.log_softmax(np.zeros((1, 3))), -np.log(3) * np.ones((1, 3)))
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1)
    out, _ = ops.avg_pool2_forward(x)
    assert out.ravel().tolist() == [2.5]
    out, _ = ops.max_pool2_forward(x)
    assert out.ravel().tolist() == [4.0]
    with pytest.raises(OddSpatialDim):
        ops.avg_pool2_forward(np.ones((1, 1, 4, 1)))
    loss, _ = ops.nll_loss(np.log(np.array([[0.5, 0.25, 0.25]])), np.array([0]))
    assert loss == pytest.approx(np.log(2))


def test_batchnorm_train_and_eval():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 3, 3, 4)) * 3 + 1
    rm, rv = np.zeros(4), np.ones(4)
    y, _ = ops.batchnorm_forward(x, np.ones(4), np.zeros(4), rm, rv, True, 0.9, 1e-5)
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1, rtol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 1, 2)))
    y2, _ = ops.batchnorm_forward(x, np.ones(4), np.zeros(4), rm, rv, False, 0.9, 1e-5)
    np.testing.assert_allclose(y2, (x - rm) / np.sqrt(rv + 1e-5))


# --- blocks -----------------------------------------------------------------

@pytest.mark.parametrize("c_in,n_layers,k", [(24, 5, 5), (24, 5, 12), (48, 1, 5), (24, 3, 12)])
def test_dense_block_channels(c_in, n_layers, k):
    rng = np.random.default_rng(0)
    block = DenseBlock(rng, c_in, n_layers, k, np.float64)
    x = rng.standard_normal((2, 4, 4, c_in))
    y = block.forward(x, True)
    assert y.shape == (2, 4, 4, c_in + n_layers * k) == (2, 4, 4, block.c_out)
    np.testing.assert_array_equal(y[..., :c_in], x)


def test_dense_block_single_layer_is_concat():
    rng = np.random.default_rng(0)
    block = DenseBlock(rng, 6, 1, 4, np.float64)
    x = rng.standard_normal((2, 5, 5, 6))
    y = block.forward(x, False)
    inner = block.children["0"].forward(x, False)
    np.testing.assert_array_equal(y, np.concatenate([x, inner], axis=3))


def test_bottleneck_identity_and_skip_gradient():
    rng = np.random.default_rng(0)
    block = Bottleneck(rng, 8, dtype=np.float64)
    for _, layer in named_layers(block):
        if "w" in layer.params:
            layer.params["w"][...] = 0
    x = rng.standard_normal((2, 4, 4, 8))
    y = block.forward(x, True)
    np.testing.assert_array_equal(y, x)
    dx = block.backward(np.ones_like(y))
    np.testing.assert_allclose(dx, np.ones_like(x))


# --- model ------------------------------------------------------------------

def test_stream_shapes():
    cfg = ModelConfig(block_kind="none")
    assert stream_output_shape("patch1", cfg) == (4, 40)
    assert stream_output_shape("scale1", cfg) == (2, 48)
    assert stream_output_shape("scale1", ModelConfig()) == (2, 48 + 25)
    m = OrdinalNet(ModelConfig(streams=("patch1",)))
    x = np.zeros((1, 16, 16, 3), dtype=np.float32)
    sizes = []
    for layer in m.children["patch1"].children.values():
        x = layer.forward(x, False)
        sizes.append(x.shape[1])
    assert sizes[::3] == [8, 8, 4, 4]


def test_config_validation():
    with pytest.raises(InvalidConfig):
        ModelConfig(streams=())
    with pytest.raises(InvalidConfig):
        ModelConfig(streams=("masks",))
    with pytest.raises(InvalidConfig):
        ModelConfig(streams=("patch1", "depth"))
    with pytest.raises(InvalidConfig):
        ModelConfig(growth_rate=0)
    with pytest.raises(InvalidConfig):
        ModelConfig(block_kind="resnet")
    cfg = ModelConfig(streams=("masks", "patch1"))
    assert cfg.streams == ("patch1", "masks")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_disabling_stream_only_changes_head_width():
    full = OrdinalNet(ModelConfig(seed=3))
    part = OrdinalNet(ModelConfig(streams=STREAM_PRESETS["single"], seed=3))
    fs, ps = dict(full.named_params()), dict(part.named_params())
    for name, arr in ps.items():
        if not name.startswith("fc"):
            assert arr.shape == fs[name].shape
    assert ps["fc1.w"].shape[1] == fs["fc1.w"].shape[1]
    assert ps["fc1.w"].shape[0] < fs["fc1.w"].shape[0]
    assert not any(n.startswith(("scale2", "scale3")) for n in ps)


def test_forward_normalized_deterministic_and_checked():
    rng = np.random.default_rng(0)
    model = build_model(ModelConfig())
    x = random_inputs(rng, 1)
    batch = {k: np.concatenate([v, v]) for k, v in x.items()}
    logp = forward(model, batch, "eval")
    np.testing.assert_allclose(np.exp(logp).sum(axis=1), 1, atol=1e-6)
    np.testing.assert_array_equal(logp[0], logp[1])
    with pytest.raises(ShapeMismatch):
        model.forward({**batch, "scale2": batch["scale1"]})
    with pytest.raises(ValueError):
        forward(model, batch, "test")


def test_fresh_models_are_near_uniform():
    rng = np.random.default_rng(5)
    x = random_inputs(rng, 4)
    mean = np.zeros(3)
    for seed in range(100):
        p = np.exp(OrdinalNet(ModelConfig(seed=seed)).forward(x)).mean(axis=0)
        mean += p / 100
        assert np.all(np.abs(p - 1 / 3) < 0.2 + 0.3), p  # individual inits stay sane
    assert np.all(np.abs(mean - 1 / 3) < 0.2)


def test_grad_check_fc_only_and_zero_input():
    rng = np.random.default_rng(0)
    model = OrdinalNet(ModelConfig(streams=("patch1", "masks")))
    inputs = random_inputs(rng, 3, model.config.streams)
    err, n = grad_check(model, inputs, np.array([0, 1, 2]), params=["fc1.w", "fc1.b", "fc2.w", "fc2.b"])
    assert n >= 100 and err < 1e-6
    zeros = {k: np.zeros_like(v) for k, v in inputs.items()}
    model.loss_and_grad(zeros, np.array([0, 1, 2]))
    assert all(np.all(np.isfinite(g)) for _, g in model.named_grads())


def test_grad_check_bottleneck_model():
    rng = np.random.default_rng(0)
    model = OrdinalNet(ModelConfig(streams=("scale1",), block_kind="bottleneck", blocks_per_stream=2))
    inputs = random_inputs(rng, 2, ("scale1",))
    err, n = grad_check(model, inputs, np.array([1, 2]), epsilon=1e-5)
    assert n >= 100 and err < 1e-3


# --- training ---------------------------------------------------------------

def _tiny_data(rng, n, streams):
    return ArrayData(random_inputs(rng, n, streams), rng.integers(0, 3, n))


def test_lr_zero_keeps_params_but_updates_bn():
    rng = np.random.default_rng(0)
    model = OrdinalNet(ModelConfig(streams=STREAM_PRESETS["patches"]))
    before = {k: v.copy() for k, v in model.state().items()}
    train(model, _tiny_data(rng, 4, model.config.streams), lr=0.0, iterations=2, batch_size=2)
    for name, arr in model.named_params():
        np.testing.assert_array_equal(arr, before[name])
    assert any(not np.array_equal(a, before[n]) for n, a in model.named_buffers())


def test_memorize_single_sample():
    rng = np.random.default_rng(0)
    model = OrdinalNet(ModelConfig(streams=STREAM_PRESETS["single"]))
    data = _tiny_data(rng, 1, model.config.streams)
    _, trace = train(model, data, lr=0.01, iterations=200, batch_size=1)
    assert trace.loss[-1] < 0.1


class _ZeroLossModel:
    def __init__(self):
        self.w = np.ones(4)

    def named_params(self):
        yield "w", self.w

    def named_grads(self):
        yield "w", np.zeros(4)


def test_weight_decay_shrinks_geometrically():
    m = _ZeroLossModel()
    for _ in range(10):
        sgd_step(m, 0.1, 0.5)
    np.testing.assert_allclose(m.w, (1 - 0.1 * 0.5) ** 10)


def test_small_lr_full_batch_descent():
    rng = np.random.default_rng(0)
    model = OrdinalNet(ModelConfig(streams=STREAM_PRESETS["single"]))
    data = _tiny_data(rng, 8, model.config.streams)
    inputs, labels = data.batch(np.arange(8))
    losses = []
    for _ in range(10):
        loss, _ = model.loss_and_grad(inputs, labels)
        losses.append(loss)
        sgd_step(model, 1e-4, 0.0005)
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))


def test_train_deterministic_and_trace(tmp_path):
    rng = np.random.default_rng(0)
    data = _tiny_data(rng, 6, STREAM_PRESETS["patches"])
    runs = []
    for _ in range(2):
        model = OrdinalNet(ModelConfig(streams=STREAM_PRESETS["patches"]))
        _, trace = train(model, data, iterations=5, batch_size=4, seed=9)
        runs.append((model.state(), trace))
    assert all(np.array_equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])
    assert runs[0][1].loss == runs[1][1].loss and len(runs[0][1].loss) == 5
    runs[0][1].write_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,accuracy" and len(lines) == 6


def test_lr_schedule():
    assert step_lr(0.01, 74, 100) == 0.01
    assert step_lr(0.01, 75, 100) == pytest.approx(0.001)


def test_non_finite_loss():
    rng = np.random.default_rng(0)
    model = OrdinalNet(ModelConfig(streams=STREAM_PRESETS["patches"]))
    data = _tiny_data(rng, 4, model.config.streams)
    data.inputs["patch1"][0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        train(model, data, iterations=3, batch_size=4)
    with pytest.raises(ValueError):
        train(model, ArrayData({}, []), iterations=1)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    model = OrdinalNet(ModelConfig(streams=STREAM_PRESETS["box"], seed=4))
    train(model, _tiny_data(rng, 4, model.config.streams), iterations=2, batch_size=2)
    save_checkpoint(tmp_path / "m.ckpt", model)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    for (n, a), (_, b) in zip(model.state().items(), back.state().items()):
        assert a.tobytes() == b.tobytes(), n
    save_checkpoint(tmp_path / "m2.ckpt", back)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "m.ckpt", ModelConfig())
    (tmp_path / "bad.ckpt").write_bytes(b"garbage!" + bytes(20))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "bad.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-4])
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "cut.ckpt")
