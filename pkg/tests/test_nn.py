import numpy as np
import pytest

from qpdn import nn


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def layer_grad_errors(layer, x, rng, train=True):
    """Relative error of analytic vs numeric gradients for a random linear loss."""
    out_shape = layer.forward(x, train=train).shape
    r = rng.normal(size=out_shape)

    def loss():
        return float(np.sum(layer.forward(x, train=train) * r))

    layer.forward(x, train=train)
    dx = layer.backward(r)
    errs = {"x": np.max(np.abs(numeric_grad(loss, x) - dx)) / max(np.max(np.abs(dx)), 1e-8)}
    for name, p in layer.parameters().items():
        layer.forward(x, train=train)
        layer.backward(r)
        analytic = layer.gradients()[name].copy()
        numeric = numeric_grad(loss, p)
        errs[name] = np.max(np.abs(numeric - analytic)) / max(np.max(np.abs(numeric)), 1e-8)
    return errs


class TestShapes:
    def test_conv_shape_16_to_8(self):
        rng = np.random.default_rng(0)
        layer = nn.Conv2D(3, 2, 128, stride=2, rng=rng)
        out = layer.forward(rng.normal(size=(4, 16, 16, 2)))
        assert out.shape == (4, 8, 8, 128)

    def test_tconv_shape_doubles(self):
        rng = np.random.default_rng(0)
        layer = nn.ConvTranspose2D(3, 32, 64, stride=2, rng=rng)
        out = layer.forward(rng.normal(size=(4, 2, 2, 32)))
        assert out.shape == (4, 4, 4, 64)

    def test_same_ceil_padding_examples(self):
        rng = np.random.default_rng(1)
        for k in range(1, 8):
            layer = nn.Conv2D(k, 1, 1, stride=2, rng=rng)
            assert layer.forward(np.zeros((1, 16, 16, 1))).shape == (1, 8, 8, 1)
            layer1 = nn.Conv2D(k, 1, 1, stride=1, rng=rng)
            assert layer1.forward(np.zeros((1, 5, 5, 1))).shape == (1, 5, 5, 1)

    def test_kernel_and_stride_validation(self):
        with pytest.raises(ValueError):
            nn.Conv2D(8, 1, 1)
        with pytest.raises(ValueError):
            nn.Conv2D(3, 1, 1, stride=3)

    def test_one_by_one_conv_is_channel_mix(self):
        rng = np.random.default_rng(2)
        layer = nn.Conv2D(1, 3, 5, stride=1, rng=rng)
        x = rng.normal(size=(2, 4, 4, 3))
        out = layer.forward(x)
        expected = x.reshape(-1, 3) @ layer.w.reshape(3, 5) + layer.b
        assert np.allclose(out, expected.reshape(2, 4, 4, 5), atol=1e-14)


class TestGradients:
    def test_conv(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            layer = nn.Conv2D(3, 2, 3, stride=2, rng=rng)
            errs = layer_grad_errors(layer, rng.normal(size=(2, 4, 4, 2)), rng)
            assert max(errs.values()) <= 1e-4

    def test_conv_stride1(self):
        rng = np.random.default_rng(4)
        layer = nn.Conv2D(2, 2, 3, stride=1, rng=rng)
        errs = layer_grad_errors(layer, rng.normal(size=(2, 4, 4, 2)), rng)
        assert max(errs.values()) <= 1e-4

    def test_tconv(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            layer = nn.ConvTranspose2D(3, 3, 2, stride=2, rng=rng)
            errs = layer_grad_errors(layer, rng.normal(size=(2, 2, 2, 3)), rng)
            assert max(errs.values()) <= 1e-4

    def test_batchnorm(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            layer = nn.BatchNorm(3)
            layer.gamma[:] = rng.uniform(0.5, 1.5, size=3)
            layer.beta[:] = rng.normal(size=3)
            errs = layer_grad_errors(layer, rng.normal(size=(4, 2, 2, 3)), rng)
            assert max(errs.values()) <= 1e-4

    def test_dense(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            layer = nn.Dense(5, 4, rng=rng)
            errs = layer_grad_errors(layer, rng.normal(size=(3, 5)), rng)
            assert max(errs.values()) <= 1e-4

    def test_mse_gradient(self):
        rng = np.random.default_rng(8)
        pred = rng.normal(size=(3, 4))
        target = rng.normal(size=(3, 4))
        _, grad = nn.mse_loss(pred, target)

        def loss():
            return nn.mse_loss(pred, target)[0]

        numeric = numeric_grad(loss, pred)
        assert np.max(np.abs(numeric - grad)) / np.max(np.abs(numeric)) <= 1e-4

    def test_sigmoid_relu_through_model(self):
        rng = np.random.default_rng(9)
        model = nn.Model([nn.Dense(4, 6, rng=rng), nn.ReLU(), nn.Dense(6, 2, rng=rng), nn.Sigmoid()])
        x = rng.normal(size=(3, 4))
        target = rng.uniform(0.1, 0.9, size=(3, 2))

        def loss():
            return nn.mse_loss(model.forward(x, train=True), target)[0]

        value, dpred = nn.mse_loss(model.forward(x, train=True), target)
        model.backward(dpred)
        grads = model.gradients()
        for name, p in model.parameters().items():
            numeric = numeric_grad(loss, p)
            rel = np.max(np.abs(numeric - grads[name])) / max(np.max(np.abs(numeric)), 1e-8)
            assert rel <= 1e-4


class TestAdjoint:
    def test_conv_tconv_adjoint_identity(self):
        rng = np.random.default_rng(10)
        for k in (1, 2, 3, 5, 7):
            for stride in (1, 2):
                w = rng.normal(size=(k, k, 2, 4))
                x = rng.normal(size=(3, 8, 8, 2))
                y = rng.normal(size=nn.conv2d(x, w, stride=stride).shape)
                lhs = np.sum(nn.conv2d(x, w, stride=stride) * y)
                rhs = np.sum(x * nn.conv_transpose2d(y, w, stride=stride))
                assert abs(lhs - rhs) <= 1e-10

    def test_pointwise_transpose(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(1, 1, 3, 2))
        y = rng.normal(size=(2, 4, 4, 2))
        out = nn.conv_transpose2d(y, w, stride=1)
        expected = (y.reshape(-1, 2) @ w.reshape(3, 2).T).reshape(2, 4, 4, 3)
        assert np.allclose(out, expected, atol=1e-13)


class TestBatchNormSemantics:
    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(12)
        layer = nn.BatchNorm(4)
        x = rng.normal(loc=3.0, scale=2.0, size=(8, 4, 4, 4))
        out = layer.forward(x, train=True)
        assert np.max(np.abs(out.mean(axis=(0, 1, 2)))) <= 1e-6
        assert np.max(np.abs(out.var(axis=(0, 1, 2)) - 1)) <= 1e-4  # eps-limited

    def test_infer_with_matched_running_stats(self):
        rng = np.random.default_rng(13)
        layer = nn.BatchNorm(3)
        x = rng.normal(size=(6, 2, 2, 3))
        train_out = layer.forward(x, train=True)
        layer.running_mean = x.mean(axis=(0, 1, 2))
        layer.running_var = x.var(axis=(0, 1, 2))
        infer_out = layer.forward(x, train=False)
        assert np.max(np.abs(train_out - infer_out)) <= 1e-6

    def test_batch_of_one_rejected(self):
        layer = nn.BatchNorm(2)
        with pytest.raises(ValueError):
            layer.forward(np.zeros((1, 4, 4, 2)), train=True)

    def test_running_stats_updated(self):
        layer = nn.BatchNorm(2, momentum=0.9)
        x = np.ones((4, 2, 2, 2)) * 5.0
        layer.forward(x, train=True)
        assert np.allclose(layer.running_mean, 0.9 * 0 + 0.1 * 5.0)


class TestTraining:
    def _tiny_model(self, seed):
        rng = np.random.default_rng(seed)
        return nn.Model(
            [
                nn.Conv2D(3, 2, 8, stride=2, rng=rng),
                nn.ReLU(),
                nn.BatchNorm(8),
                nn.ConvTranspose2D(3, 8, 2, stride=2, rng=rng),
                nn.Sigmoid(),
            ]
        )

    def test_perfect_fit_fixed_point(self):
        rng = np.random.default_rng(14)
        model = self._tiny_model(1)
        x = rng.normal(size=(4, 8, 8, 2))
        target = model.forward(x, train=True)
        before = {k: v.copy() for k, v in model.parameters().items()}
        optimizer = nn.Adam(model.parameters())
        loss = nn.train_step(model, x, target, optimizer)
        assert loss == 0.0
        for k, v in model.parameters().items():
            assert np.array_equal(before[k], v)
        assert max(np.max(np.abs(g)) for g in model.gradients().values()) == 0.0

    def test_single_sample_overfit(self):
        rng = np.random.default_rng(15)
        model = self._tiny_model(2)
        x = rng.normal(size=(2, 8, 8, 2))  # two copies: batchnorm needs batch >= 2
        x[1] = x[0]
        target = rng.uniform(0.2, 0.8, size=(2, 8, 8, 2))
        target[1] = target[0]
        optimizer = nn.Adam(model.parameters(), lr=1e-2)
        losses = [nn.train_step(model, x, target, optimizer) for _ in range(500)]
        assert losses[-1] < 1e-4

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(0)
            model = self._tiny_model(3)
            optimizer = nn.Adam(model.parameters())
            x = rng.normal(size=(4, 8, 8, 2))
            y = rng.uniform(0.2, 0.8, size=(4, 8, 8, 2))
            for _ in range(10):
                nn.train_step(model, x, y, optimizer)
            return model.state_arrays()

        a = run()
        b = run()
        assert set(a) == set(b)
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_divergence_aborts(self):
        model = self._tiny_model(4)
        x = np.full((2, 8, 8, 2), 1e300)
        optimizer = nn.Adam(model.parameters())
        with pytest.raises(nn.TrainingDivergenceError):
            nn.train_step(model, x, x, optimizer)

    def test_minibatch_iterator_covers_everything(self):
        rng = np.random.default_rng(16)
        seen = np.concatenate(list(nn.iterate_minibatches(103, 16, rng)))
        assert sorted(seen.tolist()) == list(range(103))


class TestSerialization:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(17)
        model = nn.Model(
            [
                nn.Conv2D(2, 2, 4, stride=2, rng=rng),
                nn.ReLU(),
                nn.BatchNorm(4),
                nn.ConvTranspose2D(2, 4, 2, stride=2, rng=rng),
                nn.Sigmoid(),
                ]
        )
        # perturb running stats so they are non-trivial
        model.forward(rng.normal(size=(4, 8, 8, 2)), train=True)
        path = tmp_path / "model.json"
        nn.save_model(model, path, meta={"note": "test"})
        loaded, meta = nn.load_model(path)
        assert meta == {"note": "test"}
        orig = model.state_arrays()
        back = loaded.state_arrays()
        assert set(orig) == set(back)
        for k in orig:
            assert np.array_equal(orig[k], back[k])
        x = rng.normal(size=(2, 8, 8, 2))
        assert np.array_equal(model.forward(x), loaded.forward(x))

    def test_rejects_unknown_schema(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"schema_version": 99}')
        with pytest.raises(ValueError):
            nn.load_model(path)
