"""Autodiff engine: gradient checks per operation, optimizer, checkpoints."""

import numpy as np
import pytest

from zepad.nn.layers import BatchNorm2d, Conv2d, Linear, ResidualBlock
from zepad.nn.models import ClassifierHead, ConvEncoder, TinyEncoder, build_encoder
from zepad.nn.optim import Adam
from zepad.nn.serialize import load_checkpoint, save_checkpoint, weights_hash
from zepad.nn.tensor import (
    Tensor,
    clip,
    concat,
    l2_normalize_rows,
    no_grad,
    relu,
    softmax,
    softmax_cross_entropy,
    tmax,
    tmean,
    transpose,
    tsum,
)


def central_diff(f, param, idx, h=1e-5):
    flat = param.data.reshape(-1)
    orig = flat[idx]
    flat[idx] = orig + h
    with no_grad():
        hi = float(f().data)
    flat[idx] = orig - h
    with no_grad():
        lo = float(f().data)
    flat[idx] = orig
    return (hi - lo) / (2 * h)


def check_grads(f, params, n_probe=6, tol=1e-4):
    loss = f()
    loss.backward()
    for p in params:
        assert p.grad is not None, "missing gradient"
        flat_grad = p.grad.reshape(-1)
        size = p.data.size
        for idx in range(0, size, max(1, size // n_probe)):
            fd = central_diff(f, p, idx)
            an = flat_grad[idx]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            assert err < tol, f"grad mismatch at {idx}: analytic {an}, fd {fd}"


class TestOpGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_conv2d(self):
        conv = Conv2d(3, 4, stride=1, padding=1, rng=self.rng, dtype=np.float64)
        x = Tensor(self.rng.random((2, 5, 5, 3)), requires_grad=True)
        check_grads(lambda: tsum(conv(x) * conv(x)), [conv.w, conv.b, x])

    def test_conv2d_strided(self):
        conv = Conv2d(2, 3, stride=2, padding=1, rng=self.rng, dtype=np.float64)
        x = Tensor(self.rng.random((2, 6, 6, 2)), requires_grad=True)
        check_grads(lambda: tsum(conv(x) * conv(x)), [conv.w, x])

    def test_batch_norm(self):
        bn = BatchNorm2d(3, dtype=np.float64)
        x = Tensor(self.rng.random((4, 3, 3, 3)), requires_grad=True)
        # elementwise weights keep every parameter off stationary points
        w = Tensor(self.rng.standard_normal((4, 3, 3, 3)))
        check_grads(lambda: tsum(bn(x) * bn(x) * 0.5 + bn(x) * w), [bn.gamma, bn.beta, x])

    def test_linear_relu_chain(self):
        lin = Linear(4, 3, rng=self.rng, dtype=np.float64)
        x = Tensor(self.rng.random((5, 4)), requires_grad=True)
        check_grads(lambda: tsum(relu(lin(x)) * relu(lin(x))), [lin.w, lin.b, x])

    def test_softmax_cross_entropy(self):
        lin = Linear(4, 5, rng=self.rng, dtype=np.float64)
        x = Tensor(self.rng.random((6, 4)))
        y = self.rng.integers(0, 5, 6)
        check_grads(lambda: softmax_cross_entropy(lin(x), y), [lin.w, lin.b])

    def test_l2_normalize(self):
        x = Tensor(self.rng.standard_normal((4, 6)), requires_grad=True)
        check_grads(lambda: tsum(l2_normalize_rows(x) * Tensor(np.arange(24.0).reshape(4, 6))), [x])

    def test_max_and_clip(self):
        x = Tensor(self.rng.standard_normal((5, 7)), requires_grad=True)
        weights = Tensor(self.rng.random(5))

        def f():
            m = tmax(clip(x, -0.8, 0.8), axis=1)
            return tsum(m * weights)

        check_grads(f, [x])

    def test_concat_transpose_mean(self):
        a = Tensor(self.rng.random((3, 4)), requires_grad=True)
        b = Tensor(self.rng.random((2, 4)), requires_grad=True)

        def f():
            c = concat([a, b], axis=0)
            return tmean(transpose(c) * transpose(c))

        check_grads(f, [a, b])

    def test_residual_block(self):
        block = ResidualBlock(3, rng=self.rng, dtype=np.float64)
        x = Tensor(self.rng.random((2, 4, 4, 3)), requires_grad=True)
        params = [block.conv1.w, block.bn1.gamma, block.conv2.w, x]
        check_grads(lambda: tsum(block(x) * block(x)), params, n_probe=4)

    def test_full_encoder_probs(self):
        enc = TinyEncoder(channels=3, feature_dim=4, rng=self.rng, dtype=np.float64)
        head = ClassifierHead(4, 3, hidden_sizes=(5, 4), rng=self.rng, dtype=np.float64)
        x = Tensor(self.rng.random((4, 3, 6, 6)))
        y = self.rng.integers(0, 3, 4)
        params = [enc.conv.w, enc.project.w, head.net.steps[0].w, head.net.steps[4].b]
        check_grads(lambda: softmax_cross_entropy(head(enc(x)), y), params, n_probe=4)


class TestModes:
    def test_eval_mode_uses_running_stats(self):
        rng = np.random.default_rng(0)
        bn = BatchNorm2d(2)
        x = Tensor(rng.random((8, 3, 3, 2)).astype(np.float32))
        bn.train()
        bn(x)
        bn.eval()
        y1 = bn(x).data
        y2 = bn(Tensor(x.data * 1.0)).data
        np.testing.assert_array_equal(y1, y2)

    def test_no_grad_blocks_graph(self):
        lin = Linear(3, 2, rng=np.random.default_rng(0))
        x = Tensor(np.ones((2, 3), dtype=np.float32))
        with no_grad():
            out = lin(x)
        assert out._parents == ()

    def test_float32_graph_stays_float32(self):
        lin = Linear(3, 2, rng=np.random.default_rng(0), dtype=np.float32)
        x = Tensor(np.ones((2, 3), dtype=np.float32))
        out = relu(lin(x)) * 2.0 + 1.0
        assert out.dtype == np.float32

    def test_softmax_rows_sum_to_one(self):
        z = np.random.default_rng(1).standard_normal((5, 7)) * 30
        p = softmax(z)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


class TestAdam:
    def test_quadratic_descent(self):
        p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(300):
            loss = tsum(p * p)
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert np.abs(p.data).max() < 1e-2


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        enc = ConvEncoder(channels=(4, 8, 8), feature_dim=16, rng=rng)
        save_checkpoint(tmp_path / "enc", enc, {"branch_role": "bmp", "seed": 7})
        loaded, manifest = load_checkpoint(tmp_path / "enc")
        assert manifest["branch_role"] == "bmp"
        assert manifest["architecture"] == enc.arch_id
        assert weights_hash(loaded) == weights_hash(enc)

    def test_build_encoder_ids(self):
        enc = build_encoder("smallres-4-8-8-f16")
        assert enc.feature_dim == 16
        tiny = build_encoder("tiny-3-f4")
        assert tiny.feature_dim == 4
        with pytest.raises(ValueError):
            build_encoder("unknown-arch")

    def test_head_has_exactly_three_weight_matrices(self, tmp_path):
        head = ClassifierHead(16, 10, rng=np.random.default_rng(0))
        save_checkpoint(tmp_path / "head", head)
        with np.load(tmp_path / "head.npz") as z:
            mats = [k for k in z.files if k.endswith(".w") and not k.startswith("buffer:")]
        assert len(mats) == 3

    def test_hash_changes_with_weights(self):
        enc = TinyEncoder(rng=np.random.default_rng(0))
        h1 = weights_hash(enc)
        enc.conv.w.data[0, 0, 0, 0] += 1.0
        assert weights_hash(enc) != h1
