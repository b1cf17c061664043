import math

import numpy as np
import pytest

from feddw import nn
from feddw.data import make_blobs
from feddw.errors import InvalidInputError, TrainingDivergedError
from feddw.numerics import Rng, finite_diff_grad


def tiny_model(gen, in_dim=4, hidden=6, embed=5, classes=3, classifier_bias=True):
    def dense(i, o, bias=True):
        w = gen.standard_normal((o, i)) * 0.6
        b = gen.standard_normal(o) * 0.3 if bias else None
        return nn.Dense(w, b)

    model = nn.Model(
        feature_extractor=[dense(in_dim, hidden), nn.ReLU()],
        mapping_layer=[dense(hidden, embed), nn.ReLU()],
        classification_layer=dense(embed, classes, classifier_bias),
        class_count=classes,
    )
    model.validate()
    return model


def naive_forward(model, batch):
    """Independent per-neuron loop implementation of the forward pass."""
    out = []
    for row in batch:
        x = list(row)
        for layer in model.layers():
            if isinstance(layer, nn.Dense):
                nxt = []
                for o in range(layer.out_dim):
                    acc = 0.0
                    for i in range(layer.in_dim):
                        acc += layer.weights[o, i] * x[i]
                    if layer.bias is not None:
                        acc += layer.bias[o]
                    nxt.append(acc)
                x = nxt
            else:
                x = [v if v > 0 else 0.0 for v in x]
        out.append(x)
    return np.array(out)


class TestForward:
    def test_zero_model_gives_zero_logits(self):
        model = tiny_model(np.random.default_rng(0))
        for p in nn.param_arrays(model):
            p[...] = 0.0
        logits, _ = nn.forward(model, np.random.default_rng(1).standard_normal((5, 4)))
        assert np.array_equal(logits, np.zeros((5, 3)))

    def test_identity_dense(self):
        clf = nn.Dense(np.eye(2), None)
        model = nn.Model([], [], clf, 2)
        logits, _ = nn.forward(model, np.array([[3.0, -1.0]]))
        assert np.array_equal(logits, [[3.0, -1.0]])

    def test_matches_naive_per_neuron_oracle(self):
        gen = np.random.default_rng(2)
        model = tiny_model(gen)
        batch = gen.standard_normal((6, 4))
        logits, _ = nn.forward(model, batch)
        assert np.max(np.abs(logits - naive_forward(model, batch))) < 1e-12

    def test_shape_mismatch(self):
        model = tiny_model(np.random.default_rng(3))
        with pytest.raises(InvalidInputError):
            nn.forward(model, np.zeros((2, 7)))

    def test_no_side_effects(self):
        model = tiny_model(np.random.default_rng(4))
        before = nn.flatten_params(model)
        nn.forward(model, np.random.default_rng(5).standard_normal((3, 4)))
        assert np.array_equal(before, nn.flatten_params(model))


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = np.zeros((7, 10))
        labels = np.arange(7) % 10
        assert nn.cross_entropy_loss(logits, labels) == pytest.approx(math.log(10), abs=1e-12)

    def test_saturation_at_large_margin(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 20.0
        assert nn.cross_entropy_loss(logits, np.array([2])) < 1e-6

    def test_matches_per_sample_oracle(self):
        gen = np.random.default_rng(6)
        logits = gen.standard_normal((8, 5)) * 3
        labels = gen.integers(0, 5, size=8)
        total = 0.0
        for i in range(8):
            exps = np.exp(logits[i] - logits[i].max())
            total += -math.log(exps[labels[i]] / exps.sum())
        assert nn.cross_entropy_loss(logits, labels) == pytest.approx(total / 8, abs=1e-10)

    def test_shift_invariance(self):
        gen = np.random.default_rng(7)
        logits = gen.standard_normal((5, 4))
        labels = gen.integers(0, 4, size=5)
        base = nn.cross_entropy_loss(logits, labels)
        for shift in (-5.0, 1e2):
            shifted = nn.cross_entropy_loss(logits + shift, labels)
            assert shifted == pytest.approx(base, abs=1e-10)

    def test_rejects_out_of_range_label(self):
        with pytest.raises(InvalidInputError):
            nn.cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))


class TestBackward:
    def test_matches_finite_differences(self):
        gen = np.random.default_rng(8)
        model = tiny_model(gen)
        batch = gen.standard_normal((4, 4))
        labels = gen.integers(0, 3, size=4)
        logits, cache = nn.forward(model, batch)
        flat_grad = np.concatenate([g.ravel() for g in nn.backward(model, cache, logits, labels)])

        def loss_of(flat):
            clone = nn.clone_model(model)
            nn.set_flat_params(clone, flat.ravel())
            lg, _ = nn.forward(clone, batch)
            return nn.cross_entropy_loss(lg, labels)

        fd = finite_diff_grad(loss_of, nn.flatten_params(model).reshape(1, -1), 1e-5).ravel()
        rel = np.max(np.abs(flat_grad - fd)) / max(np.max(np.abs(fd)), 1e-12)
        assert rel < 1e-6

    def test_relu_dead_zone_zeroes_upstream_gradient(self):
        gen = np.random.default_rng(9)
        model = tiny_model(gen, in_dim=3, hidden=4, embed=3, classes=2)
        first = model.feature_extractor[0]
        first.bias[...] = -100.0  # every hidden pre-activation negative
        batch = gen.standard_normal((5, 3))
        labels = gen.integers(0, 2, size=5)
        logits, cache = nn.forward(model, batch)
        grads = nn.backward(model, cache, logits, labels)
        assert np.array_equal(grads[0], np.zeros_like(first.weights))

    def test_extra_classifier_gradient_is_additive(self):
        gen = np.random.default_rng(10)
        model = tiny_model(gen)
        batch = gen.standard_normal((4, 4))
        labels = gen.integers(0, 3, size=4)
        logits, cache = nn.forward(model, batch)
        extra = gen.standard_normal(model.classifier_weights.shape)
        plain = nn.backward(model, cache, logits, labels)
        injected = nn.backward(model, cache, logits, labels, extra)
        clf_w_index = len(plain) - 2  # classifier weights, then bias, end the list
        for i, (a, b) in enumerate(zip(plain, injected)):
            if i == clf_w_index:
                assert np.array_equal(b - a, extra)
            else:
                assert np.array_equal(a, b)

    def test_rejects_wrong_extra_shape(self):
        gen = np.random.default_rng(11)
        model = tiny_model(gen)
        batch = gen.standard_normal((2, 4))
        labels = np.array([0, 1])
        logits, cache = nn.forward(model, batch)
        with pytest.raises(InvalidInputError):
            nn.backward(model, cache, logits, labels, np.zeros((1, 1)))


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        model = tiny_model(np.random.default_rng(12))
        state = nn.init_adam(model, 0.001)
        before = nn.flatten_params(model)
        nn.adam_step(model, state, [np.zeros_like(p) for p in nn.param_arrays(model)])
        assert np.array_equal(before, nn.flatten_params(model))
        assert state.step == 1

    def test_first_step_is_signed_learning_rate(self):
        # closed form: with zero state, update = -lr * g / (|g| + eps')
        model = tiny_model(np.random.default_rng(13))
        state = nn.init_adam(model, 0.001)
        gen = np.random.default_rng(14)
        grads = [np.sign(gen.standard_normal(p.shape)) * (0.5 + gen.random(p.shape))
                 for p in nn.param_arrays(model)]
        before = [p.copy() for p in nn.param_arrays(model)]
        nn.adam_step(model, state, grads)
        for b, p, g in zip(before, nn.param_arrays(model), grads):
            update = p - b
            assert np.all(np.abs(update) <= 0.001 * (1.0 + 1e-6))
            assert np.all(np.sign(update) == -np.sign(g))
            assert np.min(np.abs(update)) > 0.001 * 0.99

    def test_training_is_bit_deterministic(self):
        def train(seed):
            rng = Rng(seed)
            model = nn.init_model(nn.ModelSpec(4, 3, hidden=8, embed=6), rng.child("init"))
            state = nn.init_adam(model, 0.001)
            gen = rng.child("data").generator
            for _ in range(100):
                batch = gen.standard_normal((8, 4))
                labels = gen.integers(0, 3, size=8)
                logits, cache = nn.forward(model, batch)
                nn.adam_step(model, state, nn.backward(model, cache, logits, labels))
            return nn.flatten_params(model)

        assert np.array_equal(train(21), train(21))

    def test_non_finite_gradient_raises(self):
        model = tiny_model(np.random.default_rng(15))
        state = nn.init_adam(model, 0.001)
        grads = [np.zeros_like(p) for p in nn.param_arrays(model)]
        grads[0][0, 0] = np.nan
        with pytest.raises(TrainingDivergedError):
            nn.adam_step(model, state, grads)


class TestSerialization:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = nn.init_model(nn.ModelSpec(7, 4, hidden=5, embed=6, classifier_bias=False),
                              Rng(33).child("init"))
        nn.save_model(model, tmp_path, "ckpt")
        loaded = nn.load_model(tmp_path, "ckpt")
        assert np.array_equal(nn.flatten_params(model), nn.flatten_params(loaded))
        assert loaded.classification_layer.bias is None
        assert loaded.class_count == 4

    def test_truncated_params_detected(self, tmp_path):
        model = nn.init_model(nn.ModelSpec(3, 2, hidden=4, embed=3), Rng(1).child("init"))
        nn.save_model(model, tmp_path)
        blob = (tmp_path / "model.params").read_bytes()
        (tmp_path / "model.params").write_bytes(blob[:-8])
        with pytest.raises(Exception):
            nn.load_model(tmp_path)


class TestTrainingSanity:
    def test_separable_blobs_reach_full_accuracy(self):
        rng = Rng(55)
        dataset = make_blobs(rng.child("blob"), classes=2, per_class=60, dim=2, spread=0.2)
        model = nn.init_model(nn.ModelSpec(2, 2, hidden=16, embed=8), rng.child("init"))
        state = nn.init_adam(model, 0.001)
        gen = rng.child("batches").generator
        for _ in range(200):
            idx = gen.permutation(len(dataset))[:32]
            batch, labels = dataset.features[idx], dataset.labels[idx]
            logits, cache = nn.forward(model, batch)
            nn.adam_step(model, state, nn.backward(model, cache, logits, labels))
        _, accuracy = nn.evaluate(model, dataset.features, dataset.labels)
        assert accuracy == 1.0
