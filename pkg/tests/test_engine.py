import dataclasses
import logging
import math

import numpy as np
import pytest

from feddw import engine, nn
from feddw.config import RunConfig, materialize, parse_config
from feddw.consistency import SLMatrix, aggregate_sl, local_sl_matrix, reg_grad, reg_loss_bound
from feddw.data import Dataset
from feddw.errors import InvalidInputError, RoundFailureError
from feddw.numerics import Rng


def blob_config(**overrides) -> RunConfig:
    base = dict(
        clients=4,
        rounds=3,
        local_epochs=2,
        batch_size=32,
        participation=1.0,
        beta=0.5,
        seed=3,
        dataset={"kind": "blobs", "classes": 4, "per_class": 40, "dim": 6,
                 "spread": 0.25, "test_per_class": 20},
        model={"hidden": 16, "embed": 8},
    )
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return parse_config(overrides=base)


class TestSampleParticipants:
    def test_full_participation_selects_everyone(self):
        for t in range(5):
            ids = engine.sample_participants(7, 1.0, Rng(0).child("p", t))
            assert ids == tuple(range(7))

    def test_half_participation_count(self):
        ids = engine.sample_participants(10, 0.5, Rng(1).child("p"))
        assert len(ids) == 5
        assert len(set(ids)) == 5

    def test_selection_frequencies_are_binomial(self):
        hits = np.zeros(10)
        for t in range(1000):
            for cid in engine.sample_participants(10, 0.5, Rng(2).child("p", t)):
                hits[cid] += 1
        assert np.all(np.abs(hits - 500) <= 60)

    def test_rejects_bad_rate(self):
        with pytest.raises(InvalidInputError):
            engine.sample_participants(5, 0.0, Rng(0))


def make_report(cid, params, count):
    return engine.ClientReport(
        client_id=cid, params=np.asarray(params, dtype=np.float64), sl=None,
        counts=np.array([count]), sample_count=count, cla_loss=0.0, reg_loss=0.0,
    )


class TestAggregateModels:
    def test_equal_counts_arithmetic_mean(self):
        merged = engine.aggregate_models(
            [make_report(0, [1.0, 3.0], 4), make_report(1, [3.0, 5.0], 4)]
        )
        assert np.allclose(merged, [2.0, 4.0], atol=1e-15)

    def test_single_client_identity(self):
        merged = engine.aggregate_models([make_report(0, [1.5, -2.0, 0.25], 9)])
        assert np.array_equal(merged, [1.5, -2.0, 0.25])

    def test_matches_weighted_sum_oracle(self):
        gen = np.random.default_rng(0)
        params = [gen.standard_normal(6) for _ in range(3)]
        counts = [1, 2, 7]
        merged = engine.aggregate_models(
            [make_report(i, p, c) for i, (p, c) in enumerate(zip(params, counts))]
        )
        for j in range(6):
            expected = sum(c * p[j] for p, c in zip(params, counts)) / 10
            assert merged[j] == pytest.approx(expected, abs=1e-12)

    def test_aggregate_stays_within_client_bounds(self):
        gen = np.random.default_rng(1)
        params = [gen.standard_normal(20) for _ in range(5)]
        counts = [int(c) for c in gen.integers(1, 50, size=5)]
        merged = engine.aggregate_models(
            [make_report(i, p, c) for i, (p, c) in enumerate(zip(params, counts))]
        )
        stacked = np.stack(params)
        eps = 1e-12
        assert np.all(merged >= stacked.min(axis=0) - eps)
        assert np.all(merged <= stacked.max(axis=0) + eps)

    def test_no_successful_reports_is_round_failure(self):
        failed = engine.ClientReport(0, None, None, np.array([1]), 1,
                                     float("nan"), float("nan"), failed=True)
        with pytest.raises(RoundFailureError):
            engine.aggregate_models([failed])


class TestClientTrain:
    def setup_method(self):
        self.config = blob_config(model={"classifier_bias": False})
        self.train, _ = materialize(self.config.dataset, self.config.seed)
        spec = self.config.model_spec(self.train.features.shape[1], self.train.class_count)
        self.model = nn.init_model(spec, Rng(7).child("init"))
        self.sl = SLMatrix.uniform(self.train.class_count)
        self.shard = (self.train.features[:50], self.train.labels[:50])

    def _train(self, strategy):
        return engine.client_train(
            self.model, self.sl, *self.shard, self.train.class_count,
            strategy, self.config, Rng(7).child("client", 1, 0),
        )

    def test_feddw_mu_zero_degenerates_to_fedavg(self):
        a = self._train(engine.FedAvg())
        b = self._train(engine.FedDW(engine.RegularizerConfig(mu=0.0)))
        assert np.array_equal(a.params, b.params)
        assert a.cla_loss == b.cla_loss
        assert a.reg_loss == b.reg_loss == 0.0

    def test_fedprox_zero_degenerates_to_fedavg(self):
        a = self._train(engine.FedAvg())
        b = self._train(engine.FedProx(prox_mu=0.0))
        assert np.array_equal(a.params, b.params)

    def test_fedprox_pulls_toward_global_model(self):
        free = self._train(engine.FedAvg())
        anchored = self._train(engine.FedProx(prox_mu=5.0))
        start = nn.flatten_params(self.model)
        assert np.linalg.norm(anchored.params - start) < np.linalg.norm(free.params - start)

    def test_single_full_batch_step_descends_total_loss(self):
        config = dataclasses.replace(self.config, local_epochs=1, batch_size=50,
                                     learning_rate=1e-3)
        strategy = engine.FedDW(engine.RegularizerConfig(mu=0.5))
        mu = 0.5

        def total_loss(model):
            loss, _ = nn.evaluate(model, *self.shard)
            from feddw.consistency import reg_loss
            return loss + mu * reg_loss(self.sl, model.classifier_weights)

        before = total_loss(self.model)
        report = engine.client_train(
            self.model, self.sl, *self.shard, self.train.class_count,
            strategy, config, Rng(7).child("client", 1, 0),
        )
        after_model = nn.clone_model(self.model)
        nn.set_flat_params(after_model, report.params)
        assert total_loss(after_model) < before

    def test_feddw_report_carries_sl_and_bounded_reg(self):
        report = self._train(engine.FedDW(engine.RegularizerConfig(mu=0.1)))
        assert report.sl is not None
        assert 0.0 <= report.reg_loss < reg_loss_bound(self.train.class_count)
        assert report.sample_count == report.counts.sum() == 50

    def test_feddw_requires_bias_free_classifier(self):
        config = blob_config(model={"classifier_bias": True})
        spec = config.model_spec(self.train.features.shape[1], self.train.class_count)
        biased = nn.init_model(spec, Rng(7).child("init"))
        with pytest.raises(InvalidInputError):
            engine.client_train(
                biased, self.sl, *self.shard, self.train.class_count,
                engine.FedDW(engine.RegularizerConfig(mu=0.1)), config,
                Rng(7).child("client", 1, 0),
            )

    def test_linearized_mode_trains_and_differs_from_exact(self):
        exact = self._train(engine.FedDW(engine.RegularizerConfig(mu=0.5, mode="exact")))
        linear = self._train(engine.FedDW(engine.RegularizerConfig(
            mu=0.5, mode="linearized", linearization_refresh=2)))
        assert not linear.failed
        assert not np.array_equal(exact.params, linear.params)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_produces_failed_report(self):
        # infinities mix signs under the dense sums and yield a NaN loss
        huge = (np.full_like(self.shard[0], np.inf), self.shard[1])
        report = engine.client_train(
            self.model, self.sl, *huge, self.train.class_count,
            engine.FedAvg(), self.config, Rng(7).child("client", 1, 0),
        )
        assert report.failed
        assert report.params is None


class TestCommunicationMeter:
    def test_feddw_upload_exceeds_fedavg_by_sl_and_counts(self):
        params, classes = 1234, 10
        fedavg = engine.upload_bytes_per_client(params, classes, engine.FedAvg())
        feddw = engine.upload_bytes_per_client(params, classes, engine.FedDW())
        assert feddw - fedavg == 8 * (classes * classes + classes)

    def test_download_extra_is_global_sl(self):
        params, classes = 99, 7
        fedavg = engine.download_bytes_per_client(params, classes, engine.FedAvg())
        feddw = engine.download_bytes_per_client(params, classes, engine.FedDW())
        assert feddw - fedavg == 8 * classes * classes

    def test_local_only_never_communicates(self):
        assert engine.upload_bytes_per_client(10, 3, engine.LocalOnly()) == 0
        assert engine.download_bytes_per_client(10, 3, engine.LocalOnly()) == 0


class TestRun:
    def test_zero_rounds_returns_initial_model(self):
        config = blob_config(rounds=0)
        train, test = materialize(config.dataset, config.seed)
        result = engine.run(config, train, test)
        assert result.records == []
        spec = config.model_spec(train.features.shape[1], train.class_count)
        fresh = nn.init_model(spec, Rng(config.seed).child("init"))
        assert np.array_equal(nn.flatten_params(result.model), nn.flatten_params(fresh))

    def test_mu_zero_run_matches_fedavg_records(self):
        shared = dict(model={"classifier_bias": False})
        config_a = blob_config(strategy="fedavg", **shared)
        config_b = blob_config(strategy="feddw", mu=0.0, **shared)
        train, test = materialize(config_a.dataset, config_a.seed)
        rec_a = engine.run(config_a, train, test).records
        rec_b = engine.run(config_b, train, test).records
        for a, b in zip(rec_a, rec_b):
            assert a.accuracy == b.accuracy
            assert a.test_loss == b.test_loss
            assert a.cla_loss == b.cla_loss
            assert a.reg_loss == b.reg_loss == 0.0
            assert a.sl_cr_distance == b.sl_cr_distance

    def test_worker_count_does_not_change_records(self):
        config = blob_config(strategy="feddw", mu=0.1, participation=0.5)
        train, test = materialize(config.dataset, config.seed)
        serial = engine.run(config, train, test).records
        threaded = engine.run(dataclasses.replace(config, workers=8), train, test).records
        for a, b in zip(serial, threaded):
            assert a.accuracy == b.accuracy
            assert a.test_loss == b.test_loss
            assert a.cla_loss == b.cla_loss
            assert a.reg_loss == b.reg_loss
            assert a.sl_cr_distance == b.sl_cr_distance

    def test_single_client_feddw_equals_centralized_training(self):
        config = blob_config(strategy="feddw", mu=0.3, clients=1, rounds=3,
                             model={"classifier_bias": False})
        train, test = materialize(config.dataset, config.seed)
        result = engine.run(config, train, test)

        # independent centralized mirror of the protocol: same rng tree,
        # fresh optimizer per round, self-referential SL aggregation
        root = Rng(config.seed)
        spec = config.model_spec(train.features.shape[1], train.class_count)
        model = nn.init_model(spec, root.child("init"))
        global_sl = SLMatrix.uniform(train.class_count)
        strategy = config.strategy
        for t in range(1, config.rounds + 1):
            gen = root.child("client", t, 0).generator
            state = nn.init_adam(model, config.learning_rate)
            for _ in range(config.local_epochs):
                perm = gen.permutation(len(train))
                for start in range(0, len(train), config.batch_size):
                    idx = perm[start : start + config.batch_size]
                    logits, cache = nn.forward(model, train.features[idx])
                    extra = strategy.reg.mu * reg_grad(global_sl, model.classifier_weights)
                    grads = nn.backward(model, cache, logits, train.labels[idx], extra)
                    nn.adam_step(model, state, grads)
            sl = local_sl_matrix(model, train.features, train.labels, train.class_count)
            counts = np.bincount(train.labels, minlength=train.class_count)
            global_sl = aggregate_sl([(sl, counts)], global_sl)
        _, central_accuracy = nn.evaluate(model, test.features, test.labels)

        assert result.records[-1].accuracy == central_accuracy
        assert np.array_equal(nn.flatten_params(result.model), nn.flatten_params(model))

    def test_local_only_reports_mean_client_accuracy(self):
        config = blob_config(strategy="local", clients=3, rounds=2)
        train, test = materialize(config.dataset, config.seed)
        result = engine.run(config, train, test)
        record = result.records[-1]
        assert math.isnan(record.sl_cr_distance)
        assert 0.0 <= record.accuracy <= 1.0
        assert result.global_sl is None

        # mirror: train each client independently across both rounds
        root = Rng(config.seed)
        partition = engine.build_partition(train, config, root.child("partition"))
        spec = config.model_spec(train.features.shape[1], train.class_count)
        init = nn.init_model(spec, root.child("init"))
        accuracies = []
        for cid in range(config.clients):
            model = nn.clone_model(init)
            x, y = train.features[partition.shards[cid]], train.labels[partition.shards[cid]]
            for t in range(1, config.rounds + 1):
                report = engine.client_train(
                    model, SLMatrix.uniform(train.class_count), x, y,
                    train.class_count, engine.LocalOnly(), config,
                    root.child("client", t, cid), client_id=cid,
                )
                nn.set_flat_params(model, report.params)
            accuracies.append(nn.evaluate(model, test.features, test.labels)[1])
        assert record.accuracy == pytest.approx(float(np.mean(accuracies)), abs=1e-12)

    def test_training_loss_descends_on_iid_blobs(self):
        config = blob_config(strategy="fedavg", rounds=4, beta=1e6)
        train, test = materialize(config.dataset, config.seed)
        records = engine.run(config, train, test).records
        assert records[-1].cla_loss < records[0].cla_loss

    def test_feddw_round_reg_telemetry_is_bounded(self):
        config = blob_config(strategy="feddw", mu=10.0)
        train, test = materialize(config.dataset, config.seed)
        records = engine.run(config, train, test).records
        bound = reg_loss_bound(train.class_count)
        for record in records:
            assert 0.0 <= record.reg_loss < bound

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverged_client_is_excluded_with_warning(self, caplog):
        config = blob_config(strategy="fedavg", clients=2, rounds=1, participation=1.0)
        train, test = materialize(config.dataset, config.seed)
        # poison one client's shard so its forward pass overflows
        features = train.features.copy()
        part = engine.build_partition(train, config, Rng(config.seed).child("partition"))
        features[part.shards[1]] = np.inf
        poisoned = Dataset(features, train.labels, train.class_count)
        with caplog.at_level(logging.WARNING, logger="feddw.engine"):
            result = engine.run(config, poisoned, test)
        assert len(result.records) == 1
        assert any("diverged" in message for message in caplog.messages)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_all_clients_diverged_raises_round_failure(self):
        config = blob_config(strategy="fedavg", clients=2, rounds=2)
        train, test = materialize(config.dataset, config.seed)
        poisoned = Dataset(np.full_like(train.features, np.inf), train.labels, train.class_count)
        with pytest.raises(RoundFailureError) as excinfo:
            engine.run(config, poisoned, test)
        assert excinfo.value.records == []
