import json

import numpy as np
import pytest

from vcfes.errors import ConfigError, DegenerateDataset
from vcfes.synthetic import SyntheticSpec, generate
from vcfes.training import (HistoryRecord, TrainConfig, TrainingSample, fit,
                            identity_prototypes, pk_batches)


def two_identities(seed=0, per_id=8, dim=12):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(2, dim)) * 3
    out = []
    for i in range(2):
        for j in range(per_id):
            emb = centers[i] + 0.3 * rng.normal(size=dim)
            out.append(TrainingSample(emb, i, rng.dirichlet(np.ones(3)), f"s{i}_{j}"))
    return out


def small_config(**kw):
    base = dict(epochs=10, batch_P=2, batch_K=4, embed_dim=6, learning_rate=0.01, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig().validate()
        assert (cfg.batch_P, cfg.batch_K, cfg.s_arc, cfg.m_arc) == (8, 4, 30.0, 0.3)

    def test_both_lambdas_zero(self):
        with pytest.raises(ConfigError, match="must not both be zero"):
            TrainConfig(lambda_id=0.0, lambda_triplet=0.0).validate()

    def test_both_lambdas_zero_before_any_step(self):
        seen = []
        with pytest.raises(ConfigError):
            fit(two_identities(), small_config(lambda_id=0, lambda_triplet=0),
                on_batch=seen.append)
        assert seen == []

    @pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(epochs=0),
                                     dict(optimizer="rmsprop"), dict(batch_K=1),
                                     dict(lambda_id=-1.0), dict(m_arc=2.0),
                                     dict(softmin_temperature=0.0)])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()

    def test_from_mapping(self):
        cfg = TrainConfig.from_mapping({"epochs": "4", "learning_rate": "0.5",
                                        "use_bias": "false"})
        assert cfg.epochs == 4 and cfg.learning_rate == 0.5 and cfg.use_bias is False
        with pytest.raises(ConfigError):
            TrainConfig.from_mapping({"epoch": 3})
        with pytest.raises(ConfigError):
            TrainConfig.from_mapping({"epochs": "many"})


class TestPkBatches:
    def test_structure(self):
        labels = np.repeat(np.arange(5), 6)
        batches = pk_batches(labels, 2, 4, np.random.default_rng(0))
        # five identities at P=2: the lone trailing identity joins the last batch
        assert [len(b) for b in batches] == [8, 12]
        for b in batches:
            counts = np.bincount(labels[b])
            assert set(counts[counts > 0]) == {4}
        flat = sorted(i for b in batches for i in b)
        assert len(flat) == len(set(flat))

    def test_small_identities_keep_all(self):
        labels = np.array([0, 0, 1, 1, 1])
        batches = pk_batches(labels, 2, 4, np.random.default_rng(1))
        assert sorted(batches[0]) == [0, 1, 2, 3, 4]

    def test_seeded(self):
        labels = np.repeat(np.arange(6), 5)
        a = pk_batches(labels, 3, 2, np.random.default_rng(9))
        b = pk_batches(labels, 3, 2, np.random.default_rng(9))
        assert a == b


class TestFit:
    def test_endpoint_improves(self):
        result = fit(two_identities(), small_config())
        totals = result.epoch_totals()
        assert len(totals) == 10
        assert totals[-1] < totals[0]

    @pytest.mark.parametrize("mode", ["arcface_ce", "softmin_distance"])
    def test_bit_deterministic(self, mode):
        a = fit(two_identities(), small_config(id_mode=mode))
        b = fit(two_identities(), small_config(id_mode=mode))
        assert np.array_equal(a.heads.weights, b.heads.weights)
        assert np.array_equal(a.heads.biases, b.heads.biases)
        assert np.array_equal(a.arcface.class_weights, b.arcface.class_weights)
        assert [r.to_json() for r in a.history] == [r.to_json() for r in b.history]

    def test_seed_changes_result(self):
        a = fit(two_identities(), small_config(seed=1))
        b = fit(two_identities(), small_config(seed=2))
        assert not np.array_equal(a.heads.weights, b.heads.weights)

    def test_history_length(self):
        data = generate(SyntheticSpec(num_identities=6, views_per_identity=6,
                                      backbone_dim=12, signature_dim=3)).split("train")
        cfg = small_config(epochs=3, batch_P=2, batch_K=2)
        seen = []
        result = fit(data, cfg, on_batch=seen.append)
        assert len(result.history) == 3 * 3 == len(seen)
        assert [(r.epoch, r.batch) for r in result.history][:4] == [(0, 0), (0, 1), (0, 2),
                                                                     (1, 0)]

    def test_sgd_runs(self):
        result = fit(two_identities(), small_config(optimizer="sgd", learning_rate=0.1))
        assert np.isfinite(result.epoch_totals()).all()

    def test_log_record_keys(self):
        rec = fit(two_identities(), small_config(epochs=1)).history[0]
        assert isinstance(rec, HistoryRecord)
        doc = json.loads(rec.to_json())
        assert set(doc) == {"epoch", "batch", "id_loss", "triplet_per_space", "total"}
        assert len(doc["triplet_per_space"]) == 4

    @pytest.mark.parametrize("data", [
        [],
        [TrainingSample(np.ones(3), 0, np.zeros(3), "a"),
         TrainingSample(np.ones(3), 0, np.zeros(3), "b")],
        [TrainingSample(np.ones(3), i, np.zeros(3), str(i)) for i in range(4)],
    ])
    def test_degenerate(self, data):
        with pytest.raises(DegenerateDataset):
            fit(data, small_config())


def test_prototypes_unit_and_weighted():
    from vcfes.heads import init_heads, project_batch
    rng = np.random.default_rng(0)
    heads, _ = init_heads(0, 5, 3, 2)
    x = rng.normal(size=(4, 5))
    labels = np.array([0, 0, 1, 1])
    ratios = np.array([[1.0, 0, 0], [0, 1.0, 0], [0.5, 0.5, 0], [0, 0, 0]])
    protos = identity_prototypes(heads, x, labels, ratios, 3)
    v = project_batch(x, heads)
    np.testing.assert_allclose(protos[0, 1], v[0, 1], atol=1e-12)
    np.testing.assert_allclose(protos[0, 2], v[1, 2], atol=1e-12)
    assert np.all(protos[1, 3] == 0) and np.all(protos[2] == 0)
    np.testing.assert_allclose(np.linalg.norm(protos[:2, :3], axis=-1), 1.0, atol=1e-12)
