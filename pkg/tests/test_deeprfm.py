import numpy as np
import pytest

from agop_collapse.collapse import collapse_metrics
from agop_collapse.data import encode_labels, gen_gaussian_classes
from agop_collapse.deeprfm import (
    DeepRfmConfig,
    layer_seed,
    layer_step,
    load_pipeline,
    predict,
    predict_scores,
    run,
    save_pipeline,
    transform,
)
from agop_collapse.features import FeatureMapSpec, apply_feature_map
from agop_collapse.kernels import KernelSpec, agop, krr_fit, krr_predict
from agop_collapse.linalg import column_normalize, psd_sqrt

SMALL = DeepRfmConfig(depth=4, feature_map=FeatureMapSpec(width=128))


@pytest.fixture(scope="module")
def ds():
    return gen_gaussian_classes(3, 10, 20, seed=0)


@pytest.fixture(scope="module")
def pipe(ds):
    return run(ds, SMALL)


class TestLayerStep:
    def test_shapes_and_gram_identity(self, ds):
        Y = encode_labels(ds, "pm-one")
        art = layer_step(ds.X, Y, ds.labels, SMALL, 1)
        assert art.X_next.shape == (128, ds.N)
        lhs = art.X_tilde.T @ art.X_tilde
        rhs = art.X_l.T @ art.agop.M @ art.X_l
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_linear_kernel_collapses(self):
        d = gen_gaussian_classes(3, 4, 20, noise=0.3, seed=1)
        Y = encode_labels(d, "zero-one")
        cfg = DeepRfmConfig(depth=1, kernel=KernelSpec("linear", 0.0), label_encoding="zero-one")
        art = layer_step(d.X, Y, d.labels, cfg, 1)
        G = art.X_tilde.T @ art.X_tilde
        YtY = Y.Y.T @ Y.Y
        scale = np.sum(G * YtY) / np.sum(YtY * YtY)
        np.testing.assert_allclose(G, scale * YtY, atol=1e-6)

    def test_layer_seed_pure(self):
        assert layer_seed(3, 7) == layer_seed(3, 7)
        assert len({layer_seed(0, l) for l in range(1, 50)}) == 49


class TestRun:
    def test_layer_count(self, pipe):
        assert len(pipe.layers) == 4
        assert pipe.final_model is not None

    @pytest.mark.parametrize("seed", range(3))
    def test_nc1_decreases(self, seed):
        d = gen_gaussian_classes(3, 10, 20, seed=seed)
        p = run(d, SMALL)
        assert p.layers[-1].metrics["agop"].nc1 < p.layers[0].metrics["input"].nc1

    def test_metrics_are_recomputable(self, pipe, ds):
        art = pipe.layers[0]
        m = collapse_metrics(art.X_tilde, ds.labels, ds.K)
        assert m == art.metrics["agop"]

    def test_deterministic(self, ds, pipe):
        again = run(ds, SMALL)
        for a, b in zip(pipe.layers, again.layers):
            assert a.metrics == b.metrics
            assert a.sqrtM.tobytes() == b.sqrtM.tobytes()

    def test_threads_do_not_change_result(self, ds, pipe):
        again = run(ds, SMALL, threads=3)
        for a, b in zip(pipe.layers, again.layers):
            assert a.sqrtM.tobytes() == b.sqrtM.tobytes()

    def test_retain_drops_matrices(self, ds):
        p = run(ds, SMALL, retain={2})
        assert p.layers[0].X_tilde is None and p.layers[1].X_tilde is not None
        assert p.layers[0].sqrtM is not None

    def test_callback(self, ds):
        seen = []
        run(ds, SMALL, on_layer=lambda art: seen.append(art.layer_index))
        assert seen == [1, 2, 3, 4]


class TestPredict:
    def test_training_accuracy(self, pipe, ds):
        assert np.mean(predict(pipe, ds.X) == ds.labels) == 1.0

    def test_output_length(self, pipe):
        Z = np.random.default_rng(0).standard_normal((20, 7))
        assert predict(pipe, Z).shape == (7,)

    def test_transform_of_train_matches_stored(self, pipe, ds):
        np.testing.assert_allclose(transform(pipe, ds.X), pipe.final_model.train_X, atol=1e-12)

    def test_replay_oracle(self, pipe):
        Z = np.random.default_rng(1).standard_normal((20, 5))
        # replay every layer from scratch with freshly drawn feature maps
        H = Z
        for l in range(1, SMALL.depth + 1):
            fmap = SMALL.feature_map.with_seed(layer_seed(SMALL.master_seed, l))
            H = apply_feature_map(fmap, pipe.layers[l - 1].sqrtM @ column_normalize(H))
        scores = krr_predict(pipe.final_model, column_normalize(H))
        assert np.array_equal(predict_scores(pipe, Z), scores)

    def test_sqrtM_is_root_of_agop(self, ds):
        p = run(ds, DeepRfmConfig(depth=1, feature_map=FeatureMapSpec(width=64)))
        Y = encode_labels(ds, "pm-one")
        model = krr_fit(column_normalize(ds.X), Y, SMALL.kernel)
        np.testing.assert_allclose(p.layers[0].sqrtM, psd_sqrt(agop(model).M), atol=1e-12)

    def test_shape_error(self, pipe):
        with pytest.raises(ValueError):
            predict(pipe, np.ones((3, 2)))


class TestSerialization:
    def test_round_trip(self, pipe, ds, tmp_path):
        save_pipeline(pipe, tmp_path / "p")
        loaded = load_pipeline(tmp_path / "p")
        Z = np.random.default_rng(2).standard_normal((20, 6))
        assert np.array_equal(predict_scores(loaded, Z), predict_scores(pipe, Z))
        assert loaded.config == pipe.config

    def test_bad_format(self, pipe, tmp_path):
        path = save_pipeline(pipe, tmp_path / "p")
        path.write_text(path.read_text().replace("v1", "v0"))
        with pytest.raises(ValueError, match="unsupported"):
            load_pipeline(tmp_path / "p")


def test_config_round_trip():
    cfg = DeepRfmConfig(depth=3, kernel=KernelSpec("gaussian", 1.5), ridge=0.1)
    assert DeepRfmConfig.from_dict(cfg.to_dict()) == cfg
