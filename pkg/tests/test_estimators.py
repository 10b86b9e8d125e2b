import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vaflow.data import generate_images
from vaflow.estimators import LatentFlow, VaeTokenizer, check_images, check_latents


@pytest.fixture(scope="module")
def images():
    return generate_images(32, 32, seed=0)[0]


@pytest.fixture(scope="module")
def fitted_tokenizer(images):
    return VaeTokenizer(d_z=8, epochs=2, batch_size=16, seed=0, d_f=16).fit(images)


class TestValidation:
    def test_check_images_shape(self):
        with pytest.raises(ValueError):
            check_images(np.zeros((4, 1, 32, 32)))
        with pytest.raises(ValueError):
            check_images(np.zeros((0, 3, 32, 32)))

    def test_check_images_range(self):
        bad = np.zeros((1, 3, 8, 8))
        bad[0, 0, 0, 0] = 5.0
        with pytest.raises(ValueError, match="range"):
            check_images(bad)

    def test_check_images_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            check_images(np.zeros((1, 3, 30, 32)), f=8)

    def test_check_latents(self):
        with pytest.raises(ValueError):
            check_latents(np.zeros((4, 4, 4)))
        bad = np.zeros((1, 2, 2, 3))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            check_latents(bad)


class TestSklearnConventions:
    def test_get_set_params_and_clone(self):
        est = VaeTokenizer(d_z=32, m1=0.7)
        params = est.get_params()
        assert params["d_z"] == 32 and params["m1"] == 0.7
        est.set_params(m2=0.1)
        assert est.m2 == 0.1
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

        flow = LatentFlow(width=64, steps=10)
        assert clone(flow).get_params()["width"] == 64

    def test_not_fitted_errors(self):
        with pytest.raises(NotFittedError):
            VaeTokenizer().transform(np.zeros((1, 3, 32, 32)))
        with pytest.raises(NotFittedError):
            LatentFlow().sample([0])


class TestVaeTokenizer:
    def test_transform_shape_and_determinism(self, fitted_tokenizer, images):
        z = fitted_tokenizer.transform(images[:8])
        assert z.shape == (8, 4, 4, 8)
        assert np.array_equal(z, fitted_tokenizer.transform(images[:8]))

    def test_sample_posterior_seeded(self, fitted_tokenizer, images):
        a = fitted_tokenizer.sample_posterior(images[:4], seed=3)
        b = fitted_tokenizer.sample_posterior(images[:4], seed=3)
        c = fitted_tokenizer.sample_posterior(images[:4], seed=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_inverse_transform_shape(self, fitted_tokenizer, images):
        z = fitted_tokenizer.transform(images[:4])
        x = fitted_tokenizer.inverse_transform(z)
        assert x.shape == (4, 3, 32, 32)

    def test_metrics_and_score(self, fitted_tokenizer, images):
        metrics = fitted_tokenizer.reconstruction_metrics(images[:8])
        assert set(metrics) == {"psnr", "ssim"}
        assert fitted_tokenizer.score(images[:8]) == metrics["psnr"]

    def test_uniformity_report(self, fitted_tokenizer, images):
        rep = fitted_tokenizer.uniformity(images, max_points=256)
        assert rep.n_points == 256

    def test_checkpoint_round_trip(self, fitted_tokenizer, images, tmp_path):
        path = tmp_path / "tok.vavk"
        fitted_tokenizer.save(path)
        loaded = VaeTokenizer.from_checkpoint(path)
        assert np.array_equal(loaded.transform(images[:4]), fitted_tokenizer.transform(images[:4]))
        assert loaded.projection_ is not None  # vf training stores the projection
        assert loaded.projection_.weight.shape == fitted_tokenizer.projection_.weight.shape

    def test_history_populated(self, fitted_tokenizer):
        assert len(fitted_tokenizer.history_) == 2
        assert fitted_tokenizer.history_[0].l_rec > 0


class TestLatentFlow:
    def test_fit_sample_score(self, fitted_tokenizer, images):
        z = fitted_tokenizer.transform(images)
        labels = np.arange(len(z)) % 3
        flow = LatentFlow(depth=1, heads=2, width=32, num_classes=3, steps=40,
                          batch_size=16, seed=0, lr=1e-3).fit(z, labels)
        out = flow.sample([0, 1, 2], steps=6, seed=1)
        assert out.shape == (3, 4, 4, 8)
        assert np.isfinite(out).all()
        assert np.isfinite(flow.score(z, labels))

    def test_label_validation(self, fitted_tokenizer, images):
        z = fitted_tokenizer.transform(images[:8])
        with pytest.raises(ValueError):
            LatentFlow(num_classes=2, steps=1).fit(z, np.full(8, 9))

    def test_checkpoint_round_trip(self, fitted_tokenizer, images, tmp_path):
        z = fitted_tokenizer.transform(images)
        flow = LatentFlow(depth=1, heads=2, width=32, num_classes=2, steps=20,
                          batch_size=8, seed=0).fit(z, np.arange(len(z)) % 2)
        path = tmp_path / "flow.vavk"
        flow.save(path)
        loaded = LatentFlow.from_checkpoint(path)
        a = flow.sample([0, 1], steps=5, seed=2)
        b = loaded.sample([0, 1], steps=5, seed=2)
        np.testing.assert_allclose(a, b, atol=1e-6)
