import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from deskdetr.estimator import DETRDetector, check_images, check_targets, detector_from_config
from deskdetr.exceptions import ConfigurationError, DimensionError

TINY = dict(hidden_dim=16, num_heads=2, enc_layers=1, dec_layers=2, num_queries=6, ffn_dim=32, batch_size=4,
            dtype="float64")
AUG_MODES = ["none", "dataaug", "feataug_flip", "feataug_crop", "feataug_fc"]


def test_clone_and_params():
    est = DETRDetector(**TINY, aug_mode="feataug_fc", seed=3)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(seed=4).seed == 4 and est.seed == 3


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        DETRDetector(**TINY).predict(np.zeros((1, 3, 64, 64)))


def test_check_images():
    x = check_images(np.full((3, 64, 64), 255, dtype=np.uint8))
    assert x.shape == (1, 3, 64, 64) and x.max() == 1.0
    with pytest.raises(DimensionError):
        check_images(np.zeros((1, 1, 64, 64)))
    with pytest.raises(DimensionError):
        check_images(np.zeros((1, 3, 16, 64)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 3, 64, 64), np.nan))


def test_check_targets(small_data):
    with pytest.raises(DimensionError):
        check_targets(small_data.gts[:2], 3)
    with pytest.raises(TypeError):
        check_targets([[0.5, 0.5, 0.1, 0.1]], 1)


@pytest.mark.parametrize("bad", [dict(regime="many"), dict(aug_mode="mixup"), dict(hidden_dim=9),
                                 dict(placement="encoder"), dict(lr=-1.0)])
def test_build_validates(bad):
    with pytest.raises(ConfigurationError):
        DETRDetector(**{**TINY, **bad}).build()


def test_fit_rejects_out_of_range_class(small_data):
    est = DETRDetector(**TINY, num_classes=1, epochs=1)
    with pytest.raises(ConfigurationError, match="class"):
        est.fit(small_data.images[:2], small_data.gts[:2])


def test_detector_from_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError, match="unknown config keys: colour"):
        detector_from_config({"colour": 1})
    assert detector_from_config({"epochs": 3}, epochs=None, seed=2).get_params()["seed"] == 2


def test_save_load_roundtrip(tmp_path, small_data):
    est = DETRDetector(**TINY, aug_mode="feataug_crop", epochs=1).fit(small_data.images[:4], small_data.gts[:4])
    est.save(tmp_path / "m.ckpt")
    back = DETRDetector.load(tmp_path / "m.ckpt")
    assert back.get_params() == est.get_params()
    for a, b in zip(est.predict(small_data.images[4:6]), back.predict(small_data.images[4:6])):
        assert [(d.query, d.score, tuple(d.box)) for d in a] == [(d.query, d.score, tuple(d.box)) for d in b]
    for (n, p), (m, q) in zip(est.projectors_.named_parameters(), back.projectors_.named_parameters()):
        assert n == m and np.array_equal(p.data, q.data)


def test_zero_epoch_checkpoint_equals_initialization(tmp_path, small_data):
    est = DETRDetector(**TINY, epochs=0).fit(small_data.images[:4], small_data.gts[:4])
    est.save(tmp_path / "m.ckpt")
    fresh = DETRDetector(**TINY, epochs=0).build()
    loaded = DETRDetector.load(tmp_path / "m.ckpt")
    for k, v in fresh.model_.state_dict().items():
        assert np.array_equal(loaded.model_.state_dict()[k], v)


def test_score_is_ap(small_data):
    est = DETRDetector(**TINY, epochs=0).fit(small_data.images[:2], small_data.gts[:2])
    report = est.evaluate(small_data.images, small_data.gts)
    assert est.score(small_data.images, small_data.gts) == report.ap
    assert 0.0 <= report.ap <= 1.0


# -- inference does not depend on the training scheme -------------------------------------------------------
def _built(**kw):
    est = DETRDetector(**{**TINY, **kw}).build()
    return est


@pytest.mark.parametrize("variant", [dict(aug_mode=m) for m in AUG_MODES[1:]]
                         + [dict(regime="group", group_k=3), dict(regime="hybrid", hybrid_k=2),
                            dict(aug_mode="feataug_flip", placement="encoder")])
def test_inference_cost_and_output_invariant(variant, small_data):
    base, other = _built(), _built(**variant)
    images = small_data.float_images(dtype=np.float64)
    a, b = base.predict(images), other.predict(images)
    assert base.model_.counters == other.model_.counters
    n_base = sum(p.size for p in base.model_.inference_parameters())
    assert n_base == sum(p.size for p in other.model_.inference_parameters())
    for x, y in zip(a, b):
        assert [(d.query, d.score, d.class_id, d.box.tobytes()) for d in x] == \
               [(d.query, d.score, d.class_id, d.box.tobytes()) for d in y]
