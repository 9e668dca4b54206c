import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lanm import LatentCausalModel
from lanm.scmgen import GenConfig, gen_dataset


@pytest.fixture(scope="module")
def ds():
    return gen_dataset(GenConfig(ell=2, M=4, per_segment=30, seed=0))


def small(**kw):
    params = dict(n_latents=2, hidden=8, head_hidden=8, epochs=2, batch_size=32, random_state=0)
    params.update(kw)
    return LatentCausalModel(**params)


def test_get_set_params_and_clone():
    est = small(gamma=0.5)
    p = est.get_params()
    assert p["gamma"] == 0.5 and p["n_latents"] == 2
    est.set_params(lr=0.01)
    assert est.lr == 0.01
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est


def test_not_fitted(ds):
    with pytest.raises(NotFittedError):
        small().transform(ds.x, ds.labels)


def test_fit_transform_shapes(ds):
    est = small().fit(ds.x, ds.labels)
    z = est.transform(ds.x, ds.labels)
    assert z.shape == (ds.N, 2)
    assert est.n_features_in_ == ds.D and est.epochs_done_ == 2 and len(est.log_) == 2
    assert np.isfinite(est.score(ds.x, ds.labels))
    np.testing.assert_array_equal(small().fit_transform(ds.x, ds.labels), z)


def test_one_hot_segments_equivalent(ds):
    a = small().fit(ds.x, ds.labels).transform(ds.x, ds.labels)
    b = small().fit(ds.x, ds.u).transform(ds.x, ds.u)
    np.testing.assert_array_equal(a, b)


def test_input_validation(ds):
    est = small()
    with pytest.raises(ValueError):
        est.fit(ds.x, None)
    with pytest.raises(ValueError):
        est.fit(ds.x, ds.labels[:-1])
    bad = ds.x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, ds.labels)
    with pytest.raises(ValueError):
        est.fit(ds.x, ds.labels - 1)
    est.fit(ds.x, ds.labels)
    with pytest.raises(ValueError, match="features"):
        est.transform(ds.x[:, :1], ds.labels)
    with pytest.raises(ValueError):
        est.transform(ds.x, np.full(ds.N, 9))


def test_standardize_moments(ds):
    est = small().fit(ds.x, ds.labels)
    np.testing.assert_allclose(est.x_mean_, ds.x.mean(0))
    raw = small(standardize=False).fit(ds.x, ds.labels)
    assert raw.x_mean_ is None


def test_deterministic(ds):
    a = small().fit(ds.x, ds.labels)
    b = small().fit(ds.x, ds.labels)
    assert all(a.model_.params[k].tobytes() == b.model_.params[k].tobytes() for k in a.model_.params)


def test_warm_start_continues(ds):
    est = small(warm_start=True).fit(ds.x, ds.labels)
    step = est.state_.step
    est.fit(ds.x, ds.labels)
    assert est.epochs_done_ == 4 and est.state_.step == 2 * step and len(est.log_) == 4
    cold = small().fit(ds.x, ds.labels)
    cold.fit(ds.x, ds.labels)
    assert cold.epochs_done_ == 2


def test_save_load_roundtrip(ds, tmp_path):
    est = small(gamma=0.2).fit(ds.x, ds.labels)
    est.save(tmp_path / "ck", meta={"note": "x"})
    back = LatentCausalModel.load(tmp_path / "ck")
    assert back.get_params() == est.get_params()
    assert back.epochs_done_ == 2 and back.state_.step == est.state_.step
    np.testing.assert_array_equal(back.transform(ds.x, ds.labels), est.transform(ds.x, ds.labels))


def test_load_then_resume_matches_step_count(ds, tmp_path):
    est = small(warm_start=True).fit(ds.x, ds.labels)
    est.save(tmp_path / "ck")
    back = LatentCausalModel.load(tmp_path / "ck")
    back.fit(ds.x, ds.labels)
    assert back.epochs_done_ == 4 and back.state_.step == 2 * est.state_.step


def test_adjacency_and_mask_strength(ds):
    est = small().fit(ds.x, ds.labels)
    S = est.mask_strength()
    assert S.shape == (2, 2) and S[1, 0] == 0 and S[1, 1] == 0
    A = est.adjacency(tau=1e9)
    assert not A.any()
    assert est.adjacency(tau=1e-9)[0, 1] == 1
