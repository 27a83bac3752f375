import numpy as np
import pytest

from kansae.data import ActivationStore, GridMeta
from kansae.errors import FitError, RegionError
from kansae.metrics import RegionSpec
from kansae.model import init_params
from kansae.steer import (
    LinearReadout,
    QuadraticReadout,
    dose_response,
    make_downstream,
    ols_fit,
    regional_response_map,
    steer,
)


@pytest.fixture
def model():
    return init_params(5, 8, "relu", seed=1)


def test_steer_basics(model):
    x = np.random.default_rng(0).normal(size=5)
    x0 = x.copy()
    np.testing.assert_array_equal(steer(x, model, 3, 0.0), x)
    np.testing.assert_array_equal(x, x0)
    model.W_dec[:, 2] = np.eye(5)[0]
    np.testing.assert_array_equal(steer(x, model, 2, 2.0) - x, [2.0, 0, 0, 0, 0])
    with pytest.raises(IndexError):
        steer(x, model, 8, 1.0)


def test_steer_additive(model):
    X = np.random.default_rng(1).normal(size=(20, 5))
    for a, b in [(0.5, 1.5), (-2.0, 0.3), (1e3, -7.0)]:
        np.testing.assert_allclose(steer(steer(X, model, 4, a), model, 4, b), steer(X, model, 4, a + b),
                                   rtol=0, atol=1e-12 * max(1.0, abs(a) + abs(b)))


def test_linear_dose_response(model):
    rng = np.random.default_rng(2)
    down = LinearReadout(rng.normal(size=5), 0.7)
    X = rng.normal(size=(100, 5))
    dr = dose_response(down, model, 6, [0, 0.5, 1.0, 2.0], X)
    assert dr.responses[0] == 0.0
    assert abs(dr.slope - down.r @ model.W_dec[:, 6]) < 1e-10
    assert dr.r_squared >= 0.999999 and not dr.zero_response


def test_orthogonal_feature_is_zero_response(model):
    col = model.W_dec[:, 0]
    r = np.random.default_rng(3).normal(size=5)
    r -= (r @ col) * col
    dr = dose_response(LinearReadout(r), model, 0, [0, 1, 2], np.random.default_rng(4).normal(size=(30, 5)))
    assert dr.zero_response and dr.slope == 0.0 and dr.r_squared == 1.0


def test_quadratic_r2_matches_lstsq(model):
    rng = np.random.default_rng(5)
    down = QuadraticReadout(rng.normal(size=5))
    X = rng.normal(size=(200, 5))
    alphas = [0.0, 0.5, 1.0, 2.0, 3.0]
    dr = dose_response(down, model, 2, alphas, X)
    A = np.stack([alphas, np.ones(5)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, np.array(dr.responses), rcond=None)
    y = np.array(dr.responses)
    r2 = 1 - res[0] / np.sum((y - y.mean()) ** 2)
    assert abs(dr.r_squared - r2) < 1e-10
    assert abs(dr.slope - coef[0]) < 1e-10


def test_dose_response_errors(model):
    X = np.zeros((3, 5))
    down = LinearReadout(np.ones(5))
    with pytest.raises(FitError):
        dose_response(down, model, 0, [0, 1], X)
    with pytest.raises(FitError):
        dose_response(down, model, 0, [0, 1, 1, 0], X)
    with pytest.raises(FitError):
        dose_response(down, model, 0, [1, 2, 3], X)
    with pytest.raises(FitError):
        ols_fit([1, 1, 1], [1, 2, 3])


def test_regional_map_confined_to_region(model):
    meta = GridMeta(5, 6, 8, 30.0, 5.0, -20.0, 5.0)
    X = np.random.default_rng(6).normal(size=(meta.n_days * meta.cells, 5)).astype(np.float32)
    store = ActivationStore(X, meta)
    region = RegionSpec(40.0, 50.0, 0.0, 10.0)
    down = make_downstream({"kind": "linear"}, 5, seed=0, meta=meta, region=region)
    zero = regional_response_map(down, model, 1, 0.0, store)
    assert np.all(zero == 0)
    m = np.abs(regional_response_map(down, model, 1, 2.0, store))
    lat, lon = np.meshgrid(meta.lats(), meta.lons(), indexing="ij")
    inside = region.contains(lat, lon)
    assert m[~inside].max() < 0.1 * m[inside].max()
    with pytest.raises(RegionError):
        regional_response_map(down, model, 1, 1.0, ActivationStore(X))


def test_make_downstream_seeded():
    a = make_downstream({"kind": "quadratic"}, 4, seed=3)
    b = make_downstream({"kind": "quadratic"}, 4, seed=3)
    np.testing.assert_array_equal(a.r, b.r)
    assert isinstance(a, QuadraticReadout)
