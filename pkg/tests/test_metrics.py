"""Invariance error, test error and helpers."""

import csv
import io

import numpy as np
import pytest

from invstreams.autodiff import Tensor
from invstreams.data import Dataset
from invstreams.groups import GroupSpec, upsample_nearest
from invstreams.invariant import ScaleWSII
from invstreams.layers import GConvLayer
from invstreams.metrics import (
    Transform,
    equivariance_error,
    group_transforms,
    invariance_error,
    mean_std,
    scale_grid,
    test_error as classification_error,
    zoom_transforms,
)

UP2 = Transform("up2", lambda x: upsample_nearest(x, 2).data)


def total(x):
    return x.sum(axis=(1, 2, 3), keepdims=False).reshape(-1, 1)


def test_identity_transform_gives_zero(rng):
    x = rng.normal(size=(5, 1, 6, 6))
    rep = invariance_error(lambda t: t * 3.0, x, zoom_transforms([1.0]))
    assert rep.delta == 0.0 and rep.n_skipped == 0


def test_sum_under_upsampling_is_nine(rng):
    x = rng.uniform(0.1, 1.0, size=(4, 1, 5, 5))
    rep = invariance_error(total, x, [UP2])
    np.testing.assert_allclose(rep.errors, 9.0, rtol=1e-12)


def test_invariant_layer_has_tiny_delta_and_avg_pool_does_not(rng):
    x = rng.uniform(0.1, 1.0, size=(6, 1, 8, 8))
    ws = ScaleWSII(1, 4, kernel_size=1, padding="periodic", rng=rng)
    assert invariance_error(ws, x, [UP2]).delta <= 1e-20
    assert invariance_error(total, x, [UP2]).delta >= 1e-2


def test_delta_is_invariant_to_output_rescaling(rng):
    x = rng.uniform(0.1, 1.0, size=(4, 1, 8, 8))
    tf = zoom_transforms([0.5, 0.75])
    a = invariance_error(total, x, tf).delta
    b = invariance_error(lambda t: 7.5 * total(t), x, tf).delta
    assert a == pytest.approx(b, rel=1e-12)


def test_zero_norm_reference_is_skipped(rng):
    x = rng.uniform(0.1, 1.0, size=(4, 1, 4, 4))
    x[1] = 0.0
    rep = invariance_error(total, x, [UP2])
    assert rep.n_skipped == 1 and rep.errors.shape == (1, 3)


def test_report_serialization(rng):
    x = rng.uniform(0.1, 1.0, size=(3, 1, 4, 4))
    rep = invariance_error(total, x, [UP2, zoom_transforms([1.0])[0]])
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["transform", "sample", "error", "aggregate"]
    assert len(rows) == 1 + 2 * 3
    assert float(rows[1][3]) == rep.delta
    d = rep.to_dict()
    assert d["n_samples"] == 3 and len(d["per_transform"]) == 2


def test_reports_are_deterministic(rng):
    x = rng.uniform(0.1, 1.0, size=(3, 1, 8, 8))
    tf = zoom_transforms(scale_grid())
    assert invariance_error(total, x, tf).to_json() == invariance_error(total, x, tf).to_json()


def test_equivariance_for_trivial_group_matches_invariance(rng):
    spec = GroupSpec.rotation(1)
    layer = GConvLayer(1, 2, spec, rng=rng)
    x = rng.normal(size=(3, 1, 6, 6))
    eq = equivariance_error(layer, x, spec)
    inv = invariance_error(lambda t: layer(t).tensor, x, group_transforms(spec))
    np.testing.assert_array_equal(eq.errors, inv.errors)
    assert eq.delta == 0.0


def test_classification_error():
    labels = np.arange(100) % 10
    d = Dataset(np.zeros((100, 1, 2, 2)), labels)
    always0 = lambda t: Tensor(np.tile(np.eye(10)[0], (t.shape[0], 1)))  # noqa: E731
    assert classification_error(always0, d) == pytest.approx(90.0)
    oracle = lambda t: Tensor(np.eye(10)[labels[: t.shape[0]]])  # noqa: E731
    assert classification_error(oracle, d) == 0.0


def test_empty_dataset_rejected():
    class Empty:
        images = np.zeros((0, 1, 2, 2))
        labels = np.zeros(0, dtype=int)

    with pytest.raises(ValueError):
        classification_error(lambda t: t, Empty())


def test_mean_std():
    assert mean_std([1.0, 2.0, 3.0]) == pytest.approx((2.0, np.sqrt(2 / 3)))
    with pytest.raises(ValueError):
        mean_std([])


def test_scale_grid():
    g = scale_grid()
    assert len(g) == 11 and g[0] == 0.5 and g[-1] == 1.0
    assert scale_grid(0.3, 1.0, 0.35) == [0.3, 0.65, 1.0]
    with pytest.raises(ValueError):
        scale_grid(0.5, 1.0, 0.0)
    with pytest.raises(ValueError):
        scale_grid(1.0, 0.5, 0.1)
