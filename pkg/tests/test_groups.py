import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from invstreams.groups import (
    GroupElement,
    GroupSpec,
    act_image,
    kernel_transform_matrix,
    rotate_image,
    scale_image,
    scaled_kernel_size,
    transform_kernel,
    upsample_nearest,
    zoom_on_canvas,
)

FINITE = [GroupSpec.rotation(4), GroupSpec.rotation(8), GroupSpec.rotation_flip(4), GroupSpec.trivial()]


@pytest.mark.parametrize("spec", FINITE, ids=lambda s: f"{s.kind}{s.order}")
def test_group_axioms(spec):
    els = list(spec.elements())
    e = spec.identity()
    for a in els:
        assert spec.compose(e, a) == a == spec.compose(a, e)
        assert spec.compose(a, spec.inverse(a)) == e
        for b in els:
            assert spec.compose(a, b) in els
    for a, b, c in itertools.product(els, repeat=3):
        assert spec.compose(spec.compose(a, b), c) == spec.compose(a, spec.compose(b, c))


def test_index_roundtrip_and_ordering():
    spec = GroupSpec.rotation_flip(4)
    for i in range(spec.order):
        assert spec.index(spec.element(i)) == i
    assert spec.element(5) == GroupElement(rot=1, flip=1)
    with pytest.raises(IndexError):
        spec.element(8)


def test_scale_semigroup_is_truncated():
    spec = GroupSpec.scale(3)
    assert spec.compose(GroupElement(scale=1), GroupElement(scale=1)) == GroupElement(scale=2)
    with pytest.raises(ValueError):
        spec.compose(GroupElement(scale=2), GroupElement(scale=1))
    with pytest.raises(ValueError):
        spec.inverse(GroupElement(scale=1))


@pytest.mark.parametrize("bad", [dict(kind="rotation", n_rot=4, n_flip=2), dict(kind="scale", n_scale=0),
                                 dict(kind="scale", n_scale=2, scale_base=1.0), dict(kind="moebius")])
def test_invalid_specs_rejected(bad):
    with pytest.raises(ValueError):
        GroupSpec(**bad)


def test_spec_dict_roundtrip():
    for spec in FINITE + [GroupSpec.scale(3, 2.0, exact=True)]:
        assert GroupSpec.from_dict(spec.to_dict()) == spec


def test_quarter_rotation_is_rot90_and_flip_mirrors_columns(rng):
    x = rng.normal(size=(2, 1, 6, 6))
    spec = GroupSpec.rotation_flip(4)
    np.testing.assert_allclose(act_image(GroupElement(rot=1), x, spec).data, np.rot90(x, 1, axes=(2, 3)), atol=1e-12)
    np.testing.assert_allclose(act_image(GroupElement(flip=1), x, spec).data, x[..., ::-1], atol=1e-12)


def test_action_is_homomorphism(rng):
    x = rng.normal(size=(1, 1, 5, 5))
    spec = GroupSpec.rotation_flip(4)
    for a, b in itertools.product(spec.elements(), repeat=2):
        lhs = act_image(a, act_image(b, x, spec), spec).data
        rhs = act_image(spec.compose(a, b), x, spec).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_rotation_by_360_is_identity(rng):
    x = rng.normal(size=(1, 1, 7, 7))
    np.testing.assert_allclose(rotate_image(x, 360.0).data, x, atol=1e-12)


def test_exact_scale_is_block_replication(rng):
    x = rng.normal(size=(1, 1, 3, 4))
    np.testing.assert_allclose(scale_image(x, 2.0, exact=True).data, x.repeat(2, axis=2).repeat(2, axis=3))
    np.testing.assert_allclose(upsample_nearest(x, 3).data, x.repeat(3, axis=2).repeat(3, axis=3))


def test_zoom_on_canvas_identity_and_shrink(rng):
    x = rng.random((1, 1, 8, 8))
    assert zoom_on_canvas(x, 1.0).data is not None
    np.testing.assert_array_equal(zoom_on_canvas(x, 1.0).data, x)
    y = zoom_on_canvas(np.ones((1, 1, 20, 20)), 0.5).data
    assert y.shape == (1, 1, 20, 20)
    assert abs(y.sum() - 100.0) < 25.0


def test_scaled_kernel_sizes():
    assert scaled_kernel_size(3, 1.0) == 3
    assert scaled_kernel_size(3, 2 ** 0.5) == 5
    assert scaled_kernel_size(3, 2.0) == 7  # mass-preserving bilinear support ceil(s*k), made odd
    assert scaled_kernel_size(3, 2.0, exact=True) == 5  # dilation
    assert scaled_kernel_size(3, 4.0, exact=True) == 9


def test_scaled_kernels_preserve_mass(rng):
    spec = GroupSpec.scale(3)
    psi = rng.normal(size=(2, 3, 3))
    for g in spec.elements():
        t = transform_kernel(g, psi, spec).data
        np.testing.assert_allclose(t.sum(axis=(-1, -2)), psi.sum(axis=(-1, -2)), atol=1e-12)


def test_exact_scale_kernel_is_dilation(rng):
    spec = GroupSpec.scale(2, 2.0, exact=True)
    psi = rng.normal(size=(3, 3))
    t = transform_kernel(GroupElement(scale=1), psi, spec).data
    ref = np.zeros((5, 5))
    ref[::2, ::2] = psi
    np.testing.assert_array_equal(t, ref)


def test_rotation_kernel_matrix_is_permutation_for_quarter_turns():
    spec = GroupSpec.rotation_flip(4)
    for g in spec.elements():
        m = kernel_transform_matrix(spec, g, 3)
        assert set(np.unique(m)) <= {0.0, 1.0}
        np.testing.assert_array_equal(m.sum(axis=0), 1.0)


@given(st.integers(0, 3), st.integers(0, 1))
def test_kernel_transform_consistent_with_image_action(rot, flip):
    spec = GroupSpec.rotation_flip(4)
    psi = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    g = GroupElement(rot=rot, flip=flip)
    np.testing.assert_allclose(transform_kernel(g, psi, spec).data, act_image(g, psi, spec).data, atol=1e-12)
