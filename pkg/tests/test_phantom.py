"""Phantom generation, lesion masks, lesion stamping."""

import numpy as np
import pytest
from scipy import ndimage

from traumasynth.config import LesionParams, PhantomConfig
from traumasynth.errors import ConfigurationError, DataError
from traumasynth.phantom import (LabelMap, apply_lesion, generate_lesion_mask,
                                 generate_phantom)

# frozen regression constant: background fraction of the default seed-3 phantom,
# measured once by counting voxels
SEED3_BACKGROUND_FRACTION = 0.964844


@pytest.fixture(scope="module")
def phantom_pair():
    return generate_phantom(PhantomConfig(seed=3))


def test_deterministic_in_seed(phantom_pair):
    vol, lab = phantom_pair
    vol2, lab2 = generate_phantom(PhantomConfig(seed=3))
    assert np.array_equal(vol.data, vol2.data)
    assert np.array_equal(lab.data, lab2.data)


def test_label_alphabet(phantom_pair):
    _, lab = phantom_pair
    assert set(np.unique(lab.data)) <= set(range(6))
    assert lab.classes == 6


def test_background_fraction_regression(phantom_pair):
    _, lab = phantom_pair
    frac = float(np.mean(lab.data == 0))
    assert frac == pytest.approx(SEED3_BACKGROUND_FRACTION, abs=1e-6)


def test_volume_and_label_invariants_over_seeds():
    for seed in range(8):
        vol, lab = generate_phantom(PhantomConfig(seed=seed))
        assert np.all(np.isfinite(vol.data))
        assert vol.data.min() >= 0 and vol.data.max() <= 1
        counts = np.bincount(lab.data.ravel(), minlength=lab.classes)
        assert np.all(counts >= 0.001 * lab.data.size)


def test_onehot_sums_to_one(phantom_pair):
    _, lab = phantom_pair
    oh = lab.onehot()
    assert oh.shape[0] == lab.classes
    assert np.allclose(oh.sum(axis=0), 1.0)


def test_invalid_configs_rejected():
    with pytest.raises(ConfigurationError):
        generate_phantom(PhantomConfig(volume_shape=(16, 64, 64)))
    with pytest.raises(ConfigurationError):
        generate_phantom(PhantomConfig(num_regions=1))
    with pytest.raises(ConfigurationError):
        generate_phantom(PhantomConfig(ventricle_scale=3.0))


def test_full_profile_shape_compat():
    vol, lab = generate_phantom(PhantomConfig(volume_shape=(96, 96, 96), num_regions=17, seed=0))
    assert lab.classes == 18
    counts = np.bincount(lab.data.ravel(), minlength=18)
    assert np.all(counts >= 0.001 * lab.data.size)


def test_lesion_mask_binary_and_connected():
    struct = ndimage.generate_binary_structure(3, 1)
    for seed in range(10):
        mask = generate_lesion_mask((64, 64, 64), LesionParams(), seed=seed)
        assert set(np.unique(mask.data)) <= {0, 1}
        _, n = ndimage.label(mask.data, structure=struct)
        assert n == 1


def test_lesion_mask_fraction_bounds_100_seeds():
    params = LesionParams()
    for seed in range(100):
        mask = generate_lesion_mask((64, 64, 64), params, seed=seed)
        assert params.min_frac <= mask.volume_fraction() <= params.max_frac


def test_lesion_mask_infeasible_bounds():
    with pytest.raises(ConfigurationError):
        generate_lesion_mask((64, 64, 64), LesionParams(min_frac=0.01, max_frac=0.01), seed=0)
    with pytest.raises(ConfigurationError):
        generate_lesion_mask((64, 64, 64), LesionParams(min_frac=0.02, max_frac=0.01), seed=0)


def test_apply_lesion_outside_mask_identity(phantom_pair):
    vol, lab = phantom_pair
    mask = generate_lesion_mask(vol.shape, LesionParams(), seed=11)
    lvol, llab = apply_lesion(vol, lab, mask, seed=12)
    outside = mask.data == 0
    assert np.array_equal(lvol.data[outside], vol.data[outside])
    assert np.array_equal(llab.data[outside], lab.data[outside])


def test_apply_lesion_deterministic(phantom_pair):
    vol, lab = phantom_pair
    mask = generate_lesion_mask(vol.shape, LesionParams(), seed=11)
    a = apply_lesion(vol, lab, mask, seed=12)
    b = apply_lesion(vol, lab, mask, seed=12)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def test_apply_lesion_contrast(phantom_pair):
    vol, lab = phantom_pair
    params = LesionParams()
    mask = generate_lesion_mask(vol.shape, params, seed=11)
    lvol, _ = apply_lesion(vol, lab, mask, seed=12, params=params)
    m = mask.data.astype(bool)
    shift = abs(float(lvol.data[m].mean()) - float(vol.data[m].mean()))
    assert shift >= params.min_contrast


def test_apply_lesion_empty_mask_rejected(phantom_pair):
    vol, lab = phantom_pair
    empty = generate_lesion_mask(vol.shape, LesionParams(), seed=1)
    empty.data[:] = 0
    with pytest.raises(DataError):
        apply_lesion(vol, lab, empty, seed=0)


def test_label_map_validation():
    bad = LabelMap(data=np.full((4, 4, 4), 9, dtype=np.uint8), classes=6)
    with pytest.raises(DataError):
        bad.validate()
