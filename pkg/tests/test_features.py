import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uniloc.channel import Path, PathSet, SystemConfig, synthesize_csi
from uniloc.features import (LOG_FLOOR, FeatureExtractor, Standardizer, delay_window, feature_vector,
                             from_angle_delay, logamp_block, to_angle_delay, truncate)

CFG = SystemConfig(num_antennas=16, num_subcarriers=64)


def random_csi(seed, shape=CFG.shape):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def test_constant_csi_concentrates_in_origin_bin():
    Hbar = to_angle_delay(np.ones(CFG.shape, dtype=complex))
    assert abs(Hbar[0, 0]) == pytest.approx(math.sqrt(16 * 64))
    Hbar[0, 0] = 0
    assert np.max(np.abs(Hbar)) < 1e-9


def test_transform_is_unitary_and_invertible():
    H = random_csi(0)
    Hbar = to_angle_delay(H)
    assert np.linalg.norm(Hbar) == pytest.approx(np.linalg.norm(H), rel=1e-9)
    assert np.linalg.norm(from_angle_delay(Hbar) - H) / np.linalg.norm(H) < 1e-9


def test_on_bin_path_peaks_at_predicted_bin():
    M, Nc = CFG.shape
    k_angle, k_delay = 5, 9
    # sin(theta) d / lambda * M = k_angle, tau * df * Nc = k_delay
    theta = math.asin(k_angle / (M * CFG.antenna_spacing / CFG.wavelength))
    tau = k_delay / (CFG.subcarrier_spacing * Nc)
    Hbar = to_angle_delay(synthesize_csi(CFG, PathSet([Path(1.0, theta, tau)])))
    i, k = np.unravel_index(np.argmax(np.abs(Hbar)), Hbar.shape)
    assert (i, k) == (k_angle, k_delay)


def test_truncation_index_example():
    cfg = SystemConfig(num_antennas=4, num_subcarriers=416, subcarrier_spacing=120e3)
    first, last = delay_window(cfg, 100e-9, 1e-6)
    # independent recomputation of floor(4.992) and ceil(49.92)
    assert (first, last) == (math.floor(100e-9 * 120e3 * 416), math.ceil(1e-6 * 120e3 * 416)) == (4, 50)
    assert last - first + 1 == 47
    Hbar = np.zeros((4, 416), dtype=complex)
    assert truncate(Hbar, 100e-9, 1e-6, cfg).shape == (4, 47)


def test_truncation_full_and_single_bin():
    Nc, df = CFG.num_subcarriers, CFG.subcarrier_spacing
    Hbar = random_csi(1)
    assert np.array_equal(truncate(Hbar, 0.0, (Nc - 1) / (df * Nc), CFG), Hbar)
    tau = 7 / (df * Nc)
    assert truncate(Hbar, tau, tau, CFG).shape == (16, 1)


def test_truncation_beyond_window_raises():
    with pytest.raises(ValueError):
        delay_window(CFG, 0.0, 1.0 / CFG.subcarrier_spacing)
    with pytest.raises(ValueError):
        delay_window(CFG, 2e-7, 1e-7)


def test_feature_vector_examples():
    d = feature_vector(np.array([[1 + 0j, np.e * 1j, 0j]]))
    assert np.allclose(d[:3], [0.0, 1.0, math.log(LOG_FLOOR)])
    assert np.allclose(d[3:], [0.0, math.pi / 2, 0.0])


def test_feature_vector_column_major_and_phase_range():
    Ht = np.array([[1, 2], [3, 4]], dtype=complex) * -1
    d = feature_vector(Ht)
    assert np.allclose(d[:4], np.log([1, 3, 2, 4]))
    assert np.allclose(d[4:], np.pi)  # -x lies on the branch cut, mapped to +pi


def test_extractor_length_constant():
    ex = FeatureExtractor(CFG, 1e-7, 2e-6)
    feats = ex.many([random_csi(s) for s in range(3)])
    assert feats.shape == (3, 2 * 16 * ex.width) and ex.length == feats.shape[1]
    assert feats.dtype == np.float32
    assert np.all(np.isfinite(feats))


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_log_block_scale_covariance(s, seed):
    H = random_csi(seed, (4, 8))
    d0, d1 = feature_vector(H), feature_vector(s * H)
    n = d0.size // 2
    assert np.allclose(d1[:n] - d0[:n], math.log(s), atol=1e-9)
    assert np.allclose(d1[n:], d0[n:], atol=1e-9)


def test_logamp_block_and_standardizer():
    X = np.arange(12.0).reshape(2, 6)
    assert np.array_equal(logamp_block(X), X[:, :3])
    st_ = Standardizer.fit(np.random.default_rng(0).normal(3, 2, size=(500, 4)))
    Z = st_(np.random.default_rng(0).normal(3, 2, size=(500, 4)))
    assert np.allclose(Z.mean(0), 0, atol=1e-9) and np.allclose(Z.std(0), 1, atol=1e-9)
    const = Standardizer.fit(np.ones((5, 2)))
    assert np.all(np.isfinite(const(np.ones((1, 2)))))
