import math

import numpy as np
import pytest
from scipy import stats

from mieinversion.forward import (SIGMA_FLOOR, MeasurementSet, build_noise_model, noisy_means,
                                  read_measurements_csv, simulate_true, write_measurements_csv)
from mieinversion.materials import builtin_material, default_grid, parse_dispersion
from mieinversion.mie import make_context, q_ext, wiscombe_truncation
from mieinversion.retrieval import residual_sq
from oracles import classical_qext

RADII = (0.1, 0.2, 0.3)


def test_single_entry_reduces_to_area_times_efficiency():
    e = simulate_true(lambda l: 1.5 + 0.1j, 1.0, [0.2], [1.1])
    ctx = make_context(0.2, 1.1, 1, 1.5 + 0.1j)
    assert e.shape == (1, 1)
    assert e[0, 0] == pytest.approx(math.pi * 0.04 * q_ext(ctx, wiscombe_truncation(ctx)), rel=1e-14)


def test_matched_medium_vanishes():
    e = simulate_true(lambda l: 1.33, 1.33, RADII, [0.6, 1.2, 3.3])
    assert np.all(np.abs(e) < 1e-10)


def test_against_classical_oracle():
    e = simulate_true(lambda l: 1.33, 1.0, RADII, [0.6])
    for i, r in enumerate(RADII):
        x = 2 * math.pi * r / 0.6
        ref = math.pi * r**2 * classical_qext(x, 1.33, n_stop=40)
        assert e[i, 0] == pytest.approx(ref, rel=1e-6)


def test_missing_dispersion_entry_names_wavelength():
    table = parse_dispersion("wavelength_um,n,k\n0.5,1.4,0\n1.0,1.5,0\n")
    with pytest.raises(ValueError, match="2.0"):
        simulate_true(table, 1.0, RADII, [0.7, 2.0])


def test_noiseless_means_and_floor():
    e = simulate_true(builtin_material("synthetic"), 1.0, RADII, [0.6, 0.7])
    sets = noisy_means(e, 0.0, 300, 1, RADII, [0.6, 0.7])
    for j, ms in enumerate(sets):
        assert np.array_equal(ms.means, e[:, j])
        assert np.all(ms.sigmas == SIGMA_FLOOR)


def test_determinism_and_substreams():
    e = simulate_true(builtin_material("synthetic"), 1.0, RADII, [0.6, 0.7, 0.8])
    a = noisy_means(e, 0.05, 300, 42, RADII, [0.6, 0.7, 0.8])
    b = noisy_means(e, 0.05, 300, 42, RADII, [0.6, 0.7, 0.8])
    for x, y in zip(a, b):
        assert np.array_equal(x.means, y.means) and np.array_equal(x.sample_std, y.sample_std)
    # one wavelength alone reproduces its entry of the full run
    c = noisy_means(e[:, :1], 0.05, 300, 42, RADII, [0.6])
    assert np.array_equal(c[0].means, a[0].means)
    d = noisy_means(e, 0.05, 300, 42, RADII, [0.6, 0.7, 0.8], sweep=1)
    assert not np.array_equal(d[0].means, a[0].means)


def test_sample_sigma_chi2_band():
    n_s = 300
    lo, hi = (0.8**2) * (n_s - 1), (1.2**2) * (n_s - 1)
    p_inside = stats.chi2.cdf(hi, n_s - 1) - stats.chi2.cdf(lo, n_s - 1)
    assert p_inside >= 0.99
    grid = default_grid().wavelengths
    e = simulate_true(builtin_material("synthetic"), 1.0, RADII, grid)
    sets = noisy_means(e, 0.05, n_s, 7, RADII, grid)
    ratio = np.concatenate([ms.sample_std / (0.05 * e[:, j]) for j, ms in enumerate(sets)])
    assert np.mean(np.abs(ratio - 1) < 0.2) >= 0.99


def test_mean_error_has_standard_error_scaling():
    e = simulate_true(builtin_material("synthetic"), 1.0, RADII, [1.2])
    z = []
    for seed in range(200):
        ms = noisy_means(e, 0.05, 300, seed, RADII, [1.2])[0]
        z.append((ms.means - e[:, 0]) / (0.05 * e[:, 0] / math.sqrt(300)))
    z = np.array(z)
    assert np.all(np.abs(z.mean(axis=0)) <= 0.2)
    assert np.all(np.abs(z.std(axis=0) - 1) < 0.15)


def test_noise_model_examples():
    nm = build_noise_model([1.0, 2.0, 3.0])
    assert nm.delta_sq == 9.0
    assert np.allclose(nm.sigma_scaled, [1 / 9, 4 / 9, 1])
    assert np.allclose(build_noise_model([0.5, 0.5]).sigma_scaled, [1, 1])
    with pytest.raises(ValueError):
        build_noise_model([0.0, 0.0])
    with pytest.raises(ValueError):
        build_noise_model([1.0, -1.0])


def test_noise_model_max_rule_on_simulated_water():
    water = builtin_material("water")
    e = simulate_true(water, 1.0, RADII, [0.6])
    ms = noisy_means(e, 0.05, 300, 3, RADII, [0.6])[0]
    sig = ms.sample_std / math.sqrt(300)
    nm = build_noise_model(ms)
    assert nm.delta_sq == pytest.approx(max(s * s for s in sig), rel=1e-15)
    assert np.max(nm.sigma_scaled) == 1.0 and np.all(nm.sigma_scaled <= 1.0)


def test_noiseless_weighted_residual_vanishes():
    grid = default_grid().wavelengths[::7]
    mat = builtin_material("synthetic")
    e = simulate_true(mat, 1.0, RADII, grid)
    for ms in noisy_means(e, 0.0, 300, 0, RADII, grid):
        m = mat(ms.wavelength).value
        r2 = residual_sq((m.real, m.imag), ms, build_noise_model(ms), "wiscombe", 1.0)
        assert math.sqrt(r2) < 1e-8


def test_measurement_validation():
    with pytest.raises(ValueError):
        MeasurementSet([0.1, 0.2], 0.6, [1.0], [0.1, 0.1], 300)
    with pytest.raises(ValueError):
        MeasurementSet([0.1], 0.6, [np.nan], [0.1], 300)


def test_negative_noisy_samples_tolerated():
    ms = MeasurementSet(RADII, 0.6, [-1e-3, 0.1, 0.2], [0.01, 0.01, 0.01], 300)
    assert ms.means[0] < 0


def test_csv_round_trip(tmp_path):
    grid = [0.6, 0.7]
    e = simulate_true(builtin_material("synthetic"), 1.0, RADII, grid)
    sets = noisy_means(e, 0.05, 300, 9, RADII, grid)
    p = tmp_path / "m.csv"
    write_measurements_csv(sets, p)
    header = p.read_text().splitlines()[0]
    assert header == "wavelength_um,radius_um,mean_extinction,sigma,n_samples"
    back = read_measurements_csv(p)
    for a, b in zip(sets, back):
        assert a.wavelength == b.wavelength
        assert np.array_equal(a.means, b.means) and np.array_equal(a.sample_std, b.sample_std)
        assert np.array_equal(a.sigmas, b.sigmas)
