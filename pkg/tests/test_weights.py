import math
import warnings

import numpy as np
import pytest

from ivqrfs.dataset import Dataset
from ivqrfs.ivqr import AlphaGrid
from ivqrfs.stats_core import RngStream
from ivqrfs.weights import (
    WEIGHT_CAP,
    WEIGHT_FLOOR,
    WEIGHT_SPREAD_LIMIT,
    _quotient_weights,
    hall_sheather_bandwidth,
    sparsity_weights,
)

from oracles import dgp_sample, location_sample

PHI0 = 1.0 / math.sqrt(2.0 * math.pi)


def _location_dataset(n, seed):
    y, d, x1, z1, z2 = location_sample(n, seed=seed)
    return Dataset(y=y, d=d, x=np.c_[np.ones(n), x1], z=np.c_[z1, z2])


# --- bandwidth -----------------------------------------------------------------


def test_bandwidth_frozen_value():
    assert hall_sheather_bandwidth(0.5, 1000) == pytest.approx(0.1053, abs=1e-4)


def test_bandwidth_exact_n_scaling():
    assert hall_sheather_bandwidth(0.5, 8000) == pytest.approx(
        hall_sheather_bandwidth(0.5, 1000) / 2.0, rel=1e-12
    )


def test_bandwidth_quarter_formula():
    # recomputed from printed normal constants, independent of the library
    qt = -0.674490
    q975 = 1.959964
    pdf = math.exp(-qt * qt / 2.0) / math.sqrt(2.0 * math.pi)
    core = 1.5 * pdf**4 / (2.0 * qt * qt + 1.0)
    expected = 2.0 * 1000 ** (-1.0 / 3.0) * q975 ** (2.0 / 3.0) * core ** (1.0 / 3.0)
    assert hall_sheather_bandwidth(0.25, 1000) == pytest.approx(expected, rel=1e-5)


def test_bandwidth_monotone_in_n():
    for tau in (0.25, 0.5, 0.75):
        hs = [hall_sheather_bandwidth(tau, n) for n in (50, 100, 500, 1000, 5000, 50_000)]
        assert np.all(np.diff(hs) <= 0.0)
        assert hs[-3] > hs[-2] > hs[-1]


def test_bandwidth_clamped_near_boundaries():
    for tau in (0.002, 0.998):
        h = hall_sheather_bandwidth(tau, 100)
        assert 0.0 < h < min(tau, 1.0 - tau)
        assert 0.0009 <= min(tau - h, 1.0 - tau - h)
    h = hall_sheather_bandwidth(0.0005, 100)
    assert 0.0 < h < 0.0005


def test_bandwidth_domain():
    for tau in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            hall_sheather_bandwidth(tau, 100)
    with pytest.raises(ValueError):
        hall_sheather_bandwidth(0.5, 1)


# --- clipping policy -------------------------------------------------------------


def test_quotient_clipping_policy():
    h = 0.05
    den = np.array([1.0, 0.9, 1.1, 1.25, -1.0, 1e-9])
    values, clipped = _quotient_weights(den, h)
    # median over every finite positive quotient, the huge one included
    median = np.median(2.0 * h / den[np.array([0, 1, 2, 3, 5])])
    assert values[0] == pytest.approx(0.1)
    assert values[1] == pytest.approx(2.0 * h / 0.9)
    # crossed quantile: neutral median weight, not deletion
    assert values[4] == pytest.approx(median)
    # near-zero spacing, far above the trusted spread: neutral weight too
    assert values[5] == pytest.approx(median)
    assert clipped == 2
    assert np.all((values >= WEIGHT_FLOOR) & (values <= WEIGHT_CAP))


def test_quotient_absolute_bounds_without_positive_quotients():
    h = 0.05
    den = np.array([0.0, 0.0, -2.0])
    values, clipped = _quotient_weights(den, h)
    assert values[0] == WEIGHT_CAP
    assert values[1] == WEIGHT_CAP
    assert values[2] == WEIGHT_FLOOR
    assert clipped == 3


# --- estimated weights ------------------------------------------------------------


@pytest.mark.slow
def test_location_model_mean_near_constant_density():
    # truth for the homoskedastic design: density constant across observations;
    # the reference constant evaluates the conditional density at the center of
    # the endogenous shock, phi(0)/sqrt(1 - 0.25)
    data = _location_dataset(5000, seed=3)
    wv = sparsity_weights(data, 0.5)
    target = PHI0 / math.sqrt(0.75)
    assert abs(wv.values.mean() / target - 1.0) < 0.15
    assert wv.clipped_count <= 0.10 * data.n
    assert 0.0 < wv.bandwidth < 0.5


@pytest.mark.slow
def test_scale_model_median_relative_error():
    y, d, x1, z1, z2 = dgp_sample(5000, a=1.0, b=0.0, phi=1.0, seed=3)
    data = Dataset(y=y, d=d, x=np.c_[np.ones(5000), x1], z=np.c_[z1, z2])
    wv = sparsity_weights(data, 0.5)
    truth = PHI0 / ((1.0 + d) * math.sqrt(0.75))
    assert truth[np.argmin(np.abs(d - 10.0))] == pytest.approx(
        PHI0 / (11.0 * math.sqrt(0.75)), rel=1e-2
    )
    assert PHI0 / (11.0 * math.sqrt(0.75)) == pytest.approx(0.04188, abs=1e-5)
    relerr = np.abs(wv.values / truth - 1.0)
    assert np.median(relerr) < 0.20


def test_degenerate_side_fits_cap_everything():
    # exact-fit outcome: both side fits land on the same interpolating
    # coefficients, every quotient divides by zero and lands on the cap
    gen = RngStream(36, 0).generator()
    n = 120
    x1 = gen.uniform(size=n)
    z1 = gen.uniform(size=n)
    d = 1.0 + z1 + 0.3 * gen.standard_normal(n)
    y = 2.0 * d + x1
    data = Dataset(y=y, d=d, x=np.c_[np.ones(n), x1], z=z1[:, None])
    with pytest.warns(RuntimeWarning, match="clipped"):
        wv = sparsity_weights(data, 0.5, AlphaGrid(0.0, 4.0, 0.25))
    assert wv.clipped_count == n
    assert np.all(wv.values == WEIGHT_CAP)


def test_weights_permutation_equivariant():
    n = 400
    y, d, x1, z1, z2 = location_sample(n, seed=13)
    data = Dataset(y=y, d=d, x=np.c_[np.ones(n), x1], z=np.c_[z1, z2])
    wv = sparsity_weights(data, 0.5)
    perm = RngStream(37, 0).generator().permutation(n)
    permuted = Dataset(
        y=y[perm], d=d[perm], x=np.c_[np.ones(n), x1[perm]], z=np.c_[z1[perm], z2[perm]]
    )
    wv_p = sparsity_weights(permuted, 0.5)
    np.testing.assert_allclose(wv_p.values, wv.values[perm], rtol=1e-9, atol=1e-12)
    assert wv_p.clipped_count == wv.clipped_count


@pytest.mark.slow
def test_location_model_dispersion_shrinks_with_n():
    # the limiting weight is constant in the location design, so the spread
    # across observations is pure estimation noise
    cvs = {}
    for n in (800, 6400):
        wv = sparsity_weights(_location_dataset(n, seed=12), 0.5)
        cvs[n] = wv.values.std() / wv.values.mean()
    assert cvs[6400] < 0.8 * cvs[800]
