import numpy as np
import pytest
from scipy import integrate

from app.core.exceptions import InsufficientDataError
from app.stats.smoothing import kde_epanechnikov, lowess, lowess_frame, normal_scale_bandwidth


def test_kde_integrates_to_one(rng):
    kde = kde_epanechnikov(rng.normal(size=300))
    curve = kde.grid(n_points=20001)

    assert integrate.trapezoid(curve["density"], curve["x"]) == pytest.approx(1.0, abs=1e-3)
    assert (curve["density"] >= 0).all()


def test_kde_is_zero_outside_support(rng):
    kde = kde_epanechnikov(rng.uniform(size=100))
    lo, hi = kde.support

    assert kde([lo - 1e-6, hi + 1e-6, lo - 10, hi + 10]).tolist() == [0.0, 0.0, 0.0, 0.0]
    assert kde((lo + hi) / 2)[0] > 0


def test_kde_single_point_with_bandwidth():
    kde = kde_epanechnikov([0.0], bandwidth=1.0)

    assert kde(0.0)[0] == pytest.approx(0.75)
    assert kde(0.5)[0] == pytest.approx(0.75 * 0.75)


def test_bandwidth_rule():
    values = np.arange(1, 33, dtype=float)
    sd = np.std(values, ddof=1)
    q75, q25 = np.percentile(values, [75, 25])

    expected = 2.34 * min(sd, (q75 - q25) / 1.349) * 32 ** (-0.2)
    assert normal_scale_bandwidth(values) == pytest.approx(expected)


@pytest.mark.parametrize("values", [[1.0], [2.0, 2.0, 2.0]])
def test_kde_needs_spread(values):
    with pytest.raises(InsufficientDataError):
        kde_epanechnikov(values)


@pytest.mark.parametrize("f", [0.2, 0.5, 1.0])
def test_lowess_reproduces_a_line(rng, f):
    x = rng.uniform(-3, 3, size=80)
    y = 2.0 - 0.7 * x

    assert np.max(np.abs(lowess(x, y, f=f) - y)) < 1e-10
    assert np.max(np.abs(lowess(x, y, f=f, robust_iterations=2) - y)) < 1e-10


def test_lowess_robustness_downweights_outlier(rng):
    x = np.linspace(0, 1, 60)
    y = x + rng.normal(scale=0.01, size=60)
    y[30] += 5.0

    plain = lowess(x, y, f=0.3)
    robust = lowess(x, y, f=0.3, robust_iterations=3)
    assert abs(robust[29] - x[29]) < abs(plain[29] - x[29])
    assert abs(robust[29] - x[29]) < 0.05


def test_lowess_tied_x_uses_the_mean():
    fitted = lowess([1.0, 1.0, 1.0, 1.0], [1.0, 2.0, 3.0, 6.0], f=1.0)

    assert fitted.tolist() == pytest.approx([3.0] * 4)


def test_lowess_frame_is_sorted(rng):
    x = rng.normal(size=20)
    frame = lowess_frame(x, x**2, f=0.5)

    assert frame["x"].is_monotonic_increasing
    assert len(frame) == 20


def test_lowess_argument_checks():
    with pytest.raises(InsufficientDataError):
        lowess([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        lowess([1.0, 2.0, 3.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        lowess([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], f=0.0)
