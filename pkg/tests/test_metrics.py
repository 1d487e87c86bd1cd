import math

import numpy as np
import pytest

from interseries.errors import UndefinedMetricError
from interseries.metrics import rmse, rmsse, rmsse_panel, wbias, wmape


# Independent loop oracles over plain Python floats.

def oracle_wmape(a, f, mask):
    num = den = 0.0
    for x, y, k in zip(a, f, mask):
        if k:
            num += abs(x - y)
            den += abs(x)
    return num / den


def oracle_rmse(a, f, mask):
    s, n = 0.0, 0
    for x, y, k in zip(a, f, mask):
        if k:
            s += (x - y) ** 2
            n += 1
    return math.sqrt(s / n)


def oracle_rmsse(hist, a, f):
    naive = sum((hist[t] - hist[t - 1]) ** 2 for t in range(1, len(hist))) / (len(hist) - 1)
    err = sum((x - y) ** 2 for x, y in zip(a, f)) / len(a)
    return math.sqrt(err / naive)


def oracle_wbias(am, fm, vol):
    return sum(v * abs(x - y) for x, y, v in zip(am, fm, vol)) / sum(vol)


def instances(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        size = int(rng.integers(1, 30))
        a = rng.uniform(0, 100, size) * (rng.random(size) > 0.2)
        f = a + rng.normal(0, 10, size)
        mask = rng.random(size) > 0.3
        mask[rng.integers(size)] = True
        a[mask] += 0.5  # no all-zero actuals among observed entries
        yield rng, a, f, mask


def test_wmape_oracle():
    for _, a, f, k in instances():
        assert abs(wmape(a, f, k) - oracle_wmape(a.tolist(), f.tolist(), k.tolist())) < 1e-9


def test_rmse_oracle():
    for _, a, f, k in instances(seed=1):
        assert abs(rmse(a, f, k) - oracle_rmse(a.tolist(), f.tolist(), k.tolist())) < 1e-9


def test_rmsse_oracle():
    for rng, a, f, _ in instances(seed=2):
        hist = rng.uniform(0, 50, int(rng.integers(2, 40))).tolist()
        assert abs(rmsse(hist, a, f) - oracle_rmsse(hist, a.tolist(), f.tolist())) < 1e-9


def test_wbias_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        m = int(rng.integers(1, 20))
        am, fm = rng.uniform(0, 100, m), rng.uniform(0, 100, m)
        vol = rng.uniform(0, 1000, m) * (rng.random(m) > 0.2)
        vol[0] += 1.0
        assert abs(wbias(am, fm, vol) - oracle_wbias(am.tolist(), fm.tolist(), vol.tolist())) < 1e-9


def test_rmsse_panel_oracle():
    rng = np.random.default_rng(4)
    for _ in range(200):
        m = int(rng.integers(1, 8))
        hs = [rng.uniform(0, 50, int(rng.integers(2, 20))) for _ in range(m)]
        if rng.random() < 0.3:
            hs[0] = np.full(5, 3.0)
        aa = [rng.uniform(0, 50, 3) for _ in range(m)]
        ff = [x + rng.normal(0, 5, 3) for x in aa]
        good = [oracle_rmsse(h.tolist(), a.tolist(), f.tolist()) for h, a, f in zip(hs, aa, ff) if np.ptp(h) > 0]
        if not good:
            with pytest.raises(UndefinedMetricError):
                rmsse_panel(hs, aa, ff)
            continue
        score, excluded = rmsse_panel(hs, aa, ff)
        assert abs(score - sum(good) / len(good)) < 1e-9
        assert excluded == m - len(good)


class TestHandValues:
    def test_wmape(self):
        assert abs(wmape([10, 20], [8, 25]) - 7 / 30) < 1e-9

    def test_rmse(self):
        assert abs(rmse([0, 0], [3, 4]) - math.sqrt(25 / 2)) < 1e-9

    def test_rmsse(self):
        assert abs(rmsse([1, 2, 3], [4, 6], [4, 4]) - math.sqrt(2)) < 1e-9

    def test_wbias(self):
        assert abs(wbias([5], [3], [10]) - 2.0) < 1e-9


class TestProperties:
    def test_perfect_forecasts(self):
        a = np.array([3.0, 0.0, 7.0])
        assert wmape(a, a) == 0 and rmse(a, a) == 0
        assert rmsse([1, 3, 2], a, a) == 0
        assert wbias([1, 2], [1, 2], [3, 4]) == 0

    def test_joint_scaling(self):
        rng = np.random.default_rng(0)
        a, f = rng.uniform(1, 10, 20), rng.uniform(1, 10, 20)
        for c in (0.01, 3.0, 1e4):
            assert wmape(c * a, c * f) == pytest.approx(wmape(a, f), rel=1e-12)
            assert rmse(c * a, c * f) == pytest.approx(c * rmse(a, f), rel=1e-12)

    def test_zero_volume_series_contributes_nothing(self):
        assert wbias([5, 100], [3, 0], [10, 0]) == 2.0

    def test_order_independent(self):
        rng = np.random.default_rng(1)
        a, f = rng.uniform(0, 1e6, 500), rng.uniform(0, 1e6, 500)
        p = rng.permutation(500)
        assert wmape(a, f) == wmape(a[p], f[p])
        assert rmse(a, f) == rmse(a[p], f[p])


class TestUndefined:
    def test_wmape_zero_actuals(self):
        with pytest.raises(UndefinedMetricError):
            wmape([0, 0], [1, 2])

    def test_wmape_all_masked(self):
        with pytest.raises(UndefinedMetricError):
            wmape([1, 2], [1, 2], [False, False])

    def test_rmse_empty(self):
        with pytest.raises(UndefinedMetricError):
            rmse([], [])

    def test_rmsse_constant_history(self):
        with pytest.raises(UndefinedMetricError):
            rmsse([5, 5, 5], [1], [2])

    def test_wbias_zero_volume(self):
        with pytest.raises(UndefinedMetricError):
            wbias([1], [2], [0])
