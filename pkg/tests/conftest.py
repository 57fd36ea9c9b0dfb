"""Shared fixtures and independent reference implementations for the tests."""
import math

import numpy as np
import pytest
from scipy import integrate, stats

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def bs_price(spot, strike, rate, vol, T, call=True):
    """Closed-form Black-Scholes price written out independently of the package."""
    sd = vol * math.sqrt(T)
    d1 = (math.log(spot / strike) + (rate + 0.5 * vol * vol) * T) / sd
    d2 = d1 - sd
    if call:
        return spot * stats.norm.cdf(d1) - strike * math.exp(-rate * T) * stats.norm.cdf(d2)
    return strike * math.exp(-rate * T) * stats.norm.cdf(-d2) - spot * stats.norm.cdf(-d1)


def integrated_variance(spot, rate, vol, T, tails=12.0):
    """Annualised variance-contract price by adaptive quadrature.

    Integrates the good leg ``2 (1 - log(K/S)) C(K) / K^2`` above the spot and
    the bad leg ``2 (1 + log(S/K)) P(K) / K^2`` below it, then scales by
    ``exp(rT) / T``.
    """
    lo = spot * math.exp(-tails * vol * math.sqrt(T))
    hi = spot * math.exp(tails * vol * math.sqrt(T))

    def good(k):
        return 2.0 * (1.0 - math.log(k / spot)) / k**2 * bs_price(spot, k, rate, vol, T, True)

    def bad(k):
        return 2.0 * (1.0 + math.log(spot / k)) / k**2 * bs_price(spot, k, rate, vol, T, False)

    kw = dict(limit=400, epsabs=0.0, epsrel=1e-12)
    up = integrate.quad(good, spot, hi, **kw)[0]
    dn = integrate.quad(bad, lo, spot, **kw)[0]
    return (up + dn) * math.exp(rate * T) / T


def brute_force_nw(e, lags):
    """Bartlett variance of the mean by explicit double loops."""
    e = np.asarray(e, float)
    e = e - e.mean()
    T = len(e)
    total = 0.0
    for t in range(T):
        total += e[t] * e[t]
    for j in range(1, lags + 1):
        w = 1.0 - j / (lags + 1.0)
        acc = 0.0
        for t in range(j, T):
            acc += e[t] * e[t - j]
        total += 2.0 * w * acc
    return total / T**2


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
