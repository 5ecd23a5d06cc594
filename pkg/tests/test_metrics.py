import math

import numpy as np
import pytest

from window_diffusion.errors import InputError
from window_diffusion.metrics import kl_divergence, max_relative_deviation, summarize


def brute_kl(p, q, floor=1e-12):
    q = [max(x, floor) for x in q]
    z = sum(q)
    q = [x / z for x in q]
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * math.log(pi / qi)
    return total


def test_identity():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p) == 0.0


def test_closed_form_ln2():
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)


def test_zero_q_stays_finite():
    assert math.isfinite(kl_divergence([0.5, 0.5], [1.0, 0.0]))


def test_errors():
    with pytest.raises(InputError):
        kl_divergence([1.0], [0.5, 0.5])
    with pytest.raises(InputError):
        kl_divergence([0.7, 0.7], [0.5, 0.5])


def test_random_pairs_match_brute_force():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(2, 12))
        p = rng.dirichlet(np.ones(n))
        q = rng.dirichlet(np.ones(n))
        kl = kl_divergence(p, q)
        assert kl >= 0
        worst = max(worst, abs(kl - brute_kl(p.tolist(), q.tolist())))
    assert worst <= 1e-10


def test_summarize():
    s = summarize([1, 2, 3, 4, 5])
    assert s == {"mean": 3.0, "p25": 2.0, "p75": 4.0}
    assert all(math.isnan(v) for v in summarize([]).values())


def test_relative_deviation():
    assert max_relative_deviation([1.0, 2.1], [1.0, 2.0]) == pytest.approx(0.05)
    assert max_relative_deviation([0.0], [0.0]) == 0.0
    with pytest.raises(InputError):
        max_relative_deviation([1.0], [1.0, 2.0])
