"""Shared fixtures.

Screening contexts pay an orbit-correction and discretization cost up
front, so the ones reused across files are session-scoped and share a
single orbit cache directory.
"""

from __future__ import annotations

import numpy as np
import pytest

from trajsampler import screening


@pytest.fixture(scope="session")
def orbit_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("orbit-cache")


@pytest.fixture(scope="session")
def ctx_small(orbit_cache):
    """Reduced screening context at the first homotopy system."""
    return screening.make_context(
        0.0, n_samples=400, tau_s_max=6.0, cache_dir=orbit_cache
    )


@pytest.fixture(scope="session")
def screened_costates(ctx_small):
    """A batch of screened draws with their results, shared read-only."""
    stream = np.random.default_rng(20240817)
    lams = stream.uniform(-0.3, 0.3, (40, 4))
    results = [screening.evaluate(ctx_small, lam) for lam in lams]
    return lams, results
