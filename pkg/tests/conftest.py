import numpy as np
import pytest

from ctsev import _kernels
from ctsev.phantom import PhantomSpec


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # Compile the JIT kernels once so timed tests measure steady state.
    _kernels.warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def random_phantom_spec(rng, seed, max_dim=32, max_lung=0.9):
    """A randomized but valid phantom recipe (dims up to max_dim per axis)."""
    dims = tuple(int(d) for d in rng.integers(6, max_dim + 1, 3))
    spacing = tuple(float(s) for s in rng.uniform(0.5, 3.0, 3))
    seg = rng.dirichlet(np.ones(18)) * rng.uniform(0.4, max_lung)
    inf = rng.uniform(0.0, 1.0, 18)
    return PhantomSpec(
        dims=dims,
        spacing_mm=spacing,
        segment_fractions=tuple(float(f) for f in seg),
        infection_fractions=tuple(float(f) for f in inf),
        consolidation_share=float(rng.uniform(0.0, 1.0)),
        calcification_share=float(rng.uniform(0.0, 0.1)),
        seed=seed,
    )
