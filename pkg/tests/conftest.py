import numpy as np
import pytest

from walklab import (
    Density,
    FreeGroup,
    Heisenberg3,
    Lamplighter,
    SymmetricGroup,
    ZdGroup,
)


@pytest.fixture(scope="session")
def z1():
    return ZdGroup(1)


@pytest.fixture(scope="session")
def z2():
    return ZdGroup(2)


@pytest.fixture(scope="session")
def heis():
    return Heisenberg3()


@pytest.fixture(scope="session")
def lamplighter():
    return Lamplighter()


@pytest.fixture(scope="session")
def f2():
    return FreeGroup(2)


@pytest.fixture(scope="session")
def s4():
    return SymmetricGroup(4)


@pytest.fixture(scope="session")
def lazy_z1(z1):
    return Density(z1, {(-1,): 0.25, (0,): 0.5, (1,): 0.25})


@pytest.fixture(scope="session")
def drift_z1(z1):
    return Density(z1, {(-1,): 1 / 6, (0,): 1 / 3, (1,): 1 / 2})


@pytest.fixture(scope="session")
def lazy_z2(z2):
    one = {-1: 0.25, 0: 0.5, 1: 0.25}
    return Density(z2, {(a, b): one[a] * one[b]
                        for a in (-1, 0, 1) for b in (-1, 0, 1)})


@pytest.fixture(scope="session")
def heis_lazy(heis):
    return Density(heis, {g: 0.2 for g in heis.default_generators()})


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240901)


def random_elements(ctx, count, seed=3, radius=5):
    """Deterministic sample of elements from a ball."""
    from walklab import ball

    elems, _ = ball(ctx, radius)
    gen = np.random.default_rng(seed)
    idx = gen.integers(0, len(elems), size=count)
    return [elems[i] for i in idx]


def random_small_density(ctx, seed, max_support=4, radius=2):
    """Seeded random density with support in a small ball."""
    from walklab import ball

    gen = np.random.default_rng(seed)
    elems, _ = ball(ctx, radius)
    count = int(gen.integers(1, max_support + 1))
    idx = gen.choice(len(elems), size=min(count, len(elems)), replace=False)
    weights = gen.random(len(idx)) + 0.05
    weights /= weights.sum()
    return Density(ctx, {elems[i]: float(w) for i, w in zip(idx, weights)})
