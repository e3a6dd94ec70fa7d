import numpy as np
import pytest

from plasmapair.mesh import DomainShape, build_mesh


@pytest.fixture(scope="session")
def square16():
    return build_mesh(DomainShape("rectangle", 1.0), 16)


@pytest.fixture(scope="session")
def square24():
    return build_mesh(DomainShape("rectangle", 1.0), 24)


@pytest.fixture(scope="session")
def square48():
    return build_mesh(DomainShape("rectangle", 1.0), 48)


@pytest.fixture(scope="session")
def disk16():
    return build_mesh(DomainShape("disk"), 16)


@pytest.fixture(scope="session")
def disk48():
    return build_mesh(DomainShape("disk"), 48)


@pytest.fixture(scope="session")
def disk96():
    return build_mesh(DomainShape("disk"), 96)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
