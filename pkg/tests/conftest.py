"""Shared fixtures: the test mechanisms and their spectral data.

The six mechanisms cover one of each structural situation the library
has to handle: a single-type diffusion with fully known closed forms, a
symmetric pair with a slow second eigenvalue, the same pair tuned so the
second eigenvalue sits exactly at half the first, a pair with the second
eigenvalue above half, a three-type cycle whose subdominant pair is
complex, a pure-jump single type, and a three-type mechanism whose mean
matrix is defective (one Jordan chain of length 2).
"""

from dataclasses import dataclass

import numpy as np
import pytest

from branchlab.model import JumpAtom, Mechanism, dump_model, mean_matrix
from branchlab.semigroup import SpectralData, spectral_decompose


@dataclass(frozen=True)
class Case:
    mech: Mechanism
    spec: SpectralData

    @property
    def B(self) -> np.ndarray:
        return mean_matrix(self.mech).B


def _case(mech: Mechanism) -> Case:
    return Case(mech=mech, spec=spectral_decompose(mean_matrix(mech).B))


@pytest.fixture(scope="session")
def feller() -> Case:
    """K=1, a=-1, b=1/2: Feller diffusion, lambda1 = 1, phi = phitilde = 1."""
    return _case(Mechanism(K=1, a=(-1.0,), b=(0.5,), eta=((0.0,),)))


@pytest.fixture(scope="session")
def symmetric_pair() -> Case:
    """K=2 symmetric, spectrum {1.5, 0.5}: subdominant below lambda1/2."""
    return _case(Mechanism(K=2, a=(-1.0, -1.0), b=(0.5, 0.5),
                           eta=((0.0, 0.5), (0.5, 0.0))))


@pytest.fixture(scope="session")
def critical_pair() -> Case:
    """K=2 symmetric, spectrum {2, 1}: subdominant exactly at lambda1/2."""
    return _case(Mechanism(K=2, a=(-1.5, -1.5), b=(0.5, 0.5),
                           eta=((0.0, 0.5), (0.5, 0.0))))


@pytest.fixture(scope="session")
def large_pair() -> Case:
    """K=2 symmetric, spectrum {2, 1.5}: subdominant above lambda1/2."""
    return _case(Mechanism(K=2, a=(-1.75, -1.75), b=(0.5, 0.5),
                           eta=((0.0, 0.25), (0.25, 0.0))))


@pytest.fixture(scope="session")
def cyclic_triple() -> Case:
    """K=3 cyclic, spectrum {3, 1.5 +/- i sqrt(3)/2}: complex subdominant pair."""
    return _case(Mechanism(K=3, a=(-2.0, -2.0, -2.0), b=(0.5, 0.5, 0.5),
                           eta=((0.0, 1.0, 0.0),
                                (0.0, 0.0, 1.0),
                                (1.0, 0.0, 0.0))))


@pytest.fixture(scope="session")
def pure_jump() -> Case:
    """K=1, b=0, one compensated atom: lambda1 = 1, sigma^2_phi = 1/2."""
    return _case(Mechanism(K=1, a=(-1.0,), b=(0.0,), eta=((0.0,),),
                           jumps=((JumpAtom(rate=0.5, vector=(1.0,)),),)))


@pytest.fixture(scope="session")
def defective_triple() -> Case:
    """K=3 with B = [[1,1,0],[1,2,1],[1,0,2]]: eigenvalue 1 is defective
    (a single chain of length 2), lambda1 = 3."""
    return _case(Mechanism(K=3, a=(-1.0, -2.0, -2.0), b=(0.5, 0.5, 0.5),
                           eta=((0.0, 1.0, 0.0),
                                (1.0, 0.0, 1.0),
                                (1.0, 0.0, 0.0))))


@pytest.fixture()
def model_file(tmp_path):
    """Write a mechanism to a JSON model file and return the path."""

    def write(mech: Mechanism, name: str = "model.json"):
        path = tmp_path / name
        dump_model(mech, path)
        return path

    return write
