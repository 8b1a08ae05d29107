"""Shared fixtures: reference values and prebuilt molecules/SCF solutions."""

import json
from pathlib import Path

import pytest

from fermivmc import basis, molecule, scf

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def reference():
    """Frozen reference values computed by tests/oracles/reference_hf.py."""
    with open(FIXTURES / "reference_values.json") as fh:
        return json.load(fh)


def _molecule_from_entry(entry, charge):
    atoms = tuple(
        molecule.Atom(sym, xyz) for sym, xyz in zip(entry["symbols"], entry["coords"])
    )
    return molecule.Molecule(atoms, charge=charge)


@pytest.fixture(scope="session")
def h_atom():
    return molecule.Molecule((molecule.Atom("H", (0.0, 0.0, 0.0)),))


@pytest.fixture(scope="session")
def h2(reference):
    return _molecule_from_entry(reference["H2_1.4"], charge=0)


@pytest.fixture(scope="session")
def lih(reference):
    return _molecule_from_entry(reference["LiH_3.015"], charge=0)


@pytest.fixture(scope="session")
def lih_cation(reference):
    return _molecule_from_entry(reference["LiH+_4.150"], charge=1)


@pytest.fixture(scope="session")
def h2_basis(h2):
    return basis.build_basis(h2)


@pytest.fixture(scope="session")
def lih_basis(lih):
    return basis.build_basis(lih)


@pytest.fixture(scope="session")
def h2_scf(h2, h2_basis):
    return scf.run_uhf(h2, h2_basis, 1, 1)


@pytest.fixture(scope="session")
def lih_scf(lih, lih_basis):
    return scf.run_uhf(lih, lih_basis, 2, 2)
