"""Molecular geometry, nuclear charges and electron bookkeeping.

All lengths are in Bohr and all energies in Hartree. Geometry files may
declare Angstrom, in which case coordinates are converted while parsing.
"""

from __future__ import annotations

import dataclasses

import numpy as np

# one Bohr expressed in Angstrom (CODATA 2014)
BOHR_RADIUS_ANGSTROM = 0.52917721067

ELEMENT_SYMBOLS = ("H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne")
ATOMIC_NUMBERS = {s: i + 1 for i, s in enumerate(ELEMENT_SYMBOLS)}


def _frozen_array(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("coordinates must be finite")
    arr.flags.writeable = False
    return arr


@dataclasses.dataclass(frozen=True)
class Atom:
    """One nucleus: element symbol and position in Bohr."""

    symbol: str
    position: np.ndarray

    def __post_init__(self):
        symbol = self.symbol.capitalize()
        if symbol not in ATOMIC_NUMBERS:
            raise ValueError(
                f"unsupported element {self.symbol!r}; supported: {' '.join(ELEMENT_SYMBOLS)}"
            )
        object.__setattr__(self, "symbol", symbol)
        object.__setattr__(self, "position", _frozen_array(self.position, (3,)))

    @property
    def atomic_number(self) -> int:
        return ATOMIC_NUMBERS[self.symbol]


@dataclasses.dataclass(frozen=True)
class Molecule:
    """Ordered nuclei plus net ionic charge (+1 means one electron removed).

    spin_multiplicity defaults to the lowest value consistent with electron
    parity: singlet for even counts, doublet for odd.
    """

    atoms: tuple[Atom, ...]
    charge: int = 0
    spin_multiplicity: int | None = None

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if not atoms:
            raise ValueError("molecule needs at least one atom")
        object.__setattr__(self, "atoms", atoms)
        n = self.n_electrons
        if n < 1:
            raise ValueError(f"charge {self.charge} leaves {n} electrons; need at least 1")
        mult = self.spin_multiplicity
        if mult is None:
            mult = 1 if n % 2 == 0 else 2
            object.__setattr__(self, "spin_multiplicity", mult)
        if mult < 1:
            raise ValueError("spin multiplicity must be a positive integer")
        unpaired = mult - 1
        if unpaired > n or (n - unpaired) % 2 != 0:
            raise ValueError(
                f"multiplicity {mult} infeasible for {n} electrons"
            )

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_electrons(self) -> int:
        return sum(a.atomic_number for a in self.atoms) - self.charge

    @property
    def atomic_numbers(self) -> np.ndarray:
        return np.array([a.atomic_number for a in self.atoms], dtype=int)

    @property
    def positions(self) -> np.ndarray:
        """Nuclear coordinates as an (n_atoms, 3) array, Bohr."""
        return np.array([a.position for a in self.atoms], dtype=float)


def parse_geometry(text: str, charge: int = 0, spin_multiplicity: int | None = None) -> Molecule:
    """Parse a geometry file: one atom per line `SYMBOL x y z`.

    An optional header line `units bohr|angstrom` selects the length unit
    (default bohr). Blank lines and `#` comments are ignored.
    """
    scale = 1.0
    atoms = []
    saw_units = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0].lower() == "units":
            if saw_units or atoms:
                raise ValueError(f"line {lineno}: units header must be the first entry")
            if len(tokens) != 2 or tokens[1].lower() not in ("bohr", "angstrom"):
                raise ValueError(f"line {lineno}: units must be 'bohr' or 'angstrom'")
            if tokens[1].lower() == "angstrom":
                scale = 1.0 / BOHR_RADIUS_ANGSTROM
            saw_units = True
            continue
        if len(tokens) != 4:
            raise ValueError(f"line {lineno}: expected 'SYMBOL x y z', got {raw!r}")
        try:
            xyz = [float(t) for t in tokens[1:]]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad coordinate in {raw!r}") from exc
        atoms.append(Atom(tokens[0], np.array(xyz) * scale))
    if not atoms:
        raise ValueError("geometry contains no atoms")
    return Molecule(tuple(atoms), charge=charge, spin_multiplicity=spin_multiplicity)


def nuclear_repulsion(mol: Molecule) -> float:
    """Coulomb repulsion Sum_{m<n} Z_m Z_n / |R_m - R_n| in Hartree."""
    z = mol.atomic_numbers
    pos = mol.positions
    energy = 0.0
    for m in range(mol.n_atoms):
        for n in range(m + 1, mol.n_atoms):
            dist = float(np.linalg.norm(pos[m] - pos[n]))
            if dist == 0.0:
                raise ValueError(f"nuclei {m} and {n} coincide")
            energy += z[m] * z[n] / dist
    return energy


def electron_count(mol: Molecule) -> tuple[int, int]:
    """Spin-resolved electron counts (n_up, n_down), n_up >= n_down.

    With an explicit multiplicity, n_up - n_down = multiplicity - 1;
    otherwise the lowest-multiplicity default applies.
    """
    n = mol.n_electrons
    unpaired = mol.spin_multiplicity - 1
    n_up = (n + unpaired) // 2
    return n_up, n - n_up
