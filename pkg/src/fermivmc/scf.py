"""Unrestricted Hartree-Fock in the minimal Gaussian basis.

Plain Roothaan iteration with density damping on the first few cycles,
plus Mulliken population analysis and occupied-orbital evaluation at
arbitrary points (the pretraining targets for the neural wavefunction).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import BasisSet, basis_values, eri_tensor, kinetic_matrix, nuclear_attraction_matrix, overlap_matrix
from .molecule import Molecule, nuclear_repulsion


@dataclass
class ScfOptions:
    max_iterations: int = 200
    density_tolerance: float = 1e-8   # max|dP| between cycles
    energy_tolerance: float = 1e-10
    damping_factor: float = 0.5       # fraction of old density kept
    damping_iterations: int = 5


@dataclass
class ScfSolution:
    """Converged (or abandoned) UHF state.

    mo_coefficients and density_matrices are (up, down) pairs; orbital
    energies likewise. All matrices are in the raw (nonorthogonal) AO basis.
    """

    mo_coefficients: tuple[np.ndarray, np.ndarray]
    orbital_energies: tuple[np.ndarray, np.ndarray]
    density_matrices: tuple[np.ndarray, np.ndarray]
    total_energy: float
    converged: bool
    iterations: int
    n_up: int
    n_down: int
    overlap: np.ndarray = field(repr=False, default=None)


@dataclass
class MullikenReport:
    populations: np.ndarray
    partial_charges: np.ndarray


def _density(c: np.ndarray, n_occ: int) -> np.ndarray:
    occ = c[:, :n_occ]
    return occ @ occ.T


def run_uhf(mol: Molecule, basis: BasisSet, n_up: int, n_down: int,
            options: ScfOptions | None = None) -> ScfSolution:
    """Solve the UHF equations by damped fixed-point iteration.

    Starts from the core-Hamiltonian guess; each cycle solves the
    generalized eigenproblem F C = S C eps per spin and rebuilds
    densities from the aufbau-occupied columns.
    """
    opts = options or ScfOptions()
    n = basis.n_functions
    if not 0 <= n_down <= n_up <= n:
        raise ValueError(
            f"need 0 <= n_down <= n_up <= {n} basis functions, got ({n_up}, {n_down})"
        )

    s = overlap_matrix(basis)
    hcore = kinetic_matrix(basis) + nuclear_attraction_matrix(basis, mol)
    eri = eri_tensor(basis)
    e_nn = nuclear_repulsion(mol)

    def solve(f):
        eps, c = scipy.linalg.eigh(f, s)
        return eps, c

    eps0, c0 = solve(hcore)
    c_up, c_dn = c0, c0
    eps_up, eps_dn = eps0, eps0
    p_up = _density(c0, n_up)
    p_dn = _density(c0, n_down)

    energy = 0.0
    converged = False
    iterations = 0
    for it in range(1, opts.max_iterations + 1):
        iterations = it
        p_tot = p_up + p_dn
        coulomb = np.einsum("pqrs,rs->pq", eri, p_tot)
        f_up = hcore + coulomb - np.einsum("prqs,rs->pq", eri, p_up)
        f_dn = hcore + coulomb - np.einsum("prqs,rs->pq", eri, p_dn)
        new_energy = 0.5 * (
            np.sum(p_tot * hcore) + np.sum(p_up * f_up) + np.sum(p_dn * f_dn)
        ) + e_nn

        eps_up, c_up = solve(f_up)
        eps_dn, c_dn = solve(f_dn)
        new_up = _density(c_up, n_up)
        new_dn = _density(c_dn, n_down)

        delta_p = max(np.abs(new_up - p_up).max(), np.abs(new_dn - p_dn).max())
        delta_e = abs(new_energy - energy)
        if it > 1 and delta_p < opts.density_tolerance and delta_e < opts.energy_tolerance:
            p_up, p_dn, energy = new_up, new_dn, new_energy
            converged = True
            break

        if it <= opts.damping_iterations:
            lam = opts.damping_factor
            p_up = lam * p_up + (1 - lam) * new_up
            p_dn = lam * p_dn + (1 - lam) * new_dn
        else:
            p_up, p_dn = new_up, new_dn
        energy = new_energy

    return ScfSolution(
        mo_coefficients=(c_up, c_dn),
        orbital_energies=(eps_up, eps_dn),
        density_matrices=(p_up, p_dn),
        total_energy=float(energy),
        converged=converged,
        iterations=iterations,
        n_up=n_up,
        n_down=n_down,
        overlap=s,
    )


def mulliken(scf: ScfSolution, basis: BasisSet, mol: Molecule) -> MullikenReport:
    """Mulliken population analysis: pop_m = sum over mu on atom m of (P S)_mumu."""
    if not scf.converged:
        raise ValueError("Mulliken analysis requires a converged SCF solution")
    p_tot = scf.density_matrices[0] + scf.density_matrices[1]
    ps_diag = np.diag(p_tot @ scf.overlap)
    populations = np.zeros(mol.n_atoms)
    for mu, atom in enumerate(basis.function_to_atom):
        populations[atom] += ps_diag[mu]
    charges = np.asarray(mol.atomic_numbers, dtype=float) - populations
    return MullikenReport(populations=populations, partial_charges=charges)


def hf_orbital_values(scf: ScfSolution, basis: BasisSet,
                      positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the occupied HF orbitals at electron positions.

    positions is (n_electrons, 3) with the up-spin electrons first (the
    global ordering used throughout). Returns (phi_up, phi_dn) of shapes
    (n_up, n_up) and (n_down, n_down): orbital i at electron j.
    """
    positions = np.asarray(positions, dtype=float)
    chi = basis_values(basis, positions)          # (n_electrons, n_ao)
    c_up = scf.mo_coefficients[0][:, : scf.n_up]
    c_dn = scf.mo_coefficients[1][:, : scf.n_down]
    up_rows = chi[: scf.n_up] @ c_up              # electron j x orbital i
    dn_rows = chi[scf.n_up : scf.n_up + scf.n_down] @ c_dn
    return up_rows.T.copy(), dn_rows.T.copy()


def format_matrices(scf: ScfSolution) -> str:
    """Plain-text dump of the converged matrices (C, P, S, eps) per spin."""
    lines = []
    for label, pair in (
        ("mo_coefficients", scf.mo_coefficients),
        ("density", scf.density_matrices),
    ):
        for spin, mat in zip(("up", "down"), pair):
            lines.append(f"[{label} {spin}]")
            for row in np.atleast_2d(mat):
                lines.append(" ".join(f"{x: .12e}" for x in row))
    lines.append("[overlap]")
    for row in scf.overlap:
        lines.append(" ".join(f"{x: .12e}" for x in row))
    for spin, eps in zip(("up", "down"), scf.orbital_energies):
        lines.append(f"[orbital_energies {spin}]")
        lines.append(" ".join(f"{x: .12e}" for x in eps))
    lines.append(f"[total_energy] {scf.total_energy:.12e}")
    lines.append(f"[converged] {scf.converged} after {scf.iterations} iterations")
    return "\n".join(lines) + "\n"
