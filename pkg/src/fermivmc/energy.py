"""Local energies per walker and the Monte Carlo energy estimate.

E_local = kinetic + el-el + nuc-el + nuc-nuc, with the kinetic part in
log-derivative form: -1/2 sum over all 3N coordinates of
[(d log|psi|/dx)^2 + d^2 log|psi|/dx^2]. Samples whose local energy comes
out non-finite (coincident particles, degenerate determinants) are flagged
and excluded from estimates, with the exclusion count reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ansatz
from .molecule import Molecule, nuclear_repulsion


@dataclass
class LocalEnergyBreakdown:
    kinetic: float
    el_el: float
    nuc_el: float
    nuc_nuc: float

    @property
    def total(self) -> float:
        return self.kinetic + self.el_el + self.nuc_el + self.nuc_nuc


@dataclass
class EnergyEstimate:
    mean: float
    std_error: float
    n_samples: int
    n_flagged: int = 0


def kinetic_energy(params, positions, mol: Molecule, config,
                   derivatives=None) -> float:
    """Kinetic local energy of a single configuration."""
    deriv = derivatives or ansatz.derivatives_batch
    _, _, grad, lap = deriv(params, positions, mol, config)
    return float(-0.5 * ((np.asarray(grad) ** 2).sum() + lap))


def potential_energies(positions, mol: Molecule) -> tuple[float, float, float]:
    """(el_el, nuc_el, nuc_nuc) Coulomb sums; infinities flow on coincidence."""
    pos = np.asarray(positions, dtype=float)
    with np.errstate(divide="ignore"):
        el_el = 0.0
        if len(pos) > 1:
            diff = pos[:, None, :] - pos[None, :, :]
            dist = np.linalg.norm(diff, axis=-1)
            iu = np.triu_indices(len(pos), k=1)
            el_el = float((1.0 / dist[iu]).sum())
        nuc = mol.positions
        z = mol.atomic_numbers
        d_en = np.linalg.norm(pos[:, None, :] - nuc[None, :, :], axis=-1)
        nuc_el = float(-(z[None, :] / d_en).sum())
    return el_el, nuc_el, nuclear_repulsion(mol)


def local_energy(params, positions, mol: Molecule, config,
                 derivatives=None) -> LocalEnergyBreakdown:
    """Full local energy; non-finite parts propagate to the caller."""
    el_el, nuc_el, nuc_nuc = potential_energies(positions, mol)
    kin = kinetic_energy(params, positions, mol, config, derivatives=derivatives)
    return LocalEnergyBreakdown(kinetic=kin, el_el=el_el, nuc_el=nuc_el,
                                nuc_nuc=nuc_nuc)


def local_energy_batch(params, positions, mol: Molecule, config,
                       derivatives=None) -> np.ndarray:
    """Local-energy totals for a (batch, n_electrons, 3) stack of walkers."""
    deriv = derivatives or ansatz.derivatives_batch
    pos = np.asarray(positions, dtype=float)
    _, _, grad, lap = deriv(params, pos, mol, config)
    grad = np.asarray(grad).reshape(pos.shape[0], -1)
    kin = -0.5 * ((grad ** 2).sum(axis=1) + np.asarray(lap))
    pots = np.array([sum(potential_energies(p, mol)) for p in pos])
    return kin + pots


def expected_energy(local_energies, block_size: int | None = None) -> EnergyEstimate:
    """Mean and standard error over unflagged (finite) local energies.

    With block_size, the standard error comes from averages of consecutive
    blocks, which absorbs short-range autocorrelation along a chain; the
    mean is always the plain average of kept samples.
    """
    values = np.asarray(local_energies, dtype=float).ravel()
    keep = np.isfinite(values)
    n_flagged = int((~keep).sum())
    kept = values[keep]
    if kept.size == 0:
        raise ValueError("all local-energy samples are flagged as non-finite")
    mean = float(kept.mean())
    if kept.size == 1:
        return EnergyEstimate(mean, 0.0, 1, n_flagged)
    if block_size and block_size > 1 and kept.size >= 2 * block_size:
        n_blocks = kept.size // block_size
        blocks = kept[: n_blocks * block_size].reshape(n_blocks, block_size).mean(axis=1)
        stderr = float(blocks.std(ddof=1) / np.sqrt(n_blocks))
    else:
        stderr = float(kept.std(ddof=1) / np.sqrt(kept.size))
    return EnergyEstimate(mean, stderr, int(kept.size), n_flagged)
