"""Metropolis-Hastings walkers over electron configurations.

The chain state is a batch of electron position sets; the target density
is |psi|^2, handled throughout as 2*log|psi|. Proposals are joint Gaussian
moves of all electrons. Each walker owns an independent child RNG stream
spawned from the configured seed, so results do not depend on evaluation
order within the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .charge_init import ElectronAssignment
from .molecule import Molecule


@dataclass
class SamplerConfig:
    batch_size: int = 8
    steps_between_updates: int = 10
    proposal_std: float = 0.2     # Bohr, tuned for ~50-60% acceptance on H
    init_std: float = 1.0         # Bohr
    burn_in_steps: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "steps_between_updates", "proposal_std", "init_std"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.burn_in_steps < 0:
            raise ValueError("burn_in_steps must be non-negative")


@dataclass
class WalkerBatch:
    positions: np.ndarray       # (batch, n_electrons, 3)
    log_prob: np.ndarray        # (batch,) cached 2*log|psi|
    accept_count: int = 0
    proposal_count: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accept_count / self.proposal_count if self.proposal_count else 0.0


def make_rngs(seed: int, batch_size: int) -> list[np.random.Generator]:
    """One independent child stream per walker."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(batch_size)]


def _electron_centers(mol: Molecule, assignment: ElectronAssignment) -> np.ndarray:
    """Nucleus position for each global electron index (up block first)."""
    centers = []
    for counts in (assignment.per_atom_up, assignment.per_atom_down):
        for atom_index, count in enumerate(counts):
            centers.extend([mol.atoms[atom_index].position] * count)
    return np.array(centers, dtype=float)


def init_walkers(mol: Molecule, assignment: ElectronAssignment, cfg: SamplerConfig,
                 rngs: list[np.random.Generator], log_psi=None) -> WalkerBatch:
    """Draw initial electron positions around their assigned nuclei.

    Each electron starts at its nucleus plus isotropic Gaussian noise of
    std init_std. When log_psi is given, walkers landing on a non-finite
    log|psi| (e.g. coincident electrons) are redrawn, up to 100 times each,
    and log_prob is filled; otherwise log_prob is NaN until the first
    metropolis_step evaluates it.
    """
    centers = _electron_centers(mol, assignment)
    if len(centers) != mol.n_electrons:
        raise ValueError("assignment electron total inconsistent with molecule")
    batch = len(rngs)
    positions = np.empty((batch, len(centers), 3))
    log_prob = np.full(batch, np.nan)
    for w, rng in enumerate(rngs):
        for attempt in range(100):
            pos = centers + rng.normal(0.0, cfg.init_std, size=centers.shape)
            if log_psi is None:
                ok = _no_coincidence(pos)
            else:
                lp = 2.0 * float(log_psi(pos))
                ok = np.isfinite(lp)
            if ok:
                positions[w] = pos
                if log_psi is not None:
                    log_prob[w] = lp
                break
        else:
            raise RuntimeError(f"walker {w}: no valid start found in 100 draws")
    return WalkerBatch(positions=positions, log_prob=log_prob)


def _no_coincidence(pos: np.ndarray) -> bool:
    if len(pos) < 2:
        return True
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    return bool(dist.min() > 0.0)


def _eval_log_prob(log_psi, positions: np.ndarray) -> np.ndarray:
    """2*log|psi| for a stack of configurations, batched when available."""
    batched = getattr(log_psi, "batch", None)
    if batched is not None:
        return 2.0 * np.asarray(batched(positions), dtype=float)
    return np.array([2.0 * float(log_psi(p)) for p in positions])


def refresh_log_prob(batch: WalkerBatch, log_psi) -> WalkerBatch:
    """Recompute every cached 2*log|psi| (needed after a parameter update)."""
    return WalkerBatch(
        positions=batch.positions.copy(),
        log_prob=_eval_log_prob(log_psi, batch.positions),
        accept_count=batch.accept_count,
        proposal_count=batch.proposal_count,
    )


def metropolis_step(batch: WalkerBatch, log_psi, cfg: SamplerConfig,
                    rngs: list[np.random.Generator]) -> WalkerBatch:
    """One joint-move Metropolis-Hastings update of every walker.

    Per walker: r' = r + N(0, proposal_std) on all coordinates,
    A = 2 log|psi(r')| - 2 log|psi(r)|, accept iff log U(0,1) <= A.
    Non-finite proposals are rejected outright. Each walker's draws come
    from its own stream (one normal block, one uniform), so the result is
    independent of evaluation order.
    """
    positions = batch.positions.copy()
    log_prob = batch.log_prob.copy()
    steps = np.empty_like(positions)
    log_u = np.empty(len(rngs))
    for w, rng in enumerate(rngs):
        steps[w] = rng.normal(0.0, cfg.proposal_std, size=positions[w].shape)
        log_u[w] = np.log(rng.uniform())
    stale = ~np.isfinite(log_prob)
    if stale.any():
        log_prob[stale] = _eval_log_prob(log_psi, positions[stale])
    proposals = positions + steps
    lp_new = _eval_log_prob(log_psi, proposals)
    with np.errstate(invalid="ignore"):
        accept = np.isfinite(lp_new) & (log_u <= lp_new - log_prob)
    positions[accept] = proposals[accept]
    log_prob[accept] = lp_new[accept]
    return WalkerBatch(
        positions=positions,
        log_prob=log_prob,
        accept_count=batch.accept_count + int(accept.sum()),
        proposal_count=batch.proposal_count + len(rngs),
    )


def run_chain(batch: WalkerBatch, log_psi, cfg: SamplerConfig, n_steps: int,
              rngs: list[np.random.Generator]) -> WalkerBatch:
    for _ in range(n_steps):
        batch = metropolis_step(batch, log_psi, cfg, rngs)
    return batch
