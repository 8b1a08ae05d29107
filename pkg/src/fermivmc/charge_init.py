"""Electron placement for ions guided by Mulliken partial charges.

Neutral systems put Z_m electrons on atom m. For an ion the surplus or
deficit is distributed one electron at a time: each missing electron is
taken from the currently most positive atom, each extra electron goes to
the currently most negative one, updating the working charges as we go.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ElectronAssignment:
    per_atom_electrons: tuple[int, ...]
    per_atom_up: tuple[int, ...]
    per_atom_down: tuple[int, ...]


def assign_electrons(partial_charges, atomic_numbers, ionic_charge: int) -> tuple[int, ...]:
    """Distribute electrons over atoms for a system of given ionic charge.

    partial_charges come from Mulliken analysis of the ionic system;
    atomic_numbers give the neutral-atom electron counts. Ties in the
    arg-extremum pick the lowest atom index (numpy argmin/argmax order).
    """
    charges = np.array(partial_charges, dtype=float)
    counts = np.array(atomic_numbers, dtype=int)
    if charges.shape != counts.shape or charges.ndim != 1:
        raise ValueError("partial_charges and atomic_numbers must be equal-length 1-D")
    t = int(ionic_charge)
    if counts.sum() - t < 0:
        raise ValueError(f"cannot remove {t} electrons from {counts.sum()}")
    while t != 0:
        if t < 0:
            idx = int(np.argmin(charges))
            counts[idx] += 1
            charges[idx] += 1.0
            t += 1
        else:
            idx = int(np.argmax(charges))
            if counts[idx] == 0:
                raise ValueError(
                    f"charge initialization wants to remove an electron from atom "
                    f"{idx}, which has none left"
                )
            counts[idx] -= 1
            charges[idx] -= 1.0
            t -= 1
    return tuple(int(c) for c in counts)


def split_spins(per_atom_electrons, n_up: int, n_down: int) -> ElectronAssignment:
    """Split per-atom electron counts into up/down, matching global totals.

    Each atom starts at ceil/floor halves (up-major); if the implied totals
    disagree with (n_up, n_down), single electrons are flipped in atom-index
    order until they match.
    """
    counts = [int(c) for c in per_atom_electrons]
    if any(c < 0 for c in counts) or n_up < 0 or n_down < 0:
        raise ValueError("negative electron count")
    if sum(counts) != n_up + n_down:
        raise ValueError(
            f"per-atom electrons sum to {sum(counts)}, expected {n_up + n_down}"
        )
    up = [math.ceil(c / 2) for c in counts]
    down = [c - u for c, u in zip(counts, up)]
    # repair: flip one electron at a time until the spin totals match
    excess = sum(up) - n_up
    idx = 0
    while excess > 0:
        if up[idx] > 0:
            up[idx] -= 1
            down[idx] += 1
            excess -= 1
        idx = (idx + 1) % len(counts)
    while excess < 0:
        if down[idx] > 0:
            down[idx] -= 1
            up[idx] += 1
            excess += 1
        idx = (idx + 1) % len(counts)
    assert sum(up) == n_up and sum(down) == n_down
    return ElectronAssignment(
        per_atom_electrons=tuple(counts),
        per_atom_up=tuple(up),
        per_atom_down=tuple(down),
    )
