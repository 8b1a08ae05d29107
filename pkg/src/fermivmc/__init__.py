"""Variational Monte Carlo for small molecules and ions.

A neural wavefunction ansatz with determinant structure is sampled with
Metropolis-Hastings, pretrained against an internal STO-6G unrestricted
Hartree-Fock solver, and optimized by stochastic energy-gradient descent.
Walker initialization distributes electrons over nuclei according to
Mulliken partial charges. Everything works in Hartree atomic units.
"""

__version__ = "0.1.0"

from . import ansatz, basis, charge_init, cli, energy, molecule, sampler, scf, trainer

__all__ = [
    "__version__",
    "ansatz",
    "basis",
    "charge_init",
    "cli",
    "energy",
    "molecule",
    "sampler",
    "scf",
    "trainer",
]
