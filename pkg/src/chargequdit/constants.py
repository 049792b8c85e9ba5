"""Unit system: energies in meV, times in ps, lengths in nm."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    hbar: float = 0.6582119569  # meV ps
    coulomb_k: float = 1439.96  # e^2 / (4 pi eps0), meV nm
    eps_silicon: float = 11.7


CONSTANTS = PhysicalConstants()
HBAR = CONSTANTS.hbar
COULOMB_K = CONSTANTS.coulomb_k
EPS_SILICON = CONSTANTS.eps_silicon
