"""Pulsed-drive cavity optomechanics: dressed-state dynamics and phonon pairs."""

__version__ = "0.1.0"
