"""Fock-state-filtration process model, homodyne simulation and process tomography."""
