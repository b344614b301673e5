"""Differentially private analytics over labeled-homomorphic encrypted data.

Two servers cooperate: an analytics server that only ever sees ciphertexts
and a crypto service provider that holds the decryption key and a privacy
budget. Programs are chains of one-hot table transformations ending in a
noisy measurement.
"""
from .errors import BudgetExhausted, CryptDPError, PlanError, ProtocolError
from .lhe import keygen

__version__ = "0.1.0"

__all__ = ["BudgetExhausted", "CryptDPError", "PlanError", "ProtocolError", "keygen", "__version__"]
