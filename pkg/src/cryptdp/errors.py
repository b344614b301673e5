"""Exception hierarchy shared by every layer of the package."""


class CryptDPError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CryptDPError, ValueError):
    """Invalid static configuration, e.g. a key size below the supported minimum."""


class DomainError(CryptDPError, ValueError):
    """A plaintext falls outside the message space it is being mapped into."""


class DecodeError(CryptDPError, ValueError):
    """A ciphertext or wire frame cannot be decoded."""


class KeyMismatchError(CryptDPError, ValueError):
    """Two ciphertexts produced under different public keys were combined."""


class IngestionError(CryptDPError, ValueError):
    """A raw record cannot be encoded against the schema."""


class AggregationError(CryptDPError, ValueError):
    """Encrypted records with incompatible layouts were aggregated."""


class PlanError(CryptDPError, ValueError):
    """A program or operator invocation is malformed."""


class ProtocolError(CryptDPError, RuntimeError):
    """The AS/CSP exchange failed or the peer answered unexpectedly."""


class BudgetExhausted(ProtocolError):
    """The CSP refused a measurement because the privacy budget would be exceeded."""

    def __init__(self, requested, remaining):
        self.requested = requested
        self.remaining = remaining
        super().__init__(
            f"privacy budget exhausted: requested eps={float(requested):g}, "
            f"remaining eps={float(remaining):g}"
        )


class PoolExhausted(CryptDPError, RuntimeError):
    """The offline ciphertext pool is empty and refilling is disabled."""


class UnsupportedQuery(CryptDPError, ValueError):
    """A baseline was asked to answer a query shape it does not support."""
