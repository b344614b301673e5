"""Paillier encryption with the generator fixed to g = N + 1.

Messages live in Z_N and ciphertexts in the multiplicative group of Z_{N^2}.
With g = N + 1 encryption reduces to ``(1 + m N) r^N mod N^2``. Arithmetic
runs on gmpy2 integers because pure Python modular exponentiation is roughly
an order of magnitude slower at these sizes.

The key holder knows the factorization, so :class:`PrivateKey` offers two
shortcuts the public side cannot use: CRT decryption and a CRT encryption
path whose N-th residue is built from half-size exponentiations.
"""
from __future__ import annotations

import random
import secrets
from dataclasses import dataclass, field

import gmpy2
from gmpy2 import mpz

from .errors import ConfigurationError, DecodeError, DomainError, KeyMismatchError

MIN_KEY_BITS = 256
DEFAULT_KEY_BITS = 2048
PRIMALITY_ROUNDS = 40

_SYSTEM_RNG = secrets.SystemRandom()


def default_rng(rng=None):
    """Return ``rng`` or the OS-entropy generator when it is ``None``."""
    return _SYSTEM_RNG if rng is None else rng


def make_rng(seed=None):
    """Build the randomness source used for key material and encryption.

    Args:
        seed: Optional 64-bit seed. ``None`` selects OS entropy; an integer
            gives a reproducible ``random.Random`` meant for experiments only.
    """
    if seed is None:
        return _SYSTEM_RNG
    return random.Random(int(seed) & 0xFFFFFFFFFFFFFFFF)


def _random_prime(bits, rng):
    # Top two bits set so that the product of two such primes has exactly 2*bits bits.
    while True:
        candidate = mpz(rng.getrandbits(bits)) | (mpz(3) << (bits - 2)) | 1
        if gmpy2.is_prime(candidate, PRIMALITY_ROUNDS):
            return candidate


@dataclass(frozen=True, eq=False)
class PublicKey:
    """Public modulus ``n``; the generator is implicitly ``n + 1``."""

    n: mpz
    n_square: mpz = field(init=False, repr=False)
    half: mpz = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "n", mpz(self.n))
        object.__setattr__(self, "n_square", self.n * self.n)
        object.__setattr__(self, "half", self.n // 2)

    def __eq__(self, other):
        return isinstance(other, PublicKey) and self.n == other.n

    def __hash__(self):
        return hash(int(self.n))

    @property
    def g(self):
        return self.n + 1

    @property
    def bits(self):
        return int(self.n.bit_length())

    def random_unit(self, rng=None):
        """Sample r uniformly from Z_N^* (rejection on the negligible non-units)."""
        rng = default_rng(rng)
        while True:
            r = mpz(rng.randrange(1, int(self.n)))
            if gmpy2.gcd(r, self.n) == 1:
                return r

    def encrypt(self, m, rng=None):
        """Encrypt ``m`` in Z_N with fresh randomness."""
        m = self._check_message(m)
        rn = gmpy2.powmod(self.random_unit(rng), self.n, self.n_square)
        return Ciphertext((1 + m * self.n) * rn % self.n_square, self)

    def trivial(self, m):
        """Deterministic encryption with r = 1.

        Only valid where the result is later re-randomized before anyone who
        holds the secret key sees it, or where the plaintext is public anyway.
        """
        m = self._check_message(m)
        return Ciphertext((1 + m * self.n) % self.n_square, self)

    def _check_message(self, m):
        m = mpz(m)
        if m < 0 or m >= self.n:
            raise DomainError(f"plaintext must lie in [0, N); got {int(m)}")
        return m

    def to_json(self):
        return {"n": str(self.n)}

    @classmethod
    def from_json(cls, data):
        return cls(mpz(data["n"]))


@dataclass(frozen=True, eq=False)
class PrivateKey:
    """Factorization of the modulus plus precomputed CRT constants."""

    public_key: PublicKey
    p: mpz
    q: mpz

    def __post_init__(self):
        p, q = mpz(self.p), mpz(self.q)
        if p == q or p * q != self.public_key.n:
            raise ConfigurationError("p and q must be distinct factors of N")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        p2, q2 = p * p, q * q
        object.__setattr__(self, "_p2", p2)
        object.__setattr__(self, "_q2", q2)
        g = self.public_key.g
        # h_p = L_p(g^{p-1} mod p^2)^{-1} mod p, likewise for q.
        object.__setattr__(self, "_hp", gmpy2.invert((gmpy2.powmod(g, p - 1, p2) - 1) // p, p))
        object.__setattr__(self, "_hq", gmpy2.invert((gmpy2.powmod(g, q - 1, q2) - 1) // q, q))
        object.__setattr__(self, "_p_inv_q", gmpy2.invert(p, q))
        object.__setattr__(self, "_p2_inv_q2", gmpy2.invert(p2, q2))

    def decrypt(self, c):
        """Recover the plaintext in Z_N from a ciphertext under the matching key."""
        if not isinstance(c, Ciphertext):
            raise DecodeError("expected a Ciphertext")
        if c.public_key is not self.public_key and c.public_key != self.public_key:
            raise KeyMismatchError("ciphertext was produced under a different public key")
        x = c.value
        if x <= 0 or x >= self.public_key.n_square or gmpy2.gcd(x, self.public_key.n) != 1:
            raise DecodeError("value is not an element of Z_{N^2}^*")
        p, q = self.p, self.q
        mp = (gmpy2.powmod(x, p - 1, self._p2) - 1) // p * self._hp % p
        mq = (gmpy2.powmod(x, q - 1, self._q2) - 1) // q * self._hq % q
        return mp + (mq - mp) * self._p_inv_q % q * p

    def random_residue(self, rng=None):
        """A uniformly random N-th residue of Z_{N^2}^*, assembled via CRT.

        The N-th residues form the subgroup of order (p-1)(q-1); its component
        mod p^2 is the image of x -> x^p over Z_p^*, so two half-size
        exponentiations replace one full r^N mod N^2.
        """
        rng = default_rng(rng)
        rp = gmpy2.powmod(mpz(rng.randrange(1, int(self.p))), self.p, self._p2)
        rq = gmpy2.powmod(mpz(rng.randrange(1, int(self.q))), self.q, self._q2)
        return rp + (rq - rp) * self._p2_inv_q2 % self._q2 * self._p2

    def encrypt(self, m, rng=None):
        """Key-holder encryption; same distribution as :meth:`PublicKey.encrypt`."""
        pk = self.public_key
        m = pk._check_message(m)
        return Ciphertext((1 + m * pk.n) * self.random_residue(rng) % pk.n_square, pk)

    def to_json(self):
        return {"n": str(self.public_key.n), "p": str(self.p), "q": str(self.q)}

    @classmethod
    def from_json(cls, data):
        return cls(PublicKey(mpz(data["n"])), mpz(data["p"]), mpz(data["q"]))


@dataclass(frozen=True)
class KeyPair:
    pk: PublicKey
    sk: PrivateKey


@dataclass(frozen=True, slots=True, eq=False)
class Ciphertext:
    """An element of Z_{N^2}^* tagged with the key it was produced under."""

    value: mpz
    public_key: PublicKey

    def __eq__(self, other):
        return (
            isinstance(other, Ciphertext)
            and self.value == other.value
            and self.public_key == other.public_key
        )

    def __hash__(self):
        return hash(int(self.value))

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def to_bytes(self):
        return int(self.value).to_bytes((self.public_key.n_square.bit_length() + 7) // 8, "big")


def keygen(kappa=DEFAULT_KEY_BITS, rng=None):
    """Generate a key pair whose modulus has ``kappa`` bits.

    Args:
        kappa: Modulus bit length; even and at least ``MIN_KEY_BITS``.
        rng: Randomness source, OS entropy when omitted.
    """
    if not isinstance(kappa, int) or kappa < MIN_KEY_BITS or kappa % 2:
        raise ConfigurationError(f"kappa must be an even integer >= {MIN_KEY_BITS}; got {kappa!r}")
    rng = default_rng(rng)
    half = kappa // 2
    p = _random_prime(half, rng)
    q = _random_prime(half, rng)
    while q == p:
        q = _random_prime(half, rng)
    pk = PublicKey(p * q)
    return KeyPair(pk, PrivateKey(pk, p, q))


def encrypt(pk, m, rng=None):
    return pk.encrypt(m, rng)


def decrypt(sk, c):
    return sk.decrypt(c)


def _same_key(c1, c2):
    if c1.public_key is not c2.public_key and c1.public_key != c2.public_key:
        raise KeyMismatchError("ciphertexts were produced under different public keys")
    return c1.public_key


def add(c1, c2):
    """Homomorphic addition: decrypts to (m1 + m2) mod N."""
    pk = _same_key(c1, c2)
    return Ciphertext(c1.value * c2.value % pk.n_square, pk)


def scalar_mult(a, c):
    """Plaintext-scalar multiplication: decrypts to (a * m) mod N."""
    a = mpz(a)
    pk = c.public_key
    if a < 0 or a >= pk.n:
        raise DomainError("scalar must lie in [0, N)")
    return Ciphertext(gmpy2.powmod(c.value, a, pk.n_square), pk)


def subtract(c1, c2):
    """c1 minus c2, computed as c1 plus (N - 1) times c2."""
    pk = _same_key(c1, c2)
    return add(c1, scalar_mult(pk.n - 1, c2))


def add_many(ciphertexts, pk):
    """Sum an iterable of ciphertexts; the empty sum is the trivial encryption of 0."""
    n2 = pk.n_square
    acc = mpz(1)
    for c in ciphertexts:
        acc = acc * c.value % n2
    return Ciphertext(acc, pk)
