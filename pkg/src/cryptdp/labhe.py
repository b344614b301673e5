"""Labeled homomorphic encryption on top of Paillier.

A labeled ciphertext is a pair ``(a, d)`` with ``d = Enc(b)`` for a
pseudorandom mask ``b = F(seed, label)`` and ``a = m - b``, so the plaintext
is ``a + Dec(d)``. Knowing the cleartext ``a`` components is what allows one
ciphertext-ciphertext multiplication without interaction:

    labMult((a1, d1), (a2, d2)) = Enc(a1 a2) + a2 * d1 + a1 * d2

which decrypts to ``m1 m2 - b1 b2``. The key holder finishes the job by
adding ``Dec(d1) Dec(d2)``.

:class:`MultCiphertext` generalises that idea to sums of such products, and
:func:`gen_lab_mult_batch` runs the interactive protocol that turns n-way
products back into fresh labeled ciphertexts in ceil(log2 n) round trips.
"""
from __future__ import annotations

import hashlib
import hmac
import threading
from dataclasses import dataclass, field

import gmpy2
from gmpy2 import mpz

from .errors import KeyMismatchError, PlanError
from .lhe import Ciphertext, PublicKey, add_many, default_rng, scalar_mult

SEED_BYTES = 32
DERIVED_LABEL = "~"


def new_seed(rng=None):
    """A fresh PRF seed drawn from ``rng`` (OS entropy by default)."""
    return default_rng(rng).getrandbits(8 * SEED_BYTES).to_bytes(SEED_BYTES, "big")


def prf(seed, label, modulus):
    """F(seed, label): HMAC-SHA256 in counter mode, reduced mod ``modulus``.

    128 surplus bits keep the reduction bias negligible.
    """
    modulus = mpz(modulus)
    need = (int(modulus.bit_length()) + 128 + 7) // 8
    msg = label.encode("utf-8")
    out = bytearray()
    counter = 0
    while len(out) < need:
        out += hmac.new(seed, counter.to_bytes(4, "big") + msg, hashlib.sha256).digest()
        counter += 1
    return mpz(int.from_bytes(bytes(out[:need]), "big")) % modulus


@dataclass(eq=False)
class LabKeyMaterial:
    """Per-party labeling secret: a PRF seed and, optionally, its published encryption."""

    seed: bytes
    user_pk: Ciphertext | None = None
    _used: set = field(default_factory=set, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def mask(self, label, modulus):
        if __debug__:
            with self._lock:
                assert label not in self._used, f"label reused under one seed: {label}"
                self._used.add(label)
        return prf(self.seed, label, modulus)


def local_gen(pk, rng=None, publish=True):
    """Create labeling key material for one party.

    Args:
        pk: Paillier public key.
        rng: Randomness source; OS entropy when omitted.
        publish: Also compute ``user_pk``, the encryption of the seed, which
            costs one public-key encryption.
    """
    rng = default_rng(rng)
    seed = new_seed(rng)
    user_pk = pk.encrypt(int.from_bytes(seed, "big") % pk.n, rng) if publish else None
    return LabKeyMaterial(seed=seed, user_pk=user_pk)


@dataclass(frozen=True, slots=True, eq=False)
class LabCiphertext:
    """Labeled ciphertext: cleartext ``a = m - b`` and ``d = Enc(b)``."""

    a: mpz
    d: Ciphertext
    label: str = DERIVED_LABEL

    @property
    def public_key(self):
        return self.d.public_key

    def __add__(self, other):
        return lab_add(self, other)


def lab_encrypt(pk, keys, m, label, rng=None):
    """labEnc: mask ``m`` with ``b = F(seed, label)`` and encrypt the mask."""
    m = mpz(m) % pk.n
    b = keys.mask(label, pk.n)
    return LabCiphertext((m - b) % pk.n, pk.encrypt(b, rng), label)


def lab_trivial(pk, m):
    """Labeled encoding of a public constant: ``a = m`` and ``d`` the identity ciphertext."""
    return LabCiphertext(mpz(m) % pk.n, Ciphertext(mpz(1), pk), DERIVED_LABEL)


def lab_decrypt(sk, c):
    return (c.a + sk.decrypt(c.d)) % sk.public_key.n


def lab_add(c1, c2):
    pk = c1.d.public_key
    if c2.d.public_key is not pk and c2.d.public_key != pk:
        raise KeyMismatchError("labeled ciphertexts were produced under different keys")
    return LabCiphertext((c1.a + c2.a) % pk.n, Ciphertext(c1.d.value * c2.d.value % pk.n_square, pk))


def lab_sum(items, pk):
    """Sum of labeled ciphertexts; the empty sum encodes 0."""
    a = mpz(0)
    ds = []
    for c in items:
        a += c.a
        ds.append(c.d)
    return LabCiphertext(a % pk.n, add_many(ds, pk))


def lab_scalar_mult(k, c):
    pk = c.d.public_key
    k = mpz(k) % pk.n
    return LabCiphertext(c.a * k % pk.n, scalar_mult(k, c.d))


def lab_sub(c1, c2):
    return lab_add(c1, lab_scalar_mult(c1.d.public_key.n - 1, c2))


def _lab_mult_core(c1, c2, enc_a1a2):
    pk = c1.d.public_key
    if c2.d.public_key is not pk and c2.d.public_key != pk:
        raise KeyMismatchError("labeled ciphertexts were produced under different keys")
    n2 = pk.n_square
    v = gmpy2.powmod(c1.d.value, c2.a, n2) * gmpy2.powmod(c2.d.value, c1.a, n2) % n2
    return Ciphertext(enc_a1a2.value * v % n2, pk)


def lab_mult(c1, c2, rng=None):
    """labMult: a Paillier ciphertext of ``m1 m2 - b1 b2``."""
    pk = c1.d.public_key
    return _lab_mult_core(c1, c2, pk.encrypt(c1.a * c2.a % pk.n, rng))


def lab_mult_dec(sk, d1, d2, e):
    """labMultDec: ``Dec(e) + Dec(d1) Dec(d2)``, i.e. the product ``m1 m2``."""
    return (sk.decrypt(e) + sk.decrypt(d1) * sk.decrypt(d2)) % sk.public_key.n


@dataclass(frozen=True, slots=True, eq=False)
class MultCiphertext:
    """A sum of labeled ciphertexts and labMult products, still decryptable.

    Plaintext = ``a + Dec(e) + sum(Dec(d1) * Dec(d2) for d1, d2 in pairs)``.
    ``a`` is a cleartext offset known to the AS only; it must be folded into
    ``e`` under fresh randomness before the value is shown to the key holder
    (see :meth:`seal`).
    """

    a: mpz
    e: Ciphertext
    pairs: tuple = ()

    @property
    def public_key(self):
        return self.e.public_key

    @property
    def degree(self):
        return 2 if self.pairs else 1

    @classmethod
    def lift(cls, c):
        return cls(c.a, c.d, ())

    @classmethod
    def product(cls, c1, c2):
        """Local degree-2 product of two labeled ciphertexts.

        ``Enc(a1 a2)`` is the deterministic encryption here; the randomness is
        restored by :meth:`seal` before anything reaches the key holder.
        """
        pk = c1.d.public_key
        return cls(mpz(0), _lab_mult_core(c1, c2, pk.trivial(c1.a * c2.a % pk.n)), ((c1.d, c2.d),))

    @classmethod
    def total(cls, items, pk):
        """Sum many values in one pass."""
        a = mpz(0)
        es = []
        pairs = []
        for x in items:
            if isinstance(x, LabCiphertext):
                a += x.a
                es.append(x.d)
            else:
                a += x.a
                es.append(x.e)
                pairs.extend(x.pairs)
        return cls(a % pk.n, add_many(es, pk), tuple(pairs))

    def __add__(self, other):
        return MultCiphertext.total((self, other), self.e.public_key)

    def scale(self, k):
        pk = self.e.public_key
        k = mpz(k) % pk.n
        return MultCiphertext(
            self.a * k % pk.n,
            scalar_mult(k, self.e),
            tuple((scalar_mult(k, d1), d2) for d1, d2 in self.pairs),
        )

    def seal(self, offset, rng=None):
        """Fold ``a + offset`` into ``e`` under fresh encryption randomness.

        Returns ``(e', pairs)`` whose joint decryption is ``m + offset``;
        this is the only form in which AS-held values travel to the CSP.
        """
        pk = self.e.public_key
        fresh = pk.encrypt((self.a + mpz(offset)) % pk.n, rng)
        return Ciphertext(self.e.value * fresh.value % pk.n_square, pk), self.pairs


def decrypt_sealed(sk, e, pairs):
    """Key-holder decryption of a sealed value (generalised labMultDec)."""
    n = sk.public_key.n
    total = sk.decrypt(e)
    for d1, d2 in pairs:
        total += sk.decrypt(d1) * sk.decrypt(d2)
    return total % n


def decrypt_value(sk, x):
    """Decrypt a :class:`LabCiphertext` or :class:`MultCiphertext` (tests and oracles)."""
    if isinstance(x, LabCiphertext):
        return lab_decrypt(sk, x)
    return (x.a + decrypt_sealed(sk, x.e, x.pairs)) % sk.public_key.n


def _draw_mask(pk, rng):
    return mpz(default_rng(rng).randrange(int(pk.n)))


class Relabeler:
    """Key-holder side of the relabel step of the multiplication protocol.

    Each request item is a sealed product ``m1 m2 + r``; the key holder
    decrypts it, picks a fresh mask ``b' = F(seed', tau')`` and answers with
    ``(value - b', Enc(b'), tau')``. Labels come from a per-session counter.
    """

    def __init__(self, sk, rng=None, session="s0"):
        self.sk = sk
        self.rng = default_rng(rng)
        self.session = session
        self.keys = LabKeyMaterial(seed=new_seed(self.rng))
        self._counter = 0
        self._lock = threading.Lock()

    def next_label(self):
        with self._lock:
            self._counter += 1
            return f"{self.session}/{self._counter}"

    def fresh(self, m, label=None):
        """A fresh labeled encryption of ``m`` under the key holder's seed."""
        pk = self.sk.public_key
        label = label or self.next_label()
        b = self.keys.mask(label, pk.n)
        return LabCiphertext((mpz(m) - b) % pk.n, self.sk.encrypt(b, self.rng), label)

    def relabel_value(self, value):
        """Turn an already decrypted masked value into a fresh labeled ciphertext."""
        return self.fresh(value)

    def relabel(self, items):
        out = []
        for e, pairs in items:
            out.append(self.relabel_value(decrypt_sealed(self.sk, e, pairs)))
        return out


def _round(pk, pairs, exchange, rng):
    """One batched round: seal each pair product with a fresh mask, relabel remotely."""
    masks = []
    items = []
    for c1, c2 in pairs:
        r = _draw_mask(pk, rng)
        masks.append(r)
        items.append(MultCiphertext.product(c1, c2).seal(r, rng))
    replies = exchange(items)
    if len(replies) != len(items):
        raise PlanError("relabel reply has the wrong length")
    return [LabCiphertext((rep.a - r) % pk.n, rep.d, rep.label) for rep, r in zip(replies, masks)]


def gen_lab_mult_batch(pk, products, exchange, rng=None):
    """Multiply several factor lists at once in a balanced tree.

    All sibling products of one tree level, across every factor list, travel
    in a single exchange, so the number of round trips is ceil(log2 n) for
    the longest list. Identical factor pairs within a level (same objects)
    are multiplied once.

    Args:
        pk: Public key.
        products: Sequence of non-empty sequences of :class:`LabCiphertext`.
        exchange: Callable taking a list of sealed ``(e', pairs)`` items and
            returning one relabeled :class:`LabCiphertext` per item (``a``
            still masked by the sender's ``r``).
        rng: Randomness for masks and encryption.

    Returns:
        One labeled ciphertext per factor list.
    """
    current = [list(fs) for fs in products]
    if any(not fs for fs in current):
        raise PlanError("empty factor list")
    while any(len(fs) > 1 for fs in current):
        pairs = []
        index = {}
        layout = []
        for fs in current:
            nxt = []
            for j in range(0, len(fs) - 1, 2):
                key = (id(fs[j]), id(fs[j + 1]))
                if key not in index:
                    index[key] = len(pairs)
                    pairs.append((fs[j], fs[j + 1]))
                nxt.append(index[key])
            if len(fs) % 2:
                nxt.append(fs[-1])
            layout.append(nxt)
        results = _round(pk, pairs, exchange, rng)
        current = [[results[x] if isinstance(x, int) else x for x in nxt] for nxt in layout]
    return [fs[0] for fs in current]


def gen_lab_mult(pk, inputs, exchange, rng=None):
    """Product of ``n`` labeled ciphertexts as a fresh labeled ciphertext."""
    return gen_lab_mult_batch(pk, [list(inputs)], exchange, rng)[0]


def local_exchange(relabeler):
    """An exchange callable that talks to a :class:`Relabeler` directly (no wire)."""
    return relabeler.relabel
