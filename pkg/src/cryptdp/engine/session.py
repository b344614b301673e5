"""Wiring of a complete deployment: key pair, CSP, channel and AS."""
from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from ..lhe import make_rng
from .ledger import PrivacyLedger
from .parties import AnalyticsServer, CryptoServiceProvider
from .transport import Channel, CspTcpServer, InProcessTransport, TcpTransport


@dataclass
class Deployment:
    keypair: object
    ledger: PrivacyLedger
    csp: CryptoServiceProvider
    server: AnalyticsServer
    channel: Channel
    tcp_server: object = None

    @property
    def transcript(self):
        return self.channel.transcript

    def close(self):
        self.channel.close()
        if self.tcp_server is not None:
            self.tcp_server.shutdown()
            self.tcp_server.server_close()
        self.csp.pool.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _split_seeds(seed):
    """Independent sub-seeds for the four randomness consumers."""
    if seed is None:
        return None, None, None, None
    base = random.Random(seed)
    return tuple(base.getrandbits(64) for _ in range(4))


def deploy(keypair, budget, transport="inproc", seed=None, unsafe_disable_noise=False,
           ledger_path=None, pool_size=0, record_plaintexts=False):
    """Start a CSP and an AS connected over ``transport``.

    Args:
        keypair: Paillier key pair held by the CSP.
        budget: Total privacy budget enforced by the CSP's ledger.
        transport: ``"inproc"`` or ``"tcp"`` (a CSP server thread on localhost).
        seed: Makes every random choice reproducible; ``None`` uses system entropy.
        unsafe_disable_noise: Turn off noise at both parties (tests only).
        ledger_path: Optional JSON-lines file backing the ledger.
        pool_size: Fresh encryptions of 0 and of 1 to precompute at the CSP.
        record_plaintexts: Keep the CSP's decrypted values for inspection.
    """
    s_as, s_csp, n_as, n_csp = _split_seeds(seed)
    ledger = PrivacyLedger(budget, ledger_path)
    csp = CryptoServiceProvider(
        keypair, ledger, make_rng(s_csp), np.random.default_rng(n_csp),
        unsafe_disable_noise=unsafe_disable_noise, record_plaintexts=record_plaintexts,
    )
    if pool_size:
        csp.pool.fill(zeros=pool_size, ones=pool_size)
    tcp_server = None
    if transport == "inproc":
        carrier = InProcessTransport(csp)
    elif transport == "tcp":
        tcp_server = CspTcpServer(csp)
        tcp_server.serve_in_thread()
        carrier = TcpTransport("127.0.0.1", tcp_server.port)
    else:
        raise ConfigurationError(f"unknown transport {transport!r}")
    channel = Channel(carrier)
    server = AnalyticsServer(keypair.pk, channel, make_rng(s_as), np.random.default_rng(n_as),
                             unsafe_disable_noise=unsafe_disable_noise)
    return Deployment(keypair, ledger, csp, server, channel, tcp_server)
