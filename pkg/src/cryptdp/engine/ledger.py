"""The public privacy ledger kept by the CSP."""
from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass
from fractions import Fraction

EPS_DENOMINATOR = 10**12


def as_fraction(eps):
    """Exact rational view of a float budget so boundary requests compare exactly."""
    return Fraction(eps).limit_denominator(EPS_DENOMINATOR) if not isinstance(eps, Fraction) else eps


@dataclass(frozen=True)
class LedgerEntry:
    kind: str  # "spend" or "refusal"
    program_id: str
    description: str
    sensitivity: int
    epsilon: str
    timestamp: float
    cumulative: str

    @property
    def eps(self):
        return Fraction(self.epsilon)

    @property
    def cumulative_eps(self):
        return Fraction(self.cumulative)


class PrivacyLedger:
    """Append-only record of privacy spending with a hard cap ``budget``.

    Args:
        budget: Total epsilon the CSP will ever release answers for.
        path: Optional JSON-lines file; existing entries are replayed on open
            and every new entry is appended and flushed.
    """

    def __init__(self, budget, path=None, clock=time.time):
        self.budget = as_fraction(budget)
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        self.path = path
        self._clock = clock
        self._entries = []
        self._spent = Fraction(0)
        self._lock = threading.Lock()
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    for line in fh:
                        if line.strip():
                            entry = LedgerEntry(**json.loads(line))
                            self._entries.append(entry)
                            if entry.kind == "spend":
                                self._spent = entry.cumulative_eps
            except FileNotFoundError:
                pass
            if self._spent > self.budget:
                raise ValueError("ledger file already exceeds the configured budget")

    @property
    def entries(self):
        return tuple(self._entries)

    @property
    def spent(self):
        return self._spent

    @property
    def remaining(self):
        return self.budget - self._spent

    def check(self, eps):
        """Would spending ``eps`` keep the total within budget? (boundary included)"""
        return self._spent + as_fraction(eps) <= self.budget

    def request(self, program_id, description, sensitivity, eps):
        """Atomically check and record one measurement.

        Returns:
            ``True`` and a spend entry on acceptance; ``False`` and a refusal
            entry otherwise. The cumulative total never exceeds the budget.
        """
        eps = as_fraction(eps)
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        with self._lock:
            ok = self._spent + eps <= self.budget
            if ok:
                self._spent += eps
            self._append(LedgerEntry(
                "spend" if ok else "refusal",
                str(program_id),
                str(description),
                int(sensitivity),
                str(eps),
                float(self._clock()),
                str(self._spent),
            ))
            return ok

    def _append(self, entry):
        self._entries.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(entry), sort_keys=True) + "\n")

    def to_json(self):
        return {
            "budget": str(self.budget),
            "spent": str(self._spent),
            "entries": [asdict(e) for e in self._entries],
        }
