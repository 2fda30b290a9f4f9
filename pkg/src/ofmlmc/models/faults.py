"""Deterministic failure injection around any model."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..streams import uniform_from


class InjectedFailure(RuntimeError):
    pass


@dataclass
class FaultyModel:
    """Fails a ``failure_rate`` fraction of random inputs, plus listed ``fail_omegas``.

    The decision depends on ``omega`` only, so both sides of a pair fail together
    and reruns fail identically.
    """

    inner: object
    failure_rate: float = 0.0
    fail_omegas: frozenset = field(default_factory=frozenset)

    @property
    def name(self):
        return self.inner.name

    @property
    def qoi_names(self):
        return self.inner.qoi_names

    def fails(self, omega: int) -> bool:
        if omega in self.fail_omegas:
            return True
        return self.failure_rate > 0 and uniform_from(omega, b"ofmlmc.fault") < self.failure_rate

    def sample(self, omega: int, level: int):
        if self.fails(omega):
            raise InjectedFailure(f"injected failure for omega {omega:#x}")
        return self.inner.sample(omega, level)

    def params(self) -> dict:
        return {**self.inner.params(), "failure_rate": self.failure_rate}
