"""Persistent campaign storage: sample ledger, sandboxes and controller state.

Layout of one campaign directory::

    <root>/<campaign_id>/
        config.json       campaign configuration echo
        ledger.jsonl      append-only sample records, first line is the header
        state.json        controller state (written atomically)
        samples/L{l}_{i:06d}/{input.json,output.json,log.txt}
        report/           post-processing products

Each ledger record is one JSON object per line whose first field is the key,
so a damaged line can still be attributed to its sample.
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import StoreError
from .models.base import ModelSample
from .streams import SampleKey

log = logging.getLogger(__name__)

LEDGER_HEADER = "# OFMLMC-LEDGER v1"
_KEY_RE = re.compile(r'^\{"key": \[(\d+), (\d+), (\d+)\]')

DONE = "done"
FAILED = "failed"
PENDING = "pending"


@dataclass
class LedgerEntry:
    key: SampleKey
    status: str
    fine: ModelSample | None = None
    coarse: ModelSample | None = None
    work: float = 0.0
    wall_time: float = 0.0
    reason: str = ""
    sandbox: str = ""

    def __post_init__(self):
        self.key = SampleKey(*self.key)
        if self.status not in (DONE, FAILED, PENDING):
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == FAILED and not self.reason:
            raise ValueError("failed entries need a reason")
        if self.status == DONE:
            if self.fine is None or (self.key.level > 0 and self.coarse is None):
                raise ValueError("done entries need complete payloads")

    def to_json(self) -> str:
        d = {
            "key": list(self.key),
            "status": self.status,
            "fine": None if self.fine is None else self.fine.to_dict(),
            "coarse": None if self.coarse is None else self.coarse.to_dict(),
            "work": self.work,
            "wall_time": self.wall_time,
            "reason": self.reason,
            "sandbox": self.sandbox,
        }
        return json.dumps(d, allow_nan=True)

    @classmethod
    def from_json(cls, line: str) -> "LedgerEntry":
        d = json.loads(line)
        return cls(
            key=SampleKey(*d["key"]),
            status=d["status"],
            fine=None if d["fine"] is None else ModelSample.from_dict(d["fine"]),
            coarse=None if d["coarse"] is None else ModelSample.from_dict(d["coarse"]),
            work=float(d.get("work", 0.0)),
            wall_time=float(d.get("wall_time", 0.0)),
            reason=d.get("reason", ""),
            sandbox=d.get("sandbox", ""),
        )


@dataclass
class SampleLedger:
    """In-memory view of all sample records of a campaign, keyed by sample."""

    entries: dict = field(default_factory=dict)

    def add(self, entry: LedgerEntry) -> bool:
        """Record an entry; a key already present keeps its first record."""
        if entry.key in self.entries:
            return False
        self.entries[entry.key] = entry
        return True

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def level_entries(self, level: int) -> list[LedgerEntry]:
        out = [e for k, e in self.entries.items() if k.level == level]
        out.sort(key=lambda e: e.key)
        return out

    def levels(self) -> list[int]:
        return sorted({k.level for k in self.entries})

    def next_index(self, level: int) -> int:
        idx = [k.index for k in self.entries if k.level == level]
        return max(idx) + 1 if idx else 0

    def counts(self, level: int) -> tuple[int, int]:
        """``(done, failed)`` on a difference level."""
        done = failed = 0
        for k, e in self.entries.items():
            if k.level == level:
                if e.status == DONE:
                    done += 1
                elif e.status == FAILED:
                    failed += 1
        return done, failed

    def computed(self, level: int) -> int:
        return sum(self.counts(level))

    def qoi_names(self) -> list[str]:
        for e in self.entries.values():
            if e.status == DONE:
                return list(e.fine.qoi)
        return []

    def series_names(self) -> list[str]:
        for e in self.entries.values():
            if e.status == DONE:
                return list(e.fine.series)
        return []

    def valid_samples(self, level: int, qoi: str) -> np.ndarray:
        """Done samples of one QoI: shape ``(n,)`` on level 0, ``(n, 2)`` above."""
        done = [e for e in self.level_entries(level) if e.status == DONE]
        if done and qoi not in done[0].fine.qoi:
            raise KeyError(f"unknown QoI {qoi!r}; available: {sorted(done[0].fine.qoi)}")
        if level == 0:
            return np.array([e.fine.qoi[qoi] for e in done], dtype=float)
        return np.array([(e.fine.qoi[qoi], e.coarse.qoi[qoi]) for e in done], dtype=float).reshape(-1, 2)

    def valid_series(self, level: int, name: str):
        """Done time series ``(grid, fine, coarse)``; ``coarse`` is None on level 0."""
        done = [e for e in self.level_entries(level) if e.status == DONE]
        if not done:
            return None, np.empty((0, 0)), None
        grid = done[0].fine.series[name][0]
        fine = np.array([e.fine.series[name][1] for e in done])
        coarse = None if level == 0 else np.array([e.coarse.series[name][1] for e in done])
        return grid, fine, coarse


def sandbox_name(key: SampleKey) -> str:
    return f"L{key.level}_{key.index:06d}"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class CampaignStore:
    """One campaign directory under a store root."""

    def __init__(self, root, campaign_id: str, sandboxes: bool = True):
        if not campaign_id or "/" in campaign_id or campaign_id in (".", ".."):
            raise StoreError(f"invalid campaign id {campaign_id!r}")
        self.root = Path(root)
        self.campaign_id = campaign_id
        self.path = self.root / campaign_id
        self.sandboxes = sandboxes

    @property
    def ledger_path(self) -> Path:
        return self.path / "ledger.jsonl"

    @property
    def state_path(self) -> Path:
        return self.path / "state.json"

    @property
    def config_path(self) -> Path:
        return self.path / "config.json"

    @property
    def report_dir(self) -> Path:
        return self.path / "report"

    @property
    def samples_dir(self) -> Path:
        return self.path / "samples"

    def exists(self) -> bool:
        return self.ledger_path.exists()

    def create(self) -> None:
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            if not self.ledger_path.exists():
                with open(self.ledger_path, "w") as fh:
                    fh.write(LEDGER_HEADER + "\n")
        except OSError as exc:
            raise StoreError(f"cannot create campaign directory {self.path}: {exc}") from exc

    def sandbox(self, key: SampleKey) -> Path | None:
        if not self.sandboxes:
            return None
        return self.samples_dir / sandbox_name(key)

    def append(self, entries) -> None:
        """Append records and flush them to disk before returning."""
        if not entries:
            return
        try:
            with open(self.ledger_path, "a") as fh:
                for e in entries:
                    fh.write(e.to_json() + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StoreError(f"cannot append to {self.ledger_path}: {exc}") from exc

    def load_ledger(self) -> SampleLedger:
        """Read the ledger; damaged records come back as failed entries."""
        if not self.ledger_path.exists():
            raise StoreError(f"no campaign at {self.path}")
        ledger = SampleLedger()
        with open(self.ledger_path) as fh:
            lines = fh.read().split("\n")
        if not lines or lines[0].strip() != LEDGER_HEADER:
            raise StoreError(f"{self.ledger_path}: missing header {LEDGER_HEADER!r}")
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                entry = LedgerEntry.from_json(line)
            except (ValueError, KeyError, TypeError) as exc:
                m = _KEY_RE.match(line)
                if m is None:
                    log.warning("%s:%d: unreadable record dropped (%s)", self.ledger_path, lineno, exc)
                    continue
                key = SampleKey(int(m.group(1)), int(m.group(2)), int(m.group(3)))
                log.warning("%s:%d: corrupt record for %s marked failed", self.ledger_path, lineno, key)
                entry = LedgerEntry(key, FAILED, reason=f"corrupt record: {exc}")
            ledger.add(entry)
        return ledger

    def save_state(self, state: dict) -> None:
        try:
            _atomic_write(self.state_path, json.dumps(state, indent=1, sort_keys=True))
        except OSError as exc:
            raise StoreError(f"cannot write {self.state_path}: {exc}") from exc

    def load_state(self) -> dict | None:
        if not self.state_path.exists():
            return None
        with open(self.state_path) as fh:
            return json.load(fh)

    def save_config(self, config: dict) -> None:
        self.create()
        _atomic_write(self.config_path, json.dumps(config, indent=1, sort_keys=True))

    def load_config(self) -> dict:
        if not self.config_path.exists():
            raise StoreError(f"no campaign config at {self.config_path}")
        with open(self.config_path) as fh:
            return json.load(fh)


def store_root(explicit=None) -> Path:
    """Store root from an explicit path, ``OFMLMC_STORE``, or ``./ofmlmc-store``."""
    if explicit:
        return Path(explicit)
    return Path(os.environ.get("OFMLMC_STORE", "ofmlmc-store"))
