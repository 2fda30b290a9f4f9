"""Batched, fault-tolerant execution of coupled sample pairs.

A plan is a list of groups; each group runs as one task on one worker
(batching), and groups run concurrently (merging several tasks into a pool).
Exceptions and invalid model outputs become ``failed`` ledger entries.  Results
are recorded in plan order, so the ledger content does not depend on worker
count.
"""
from __future__ import annotations

import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .models.base import coupled_pair, pair_valid
from .store import DONE, FAILED, CampaignStore, LedgerEntry, SampleLedger
from .streams import SampleKey, stream_key


@dataclass
class BatchPlan:
    groups: list
    workers_per_group: list = field(default_factory=list)

    def __post_init__(self):
        self.groups = [tuple(SampleKey(*k) for k in g) for g in self.groups]
        seen = set()
        for g in self.groups:
            for k in g:
                if k in seen:
                    raise ValueError(f"sample key {k} appears in more than one group")
                seen.add(k)
        if not self.workers_per_group:
            self.workers_per_group = [1] * len(self.groups)
        if len(self.workers_per_group) != len(self.groups):
            raise ValueError("one worker count per group is required")

    @classmethod
    def from_keys(cls, keys, batch_size: int = 1) -> "BatchPlan":
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        keys = sorted(SampleKey(*k) for k in keys)
        return cls([keys[i : i + batch_size] for i in range(0, len(keys), batch_size)])

    @property
    def keys(self) -> list[SampleKey]:
        return [k for g in self.groups for k in g]

    def __len__(self):
        return sum(len(g) for g in self.groups)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def run_sample(model, key: SampleKey, sandbox: Path | None = None) -> LedgerEntry:
    """Evaluate one coupled pair; never raises for model errors."""
    omega = stream_key(key)
    if sandbox is not None:
        sandbox.mkdir(parents=True, exist_ok=True)
        params = model.params() if hasattr(model, "params") else {}
        _write_json(
            sandbox / "input.json",
            {"key": list(key), "omega": str(omega), "model": model.name, "params": params},
        )
    start = time.perf_counter()
    fine = coarse = None
    trace = ""
    try:
        fine, coarse = coupled_pair(omega, key.level, model)
        if pair_valid(fine, coarse):
            status, reason = DONE, ""
        else:
            bad = fine if not fine.valid else coarse
            status, reason = FAILED, f"invalid model output: {bad.reason or 'unspecified'}"
    except Exception as exc:  # noqa: BLE001 - any model error is a failed sample
        status, reason = FAILED, f"{type(exc).__name__}: {exc}"
        trace = traceback.format_exc()
    wall = time.perf_counter() - start
    work = sum(s.work for s in (fine, coarse) if s is not None)
    entry = LedgerEntry(
        key,
        status,
        fine=fine if status == DONE else None,
        coarse=coarse if status == DONE else None,
        work=work,
        wall_time=wall,
        reason=reason,
        sandbox="" if sandbox is None else str(sandbox),
    )
    if sandbox is not None:
        _write_json(
            sandbox / "output.json",
            {
                "status": status,
                "fine": None if entry.fine is None else entry.fine.to_dict(),
                "coarse": None if entry.coarse is None else entry.coarse.to_dict(),
            },
        )
        with open(sandbox / "log.txt", "w") as fh:
            fh.write(f"key={tuple(key)} status={status} wall_time={wall:.6f}s work={work}\n")
            if reason:
                fh.write(reason + "\n")
            if trace:
                fh.write(trace)
    return entry


def _run_group(model, keys, sandboxes):
    return [run_sample(model, k, s) for k, s in zip(keys, sandboxes)]


def execute_plan(
    plan: BatchPlan,
    model,
    workers: int = 1,
    store: CampaignStore | None = None,
    ledger: SampleLedger | None = None,
) -> list[LedgerEntry]:
    """Run every key of ``plan`` and record the results.

    Groups are appended to the store in plan order as they finish, so an
    interrupted plan keeps every group up to the first unfinished one.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    results = []

    def record(entries):
        entries = sorted(entries, key=lambda e: e.key)
        if store is not None:
            store.append(entries)
        if ledger is not None:
            for e in entries:
                ledger.add(e)
        results.extend(entries)

    tasks = []
    for group in plan.groups:
        sandboxes = [store.sandbox(k) if store is not None else None for k in group]
        tasks.append((list(group), sandboxes))
    if not tasks:
        return []
    if workers == 1 or len(tasks) == 1:
        for keys, sandboxes in tasks:
            record(_run_group(model, keys, sandboxes))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_group, model, keys, sb) for keys, sb in tasks]
            # plan order keeps the ledger file identical for any worker count
            for fut in futures:
                record(fut.result())
    results.sort(key=lambda e: e.key)
    return results


def valid_samples(ledger: SampleLedger, level: int, qoi: str):
    """Paired QoI values of the done entries on one difference level."""
    return ledger.valid_samples(level, qoi)
