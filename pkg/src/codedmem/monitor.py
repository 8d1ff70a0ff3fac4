"""Memory pressure control loop and slab regeneration.

Each control tick walks the machines: any machine whose free memory
fraction has dropped below the headroom target evicts a batch of cold
slabs (sampled candidates, least-accessed first), then every slab's
access counter decays so the usage signal tracks recent traffic.

Regeneration rebuilds a lost slab from the surviving splits: decode
each written page from k healthy slabs, re-encode the missing split,
and backfill it onto a fresh slab on a spare machine. Foreground
writes keep flowing while this runs; they backfill the new slab
directly, and the catch-up loop skips pages that already landed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import coding
from .manager import RefState, _ReadOp
from .simulator import MachineState, SlabState


@dataclass(frozen=True)
class MonitorConfig:
    headroom: float = 0.25
    control_period_us: float = 1_000_000.0
    eviction_batch: int = 4
    extra_candidates: int = 2
    decay: float = 0.5


class _RegenFill:
    """One page of a regeneration: read, re-encode, backfill.

    Runs under the same per-page queue as foreground ops, so a page is
    never read for regeneration while a write to it is in flight.
    """

    def __init__(self, task, page_index):
        self.task = task
        self.page_index = page_index

    def start(self):
        task = self.task
        mgr = task.mgr
        ref = task.ref
        slab = mgr.cluster.slabs.get(ref.slab_id)
        if (
            ref.state is not RefState.REGENERATING
            or slab is None
            or slab.state is not SlabState.REGENERATING
            or self.page_index in slab.store
        ):
            self._done(advance=True)
            return
        inner = _ReadOp(mgr, task.arange, self.page_index, self._on_read, internal=True)
        inner.start()

    def _on_read(self, completion):
        task = self.task
        mgr = task.mgr
        if completion.outcome != "ok":
            self._done(advance=False)
            task.abort(retry=False)
            return
        role = task.ref.role
        params = mgr.codec.params
        data = coding.split_page(completion.page, params.k)
        if role < params.k:
            payload = data[role].data
        else:
            payload = coding.encode(mgr.codec, data)[role - params.k].data
        delay = (completion.completed_ns - mgr.cluster.now) + mgr.encode_ns
        mgr.cluster.schedule(delay, lambda: self._submit_fill(payload))

    def _submit_fill(self, payload):
        task = self.task
        mgr = task.mgr
        ref = task.ref
        if ref.state is not RefState.REGENERATING:
            self._done(advance=True)
            return
        mgr.cluster.write_split(
            ref.machine_id,
            ref.slab_id,
            self.page_index,
            payload,
            self._on_fill,
            fill=True,
        )

    def _on_fill(self, completion):
        if completion.outcome != "ok":
            self._done(advance=False)
            self.task.abort(retry=True)
            return
        self._done(advance=True)

    def _done(self, advance):
        task = self.task
        task.mgr._release(task.arange.range_id, self.page_index, self)
        if advance:
            task.next_page()


class _RegenTask:
    """Rebuilds one slab reference of one range."""

    def __init__(self, monitor, range_id, role):
        self.monitor = monitor
        self.mgr = monitor.manager
        self.range_id = range_id
        self.role = role
        self.arange = None
        self.ref = None
        self.pages = []
        self.done = False
        self.succeeded = False

    def start(self):
        mgr = self.mgr
        arange = mgr.ranges.get(self.range_id)
        if arange is None:
            self._finish(False)
            return
        self.arange = arange
        self.ref = arange.ref_for_role(self.role)
        ref = self.ref
        slab = mgr.cluster.slabs.get(ref.slab_id)
        if ref.state is RefState.HEALTHY and slab is not None and slab.state is SlabState.AVAILABLE:
            self._finish(True)
            return
        if len(arange.healthy_refs()) < mgr.codec.params.k:
            ref.state = RefState.FAILED
            mgr.cluster.log("regenerate", f"r{self.range_id}:role{self.role}", "no_quorum")
            self._finish(False)
            return
        reusable = (
            ref.state is RefState.REGENERATING
            and slab is not None
            and slab.state is SlabState.REGENERATING
            and mgr.cluster.machines[ref.machine_id].state is MachineState.UP
        )
        if not reusable:
            target = self.monitor._pick_target(arange, ref)
            if target is None:
                ref.state = RefState.FAILED
                mgr.cluster.log("regenerate", f"r{self.range_id}:role{self.role}", "no_target")
                self._finish(False)
                return
            slab = mgr.cluster.machines[target].allocate_slab(
                mgr.config.slab_size,
                owner=self.range_id,
                role=self.role,
                split_size=mgr.codec.split_size,
            )
            slab.state = SlabState.REGENERATING
            ref.machine_id = target
            ref.slab_id = slab.slab_id
            ref.state = RefState.REGENERATING
        self.next_page()

    def next_page(self):
        mgr = self.mgr
        slab = mgr.cluster.slabs.get(self.ref.slab_id)
        if slab is None or self.ref.state is not RefState.REGENERATING:
            self._finish(False)
            return
        while True:
            if self.pages:
                page = self.pages.pop(0)
                if page in slab.store:
                    continue
                mgr._enqueue(self.range_id, page, _RegenFill(self, page))
                return
            missing = sorted(self.arange.written_pages - set(slab.store))
            if not missing:
                slab.state = SlabState.AVAILABLE
                self.ref.state = RefState.HEALTHY
                mgr.cluster.log(
                    "regenerate", f"r{self.range_id}:role{self.role}", "complete"
                )
                self._finish(True)
                return
            self.pages = missing

    def abort(self, retry):
        mgr = self.mgr
        if self.ref is not None and self.ref.state is not RefState.HEALTHY:
            self.ref.state = RefState.FAILED
        mgr.cluster.log("regenerate", f"r{self.range_id}:role{self.role}", "aborted")
        self._finish(False)
        if retry:
            mgr._request_regen(self.range_id, self.role)

    def _finish(self, ok):
        if self.done:
            return
        self.done = True
        self.succeeded = ok
        self.mgr.regen_done(self.range_id, self.role)
        self.monitor._active.pop((self.range_id, self.role), None)


class MonitorService:
    """Per-cluster control loop: eviction, usage decay, regeneration."""

    def __init__(self, cluster, manager=None, config=None, seed=0):
        self.cluster = cluster
        self.manager = manager
        self.config = config or MonitorConfig()
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0x0B5E)))
        self.stats_log = []
        self._active = {}
        self._started = False

    # -- control loop -------------------------------------------------------

    def start(self):
        if self._started:
            return
        self._started = True
        self._arm()

    def _arm(self):
        period_ns = round(self.config.control_period_us * 1000)
        self.cluster.schedule(period_ns, self._periodic)

    def _periodic(self):
        self.control_tick()
        self._arm()

    def control_tick(self):
        for machine in self.cluster.machines:
            if machine.state is MachineState.UP and machine.free_fraction < self.config.headroom:
                self.batch_evict(machine)
        if self.manager is not None:
            self.drain_regeneration()
        self._dump_stats()
        for slab in self.cluster.slabs.values():
            slab.access_count *= self.config.decay

    def batch_evict(self, machine):
        """Evict up to a batch of cold slabs to restore headroom."""
        evictable = sorted(
            sid
            for sid, slab in machine.slabs.items()
            if slab.state is SlabState.AVAILABLE
        )
        if not evictable:
            return []
        sample_size = min(
            len(evictable), self.config.eviction_batch + self.config.extra_candidates
        )
        picked = self.rng.choice(len(evictable), size=sample_size, replace=False)
        candidates = [evictable[int(i)] for i in picked]
        candidates.sort(key=lambda sid: (machine.slabs[sid].access_count, sid))
        evicted = []
        for sid in candidates[: self.config.eviction_batch]:
            if machine.free_fraction >= self.config.headroom:
                break
            self.cluster.evict_slab(sid)
            evicted.append(sid)
        return evicted

    # -- regeneration -------------------------------------------------------

    def drain_regeneration(self):
        """Start a task for every queued regeneration request."""
        started = []
        pending = list(self.manager.regeneration_requests)
        self.manager.regeneration_requests.clear()
        for key in pending:
            if key in self._active:
                continue
            task = _RegenTask(self, key[0], key[1])
            self._active[key] = task
            task.start()
            started.append(task)
        return started

    def regenerate_slab(self, range_id, role):
        key = (range_id, role)
        if key in self._active:
            return self._active[key]
        task = _RegenTask(self, range_id, role)
        self._active[key] = task
        task.start()
        return task

    def _pick_target(self, arange, ref):
        """Least-loaded live machine that doesn't already host this range."""
        hosting = {
            r.machine_id for r in arange.refs if r.state is not RefState.FAILED
        }
        hosting.discard(ref.machine_id)
        size = self.manager.config.slab_size

        def usable(m):
            machine = self.cluster.machines[m]
            return (
                m not in hosting
                and machine.state is MachineState.UP
                and machine.free_bytes >= size
            )

        pool = [m for m in arange.group_members if usable(m)]
        if not pool:
            pool = [m.machine_id for m in self.cluster.machines if usable(m.machine_id)]
        if not pool:
            return None
        return min(pool, key=lambda m: (self.cluster.machines[m].slab_bytes, m))

    # -- reporting ----------------------------------------------------------

    def _dump_stats(self):
        now_us = self.cluster.now / 1000
        regens_by_machine = {}
        for task in self._active.values():
            if task.ref is not None and not task.done:
                mid = task.ref.machine_id
                regens_by_machine[mid] = regens_by_machine.get(mid, 0) + 1
        for machine in self.cluster.machines:
            hosted = sum(
                1
                for s in machine.slabs.values()
                if s.state in (SlabState.AVAILABLE, SlabState.REGENERATING)
            )
            evicted = sum(
                1 for s in machine.slabs.values() if s.state is SlabState.EVICTED
            )
            self.stats_log.append(
                (
                    now_us,
                    machine.machine_id,
                    machine.free_fraction,
                    hosted,
                    evicted,
                    regens_by_machine.get(machine.machine_id, 0),
                )
            )

    def export_stats(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                [
                    "time_us",
                    "machine",
                    "free_fraction",
                    "slabs_hosted",
                    "evicted_total",
                    "regens_in_flight",
                ]
            )
            for time_us, machine, free_fraction, hosted, evicted, regens in self.stats_log:
                writer.writerow(
                    [
                        f"{time_us:.3f}",
                        machine,
                        f"{free_fraction:.6f}",
                        hosted,
                        evicted,
                        regens,
                    ]
                )
