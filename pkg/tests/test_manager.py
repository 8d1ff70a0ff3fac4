"""Data-path tests: async coded writes, late-binding reads, corruption
handling, failure recovery, per-address ordering.

Latency is frozen flat (sigma=0): every hop 1500ns, encode 700ns,
decode 1500ns. Expected timelines below are derived by hand from the
data-path rules:
  async write: data acks at 1500, encode done 2200, parity ack (durable) 3700
  sync write: encode 700, all acks 2200
"""

import numpy as np
import pytest

from codedmem import coding, manager, placement, simulator
from codedmem.coding import CodecParams
from codedmem.errors import CapacityExhausted, UnrecoverableRead
from codedmem.manager import ManagerConfig, ResilienceManager
from codedmem.simulator import Cluster, FaultScript, LatencyModel


def flat_cluster(n, seed=0, **kw):
    model = LatencyModel(median_us=1.5, sigma=0.0, straggler_prob=0.0)
    return Cluster(n, latency=model, seed=seed, **kw)


def build(n, params, l=0, seed=0, config=None, cluster=None):
    cluster = cluster or flat_cluster(n, seed=seed)
    shape = placement.ClusterShape(machines=n)
    plan = placement.build_codingsets(shape, params, l=l, seed=seed)
    mgr = ResilienceManager(cluster, plan, params, config=config, seed=seed)
    return cluster, mgr


def page_of(rng_seed, size=4096):
    return np.random.default_rng(rng_seed).integers(0, 256, size, dtype=np.uint8).tobytes()


class TestMapRange:
    def test_allocates_on_distinct_machines(self):
        _, mgr = build(6, CodecParams(k=2, r=1), l=3)
        rng = mgr.map_range(0)
        machines = [ref.machine_id for ref in rng.refs]
        assert len(machines) == 3
        assert len(set(machines)) == 3

    def test_least_loaded_preferred(self):
        cluster, mgr = build(4, CodecParams(k=1, r=1), l=2)
        cluster.machines[0].local_bytes = 0
        # preload machines 2,3 with slabs so 0,1 are the least loaded
        cluster.machines[2].allocate_slab(1 << 20)
        cluster.machines[3].allocate_slab(1 << 20)
        rng = mgr.map_range(0)
        assert sorted(ref.machine_id for ref in rng.refs) == [0, 1]

    def test_capacity_exhausted(self):
        cluster = flat_cluster(3, machine_bytes=4096)
        _, mgr = build(3, CodecParams(k=2, r=1), l=0, cluster=cluster)
        with pytest.raises(CapacityExhausted):
            mgr.map_range(0)

    def test_page_capacity(self):
        _, mgr = build(3, CodecParams(k=2, r=1))
        rng = mgr.map_range(0)
        # 64KiB slab / 2048B split
        assert rng.page_capacity == 32


class TestWritePath:
    def test_async_write_timeline(self):
        cluster, mgr = build(3, CodecParams(k=2, r=1))
        mgr.map_range(0)
        done = mgr.remote_write(0, 0, page_of(1))
        assert done.outcome == "durable"
        assert done.data_acked_ns == 1500
        assert done.completed_ns == 1500  # caller unblocks at the data acks
        assert done.durable_ns == 3700
        assert done.data_acked_ns <= done.durable_ns
        assert done.durable_ns - done.data_acked_ns >= 700  # encode cost gap

    def test_sync_write_timeline(self):
        config = ManagerConfig(async_parity=False)
        cluster, mgr = build(3, CodecParams(k=2, r=1), config=config)
        mgr.map_range(0)
        done = mgr.remote_write(0, 0, page_of(2))
        assert done.data_acked_ns == 2200
        assert done.durable_ns == 2200
        assert done.completed_ns == 2200  # caller waits for parity too

    def test_write_fanout_counts_all_refs(self):
        _, mgr = build(5, CodecParams(k=3, r=2))
        mgr.map_range(0)
        done = mgr.remote_write(0, 1, page_of(3))
        assert done.fanout == 5

    def test_stored_splits_match_codec(self):
        cluster, mgr = build(3, CodecParams(k=2, r=1))
        rng = mgr.map_range(0)
        page = page_of(4)
        mgr.remote_write(0, 5, page)
        codec = coding.make_codec(CodecParams(k=2, r=1))
        data = coding.split_page(page, 2)
        expect = [s.data for s in data + coding.encode(codec, data)]
        got = [cluster.slabs[ref.slab_id].store[5] for ref in rng.refs]
        assert got == expect

    def test_degraded_write_when_parity_machine_down(self):
        cluster, mgr = build(3, CodecParams(k=2, r=1))
        rng = mgr.map_range(0)
        cluster.fail_machine(rng.refs[2].machine_id)
        cluster.run_until_idle()
        done = mgr.remote_write(0, 0, page_of(5))
        # no replacement candidates (k+r == cluster size): degraded but acked
        assert done.outcome == "degraded"
        assert done.data_acked_ns == 1500
        assert done.durable_ns is None

    def test_degraded_data_slab_uses_parity_for_ack(self):
        cluster, mgr = build(3, CodecParams(k=2, r=1))
        rng = mgr.map_range(0)
        cluster.fail_machine(rng.refs[0].machine_id)
        cluster.run_until_idle()
        done = mgr.remote_write(0, 0, page_of(6))
        # encode enters the ack path: issue at 700, acks at 2200
        assert done.data_acked_ns == 2200
        assert done.outcome == "degraded"
        # page still readable from the two remaining splits
        assert mgr.remote_read(0, 0) == page_of(6)

    def test_write_failed_when_under_k_reachable(self):
        cluster, mgr = build(3, CodecParams(k=2, r=1))
        rng = mgr.map_range(0)
        cluster.fail_machine(rng.refs[0].machine_id)
        cluster.fail_machine(rng.refs[2].machine_id)
        cluster.run_until_idle()
        done = mgr.remote_write(0, 0, page_of(7))
        assert done.outcome == "write-failed"

    def test_midflight_disconnect_reissues_to_replacement(self):
        # group has one spare member to host the replacement slab
        cluster, mgr = build(4, CodecParams(k=2, r=1), l=1)
        rng = mgr.map_range(0)
        victim = rng.refs[0].machine_id
        page = page_of(8)
        op = mgr.submit_write(0, 0, page)
        cluster.schedule_at(700, lambda: cluster.fail_machine(victim))
        cluster.run_until_idle()
        done = op.completion
        assert done.outcome == "durable"
        assert done.data_acked_ns == 2200  # reissued split ack at 700+1500
        assert rng.refs[0].machine_id != victim
        # all pages are present on the replacement, so it is healthy again
        assert mgr.remote_read(0, 0) == page


class TestReadPath:
    def test_read_roundtrip_and_fanout(self):
        _, mgr = build(4, CodecParams(k=2, r=2, delta=1))
        mgr.map_range(0)
        page = page_of(9)
        mgr.remote_write(0, 3, page)
        op = mgr.submit_read(0, 3)
        mgr.drive(op)
        assert op.completion.outcome == "ok"
        assert op.completion.page == page
        assert op.completion.fanout == 3  # k + delta

    def test_unwritten_page_reads_zero_page(self):
        _, mgr = build(3, CodecParams(k=2, r=1))
        mgr.map_range(0)
        assert mgr.remote_read(0, 7) == b"\x00" * 4096

    def test_completion_at_kth_arrival(self):
        # pure striping: no parity anywhere, so no decode charge can hide
        # in the latency and the k-th arrival alone defines it
        _, mgr = build(2, CodecParams(k=2, r=0))
        mgr.map_range(0)
        mgr.remote_write(0, 0, page_of(10))
        op = mgr.submit_read(0, 0)
        mgr.drive(op)
        assert op.completion.completed_ns - op.completion.started_ns == 1500

    def test_reads_survive_r_failures(self):
        cluster, mgr = build(4, CodecParams(k=2, r=2))
        rng = mgr.map_range(0)
        page = page_of(11)
        mgr.remote_write(0, 0, page)
        cluster.fail_machine(rng.refs[1].machine_id)
        cluster.fail_machine(rng.refs[3].machine_id)
        cluster.run_until_idle()
        assert mgr.remote_read(0, 0) == page

    def test_unrecoverable_when_under_k_healthy(self):
        cluster, mgr = build(3, CodecParams(k=2, r=1))
        rng = mgr.map_range(0)
        mgr.remote_write(0, 0, page_of(12))
        cluster.fail_machine(rng.refs[0].machine_id)
        cluster.fail_machine(rng.refs[1].machine_id)
        cluster.run_until_idle()
        with pytest.raises(UnrecoverableRead):
            mgr.remote_read(0, 0)

    def test_late_splits_discarded_in_log(self):
        cluster, mgr = build(4, CodecParams(k=2, r=2, delta=1), seed=3)
        mgr.map_range(0)
        mgr.remote_write(0, 0, page_of(13))
        before = len(cluster.event_log)
        mgr.remote_read(0, 0)
        cluster.run_until_idle()
        ops = [row for row in cluster.event_log[before:] if row[1] == "late_split"]
        assert len(ops) == 1  # k+delta issued, k used, 1 discarded


class TestCorruption:
    def corrupted_setup(self, seed=0):
        params = CodecParams(k=2, r=3, delta=1)  # k+2d+1 == k+r == 5
        config = ManagerConfig(corruption_guard=True)
        cluster, mgr = build(5, params, config=config, seed=seed)
        rng = mgr.map_range(0)
        page = page_of(14)
        mgr.remote_write(0, 0, page)
        return cluster, mgr, rng, page

    def test_guarded_read_waits_for_k_plus_delta(self):
        cluster, mgr, rng, page = self.corrupted_setup()
        op = mgr.submit_read(0, 0)
        mgr.drive(op)
        assert op.completion.fanout == 3
        assert op.completion.page == page
        assert not op.completion.corrected

    def test_corruption_detected_and_corrected(self):
        cluster, mgr, rng, page = self.corrupted_setup()
        bad_ref = rng.refs[1]
        cluster.corrupt_slab(bad_ref.slab_id, 0, b"\xff\x01")
        # force the corrupted split into the fan-out by failing nothing:
        # loop until a read picks it (seeded, deterministic)
        for _ in range(10):
            op = mgr.submit_read(0, 0)
            mgr.drive(op)
            assert op.completion.page == page  # never a wrong page
            if op.completion.corrected:
                break
        else:
            pytest.fail("corrupted split never sampled")
        assert op.completion.fanout == 5  # escalated to k + 2*delta + 1
        assert mgr.health[bad_ref.machine_id].errors >= 1

    def test_repeated_errors_mark_suspect_and_request_regen(self):
        cluster, mgr, rng, page = self.corrupted_setup()
        bad_ref = rng.refs[0]
        cluster.corrupt_slab(bad_ref.slab_id, 0, b"\x42")
        hits = 0
        for _ in range(12):
            op = mgr.submit_read(0, 0)
            mgr.drive(op)
            if op.completion.corrected:
                hits += 1
            if mgr.health[bad_ref.machine_id].suspect:
                break
        assert hits >= 1
        assert mgr.health[bad_ref.machine_id].suspect
        assert any(req == (0, bad_ref.role) for req in mgr.regeneration_requests)
        # suspect machine: next read fans out at correction width immediately
        op = mgr.submit_read(0, 0)
        mgr.drive(op)
        assert op.completion.fanout == 5
        assert op.completion.page == page


class TestOrderingAndEviction:
    def test_per_page_ops_serialized(self):
        _, mgr = build(3, CodecParams(k=2, r=1))
        mgr.map_range(0)
        first = mgr.submit_write(0, 0, page_of(15))
        second = mgr.submit_write(0, 0, page_of(16))
        mgr.drive(second)
        assert first.completion.durable_ns == 3700
        # second waits for the first op to fully finish
        assert second.completion.data_acked_ns == 3700 + 1500

    def test_read_after_write_sees_new_data(self):
        _, mgr = build(3, CodecParams(k=2, r=1))
        mgr.map_range(0)
        mgr.submit_write(0, 0, page_of(17))
        page2 = page_of(18)
        mgr.submit_write(0, 0, page2)
        op = mgr.submit_read(0, 0)
        mgr.drive(op)
        assert op.completion.page == page2

    def test_eviction_degrades_range_and_requests_regen(self):
        cluster, mgr = build(4, CodecParams(k=2, r=1), l=1)
        rng = mgr.map_range(0)
        mgr.remote_write(0, 0, page_of(19))
        victim = rng.refs[2]
        simulator.inject(
            cluster,
            FaultScript.from_events([{"type": "evict", "time_us": 1.0, "slab": victim.slab_id}]),
        )
        cluster.run_until_idle()
        assert victim.state == manager.RefState.FAILED
        assert (0, victim.role) in mgr.regeneration_requests
        assert mgr.remote_read(0, 0) == page_of(19)  # still recoverable


class TestDeterminism:
    def run_once(self, seed):
        cluster, mgr = build(6, CodecParams(k=2, r=2, delta=1), l=2, seed=seed)
        mgr.map_range(0)
        rows = []
        for i in range(20):
            if i % 3 == 0:
                done = mgr.remote_write(0, i % 8, page_of(i))
                rows.append(("W", done.data_acked_ns, done.durable_ns, done.outcome))
            else:
                page = mgr.remote_read(0, (i - 1) % 8 if i % 3 == 1 else i % 8)
                rows.append(("R", len(page)))
        return rows

    def test_reproducible(self):
        assert self.run_once(42) == self.run_once(42)

    def test_seed_changes_fanout_choices(self):
        def collect(seed):
            _, mgr = build(8, CodecParams(k=2, r=2, delta=0), l=4, seed=seed)
            mgr.map_range(0)
            mgr.remote_write(0, 0, page_of(20))
            picks = []
            for _ in range(6):
                op = mgr.submit_read(0, 0)
                mgr.drive(op)
                picks.append(op.targets)
            return picks

        assert collect(1) != collect(2)


def test_completion_log_format(tmp_path):
    _, mgr = build(3, CodecParams(k=2, r=1))
    mgr.map_range(0)
    mgr.remote_write(0, 0, page_of(21))
    mgr.remote_read(0, 0)
    out = tmp_path / "completions.csv"
    mgr.write_completion_log(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "submit_us,complete_us,op,fanout,outcome"
    assert len(lines) == 3
    assert lines[1].split(",")[2] == "W"
    assert lines[2].split(",")[2] == "R"
