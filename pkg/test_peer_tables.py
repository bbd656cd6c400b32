"""
RepStream - Peer Tables Tests
Capacity rules of RT/NT/BRT/OMT/BPT under randomized operation sequences
"""

import numpy as np
import pytest

from src.config import BRT_CAPACITY, NT_CAPACITY, RT_CAPACITY
from src.core_model import circular_distance
from src.peer_tables import (
    AdmitOutcome, BackupParentsTable, BroadcastRoutingTable, NeighbourTable, OverlaidMulticastTable,
    PeerTables, RoutingTable, bpt_record, brt_record_beacon, nt_update, omt_admit, omt_keepalive_sweep,
    rt_merge,
)

OWNER = 1000


def test_rt_merge_keeps_existing_and_fills_by_distance():
    table = RoutingTable(OWNER, capacity=3)
    rt_merge(table, [OWNER + 50])
    rt_merge(table, [OWNER + 1, OWNER + 2, OWNER + 3, OWNER])
    assert OWNER not in table
    assert table.entries == [OWNER + 50, OWNER + 1, OWNER + 2]


def test_rt_merge_tie_breaks_by_peer_id():
    table = RoutingTable(OWNER, capacity=1)
    rt_merge(table, [OWNER + 5, OWNER - 5])
    assert table.entries == [OWNER - 5]


def test_nt_keeps_lowest_rtt():
    table = NeighbourTable(OWNER, capacity=2)
    nt_update(table, 1, 30)
    nt_update(table, 2, 10)
    nt_update(table, 3, 20)
    assert table.peers() == [2, 3]
    nt_update(table, 3, 5)
    assert table.entries == [(3, 5), (2, 10)]
    with pytest.raises(ValueError):
        nt_update(table, 4, -1)


def test_brt_ranks_by_beacon_count_in_window():
    table = BroadcastRoutingTable(OWNER, capacity=2)
    for t in range(0, 5000, 1000):
        brt_record_beacon(table, 7, t, window=10_000)
    brt_record_beacon(table, 9, 4000, window=10_000)
    brt_record_beacon(table, 8, 4000, window=10_000)
    assert table.peers() == [7, 8]
    # old beacons age out of the window
    brt_record_beacon(table, 9, 20_000, window=10_000)
    assert table.peers() == [9]


def test_bpt_prepends_and_caps():
    table = BackupParentsTable(OWNER, grandparent_capacity=2, sibling_capacity=3)
    bpt_record(table, 1, [10, 11])
    bpt_record(table, 2, [12, 13, OWNER])
    bpt_record(table, 3, [])
    assert table.grandparents == [3, 2]
    assert table.siblings == [12, 13, 10]


def test_omt_admit_accept_then_reject_full():
    omt = OverlaidMulticastTable(OWNER, fanout=2)
    assert omt_admit(omt, 1, 0.5).outcome is AdmitOutcome.ACCEPT
    assert omt_admit(omt, 2, 0.5).outcome is AdmitOutcome.ACCEPT
    decision = omt_admit(omt, 3, 0.5)
    assert decision.outcome is AdmitOutcome.REJECT_FULL
    assert set(decision.children) == {1, 2}
    assert 3 not in omt.children


def test_omt_replace_evicts_weakest():
    omt = OverlaidMulticastTable(OWNER, fanout=2)
    omt_admit(omt, 1, 0.9)
    omt_admit(omt, 2, 0.3)
    decision = omt_admit(omt, 3, 0.6)
    assert decision.outcome is AdmitOutcome.REPLACE
    assert decision.evicted == 2
    assert set(omt.children) == {1, 3}
    assert 3 in decision.children


def test_omt_replace_tie_prefers_farther_child():
    omt = OverlaidMulticastTable(OWNER, fanout=2)
    omt_admit(omt, OWNER + 1, 0.2)
    omt_admit(omt, OWNER + 100, 0.2)
    assert omt_admit(omt, 5, 0.4).evicted == OWNER + 100


def test_omt_rejects_linked_peers():
    omt = OverlaidMulticastTable(OWNER, fanout=2)
    omt.set_parent(7)
    with pytest.raises(ValueError):
        omt_admit(omt, 7, 0.9)
    omt_admit(omt, 8, 0.5)
    with pytest.raises(ValueError):
        omt.set_parent(8)
    with pytest.raises(ValueError):
        OverlaidMulticastTable(OWNER, fanout=0)


def test_keepalive_sweep_leaves_parent():
    omt = OverlaidMulticastTable(OWNER, fanout=4)
    omt.set_parent(99)
    omt_admit(omt, 1, 0.5, now=0)
    omt_admit(omt, 2, 0.5, now=2500)
    _, removed = omt_keepalive_sweep(omt, now=4000, timeout=3000)
    assert removed == [1]
    assert omt.parent == 99


def test_tables_forget():
    tables = PeerTables(OWNER)
    brt_record_beacon(tables.brt, 5, 0, 10_000)
    bpt_record(tables.bpt, 5, [5, 6])
    tables.forget(5)
    assert 5 not in tables.brt.peers()
    assert 5 not in tables.bpt.grandparents
    assert tables.bpt.siblings == [6]


def test_randomized_operations_respect_capacities():
    rng = np.random.default_rng(99)
    fanout = 4
    tables = PeerTables(OWNER, fanout)
    pool = [int(x) for x in rng.integers(0, 1 << 20, size=400)]
    now = 0
    for _ in range(10_000):
        now += int(rng.integers(0, 50))
        op = int(rng.integers(0, 6))
        peer = pool[int(rng.integers(0, len(pool)))]
        if op == 0:
            rt_merge(tables.rt, [pool[int(i)] for i in rng.integers(0, len(pool), size=30)])
        elif op == 1:
            nt_update(tables.nt, peer, int(rng.integers(0, 200)))
        elif op == 2:
            brt_record_beacon(tables.brt, peer, now, 10_000)
        elif op == 3:
            omt = tables.omt
            if peer != OWNER and peer != omt.parent and peer not in omt.children:
                before = min((e.effective_reputation for e in omt.children.values()), default=None)
                rep = float(rng.uniform(0, 1))
                decision = omt_admit(omt, peer, rep, now)
                if decision.outcome is AdmitOutcome.REPLACE:
                    after = min(e.effective_reputation for e in omt.children.values())
                    assert after > before
        elif op == 4:
            omt_keepalive_sweep(tables.omt, now, 3000)
        else:
            bpt_record(tables.bpt, peer, [pool[int(i)] for i in rng.integers(0, len(pool), size=3)])

        assert len(tables.rt) <= RT_CAPACITY
        assert len(tables.nt) <= NT_CAPACITY
        assert len(tables.brt) <= BRT_CAPACITY
        assert len(tables.omt.children) <= fanout
        assert tables.omt.parent not in tables.omt.children
        assert len(tables.bpt.grandparents) <= tables.bpt.grandparent_capacity
        assert len(tables.bpt.siblings) <= tables.bpt.sibling_capacity


def test_rt_entries_closest_when_filled_from_empty():
    table = RoutingTable(OWNER, capacity=10)
    candidates = list(range(0, 5000, 37))
    rt_merge(table, candidates)
    chosen = sorted(circular_distance(OWNER, p) for p in table.entries)
    rest = sorted(circular_distance(OWNER, p) for p in candidates if p not in table and p != OWNER)
    assert chosen[-1] <= rest[0]
