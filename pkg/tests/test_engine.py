"""Engine determinism, snapshots, and lifecycle guards."""

import pytest
from hypothesis import given, settings, strategies as st

from conftest import Bench, sends_of
from dbrb.engine import HaltedError, InvokeBroadcast, InvokeJoin, Node, Receive
from dbrb.messages import Deliver, Prepare, Reconfig, message_meta
from dbrb.views import plus


def fresh_pair():
    a = Bench(["p1", "p2", "p3", "p4"], universe=["p1", "p2", "p3", "p4", "p5"])
    b = Bench(["p1", "p2", "p3", "p4"], universe=["p1", "p2", "p3", "p4", "p5"])
    return a, b


def test_identical_event_sequences_give_identical_state_and_outputs():
    a, b = fresh_pair()
    events = [
        InvokeBroadcast(b"m"),
        Receive("p5", a.raw("p5", Reconfig(plus("p5"), a.initial_view)),
                {"msg": "RECONFIG"}),
    ]
    outs_a = [a.nodes["p1"].step(e) for e in events]
    outs_b = [b.nodes["p1"].step(e) for e in events]
    assert outs_a == outs_b
    assert a.nodes["p1"].state_digest() == b.nodes["p1"].state_digest()


def test_replay_from_snapshot_matches_original():
    bench, _ = fresh_pair()
    node = bench.nodes["p2"]
    snap = node.snapshot()
    event = Receive("p1", bench.raw("p1", Prepare(b"m", bench.initial_view)),
                    {"msg": "PREPARE"})
    out_live = node.step(event)
    restored = Node.restore(snap)
    out_replay = restored.step(event)
    assert out_live == out_replay
    assert node.state_digest() == restored.state_digest()


def test_snapshot_round_trip_preserves_digest():
    bench, _ = fresh_pair()
    node = bench.nodes["p3"]
    snap = node.snapshot()
    assert Node.restore(snap).state_digest() == snap["digest"] == node.state_digest()


def test_snapshot_version_checked():
    bench, _ = fresh_pair()
    snap = bench.nodes["p3"].snapshot()
    snap["version"] = 99
    with pytest.raises(ValueError):
        Node.restore(snap)


def test_mutating_events_change_the_digest():
    bench, _ = fresh_pair()
    node = bench.nodes["p2"]
    before = node.state_digest()
    node.step(Receive("p1", bench.raw("p1", Prepare(b"m", bench.initial_view)),
                      {"msg": "PREPARE"}))
    assert node.state_digest() != before


def test_undecodable_input_changes_nothing():
    bench, _ = fresh_pair()
    node = bench.nodes["p2"]
    before = node.state_digest()
    actions = node.step(Receive("p1", b"not a message", {}))
    assert node.state_digest() == before
    assert not sends_of(actions)


def test_forged_signature_changes_nothing():
    bench, _ = fresh_pair()
    node = bench.nodes["p2"]
    raw = bytearray(bench.raw("p1", Prepare(b"m", bench.initial_view)))
    raw[-1] ^= 0x01
    before = node.state_digest()
    node.step(Receive("p1", bytes(raw), {"msg": "PREPARE"}))
    assert node.state_digest() == before


def test_halted_node_rejects_events():
    bench, _ = fresh_pair()
    node = bench.nodes["p2"]
    node.halted = True
    with pytest.raises(HaltedError):
        node.step(InvokeJoin())


def test_dormant_node_never_sends():
    bench, _ = fresh_pair()
    node = bench.nodes["p5"]
    actions = node.step(Receive("p1", bench.raw("p1", Prepare(b"m", bench.initial_view)),
                                {"msg": "PREPARE"}))
    assert not actions


@given(st.lists(st.tuples(st.sampled_from(["p1", "p3", "p4"]),
                          st.sampled_from(["prepare", "deliver", "reconfig"]),
                          st.binary(min_size=1, max_size=4)),
                max_size=12))
@settings(max_examples=50, deadline=None)
def test_random_event_sequences_replay_identically(script):
    benches = [Bench(["p1", "p2", "p3", "p4"]) for _ in range(2)]
    digests = []
    for bench in benches:
        node = bench.nodes["p2"]
        for author, kind, payload in script:
            if kind == "prepare":
                msg = Prepare(payload, bench.initial_view)
            elif kind == "deliver":
                msg = Deliver(payload, bench.initial_view)
            else:
                msg = Reconfig(plus(author), bench.initial_view)
            node.step(Receive(author, bench.raw(author, msg), message_meta(msg)))
        digests.append(node.state_digest())
    assert digests[0] == digests[1]


def test_discovery_reply_injection_extends_trust():
    from dbrb.engine import DiscoveryReply
    from dbrb.messages import Install, ViewHistory, converged_signed_bytes

    bench, _ = fresh_pair()
    node = bench.nodes["p5"]
    node.step(InvokeJoin())
    v0 = bench.initial_view
    from dbrb.views import View

    v1 = View(v0.changes | {plus("p5")})
    seq = frozenset({v1})
    sigs = tuple((pid, bench.keyring.sign(pid, converged_signed_bytes(seq, v0, pid)))
                 for pid in ("p1", "p2", "p3"))
    link = Install(tuple(sorted(v0.member_set | v1.member_set)), v1, seq, v0, sigs, ())
    actions = node.step(DiscoveryReply(ViewHistory((v0, v1), (link,))))
    assert node._is_trusted(v1)
    reconfigs = sends_of(actions, "RECONFIG")
    assert sorted(r.to for r in reconfigs) == sorted(v1.members)
