import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import small_ledger
from transax.ledger import EPA, Asset, CrossGroupTransfer
from transax.mixer import (Bus, DecryptError, EnvelopeBackend, HybridBackend, Message, MixError, MixMember, Phase,
                           TooFewParticipants, UnequalAmounts, phase0_setup, phase1_broadcast_keys, phase2_shuffle,
                           phase3_sign_and_submit, run_mix)
from transax.mixer.bus import pack_list, unpack_list
from transax.mixer.protocol import FAULTS

DENOM = Asset(EPA, 5, {48}, "g1")


def setup_mix(n: int, fault: str | None = None, faulty: int = 0, two_groups: bool = False):
    ledger = small_ledger(tuple((f"m{i}", 10, 10) for i in range(n)), two_groups=two_groups)
    members = []
    for i in range(n):
        ledger.withdraw_assets(f"A-m{i}", EPA, 5, {48})
        members.append(MixMember(f"P{i}", f"A-m{i}", f"T{i}", DENOM, fault if i == faulty else None))
    return ledger, members


# ------------------------------------------------------------------- crypto
@pytest.mark.parametrize("backend", [HybridBackend(), EnvelopeBackend()])
def test_crypto_roundtrip_and_randomized(backend):
    rng = random.Random(1)
    kp = backend.keygen(rng)
    a = backend.encrypt(kp.public, b"target", rng)
    b = backend.encrypt(kp.public, b"target", rng)
    assert a != b
    assert backend.decrypt(kp, a) == backend.decrypt(kp, b) == b"target"
    other = backend.keygen(rng)
    with pytest.raises(DecryptError):
        backend.decrypt(other, a)


@pytest.mark.parametrize("backend", [HybridBackend(), EnvelopeBackend()])
def test_signatures(backend):
    kp = backend.sign_keygen(random.Random(2))
    sig = backend.sign(kp, b"msg")
    assert backend.verify(kp.public, b"msg", sig)
    assert not backend.verify(kp.public, b"msh", sig)


def test_hybrid_rejects_garbage():
    c = HybridBackend()
    kp = c.keygen(random.Random(3))
    with pytest.raises(DecryptError):
        c.decrypt(kp, b"\x00" * 80)


@given(st.binary(max_size=200), st.integers(0, 2**32 - 1))
def test_roundtrip_property(data, seed):
    rng = random.Random(seed)
    for c in (HybridBackend(), EnvelopeBackend()):
        kp = c.keygen(rng)
        assert c.decrypt(kp, c.encrypt(kp.public, data, rng)) == data


def test_envelope_layers():
    c = EnvelopeBackend()
    rng = random.Random(0)
    keys = [c.keygen(rng) for _ in range(3)]
    blob = b"x"
    for k in keys:
        blob = c.encrypt(k.public, blob, rng)
    assert c.layers(blob) == 3
    assert c.layers(c.decrypt(keys[-1], blob)) == 2


# ---------------------------------------------------------------------- bus
@given(st.text(max_size=10), st.integers(0, 3), st.text(max_size=10), st.binary(max_size=50), st.binary(max_size=64))
def test_message_codec(sid, phase, sender, payload, sig):
    msg = Message(sid, phase, sender, payload, sig)
    assert Message.decode(msg.encode()) == msg


@given(st.lists(st.binary(max_size=20), max_size=6))
def test_pack_list(items):
    assert unpack_list(pack_list(items)) == items


def test_bus_drop():
    bus = Bus(drop=lambda m: m.sender == "x")
    bus.send(Message("s", 1, "x", b"", b""))
    bus.send(Message("s", 1, "y", b"", b""))
    assert [m.sender for m in bus.receive("s", 1)] == ["y"]
    assert len(bus.dropped) == 1


# ------------------------------------------------------------------- phases
def test_setup_orders_by_commitment():
    _, members = setup_mix(3)
    s1 = phase0_setup(members, "sess", EnvelopeBackend(), random.Random(5))
    s2 = phase0_setup(list(reversed(members)), "sess", EnvelopeBackend(), random.Random(5))
    assert len(s1.order) == 3 and sorted(s1.order) == ["P0", "P1", "P2"]
    assert [p.commitment for p in s1.participants] == sorted(p.commitment for p in s1.participants)
    assert s1.phase is Phase.SETUP and s2.phase is Phase.SETUP


def test_setup_too_few():
    _, members = setup_mix(1)
    with pytest.raises(TooFewParticipants):
        phase0_setup(members, "s")


def test_setup_unequal():
    _, members = setup_mix(2)
    members[1].asset = Asset(EPA, 4, {48}, "g1")
    with pytest.raises(UnequalAmounts):
        phase0_setup(members, "s")


def test_setup_wrong_group():
    ledger, members = setup_mix(2, two_groups=True)
    with pytest.raises(MixError):
        phase0_setup(members, "s", ledger=ledger)


def test_honest_keys():
    _, members = setup_mix(3)
    s = phase1_broadcast_keys(phase0_setup(members, "s", EnvelopeBackend(), random.Random(1)))
    assert s.phase is Phase.KEYS and len(s.keys) == 3


def test_forged_key_aborts_with_blame():
    _, members = setup_mix(3, "forge_key", 1)
    s = phase1_broadcast_keys(phase0_setup(members, "s", HybridBackend(), random.Random(1)))
    assert s.phase is Phase.ABORTED and s.blame == "P1" and s.reason == "BadSignature"


def test_duplicate_key_is_idempotent():
    _, members = setup_mix(3, "duplicate_key", 2)
    s = phase1_broadcast_keys(phase0_setup(members, "s", HybridBackend(), random.Random(1)))
    assert s.phase is Phase.KEYS


def test_shuffle_permutation():
    _, members = setup_mix(3)
    s = phase2_shuffle(phase1_broadcast_keys(phase0_setup(members, "s", HybridBackend(), random.Random(4))))
    assert s.phase is Phase.SIGN
    assert sorted(t.decode() for t in s.shuffled) == ["T0", "T1", "T2"]


def test_layer_count_invariant():
    n = 5
    _, members = setup_mix(n)
    c = EnvelopeBackend()
    s = phase2_shuffle(phase1_broadcast_keys(phase0_setup(members, "s", c, random.Random(9))))
    assert s.phase is Phase.SIGN
    for i, name in enumerate(s.order, start=1):
        (msg,) = list(s.bus.receive("s", 2, name))
        entries = unpack_list(msg.payload)
        assert len(entries) == i
        assert all(c.layers(e) == n - i for e in entries)


def test_drop_mid_shuffle_aborts():
    ledger, members = setup_mix(3, "drop_shuffle", 1)
    before = ledger.state_hash()
    s = run_mix(members, ledger, "s", EnvelopeBackend(), random.Random(1))
    last = s.order.index("P1") == len(s.order) - 1
    assert s.phase is Phase.ABORTED and s.blame == "P1"
    assert s.reason == ("missing final list" if last else "missing shuffle forward")
    assert ledger.state_hash() == before


def test_network_drop_aborts():
    ledger, members = setup_mix(3)
    before = ledger.state_hash()
    bus = Bus(drop=lambda m: m.phase == 3)
    s = run_mix(members, ledger, "s", HybridBackend(), random.Random(1), bus)
    assert s.phase is Phase.ABORTED and s.reason == "missing signature"
    assert ledger.state_hash() == before


def test_garbage_layer_blames_sender():
    ledger, members = setup_mix(4, "garbage_layer", 0)
    s = run_mix(members, ledger, "s", HybridBackend(), random.Random(2))
    assert s.order.index("P0") < 3  # seed chosen so the faulty member is not the last shuffler
    assert s.phase is Phase.ABORTED and s.reason == "MalformedLayer"
    assert s.blame == "P0"


def test_missing_target_refuses():
    ledger, members = setup_mix(3, "replace_target", 1)
    before = ledger.state_hash()
    s = run_mix(members, ledger, "s", EnvelopeBackend(), random.Random(3))
    assert s.phase is Phase.ABORTED and s.reason == "MissingTarget"
    assert ledger.state_hash() == before


def test_phase_order_enforced():
    _, members = setup_mix(2)
    s = phase0_setup(members, "s", EnvelopeBackend(), random.Random(0))
    with pytest.raises(MixError):
        phase2_shuffle(s)
    with pytest.raises(MixError):
        phase3_sign_and_submit(s, None)


# ------------------------------------------------------------------ run_mix
def test_three_honest_on_ledger():
    ledger, members = setup_mix(3)
    s = run_mix(members, ledger, "s", HybridBackend(), random.Random(7))
    assert s.ok and s.receipt is not None
    for i in range(3):
        assert ledger.balance(f"T{i}") == [DENOM]
        assert ledger.balance(f"A-m{i}") == []
    assert ledger.check_conservation() == []


def test_cross_group_target_rejected():
    # meter "x" lands on the second feeder, so A-x belongs to group g2
    ledger = small_ledger((("m0", 10, 10), ("x", 10, 10), ("m1", 10, 10)), two_groups=True)
    ledger.withdraw_assets("A-m0", EPA, 5, {48})
    ledger.withdraw_assets("A-m1", EPA, 5, {48})
    members = [MixMember("P0", "A-m0", "A-x", DENOM), MixMember("P1", "A-m1", "T1", DENOM)]
    before = ledger.state_hash()
    with pytest.raises(CrossGroupTransfer):
        run_mix(members, ledger, "s", EnvelopeBackend(), random.Random(0))
    assert ledger.state_hash() == before


def test_n2_reproducible():
    perms = set()
    for _ in range(3):
        ledger, members = setup_mix(2)
        s = run_mix(members, ledger, "s", HybridBackend(), random.Random(42))
        assert s.ok
        perms.add(tuple(t for t, _ in s.receipt.outputs))
    assert len(perms) == 1


def test_n5_success():
    ledger, members = setup_mix(5)
    s = run_mix(members, ledger, "s", HybridBackend(), random.Random(5))
    assert s.ok
    assert Counter(a for a, _ in s.receipt.outputs) == Counter(f"T{i}" for i in range(5))


@pytest.mark.parametrize("fault", FAULTS)
def test_every_fault_is_atomic(fault):
    for faulty in range(3):
        ledger, members = setup_mix(3, fault, faulty)
        before = ledger.state_hash()
        s = run_mix(members, ledger, f"s-{fault}", EnvelopeBackend(), random.Random(faulty))
        if fault == "duplicate_key":
            assert s.ok
            continue
        if fault == "garbage_layer" and s.order.index(f"P{faulty}") == 2:
            assert s.ok  # the last shuffler forwards plaintext, nothing left to corrupt
            continue
        assert s.phase is Phase.ABORTED, fault
        assert s.blame is not None
        assert ledger.state_hash() == before


@settings(max_examples=30)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_value_conservation(n, seed):
    ledger, members = setup_mix(n)
    s = run_mix(members, ledger, "s", EnvelopeBackend(), random.Random(seed))
    assert s.ok
    out = Counter((a.amount, a.intervals, a.group, a.kind) for _, a in s.receipt.outputs)
    assert out == Counter((m.asset.amount, m.asset.intervals, m.asset.group, m.asset.kind) for m in members)
    assert ledger.check_conservation() == []
