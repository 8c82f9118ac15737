"""CoinShuffle-style mixing of equal-denomination assets within one group.

Phases:

0. setup: members agree on an order (by commitment hash) and a denomination.
1. every member broadcasts a signed, fresh encryption key.
2. members build the shuffled list of target accounts. P1 seeds it with its
   target wrapped for P2..Pn; every later Pi peels one layer off each entry
   and appends its own target wrapped for P(i+1)..Pn, then forwards the
   shuffled list. Pn's output is the plaintext list.
3. each member signs the transfer once it sees its target exactly once;
   only a fully signed transfer reaches the ledger.

Faults are injected per member through ``MixMember.fault``.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field
from enum import Enum

from ..ledger import Asset
from .bus import Bus, Message, pack_list, unpack_list
from .crypto import CryptoBackend, DecryptError, HybridBackend, KeyPair

log = logging.getLogger(__name__)

FAULTS = ("forge_key", "duplicate_key", "garbage_layer", "drop_shuffle", "replace_target", "withhold_signature")


class MixError(Exception):
    pass


class TooFewParticipants(MixError):
    pass


class UnequalAmounts(MixError):
    pass


class Phase(str, Enum):
    SETUP = "Setup"
    KEYS = "Keys"
    SHUFFLE = "Shuffle"
    SIGN = "Sign"
    DONE = "Done"
    ABORTED = "Aborted"


@dataclass
class MixMember:
    name: str
    input_account: str
    target_account: str
    asset: Asset
    fault: str | None = None


@dataclass
class _Participant:
    member: MixMember
    rng: random.Random
    signing: KeyPair
    enc: KeyPair | None = None
    commitment: str = ""


@dataclass
class MixReceipt:
    session_id: str
    inputs: list[str]
    outputs: list[tuple[str, Asset]]
    digest: str


@dataclass
class MixSession:
    session_id: str
    group_id: str
    participants: list[_Participant]
    crypto: CryptoBackend
    bus: Bus
    phase: Phase = Phase.SETUP
    shuffle_step: int = 0
    shuffled: list[bytes] = field(default_factory=list)
    keys: dict[str, bytes] = field(default_factory=dict)
    blame: str | None = None
    reason: str | None = None
    receipt: MixReceipt | None = None
    history: list[tuple[str, int]] = field(default_factory=list)

    @property
    def order(self) -> list[str]:
        return [p.member.name for p in self.participants]

    @property
    def ok(self) -> bool:
        return self.phase is Phase.DONE

    def _enter(self, phase: Phase, step: int = 0) -> None:
        self.phase, self.shuffle_step = phase, step
        self.history.append((phase.value, step))

    def abort(self, blame: str | None, reason: str) -> "MixSession":
        self.blame, self.reason = blame, reason
        self._enter(Phase.ABORTED)
        log.warning("mix %s aborted (%s), blame: %s", self.session_id, reason, blame or "none")
        return self


def _commitment(session_id: str, member: MixMember, verify_key: bytes) -> str:
    h = hashlib.sha256()
    for part in (session_id.encode(), member.input_account.encode(), verify_key):
        h.update(len(part).to_bytes(4, "big") + part)
    return h.hexdigest()


def phase0_setup(members: list[MixMember], session_id: str, crypto: CryptoBackend | None = None,
                 rng: random.Random | None = None, bus: Bus | None = None, ledger=None) -> MixSession:
    crypto = crypto or HybridBackend()
    rng = rng or random.Random()
    if len(members) < 2:
        raise TooFewParticipants(f"{len(members)} member(s); at least 2 are required")
    denom = members[0].asset
    for m in members[1:]:
        if m.asset != denom:
            raise UnequalAmounts(f"{m.name} mixes {m.asset}, expected {denom}")
    if ledger is not None:
        for m in members:
            if ledger.group_of(m.input_account) != denom.group:
                raise MixError(f"{m.name} is not in group {denom.group}")
    parts = []
    for m in members:
        prng = random.Random(rng.getrandbits(64))
        signing = crypto.sign_keygen(prng)
        parts.append(_Participant(m, prng, signing, commitment=_commitment(session_id, m, signing.public)))
    parts.sort(key=lambda p: p.commitment)
    session = MixSession(session_id, denom.group, parts, crypto, bus or Bus())
    session.history.append((Phase.SETUP.value, 0))
    return session


def _send(session: MixSession, p: _Participant, phase: int, payload: bytes) -> None:
    unsigned = Message(session.session_id, phase, p.member.name, payload, b"")
    sig = session.crypto.sign(p.signing, unsigned.signed_part())
    session.bus.send(Message(session.session_id, phase, p.member.name, payload, sig))


def _verified(session: MixSession, msg: Message) -> bool:
    p = next((q for q in session.participants if q.member.name == msg.sender), None)
    return p is not None and session.crypto.verify(p.signing.public, msg.signed_part(), msg.signature)


def phase1_broadcast_keys(session: MixSession) -> MixSession:
    if session.phase is not Phase.SETUP:
        raise MixError(f"phase 1 needs Setup, session is {session.phase.value}")
    c = session.crypto
    for p in session.participants:
        p.enc = c.keygen(p.rng)
        _send(session, p, 1, p.enc.public)
        if p.member.fault == "forge_key":
            # a second, tampered key announcement under the same sender name
            session.bus.send(Message(session.session_id, 1, p.member.name, c.keygen(p.rng).public, b"\x00" * 64))
        if p.member.fault == "duplicate_key":
            _send(session, p, 1, p.enc.public)
    for p in session.participants:
        name = p.member.name
        msgs = list(session.bus.receive(session.session_id, 1, name))
        if not msgs:
            return session.abort(name, "missing key broadcast")
        for msg in msgs:
            if not _verified(session, msg):
                return session.abort(name, "BadSignature")
        distinct = {m.payload for m in msgs}
        if len(distinct) != 1:
            return session.abort(name, "conflicting key broadcasts")
        session.keys[name] = distinct.pop()
    session._enter(Phase.KEYS)
    return session


def _wrap(session: MixSession, target: bytes, recipients: list[_Participant], rng: random.Random) -> bytes:
    blob = target
    for q in reversed(recipients):
        blob = session.crypto.encrypt(session.keys[q.member.name], blob, rng)
    return blob


def phase2_shuffle(session: MixSession) -> MixSession:
    if session.phase is not Phase.KEYS:
        raise MixError(f"phase 2 needs Keys, session is {session.phase.value}")
    parts = session.participants
    n = len(parts)
    incoming: list[bytes] = []
    for i, p in enumerate(parts):
        session._enter(Phase.SHUFFLE, i + 1)
        if i > 0:
            prev = parts[i - 1].member.name
            msgs = [m for m in session.bus.receive(session.session_id, 2, prev) if _verified(session, m)]
            if len(msgs) != 1:
                return session.abort(prev, "missing shuffle forward")
            incoming = unpack_list(msgs[0].payload)
            if len(incoming) != i:
                return session.abort(prev, f"forwarded {len(incoming)} entries, expected {i}")
            peeled = []
            for blob in incoming:
                try:
                    peeled.append(session.crypto.decrypt(p.enc, blob))
                except DecryptError:
                    return session.abort(prev, "MalformedLayer")
            incoming = peeled
        own = _wrap(session, p.member.target_account.encode(), parts[i + 1:], p.rng)
        entries = incoming + [own]
        p.rng.shuffle(entries)
        if p.member.fault == "garbage_layer" and i < n - 1:
            entries[0] = p.rng.randbytes(len(entries[0]))
        if p.member.fault == "replace_target":
            entries[p.rng.randrange(len(entries))] = _wrap(session, b"attacker-sink", parts[i + 1:], p.rng)
        session.shuffled = entries
        if p.member.fault == "drop_shuffle":
            continue
        _send(session, p, 2, pack_list(entries))
    last = parts[-1].member.name
    if not [m for m in session.bus.receive(session.session_id, 2, last) if _verified(session, m)]:
        return session.abort(last, "missing final list")
    session._enter(Phase.SIGN)
    return session


def transfer_digest(session: MixSession, inputs: list[str], outputs: list[tuple[str, Asset]]) -> bytes:
    h = hashlib.sha256(session.session_id.encode())
    for a in inputs:
        h.update(b"in:" + a.encode())
    for acct, asset in outputs:
        h.update(f"out:{acct}:{asset.kind}:{asset.amount!r}:{sorted(asset.intervals)}:{asset.group}".encode())
    return h.digest()


def phase3_sign_and_submit(session: MixSession, ledger) -> MixSession:
    if session.phase is not Phase.SIGN:
        raise MixError(f"phase 3 needs Sign, session is {session.phase.value}")
    targets = [t.decode(errors="replace") for t in session.shuffled]
    denom = session.participants[0].member.asset
    inputs = [p.member.input_account for p in session.participants]
    outputs = [(t, denom) for t in targets]
    digest = transfer_digest(session, inputs, outputs)
    for p in session.participants:
        if targets.count(p.member.target_account) != 1:
            return session.abort(p.member.name, "MissingTarget")
        if p.member.fault != "withhold_signature":
            _send(session, p, 3, session.crypto.sign(p.signing, digest))
    for p in session.participants:
        msgs = [m for m in session.bus.receive(session.session_id, 3, p.member.name) if _verified(session, m)]
        if not any(session.crypto.verify(p.signing.public, digest, m.payload) for m in msgs):
            return session.abort(p.member.name, "missing signature")
    ledger.transfer_assets(inputs, outputs)
    session.receipt = MixReceipt(session.session_id, inputs, outputs, digest.hex())
    session._enter(Phase.DONE)
    return session


def run_mix(members: list[MixMember], ledger, session_id: str, crypto: CryptoBackend | None = None,
            rng: random.Random | None = None, bus: Bus | None = None) -> MixSession:
    """All four phases; the ledger is touched only by a fully signed phase 3."""
    session = phase0_setup(members, session_id, crypto, rng, bus, ledger)
    for step in (phase1_broadcast_keys, phase2_shuffle):
        step(session)
        if session.phase is Phase.ABORTED:
            return session
    return phase3_sign_and_submit(session, ledger)
