"""In-process broadcast bus for mixing sessions, with injectable message drops."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Callable, Iterator


@dataclass(frozen=True)
class Message:
    session_id: str
    phase: int
    sender: str
    payload: bytes
    signature: bytes

    def signed_part(self) -> bytes:
        return _pack([self.session_id.encode(), str(self.phase).encode(), self.sender.encode(), self.payload])

    def encode(self) -> bytes:
        return _pack([self.session_id.encode(), str(self.phase).encode(), self.sender.encode(),
                      self.payload, self.signature])

    @classmethod
    def decode(cls, data: bytes) -> "Message":
        sid, phase, sender, payload, sig = _unpack(data)
        return cls(sid.decode(), int(phase), sender.decode(), payload, sig)

    def to_json(self) -> dict:
        return {"session_id": self.session_id, "phase": self.phase, "sender": self.sender,
                "payload": self.payload.hex(), "signature": self.signature.hex()}


def _pack(fields: list[bytes]) -> bytes:
    return b"".join(struct.pack(">I", len(f)) + f for f in fields)


def _unpack(data: bytes) -> list[bytes]:
    out, i = [], 0
    while i < len(data):
        if i + 4 > len(data):
            raise ValueError("truncated length prefix")
        (n,) = struct.unpack(">I", data[i:i + 4])
        if i + 4 + n > len(data):
            raise ValueError("truncated field")
        out.append(data[i + 4:i + 4 + n])
        i += 4 + n
    return out


def pack_list(items: list[bytes]) -> bytes:
    return _pack(items)


def unpack_list(data: bytes) -> list[bytes]:
    return _unpack(data)


class Bus:
    """Messages travel as encoded bytes; ``drop`` decides which ones vanish in transit."""

    def __init__(self, drop: Callable[[Message], bool] | None = None):
        self.drop = drop or (lambda _m: False)
        self._wire: list[bytes] = []
        self.dropped: list[Message] = []

    def send(self, msg: Message) -> None:
        if self.drop(msg):
            self.dropped.append(msg)
            return
        self._wire.append(msg.encode())

    def receive(self, session_id: str, phase: int, sender: str | None = None) -> Iterator[Message]:
        for raw in self._wire:
            msg = Message.decode(raw)
            if msg.session_id == session_id and msg.phase == phase and (sender is None or msg.sender == sender):
                yield msg

    def trace(self) -> str:
        return "\n".join(json.dumps(Message.decode(raw).to_json(), sort_keys=True) for raw in self._wire)
