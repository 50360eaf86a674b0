"""Byte-level vocabularies.

Ids 0..2 are PAD/BOS/EOS. The full vocabulary maps byte ``b`` to ``b + 3``
(259 ids, the "LLM tokenizer"). The restricted vocabulary covers a
64-symbol alphabet with its own dense ids (67 ids, the "SLM tokenizer").
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3

RESTRICTED_ALPHABET = (string.ascii_lowercase + string.ascii_uppercase + string.digits + " :").encode()
assert len(RESTRICTED_ALPHABET) == 64


class EncodingError(ValueError):
    pass


class DecodingError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    name: str
    alphabet: bytes
    _to_id: dict = field(repr=False, compare=False, hash=False, default=None)

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet has duplicate bytes")
        object.__setattr__(self, "_to_id", {b: i + N_SPECIAL for i, b in enumerate(self.alphabet)})

    @property
    def size(self) -> int:
        return N_SPECIAL + len(self.alphabet)

    def to_json(self) -> dict:
        return {"name": self.name, "alphabet": self.alphabet.hex()}

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(d["name"], bytes.fromhex(d["alphabet"]))


BYTE_VOCAB = Vocab("bytes", bytes(range(256)))
SLM_VOCAB = Vocab("restricted64", RESTRICTED_ALPHABET)


def _as_bytes(text) -> bytes:
    return text.encode() if isinstance(text, str) else bytes(text)


def encode(vocab: Vocab, text, add_eos: bool = False) -> list[int]:
    data = _as_bytes(text)
    table = vocab._to_id
    ids = []
    for pos, b in enumerate(data):
        tid = table.get(b)
        if tid is None:
            raise EncodingError(f"byte {b!r} at position {pos} is outside the {vocab.name} alphabet")
        ids.append(tid)
    if add_eos:
        ids.append(EOS)
    return ids


def decode(vocab: Vocab, ids) -> bytes:
    out = bytearray()
    for i in ids:
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise DecodingError(f"id {i} outside vocabulary of size {vocab.size}")
        if i >= N_SPECIAL:
            out.append(vocab.alphabet[i - N_SPECIAL])
    return bytes(out)


def decode_str(vocab: Vocab, ids) -> str:
    return decode(vocab, ids).decode("utf-8", errors="replace")


def strip_at_eos(ids) -> list[int]:
    out = []
    for i in ids:
        if int(i) == EOS:
            break
        out.append(int(i))
    return out
