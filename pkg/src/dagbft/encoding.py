"""Canonical byte encodings and the 64-bit content digest.

All ids (unit hashes, block hashes) are 64-bit integers derived from a
canonical little-endian encoding with a fixed field order.  The digest is
deterministic and collision-checked at insertion, which is all the
simulator needs for reproducible tie-breaks.
"""

from __future__ import annotations

import hashlib
import struct

KIND_PROPOSAL = 0
KIND_CONFIRMATION = 1
KIND_WITNESS = 2

KIND_NAMES = {KIND_PROPOSAL: "proposal", KIND_CONFIRMATION: "confirmation", KIND_WITNESS: "witness"}


def digest64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def encode_unit(
    sender: int,
    seq: int,
    round_id: int,
    timestamp: int,
    kind: int,
    citations: tuple[int, ...],
    block_hash: int | None,
) -> bytes:
    """Field order: sender, seq, round_id, timestamp, kind, citations ascending, block hash."""
    buf = bytearray(struct.pack("<IIqqB", sender, seq, round_id, timestamp, kind))
    buf += struct.pack("<I", len(citations))
    for c in sorted(citations):
        buf += struct.pack("<Q", c)
    if block_hash is None:
        buf += b"\x00"
    else:
        buf += b"\x01" + struct.pack("<Q", block_hash)
    return bytes(buf)


def decode_unit(data: bytes) -> dict:
    sender, seq, round_id, timestamp, kind = struct.unpack_from("<IIqqB", data, 0)
    off = struct.calcsize("<IIqqB")
    (ncit,) = struct.unpack_from("<I", data, off)
    off += 4
    citations = struct.unpack_from(f"<{ncit}Q", data, off) if ncit else ()
    off += 8 * ncit
    flag = data[off]
    off += 1
    block_hash = None
    if flag:
        (block_hash,) = struct.unpack_from("<Q", data, off)
        off += 8
    if off != len(data):
        raise ValueError("trailing bytes in unit encoding")
    return {
        "sender": sender,
        "seq": seq,
        "round_id": round_id,
        "timestamp": timestamp,
        "kind": kind,
        "citations": tuple(citations),
        "block_hash": block_hash,
    }


def encode_block(parent: int | None, height: int, creator: int, slot: int, payload: bytes) -> bytes:
    buf = bytearray()
    if parent is None:
        buf += b"\x00"
    else:
        buf += b"\x01" + struct.pack("<Q", parent)
    buf += struct.pack("<IIq", height, creator, slot)
    buf += struct.pack("<I", len(payload)) + payload
    return bytes(buf)


def decode_block(data: bytes) -> dict:
    off = 0
    parent = None
    if data[off]:
        (parent,) = struct.unpack_from("<Q", data, 1)
        off = 9
    else:
        off = 1
    height, creator, slot = struct.unpack_from("<IIq", data, off)
    off += struct.calcsize("<IIq")
    (plen,) = struct.unpack_from("<I", data, off)
    off += 4
    payload = data[off : off + plen]
    if off + plen != len(data):
        raise ValueError("trailing bytes in block encoding")
    return {"parent": parent, "height": height, "creator": creator, "slot": slot, "payload": payload}


def encode_endorsement(endorser: int, target: int) -> bytes:
    return struct.pack("<IQ", endorser, target)
