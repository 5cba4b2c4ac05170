"""The unit DAG: insertion, citation closure, justification order, downsets,
equivocation evidence and latest-message extraction.

A :class:`ProtocolState` is a citation-closed set of units.  Internally every
unit gets a dense position (insertion order, which is always a topological
order because inserts require all citations to be present), and downsets are
kept as arbitrary-precision integer bitmasks over positions.  That makes
reachability queries cheap at desk scale and keeps every tie-break exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Protocol

from .blocks import Block
from .encoding import KIND_PROPOSAL, digest64, encode_unit


class MalformedUnitError(ValueError):
    """Unit violates a structural validity rule."""


@dataclass(frozen=True)
class Unit:
    sender: int
    seq: int
    round_id: int
    timestamp: int
    kind: int
    citations: tuple[int, ...]
    block: Optional[Block]
    digest: int

    def encode(self) -> bytes:
        return encode_unit(
            self.sender,
            self.seq,
            self.round_id,
            self.timestamp,
            self.kind,
            self.citations,
            self.block.digest if self.block else None,
        )


def make_unit(
    sender: int,
    seq: int,
    round_id: int,
    timestamp: int,
    kind: int,
    citations: Iterable[int],
    block: Optional[Block] = None,
) -> Unit:
    citations = tuple(sorted(set(citations)))
    raw = encode_unit(sender, seq, round_id, timestamp, kind, citations, block.digest if block else None)
    return Unit(sender, seq, round_id, timestamp, kind, citations, block, digest64(raw))


@dataclass(frozen=True)
class WeightMap:
    """Per-validator voting weight; unweighted mode is weight 1 everywhere."""

    weights: tuple[int, ...]
    total: int

    @classmethod
    def unit(cls, n: int) -> "WeightMap":
        return cls((1,) * n, n)

    @classmethod
    def of(cls, weights: Iterable[int]) -> "WeightMap":
        w = tuple(int(x) for x in weights)
        if any(x <= 0 for x in w):
            raise ValueError("weights must be positive")
        return cls(w, sum(w))

    def weight(self, vid: int) -> int:
        return self.weights[vid]

    def sum_of(self, vids: Iterable[int]) -> int:
        return sum(self.weights[v] for v in vids)

    @property
    def n(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class EvidencePair:
    """Two units by the same sender, incomparable under the justification order."""

    sender: int
    first: int
    second: int


class InsertStatus(Enum):
    ACCEPTED = "accepted"
    DUPLICATE = "duplicate"
    MISSING_DEPENDENCIES = "missing_dependencies"


@dataclass(frozen=True)
class InsertResult:
    status: InsertStatus
    missing: tuple[int, ...] = ()


class SignatureScheme(Protocol):
    """Pluggable authorship check; the simulator trusts the transport."""

    def verify(self, unit: Unit) -> bool: ...


class NullSignatures:
    """Authorship is authentic by construction inside the simulator."""

    def verify(self, unit: Unit) -> bool:
        return True


class ProtocolState:
    """Citation-closed unit store with equivocation evidence.

    Mutated only through :meth:`insert_unit`; all queries are read-only.
    """

    def __init__(self, n: int):
        self.n = n
        self.units: dict[int, Unit] = {}
        self._pos: dict[int, int] = {}
        self._order: list[int] = []
        self._down: list[int] = []  # strict downset bitmask per position
        self._eq_small: list[int] = []  # validator bitmask: equivocators inside D(u)
        self._latest: list[dict[int, int]] = []  # latest honest message per validator, under u
        self.by_sender: list[list[int]] = [[] for _ in range(n)]
        self.tips: set[int] = set()
        self.evidence: list[EvidencePair] = []
        self._pairs_by_sender: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        self._equivocator_small = 0  # validator bitmask over the whole state

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, h: int) -> bool:
        return h in self.units

    # -- insertion ---------------------------------------------------------

    def insert_unit(self, unit: Unit) -> InsertResult:
        if not (0 <= unit.sender < self.n):
            raise MalformedUnitError(f"sender {unit.sender} out of range")
        if (unit.kind == KIND_PROPOSAL) != (unit.block is not None):
            raise MalformedUnitError("proposal units carry a block, others must not")
        if unit.seq < 0:
            raise MalformedUnitError("negative sequence number")
        prior = self.units.get(unit.digest)
        if prior is not None:
            if prior != unit:
                raise RuntimeError(f"digest collision on {unit.digest:#x}")
            return InsertResult(InsertStatus.DUPLICATE)
        missing = tuple(c for c in unit.citations if c not in self.units)
        if missing:
            return InsertResult(InsertStatus.MISSING_DEPENDENCIES, missing)

        pos = len(self._order)
        down = 0
        eq_small = 0
        for c in unit.citations:
            cp = self._pos[c]
            down |= self._down[cp] | (1 << cp)
            eq_small |= self._eq_small[cp]

        # straddling pairs: an equivocation may only become visible once two
        # branches share a downset
        for v in range(self.n):
            if eq_small >> v & 1:
                continue
            for a, b in self._pairs_by_sender[v]:
                if down >> a & 1 and down >> b & 1:
                    eq_small |= 1 << v
                    break

        latest = self._merge_latest(unit.citations, down, eq_small)

        # evidence against the sender itself
        for w in self.by_sender[unit.sender]:
            wp = self._pos[w]
            if not (down >> wp & 1):
                self.evidence.append(EvidencePair(unit.sender, w, unit.digest))
                self._pairs_by_sender[unit.sender].append((wp, pos))
                self._equivocator_small |= 1 << unit.sender

        self.units[unit.digest] = unit
        self._pos[unit.digest] = pos
        self._order.append(unit.digest)
        self._down.append(down)
        self._eq_small.append(eq_small)
        self._latest.append(latest)
        self.by_sender[unit.sender].append(unit.digest)
        self.tips.difference_update(unit.citations)
        self.tips.add(unit.digest)
        return InsertResult(InsertStatus.ACCEPTED)

    def _merge_latest(self, citations: tuple[int, ...], down: int, eq_small: int) -> dict[int, int]:
        latest: dict[int, int] = {}
        for c in citations:
            cp = self._pos[c]
            cands = dict(self._latest[cp])
            cu = self.units[c]
            cands[cu.sender] = c
            for v, h in cands.items():
                if eq_small >> v & 1:
                    continue
                cur = latest.get(v)
                if cur is None:
                    latest[v] = h
                elif cur != h:
                    # both candidates lie in D(u); a non-equivocator's units
                    # there are totally ordered
                    hp, curp = self._pos[h], self._pos[cur]
                    if self._down[hp] >> curp & 1:
                        latest[v] = h
                    elif not (self._down[curp] >> hp & 1):
                        raise AssertionError("incomparable latest candidates for non-equivocator")
        for v in list(latest):
            if eq_small >> v & 1:
                del latest[v]
        return latest

    # -- order queries -----------------------------------------------------

    def position(self, h: int) -> int:
        try:
            return self._pos[h]
        except KeyError:
            raise KeyError(f"unknown unit {h:#x}") from None

    def down_mask(self, h: int) -> int:
        return self._down[self.position(h)]

    def dbar_mask(self, h: int) -> int:
        p = self.position(h)
        return self._down[p] | (1 << p)

    def justifies(self, a: int, b: int, strict: bool = False) -> bool:
        """True iff b <= a (b reachable from a via citations); strict excludes a == b."""
        if a == b:
            self.position(a)
            return not strict
        return bool(self._down[self.position(a)] >> self.position(b) & 1)

    def _mask_to_hashes(self, mask: int) -> set[int]:
        out = set()
        pos = 0
        while mask:
            if mask & 1:
                out.add(self._order[pos])
            mask >>= 1
            pos += 1
        return out

    def downset(self, h: int) -> set[int]:
        return self._mask_to_hashes(self.down_mask(h))

    def downset_closed(self, h: int) -> set[int]:
        return self._mask_to_hashes(self.dbar_mask(h))

    def downset_of_set(self, hs: Iterable[int]) -> set[int]:
        mask = 0
        for h in hs:
            mask |= self.down_mask(h)
        return self._mask_to_hashes(mask)

    def downset_closed_of_set(self, hs: Iterable[int]) -> set[int]:
        mask = 0
        for h in hs:
            mask |= self.dbar_mask(h)
        return self._mask_to_hashes(mask)

    def is_equivocation(self, a: int, b: int) -> bool:
        ua, ub = self.units.get(a), self.units.get(b)
        if ua is None or ub is None:
            raise KeyError("unknown unit")
        if ua.sender != ub.sender or a == b:
            return False
        return not self.justifies(a, b, strict=True) and not self.justifies(b, a, strict=True)

    def equivocators(self, hs: Iterable[int], closed: bool = False) -> set[int]:
        """Validators with an equivocation pair inside D(hs) (or D-bar with closed=True)."""
        mask = 0
        for h in hs:
            mask |= self.dbar_mask(h) if closed else self.down_mask(h)
        out = set()
        for v in range(self.n):
            if not (self._equivocator_small >> v & 1):
                continue
            for a, b in self._pairs_by_sender[v]:
                if mask >> a & 1 and mask >> b & 1:
                    out.add(v)
                    break
        return out

    def equivocator_ids(self) -> set[int]:
        """Senders with an equivocation pair anywhere in the state."""
        return {v for v in range(self.n) if self._equivocator_small >> v & 1}

    def latest_messages(self, h: int) -> dict[int, int]:
        """Per-validator maximal unit under h, excluding equivocators within D(h)."""
        return dict(self._latest[self.position(h)])

    def latest_message_of(self, h: int, vid: int) -> Optional[int]:
        return self._latest[self.position(h)].get(vid)

    def state_latest(self) -> dict[int, int]:
        """Latest unit per non-equivocating validator over the whole state."""
        out = {}
        for v in range(self.n):
            if self._equivocator_small >> v & 1:
                continue
            if self.by_sender[v]:
                out[v] = self.by_sender[v][-1]
        return out

    def self_parent(self, h: int) -> Optional[int]:
        """The sender's own maximal unit strictly below h, if any.

        Within a chain, insertion order respects the justification order, so
        the last own unit found in D(h) is the maximal one.
        """
        u = self.units[h]
        mask = self.down_mask(h)
        for w in reversed(self.by_sender[u.sender]):
            if mask >> self._pos[w] & 1:
                return w
        return None

    def preview(self, citations: Iterable[int]) -> tuple[int, int, dict[int, int]]:
        """(down mask, equivocator mask, latest map) of a hypothetical unit citing `citations`.

        Used to validate units before admission and to compute the vote a
        fresh unit would carry.
        """
        citations = tuple(citations)
        down = 0
        eq_small = 0
        for c in citations:
            cp = self.position(c)
            down |= self._down[cp] | (1 << cp)
            eq_small |= self._eq_small[cp]
        for v in range(self.n):
            if eq_small >> v & 1:
                continue
            for a, b in self._pairs_by_sender[v]:
                if down >> a & 1 and down >> b & 1:
                    eq_small |= 1 << v
                    break
        latest = self._merge_latest(citations, down, eq_small)
        return down, eq_small, latest


class DependencyBuffer:
    """Units parked on missing citations, keyed by the missing hash."""

    def __init__(self):
        self._waiting: dict[int, list[Unit]] = {}
        self._parked: set[int] = set()

    def __len__(self) -> int:
        return len(self._parked)

    def park(self, unit: Unit, missing: Iterable[int]) -> None:
        if unit.digest in self._parked:
            return
        self._parked.add(unit.digest)
        for h in missing:
            self._waiting.setdefault(h, []).append(unit)

    def is_parked(self, h: int) -> bool:
        return h in self._parked

    def on_available(self, h: int) -> list[Unit]:
        """Units that were waiting on h; caller retries their admission."""
        freed = self._waiting.pop(h, [])
        for u in freed:
            self._parked.discard(u.digest)
        return freed

    def clear(self) -> None:
        self._waiting.clear()
        self._parked.clear()
