"""Endorsements, naive citations, and the limited-naivety validity check.

An endorsement says its sender saw no equivocation by a unit's creator when
it was issued.  Once a strict majority of validator weight endorses a unit,
the unit is `endorsed` in that local view and shields everything below it
from counting as a naive citation.  The limited-naivety check then caps how
many branches of any equivocation a single validator can naively cite, which
is what bounds fork-bomb spam.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Optional

from .encoding import KIND_WITNESS
from .units import Unit, WeightMap, make_unit

if TYPE_CHECKING:  # pragma: no cover
    from .units import ProtocolState


@dataclass(frozen=True)
class Endorsement:
    endorser: int
    target: int


class RecordStatus(Enum):
    RECORDED = "recorded"
    DUPLICATE = "duplicate"
    NEWLY_ENDORSED = "newly_endorsed"


class EndorsementLedger:
    """Per-unit endorser sets; endorsed status flips at strict weight majority."""

    def __init__(self, weights: WeightMap):
        self.weights = weights
        self.endorsers: dict[int, set[int]] = {}
        self.endorsed: set[int] = set()

    def record(self, e: Endorsement) -> RecordStatus:
        got = self.endorsers.setdefault(e.target, set())
        if e.endorser in got:
            return RecordStatus.DUPLICATE
        got.add(e.endorser)
        if e.target not in self.endorsed and 2 * self.weights.sum_of(got) > self.weights.total:
            self.endorsed.add(e.target)
            return RecordStatus.NEWLY_ENDORSED
        return RecordStatus.RECORDED

    def is_endorsed(self, h: int) -> bool:
        return h in self.endorsed

    def endorsers_of(self, h: int) -> set[int]:
        return set(self.endorsers.get(h, ()))


def record_endorsement(ledger: EndorsementLedger, e: Endorsement) -> RecordStatus:
    return ledger.record(e)


def naively_cites(state: "ProtocolState", ledger: EndorsementLedger, u: int, v: int) -> bool:
    """u >n v: u strictly above v with no endorsed unit on the interval."""
    if not state.justifies(u, v, strict=True):
        raise ValueError("naive citation is only defined for u strictly above v")
    down_u = state.down_mask(u)
    vpos = state.position(v)
    for e in ledger.endorsed:
        if e not in state:
            continue
        epos = state.position(e)
        if down_u >> epos & 1 and (epos == vpos or state._down[epos] >> vpos & 1):
            return False
    return True


def _shadow_mask(state: "ProtocolState", ledger: EndorsementLedger, down: int) -> int:
    """Union of closed downsets of endorsed units inside `down`."""
    shadow = 0
    for e in ledger.endorsed:
        if e not in state:
            continue
        epos = state.position(e)
        if down >> epos & 1:
            shadow |= state._down[epos] | (1 << epos)
    return shadow


def _naive_reach(state: "ProtocolState", ledger: EndorsementLedger, sender: int, down: int) -> int:
    """Everything some unit by `sender` with downset <= `down` cites naively.

    `down` is the strict downset of the unit under test; the test unit's own
    reach plus each earlier own unit's reach.
    """
    reach = down & ~_shadow_mask(state, ledger, down)
    for w in state.by_sender[sender]:
        wpos = state.position(w)
        if down >> wpos & 1:
            wdown = state._down[wpos]
            reach |= wdown & ~_shadow_mask(state, ledger, wdown)
    return reach


def _lnc_ok(state: "ProtocolState", ledger: EndorsementLedger, sender: int, down: int) -> bool:
    reach = _naive_reach(state, ledger, sender, down)
    for v in range(state.n):
        for a, b in state._pairs_by_sender[v]:
            if reach >> a & 1 and reach >> b & 1:
                return False
    return True


def lnc_check(state: "ProtocolState", ledger: EndorsementLedger, u: int) -> bool:
    """True iff no equivocation has both branches naively cited by units of
    u's sender at or below u."""
    unit = state.units[u]
    return _lnc_ok(state, ledger, unit.sender, state.down_mask(u))


def lnc_check_hypothetical(
    state: "ProtocolState", ledger: EndorsementLedger, sender: int, citations: Iterable[int]
) -> bool:
    """LNC for a unit that is not inserted yet (reception gating, own units)."""
    down, _, _ = state.preview(citations)
    return _lnc_ok(state, ledger, sender, down)


def should_endorse_naive(state: "ProtocolState", unit: Unit) -> bool:
    """Endorse anything whose sender has no known equivocation."""
    return unit.sender not in state.equivocator_ids()


def should_endorse_refined(state: "ProtocolState", unit: Unit, equivocators: set[int]) -> bool:
    """Endorse only units that bring fresh material by a known equivocator.

    The unit must not itself prove the equivocation, and its sender's
    previous unit must not already cite the fresh material.
    """
    if unit.sender in equivocators:
        return False
    h = unit.digest
    down = state.down_mask(h)
    eq_in_u = state.equivocators([h])
    prev = state.self_parent(h)
    prev_dbar = state.dbar_mask(prev) if prev is not None else 0
    for w_vid in sorted(equivocators):
        if w_vid in eq_in_u:
            continue
        for w in state.by_sender[w_vid]:
            wpos = state.position(w)
            if down >> wpos & 1 and not (prev_dbar >> wpos & 1):
                return True
    return False


def fork_bomb(
    coalition: list[int],
    depth: int,
    round_id: int,
    base_tick: int,
    base_citations: tuple[int, ...] = (),
    prev_tops: Optional[dict[int, int]] = None,
) -> tuple[list[Unit], dict[int, int]]:
    """Layered equivocation pattern in which no unit directly cites a fork.

    Layer i (1-based) holds 2^i units created by one coalition pair; each
    unit cites one unit from each member of the next pair down.  Leaves cite
    `base_citations`.  The two depth-1 tops chain onto `prev_tops` so their
    creators stay clean across waves.  Returns (units in insert order, new
    top unit per top creator).
    """
    if len(coalition) < 2:
        raise ValueError("a bomb needs at least two validators")
    prev_tops = prev_tops or {}
    stamp = base_tick * 1000

    def fresh_stamp() -> int:
        nonlocal stamp
        stamp += 1
        return stamp

    units: list[Unit] = []
    if depth == 1:
        a, b = coalition[0], coalition[1]
        leaf1 = make_unit(b, 0, round_id, fresh_stamp(), KIND_WITNESS, base_citations)
        leaf2 = make_unit(b, 0, round_id, fresh_stamp(), KIND_WITNESS, base_citations)
        top1 = make_unit(
            a, 0, round_id, fresh_stamp(), KIND_WITNESS,
            (leaf1.digest,) + ((prev_tops[a],) if a in prev_tops else ()),
        )
        top2 = make_unit(
            b, 1, round_id, fresh_stamp(), KIND_WITNESS,
            (leaf2.digest,) + ((prev_tops[b],) if b in prev_tops else ()),
        )
        return [leaf1, leaf2, top1, top2], {a: top1.digest, b: top2.digest}

    pairs = [(coalition[2 * i % len(coalition)], coalition[(2 * i + 1) % len(coalition)]) for i in range(depth)]
    layer: dict[tuple[int, ...], Unit] = {}
    for i in range(depth, 0, -1):
        pair = pairs[i - 1]
        below = layer
        layer = {}
        for s in _strings(i):
            creator = pair[s[-1] - 1]
            if i == depth:
                cites = base_citations
            else:
                cites = (below[s + (1,)].digest, below[s + (2,)].digest)
            if i == 1 and creator in prev_tops:
                cites = tuple(cites) + (prev_tops[creator],)
            layer[s] = make_unit(creator, 0, round_id, fresh_stamp(), KIND_WITNESS, cites)
        units.extend(layer[s] for s in sorted(layer))
    tops = {u.sender: u.digest for u in (layer[(1,)], layer[(2,)])}
    return units, tops


def _strings(length: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = [()]
    for _ in range(length):
        out = [s + (c,) for s in out for c in (1, 2)]
    return out
