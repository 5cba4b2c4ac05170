"""Per-validator state machine: round schedule, unit creation and reception,
endorsement modes, dynamic round exponents, and era transitions.

Each validator is a deterministic (state, event) -> (state, outputs) machine.
`on_tick` drives the three fixed points of a round (proposal at the start,
buffer drain a third in, witness two thirds in); `on_receive` applies the
reception timing rules and all admission gates (structure, spam budget,
dependencies, vote consistency, limited naivety).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from . import finality
from .blocks import Block, BlockTree, VirtualVotes, choose_proposal_parent, genesis_block, make_block
from .encoding import KIND_CONFIRMATION, KIND_PROPOSAL, KIND_WITNESS, digest64
from .endorsements import (
    Endorsement,
    EndorsementLedger,
    RecordStatus,
    lnc_check_hypothetical,
    should_endorse_naive,
    should_endorse_refined,
)
from .units import (
    DependencyBuffer,
    InsertStatus,
    NullSignatures,
    ProtocolState,
    Unit,
    WeightMap,
    make_unit,
)

DIRECT_UNITS_PER_ROUND = 2  # proposal-or-confirmation plus witness


# -- messages ----------------------------------------------------------------


@dataclass(frozen=True)
class UnitMsg:
    era: int
    unit: Unit


@dataclass(frozen=True)
class EndorseMsg:
    era: int
    endorsement: Endorsement


@dataclass(frozen=True)
class EndorseBundleMsg:
    era: int
    target: int
    endorsers: tuple[int, ...]


@dataclass(frozen=True)
class FetchMsg:
    era: int
    digest: int


@dataclass(frozen=True)
class Outbound:
    msg: object
    to: Optional[int] = None  # None broadcasts to everyone else


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ExponentParams:
    n_min: int
    n_max: int
    t0: float
    c_fail: int
    c_succ: int
    c_window: int
    d_succ: int

    def validate(self) -> list[str]:
        errs = []
        if not self.n_min < self.n_max:
            errs.append("n_min must be below n_max")
        if not 0 < self.c_fail < self.c_succ < self.c_window:
            errs.append("need 0 < c_fail < c_succ < c_window")
        if self.d_succ <= 0:
            errs.append("d_succ must be positive")
        return errs


@dataclass(frozen=True)
class ValidatorConfig:
    vid: int
    n: int
    weights: WeightMap
    thresholds: tuple[int, ...]
    delta: int
    round_ticks: Optional[int] = None  # fixed mode
    exponent: Optional[ExponentParams] = None  # dynamic mode
    endorsement_mode: str = "off"  # off | naive | refined
    schedule_kind: str = "round_robin"  # round_robin | seeded
    schedule_seed: int = 0
    era_length: int = 1000
    timestamp_skew: int = 0  # lets adversary drivers fork distinct unit chains

    @property
    def dynamic(self) -> bool:
        return self.exponent is not None

    def t0_threshold(self) -> int:
        """Finalization-rate threshold, as an integer confidence value."""
        if self.exponent is None:
            return 0
        return max(math.ceil(self.exponent.t0 * self.weights.total) - 1, 0)


def leader_for(schedule_kind: str, n: int, seed: int, round_index: int, round_start: int) -> int:
    """Round leader; round-robin cycles ids, seeded mode hashes the start tick."""
    if schedule_kind == "round_robin":
        return round_index % n
    return digest64(b"leader" + seed.to_bytes(8, "little") + round_start.to_bytes(8, "little", signed=True)) % n


class RoundClock:
    """Round boundaries; in dynamic mode maintains the private round exponent."""

    def __init__(self, config: ValidatorConfig):
        self._fixed = config.round_ticks
        self._params = config.exponent
        self.exponent = self._params.n_min if self._params else None
        self.cnt_succ = 0

    def round_ticks(self) -> int:
        return self._fixed if self._fixed is not None else 1 << self.exponent

    def round_start(self, tick: int) -> int:
        r = self.round_ticks()
        return tick - tick % r

    def round_index(self, tick: int) -> int:
        return self.round_start(tick) // self.round_ticks()

    def update(self, tick: int, count_finalized) -> Optional[int]:
        """Dynamic exponent rule; returns the new exponent when it changes.

        `count_finalized(window_ticks)` reports blocks finalized at the
        feedback threshold during the trailing window.
        """
        if self._params is None or tick <= 0:
            return None
        m = self.exponent
        if tick % (1 << (m + 1)) != 0:
            return None
        p = self._params
        b_fin = count_finalized(p.c_window * (1 << m))
        changed = None
        if b_fin <= p.c_fail:
            new = min(m + 1, p.n_max)
            if new != m:
                self.exponent = changed = new
        if b_fin >= p.c_succ:
            self.cnt_succ += 1
        else:
            self.cnt_succ = 0
        if tick % (p.c_window * (1 << (m + 1))) == 0 and self.cnt_succ >= p.d_succ:
            new = max(m - 1, p.n_min)
            if new != m:
                self.exponent = changed = new
            self.cnt_succ = 0
        return changed


@dataclass
class EraState:
    index: int
    root: int  # block hash acting as this era's genesis
    banned: frozenset[int] = frozenset()


class FinalityTracker:
    """Sticky finalization decisions per configured threshold."""

    def __init__(self, thresholds: tuple[int, ...], root: int):
        self.thresholds = tuple(sorted(set(thresholds)))
        self.chains: dict[int, list[int]] = {t: [root] for t in self.thresholds}
        self.events: list[tuple[int, int, int, int]] = []  # (tick, threshold, block, height)

    def rebase(self, root: int) -> None:
        self.chains = {t: [root] for t in self.thresholds}

    def update(self, vv: VirtualVotes, tick: int) -> list[tuple[int, int, int, int]]:
        new = []
        for t in self.thresholds:
            chain = self.chains[t]
            while True:
                kids = sorted(vv.tree.children.get(chain[-1], ()))
                nxt = None
                for k in kids:
                    if finality.final(vv, k, t):
                        nxt = k
                        break  # lowest-hash tie-break; competitors only past the safety bound
                if nxt is None:
                    break
                chain.append(nxt)
                ev = (tick, t, nxt, vv.tree.height(nxt))
                self.events.append(ev)
                new.append(ev)
        return new

    def count_events(self, threshold: int, lo: int, hi: int) -> int:
        return sum(1 for tick, t, _, _ in self.events if t == threshold and lo < tick <= hi)


class _NullTrace:
    def emit(self, tick, kind, sender=-1, recipient=-1, payload=0, extra="") -> None:
        pass


class ValidatorState:
    """One honest validator: local DAG, buffers, clocks, and finality decisions."""

    def __init__(self, config: ValidatorConfig, trace=None):
        self.config = config
        self.vid = config.vid
        self.trace = trace or _NullTrace()
        self.signature_scheme = NullSignatures()
        self.genesis = genesis_block()
        self.tree = BlockTree(self.genesis)
        self.era = EraState(0, self.genesis.digest)
        self.state = ProtocolState(config.n)
        self.vv = VirtualVotes(self.state, self.tree, config.weights, self.genesis.digest)
        self.ledger = EndorsementLedger(config.weights)
        self.clock = RoundClock(config)
        tracked = set(config.thresholds)
        if config.dynamic:
            tracked.add(config.t0_threshold())
        self.tracker = FinalityTracker(tuple(tracked), self.genesis.digest)
        self.mode = "relaxed"
        self.known_equivocators: set[int] = set()
        self.dep_buffer = DependencyBuffer()
        self.lnc_buffer: list[Unit] = []
        self.timing_buffer: list[Unit] = []
        self.era_pending: list[Unit] = []
        self.own_latest: Optional[int] = None
        self.own_seq = 0
        self.counters: dict[str, int] = {}
        self._confirmed_round: Optional[int] = None
        self._round_leader: Optional[int] = None
        self._direct_count: dict[tuple[int, int], int] = {}
        self._fetched: set[int] = set()
        self._spread: set[int] = set()
        self._endorsed_by_me: dict[int, list[int]] = {}  # sender -> unit hashes I endorsed
        self._evidence_seen = 0
        self._out: list[Outbound] = []

    # -- helpers -------------------------------------------------------------

    def _count(self, key: str, inc: int = 1) -> None:
        self.counters[key] = self.counters.get(key, 0) + inc

    def _broadcast(self, msg) -> None:
        self._out.append(Outbound(msg))

    def _send(self, msg, to: int) -> None:
        self._out.append(Outbound(msg, to))

    def _offsets(self) -> tuple[int, int]:
        r = self.clock.round_ticks()
        return r // 3, (2 * r) // 3

    @property
    def endorsements_on(self) -> bool:
        return self.config.endorsement_mode != "off"

    # -- tick handling ---------------------------------------------------

    def on_tick(self, tick: int) -> list[Outbound]:
        self._out = []
        if self.config.dynamic:
            changed = self.update_round_exponent(tick)
            if changed is not None:
                self.trace.emit(tick, "exp", self.vid, extra=str(changed))
        start = self.clock.round_start(tick)
        off = tick - start
        third, two_thirds = self._offsets()
        if off == 0:
            self._round_leader = leader_for(
                self.config.schedule_kind,
                self.config.n,
                self.config.schedule_seed,
                self.clock.round_index(tick),
                start,
            )
            self._confirmed_round = None
            if self._round_leader == self.vid:
                self._drain(tick)
                self._create_proposal(tick, start)
        elif off == third:
            self._drain(tick)
        elif off == two_thirds:
            self._create_unit(KIND_WITNESS, tick, start)
            self._update_finality(tick)
        return self._out

    def update_round_exponent(self, tick: int) -> Optional[int]:
        t0 = self.config.t0_threshold()
        return self.clock.update(tick, lambda window: self.tracker.count_events(t0, tick - window, tick))

    def _drain(self, tick: int) -> None:
        pending, self.timing_buffer = self.timing_buffer, []
        for unit in pending:
            self._admit(unit, tick)

    # -- unit creation -----------------------------------------------------

    def _citations(self) -> tuple[int, ...]:
        if self.mode == "relaxed" or not self.endorsements_on:
            return tuple(sorted(self.state.tips))
        # cautious mode: endorsed frontier, own latest exempt
        cand = sorted(
            (h for h in self.ledger.endorsed if h in self.state),
            key=self.state.position,
            reverse=True,
        )
        covered = 0
        chosen: list[int] = []
        for h in cand:
            pos = self.state.position(h)
            if covered >> pos & 1:
                continue
            chosen.append(h)
            covered |= self.state.dbar_mask(h)
        if self.own_latest is not None and self.own_latest not in chosen:
            chosen.append(self.own_latest)
        return tuple(sorted(chosen))

    def _create_proposal(self, tick: int, round_start: int) -> None:
        citations = self._citations()
        parent_hash = choose_proposal_parent(self.vv, citations)
        payload = b"blk" + self.vid.to_bytes(4, "little") + tick.to_bytes(8, "little", signed=True)
        block = make_block(self.tree.blocks[parent_hash], self.vid, tick, payload)
        self._create_unit(KIND_PROPOSAL, tick, round_start, block=block, citations=citations)

    def _create_unit(
        self,
        kind: int,
        tick: int,
        round_start: int,
        block: Optional[Block] = None,
        citations: Optional[tuple[int, ...]] = None,
    ) -> Unit:
        if citations is None:
            citations = self._citations()
        unit = make_unit(
            self.vid, self.own_seq, round_start, tick + self.config.timestamp_skew, kind, citations, block
        )
        if self.endorsements_on and not lnc_check_hypothetical(self.state, self.ledger, self.vid, citations):
            raise AssertionError("honest validator would violate limited naivety")
        self.own_seq += 1
        self.trace.emit(tick, "create", self.vid, payload=unit.digest, extra=self._unit_hex(unit))
        self._admit(unit, tick)
        self.own_latest = unit.digest
        self._broadcast(UnitMsg(self.era.index, unit))
        self._count("units_created")
        return unit

    @staticmethod
    def _unit_hex(unit: Unit) -> str:
        h = unit.encode().hex()
        if unit.block is not None:
            h += ":" + unit.block.encode().hex()
        return h

    # -- reception -----------------------------------------------------------

    def on_receive(self, msg, tick: int, peer: Optional[int] = None) -> list[Outbound]:
        """Handle one delivered message; `peer` is the transport-level sender."""
        self._out = []
        if isinstance(msg, UnitMsg):
            self._receive_unit(msg, tick, direct=True, peer=peer)
        elif isinstance(msg, EndorseMsg):
            self._receive_endorsement(msg.endorsement, tick)
        elif isinstance(msg, EndorseBundleMsg):
            if msg.era == self.era.index:
                for endorser in msg.endorsers:
                    self._receive_endorsement(Endorsement(endorser, msg.target), tick)
        elif isinstance(msg, FetchMsg):
            if msg.era == self.era.index and msg.digest in self.state and peer is not None:
                self._send(UnitMsg(self.era.index, self.state.units[msg.digest]), peer)
        return self._out

    def _receive_unit(self, msg: UnitMsg, tick: int, direct: bool, peer: Optional[int] = None) -> None:
        unit = msg.unit
        if msg.era != self.era.index:
            if msg.era > self.era.index:
                self.era_pending.append(unit)
            else:
                self._count("drop_stale_era")
            return
        if unit.sender in self.era.banned:
            self._drop(unit, tick, "banned")
            return
        if not self._structurally_valid(unit):
            self._drop(unit, tick, "malformed")
            return
        if unit.digest in self.state:
            self._count("dup_received")
            return
        if direct and self._over_budget(unit, tick):
            self._drop(unit, tick, "spam_budget")
            return
        self._count("units_received")
        self._route(unit, tick, from_peer=peer)

    def _structurally_valid(self, unit: Unit) -> bool:
        if not (0 <= unit.sender < self.config.n) or unit.seq < 0:
            return False
        if (unit.kind == KIND_PROPOSAL) != (unit.block is not None):
            return False
        if not self.signature_scheme.verify(unit):
            return False
        if unit.block is not None and unit.block.creator != unit.sender:
            return False
        return True

    def _over_budget(self, unit: Unit, tick: int) -> bool:
        start = self.clock.round_start(tick)
        if unit.round_id > start + self.clock.round_ticks():
            return True  # claims a round further out than clock skew allows
        key = (unit.sender, unit.round_id)
        self._direct_count[key] = self._direct_count.get(key, 0) + 1
        return self._direct_count[key] > DIRECT_UNITS_PER_ROUND

    def _drop(self, unit: Unit, tick: int, reason: str) -> None:
        self._count(f"drop_{reason}")
        self.trace.emit(tick, "drop", self.vid, payload=unit.digest, extra=reason)

    def _route(self, unit: Unit, tick: int, from_peer: Optional[int] = None) -> None:
        missing = [c for c in unit.citations if c not in self.state]
        if missing:
            self.dep_buffer.park(unit, missing)
            source = from_peer if from_peer is not None else unit.sender
            if source != self.vid:
                for h in missing:
                    if h not in self._fetched:
                        self._fetched.add(h)
                        self._send(FetchMsg(self.era.index, h), source)
            return
        if not self._consistent(unit):
            self._drop(unit, tick, "invalid_vote")
            return
        if self.endorsements_on and not lnc_check_hypothetical(self.state, self.ledger, unit.sender, unit.citations):
            self.lnc_buffer.append(unit)
            self._count("lnc_parked")
            return
        self._timed_admission(unit, tick)

    def _consistent(self, unit: Unit) -> bool:
        """Proposal units must carry a block their own vote lands on."""
        if unit.kind != KIND_PROPOSAL:
            return True
        block = unit.block
        if block.parent is None or block.parent not in self.tree:
            return False
        if block.height != self.tree.height(block.parent) + 1:
            return False
        return self.vv.preview_vote(unit.citations, block) == block.digest

    def _timed_admission(self, unit: Unit, tick: int) -> None:
        start = self.clock.round_start(tick)
        off = tick - start
        third, two_thirds = self._offsets()
        is_leader_unit = (
            unit.kind == KIND_PROPOSAL
            and unit.sender == self._round_leader
            and unit.round_id == start
            and unit.sender != self.vid
        )
        if 0 < off < third:
            if is_leader_unit:
                self._admit(unit, tick)
            else:
                self.timing_buffer.append(unit)
        elif third <= off < two_thirds:
            self._admit(unit, tick)
        else:
            self.timing_buffer.append(unit)

    # -- admission ------------------------------------------------------------

    def _admit(self, unit: Unit, tick: int) -> None:
        if unit.block is not None and unit.block.digest not in self.tree:
            self.tree.add_block(unit.block)
        res = self.state.insert_unit(unit)
        if res.status is InsertStatus.DUPLICATE:
            return
        if res.status is not InsertStatus.ACCEPTED:
            raise AssertionError("admission with unresolved dependencies")
        self.vv.on_insert(unit)
        self.trace.emit(tick, "accept", self.vid, payload=unit.digest, extra=str(self.era.index))
        self._count("units_admitted")
        self._note_new_evidence(tick)
        self._maybe_endorse(unit, tick)
        if (
            unit.kind == KIND_PROPOSAL
            and unit.sender == self._round_leader
            and unit.sender != self.vid
            and unit.round_id == self.clock.round_start(tick)
            and self._confirmed_round != self.clock.round_start(tick)
        ):
            start = self.clock.round_start(tick)
            off = tick - start
            if 0 < off < self._offsets()[0]:
                if self.mode == "relaxed" or not self.endorsements_on:
                    self._confirm(tick, start)
                elif self.ledger.is_endorsed(unit.digest):
                    self._confirm(tick, start)
        for freed in self.dep_buffer.on_available(unit.digest):
            self._route(freed, tick)

    def _confirm(self, tick: int, round_start: int) -> None:
        self._confirmed_round = round_start
        self._create_unit(KIND_CONFIRMATION, tick, round_start)

    def _note_new_evidence(self, tick: int) -> None:
        while self._evidence_seen < len(self.state.evidence):
            pair = self.state.evidence[self._evidence_seen]
            self._evidence_seen += 1
            self.known_equivocators.add(pair.sender)
            self.trace.emit(tick, "evidence", self.vid, payload=pair.first, extra=f"{pair.sender}:{pair.second:x}")
            if self.mode == "relaxed" and self.endorsements_on:
                self._enter_cautious(tick)

    def _enter_cautious(self, tick: int) -> None:
        self.mode = "cautious"
        self.trace.emit(tick, "mode", self.vid, extra="cautious")
        if self.config.endorsement_mode == "naive":
            for h in self.state._order:
                unit = self.state.units[h]
                if should_endorse_naive(self.state, unit):
                    self._emit_endorsement(unit, tick)

    def _maybe_endorse(self, unit: Unit, tick: int) -> None:
        if not self.endorsements_on:
            return
        if self.config.endorsement_mode == "naive":
            if self.mode == "cautious" and should_endorse_naive(self.state, unit):
                self._emit_endorsement(unit, tick)
        else:
            if self.known_equivocators and should_endorse_refined(self.state, unit, self.known_equivocators):
                self._emit_endorsement(unit, tick)

    def _emit_endorsement(self, unit: Unit, tick: int) -> None:
        mine = self._endorsed_by_me.setdefault(unit.sender, [])
        if unit.digest in mine:
            return
        for h in mine:
            if self.state.is_equivocation(h, unit.digest):
                raise AssertionError("honest validator endorsing both branches of a fork")
        mine.append(unit.digest)
        e = Endorsement(self.vid, unit.digest)
        self._count("endorsements_sent")
        self.trace.emit(tick, "endorse", self.vid, payload=unit.digest)
        self._broadcast(EndorseMsg(self.era.index, e))
        self._receive_endorsement(e, tick)

    def _receive_endorsement(self, e: Endorsement, tick: int) -> None:
        status = self.ledger.record(e)
        if status is not RecordStatus.NEWLY_ENDORSED:
            return
        self.trace.emit(tick, "endorsed", self.vid, payload=e.target)
        if e.target not in self._spread:
            self._spread.add(e.target)
            self._broadcast(
                EndorseBundleMsg(self.era.index, e.target, tuple(sorted(self.ledger.endorsers_of(e.target))))
            )
        self._lnc_resweep(tick)
        # a leader unit may only be citable (and confirmable) once endorsed
        if self.mode == "cautious" and e.target in self.state:
            unit = self.state.units[e.target]
            start = self.clock.round_start(tick)
            off = tick - start
            if (
                unit.kind == KIND_PROPOSAL
                and unit.sender == self._round_leader
                and unit.sender != self.vid
                and unit.round_id == start
                and self._confirmed_round != start
                and 0 < off < self._offsets()[0]
            ):
                self._confirm(tick, start)

    def _lnc_resweep(self, tick: int) -> None:
        parked, self.lnc_buffer = self.lnc_buffer, []
        for unit in parked:
            if lnc_check_hypothetical(self.state, self.ledger, unit.sender, unit.citations):
                self._timed_admission(unit, tick)
            else:
                self.lnc_buffer.append(unit)

    # -- finality and eras -----------------------------------------------------

    def _update_finality(self, tick: int) -> None:
        for ev_tick, t, block, height in self.tracker.update(self.vv, tick):
            self.trace.emit(ev_tick, "finalize", self.vid, payload=block, extra=f"{t}:{height}")
        self._maybe_era_transition(tick)

    def _maybe_era_transition(self, tick: int) -> None:
        t_min = min(self.config.thresholds)
        boundary_height = self.config.era_length * (self.era.index + 1) - 1
        chain = self.tracker.chains[t_min]
        tip_height = self.tree.height(chain[-1])
        if tip_height < boundary_height:
            return
        boundary = next(h for h in chain if self.tree.height(h) == boundary_height)
        self.era_transition(boundary, tick)

    def era_transition(self, boundary_block: int, tick: int) -> None:
        """Start the next era: fresh DAG rooted at the boundary block."""
        caught = self.state.equivocator_ids()
        self.era = EraState(self.era.index + 1, boundary_block, self.era.banned | frozenset(caught))
        self.state = ProtocolState(self.config.n)
        self.vv = VirtualVotes(self.state, self.tree, self.config.weights, boundary_block)
        self.ledger = EndorsementLedger(self.config.weights)
        self.tracker.rebase(boundary_block)
        self.dep_buffer.clear()
        self.lnc_buffer.clear()
        self.timing_buffer.clear()
        self.mode = "relaxed"
        self.known_equivocators = set()
        self.own_latest = None
        self.own_seq = 0
        self._confirmed_round = None
        self._direct_count.clear()
        self._fetched.clear()
        self._spread.clear()
        self._endorsed_by_me.clear()
        self._evidence_seen = 0
        self.trace.emit(tick, "era", self.vid, payload=boundary_block, extra=str(self.era.index))
        pending, self.era_pending = self.era_pending, []
        for unit in pending:
            self._receive_unit(UnitMsg(self.era.index, unit), tick, direct=False)
