"""Deterministic discrete-event simulator of a partially synchronous network.

Channels are reliable and authenticated; after the global stabilization time
every message arrives in strictly less than the public delay bound.  The
loop is single threaded: each tick first fires every validator's clock (in
id order), then delivers messages scheduled for that tick (in enqueue
order), so a (scenario, seed) pair fully determines the trace.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

from .encoding import digest64, encode_endorsement
from .endorsements import Endorsement, fork_bomb
from .engine import (
    EndorseBundleMsg,
    EndorseMsg,
    ExponentParams,
    FetchMsg,
    Outbound,
    UnitMsg,
    ValidatorConfig,
    ValidatorState,
)
from .units import InsertStatus, ProtocolState, WeightMap


class ScenarioError(ValueError):
    """Scenario failed validation; message lists the offending fields."""


# -- adversary strategies -----------------------------------------------------


@dataclass(frozen=True)
class Equivocator:
    vid: int
    rate: float = 1.0  # fraction of rounds in which the second branch speaks


@dataclass(frozen=True)
class CrashAt:
    vid: int
    tick: int


@dataclass(frozen=True)
class Withholder:
    vid: int
    targets: tuple[int, ...]


@dataclass(frozen=True)
class ForkBomb:
    coalition: tuple[int, ...]
    depth: int
    waves_per_round: int = 1


@dataclass(frozen=True)
class Delayer:
    vid: int
    targets: tuple[int, ...] = ()  # empty means everyone


@dataclass(frozen=True)
class NetworkModel:
    delta: int
    gst: int
    max_pre_gst_delay: int
    delay_steps: tuple[tuple[int, int], ...] = ()  # (from_tick, max_delay)

    def current_cap(self, tick: int) -> int:
        cap = self.delta - 1
        for start, value in self.delay_steps:
            if tick >= start:
                cap = value
        return max(1, min(cap, self.delta - 1))


def deliver_time(model: NetworkModel, send_tick: int, seed: int, uid: int, recipient: int) -> int:
    """Arrival tick: seeded-uniform within the applicable delay bound."""
    if send_tick >= model.gst:
        cap = model.current_cap(send_tick)
    else:
        cap = max(1, model.max_pre_gst_delay)
    raw = digest64(
        b"delay"
        + seed.to_bytes(8, "little")
        + uid.to_bytes(8, "little")
        + recipient.to_bytes(4, "little")
    )
    return send_tick + 1 + raw % cap


# -- scenario -----------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    n: int
    delta: int
    gst: int
    horizon: int
    seed: int
    weights: Optional[tuple[int, ...]] = None
    era_length: int = 1000
    round_mode: str = "fixed"  # fixed | dynamic
    endorsements: str = "off"  # off | naive | refined
    exponent: Optional[ExponentParams] = None
    thresholds: tuple[int, ...] = (0,)
    threshold_overrides: tuple[tuple[int, tuple[int, ...]], ...] = ()
    adversaries: tuple = ()
    max_pre_gst_delay: Optional[int] = None
    delay_steps: tuple[tuple[int, int], ...] = ()
    schedule_kind: str = "round_robin"
    transport_trace: bool = True

    def weight_map(self) -> WeightMap:
        return WeightMap.of(self.weights) if self.weights else WeightMap.unit(self.n)

    def thresholds_for(self, vid: int) -> tuple[int, ...]:
        for v, ts in self.threshold_overrides:
            if v == vid:
                return ts
        return self.thresholds

    def round_ticks(self) -> Optional[int]:
        if self.round_mode != "fixed":
            return None
        # base rounds are three delays long; endorsement spread doubles them
        return 3 * self.delta if self.endorsements == "off" else 6 * self.delta

    def byzantine_ids(self) -> set[int]:
        out: set[int] = set()
        for a in self.adversaries:
            if isinstance(a, Equivocator):
                out.add(a.vid)
            elif isinstance(a, Withholder):
                out.add(a.vid)
            elif isinstance(a, Delayer):
                out.add(a.vid)
            elif isinstance(a, ForkBomb):
                out.update(a.coalition)
        return out

    def crashed_ids(self) -> set[int]:
        return {a.vid for a in self.adversaries if isinstance(a, CrashAt)}

    def validate(self) -> list[str]:
        errs = []
        if self.n < 1:
            errs.append("n must be at least 1")
        if self.delta < 2:
            errs.append("delta must be at least 2 ticks")
        if self.gst < 0:
            errs.append("gst must be non-negative")
        if self.horizon < 1:
            errs.append("horizon must be positive")
        if self.weights is not None and (len(self.weights) != self.n or any(w <= 0 for w in self.weights)):
            errs.append("weights must list one positive weight per validator")
        if self.era_length < 1:
            errs.append("era_length must be positive")
        if self.round_mode not in ("fixed", "dynamic"):
            errs.append("round_mode must be fixed or dynamic")
        if self.endorsements not in ("off", "naive", "refined"):
            errs.append("endorsements must be off, naive, or refined")
        if self.round_mode == "dynamic":
            if self.exponent is None:
                errs.append("dynamic rounds need exponent parameters")
            else:
                errs.extend(self.exponent.validate())
            if self.schedule_kind != "seeded":
                errs.append("dynamic rounds require the seeded leader schedule")
        total = self.weight_map().total if not errs or self.weights is None else self.n
        for ts in (self.thresholds, *(ts for _, ts in self.threshold_overrides)):
            if any(not (0 <= t < total) for t in ts):
                errs.append(f"thresholds must lie in [0, {total})")
        assigned: set[int] = set()
        for a in self.adversaries:
            vids = list(a.coalition) if isinstance(a, ForkBomb) else [a.vid]
            for v in vids:
                if not (0 <= v < self.n):
                    errs.append(f"adversary id {v} out of range")
                elif v in assigned:
                    errs.append(f"validator {v} assigned to two adversaries")
                assigned.add(v)
        return errs


def attach_adversary(scenario: Scenario, strategy) -> Scenario:
    out = replace(scenario, adversaries=scenario.adversaries + (strategy,))
    errs = out.validate()
    if errs:
        raise ScenarioError("; ".join(errs))
    return out


# -- trace --------------------------------------------------------------------


class Trace:
    """Line-delimited deterministic event log plus a summary block."""

    def __init__(self, transport: bool = True):
        self.transport = transport
        self.lines: list[str] = ["trace-v1"]
        self.events: list[tuple] = []

    def emit(self, tick, kind, sender=-1, recipient=-1, payload=0, extra=""):
        self.events.append((tick, kind, sender, recipient, payload, extra))
        self.lines.append(f"{tick}\t{kind}\t{sender}\t{recipient}\t{payload:016x}\t{extra}")

    def emit_transport(self, tick, kind, sender, recipient, payload, extra=""):
        if self.transport:
            self.emit(tick, kind, sender, recipient, payload, extra)
        else:
            self.events.append((tick, kind, sender, recipient, payload, extra))

    def summary(self, rows: list[str]):
        self.lines.append("summary")
        self.lines.extend(rows)

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()

    def write(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.text())


def message_digest(msg) -> int:
    if isinstance(msg, UnitMsg):
        return msg.unit.digest
    if isinstance(msg, EndorseMsg):
        return digest64(encode_endorsement(msg.endorsement.endorser, msg.endorsement.target))
    if isinstance(msg, EndorseBundleMsg):
        return msg.target
    if isinstance(msg, FetchMsg):
        return msg.digest
    return 0


# -- drivers ------------------------------------------------------------------


class HonestDriver:
    def __init__(self, validator: ValidatorState):
        self.validator = validator

    def on_tick(self, tick):
        return self.validator.on_tick(tick)

    def on_receive(self, msg, tick, peer):
        return self.validator.on_receive(msg, tick, peer)


class CrashDriver(HonestDriver):
    """Honest until its crash tick, then permanently unresponsive."""

    def __init__(self, validator, crash_tick):
        super().__init__(validator)
        self.crash_tick = crash_tick

    def on_tick(self, tick):
        return [] if tick >= self.crash_tick else super().on_tick(tick)

    def on_receive(self, msg, tick, peer):
        return [] if tick >= self.crash_tick else super().on_receive(msg, tick, peer)


class WithholderDriver(HonestDriver):
    """Plays honestly but broadcasts only to a chosen subset."""

    def __init__(self, validator, targets):
        super().__init__(validator)
        self.targets = tuple(targets)

    def _filter(self, outs):
        fixed = []
        for ob in outs:
            if ob.to is None:
                fixed.extend(Outbound(ob.msg, t) for t in self.targets if t != self.validator.vid)
            else:
                fixed.append(ob)
        return fixed

    def on_tick(self, tick):
        return self._filter(super().on_tick(tick))

    def on_receive(self, msg, tick, peer):
        return self._filter(super().on_receive(msg, tick, peer))


class EquivocatorDriver:
    """Maintains two diverging protocol branches and shows each to half the net.

    Branch units differ by a timestamp skew, so the two chains fork while each
    stays internally valid.  Directed messages (fetch replies) pass through to
    their addressee, which is what lets the halves eventually expose the fork.
    """

    def __init__(self, config: ValidatorConfig, trace, rate: float, seed: int):
        self.vid = config.vid
        self.branches = [
            ValidatorState(config, trace),
            ValidatorState(replace(config, timestamp_skew=1), trace),
        ]
        others = [v for v in range(config.n) if v != config.vid]
        self.halves = [others[0::2], others[1::2]]
        self.rate = rate
        self.seed = seed

    def _branch_active(self, tick: int) -> bool:
        if self.rate >= 1.0:
            return True
        r = self.branches[1].clock.round_start(tick)
        raw = digest64(b"eqrate" + self.seed.to_bytes(8, "little") + r.to_bytes(8, "little", signed=True))
        return (raw % 1000) < self.rate * 1000

    def _route(self, branch: int, outs, tick) -> list[Outbound]:
        routed = []
        if branch == 1 and not self._branch_active(tick):
            return [ob for ob in outs if ob.to is not None]
        for ob in outs:
            if ob.to is None:
                routed.extend(Outbound(ob.msg, t) for t in self.halves[branch])
            else:
                routed.append(ob)
        return routed

    def on_tick(self, tick):
        out = []
        for i, b in enumerate(self.branches):
            out.extend(self._route(i, b.on_tick(tick), tick))
        return out

    def on_receive(self, msg, tick, peer):
        out = []
        for i, b in enumerate(self.branches):
            out.extend(self._route(i, b.on_receive(msg, tick, peer), tick))
        return out


class _BombController:
    """Shared state for one fork-bomb coalition."""

    def __init__(self, strategy: ForkBomb, n: int, round_ticks: int, weights: WeightMap):
        self.strategy = strategy
        self.n = n
        self.round_ticks = round_ticks
        self.units_by_sender: dict[int, list] = {v: [] for v in strategy.coalition}
        self.store: dict[int, object] = {}
        self.tops: dict[int, int] = {}
        self.built_round = -1
        self.routes: dict[int, int] = {}  # unit digest -> half index
        # bombers track everything they see so they can endorse plausibly
        self.view = ProtocolState(n)
        self.weights = weights

    def build_wave(self, round_start: int, tick: int) -> None:
        if self.built_round == round_start:
            return
        self.built_round = round_start
        for wave in range(self.strategy.waves_per_round):
            units, tops = fork_bomb(
                list(self.strategy.coalition),
                self.strategy.depth,
                round_start,
                tick * 10 + wave,
                (),
                self.tops,
            )
            self.tops.update(tops)
            for u in units:
                self.store[u.digest] = u
                self.units_by_sender[u.sender].append(u)
                half = 0 if u.digest in tops.values() and u.sender == min(tops) else None
            # route a unit by the top it sits under: first tree symbol
            half_of_top = {tops[s]: i for i, s in enumerate(sorted(tops))}
            for u in units:
                self.routes[u.digest] = self._half_for(u, units, half_of_top)

    def _half_for(self, unit, units, half_of_top) -> int:
        if unit.digest in half_of_top:
            return half_of_top[unit.digest]
        above = [w for w in units if unit.digest in w.citations]
        while above:
            w = above[0]
            if w.digest in half_of_top:
                return half_of_top[w.digest]
            above = [x for x in units if w.digest in x.citations]
        return 0


class ForkBombDriver:
    """One coalition member: emits its layer of each wave, endorses, serves fetches."""

    def __init__(self, vid: int, config: ValidatorConfig, controller: _BombController):
        self.vid = vid
        self.config = config
        self.controller = controller
        self._emitted: set[int] = set()
        self._endorsed: set[int] = set()

    def _half_recipients(self, half: int) -> list[int]:
        others = [v for v in range(self.config.n) if v != self.vid]
        return others[0::2] if half == 0 else others[1::2]

    def on_tick(self, tick):
        r = self.controller.round_ticks
        out = []
        if tick % r == 0:
            self.controller.build_wave(tick, tick)
        for u in self.controller.units_by_sender[self.vid]:
            if u.digest in self._emitted:
                continue
            self._emitted.add(u.digest)
            half = self.controller.routes.get(u.digest, 0)
            out.extend(Outbound(UnitMsg(0, u), t) for t in self._half_recipients(half))
        return out

    def on_receive(self, msg, tick, peer):
        out = []
        if isinstance(msg, FetchMsg):
            u = self.controller.store.get(msg.digest)
            if u is not None and peer is not None:
                out.append(Outbound(UnitMsg(0, u), peer))
            return out
        if isinstance(msg, UnitMsg):
            view = self.controller.view
            res = view.insert_unit(msg.unit)
            if res.status is InsertStatus.ACCEPTED and msg.unit.sender not in view.equivocator_ids():
                if msg.unit.digest not in self._endorsed:
                    self._endorsed.add(msg.unit.digest)
                    out.append(Outbound(EndorseMsg(0, Endorsement(self.vid, msg.unit.digest))))
        return out


class DelayerDriver(HonestDriver):
    """Honest content, adversarial scheduling: stretches its sends to the bound."""


# -- simulation ---------------------------------------------------------------


@dataclass
class _Scheduled:
    uid: int
    msg: object
    frm: int
    to: int
    deliver_tick: int


class Simulation:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        errs = scenario.validate()
        if errs:
            raise ScenarioError("; ".join(errs))
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.model = NetworkModel(
            scenario.delta,
            scenario.gst,
            scenario.max_pre_gst_delay or 10 * scenario.delta,
            scenario.delay_steps,
        )
        self.trace = Trace(transport=scenario.transport_trace)
        self.weights = scenario.weight_map()
        self.drivers = self._build_drivers()
        self._uid = 0
        self._queue: dict[int, deque[_Scheduled]] = {}
        self.send_count = 0
        self.deliver_count = 0
        self.max_post_gst_delay = 0
        self._delayer_ids = {
            a.vid: (a.targets or tuple(v for v in range(scenario.n)))
            for a in scenario.adversaries
            if isinstance(a, Delayer)
        }

    def _config(self, vid: int, skew: int = 0) -> ValidatorConfig:
        s = self.scenario
        return ValidatorConfig(
            vid=vid,
            n=s.n,
            weights=self.weights,
            thresholds=s.thresholds_for(vid),
            delta=s.delta,
            round_ticks=s.round_ticks(),
            exponent=s.exponent if s.round_mode == "dynamic" else None,
            endorsement_mode=s.endorsements,
            schedule_kind=s.schedule_kind,
            schedule_seed=s.seed,
            era_length=s.era_length,
            timestamp_skew=skew,
        )

    def _build_drivers(self) -> list:
        s = self.scenario
        by_vid: dict[int, object] = {}
        for a in s.adversaries:
            if isinstance(a, Equivocator):
                by_vid[a.vid] = EquivocatorDriver(self._config(a.vid), self.trace, a.rate, s.seed)
            elif isinstance(a, CrashAt):
                by_vid[a.vid] = CrashDriver(ValidatorState(self._config(a.vid), self.trace), a.tick)
            elif isinstance(a, Withholder):
                by_vid[a.vid] = WithholderDriver(ValidatorState(self._config(a.vid), self.trace), a.targets)
            elif isinstance(a, Delayer):
                by_vid[a.vid] = DelayerDriver(ValidatorState(self._config(a.vid), self.trace))
            elif isinstance(a, ForkBomb):
                ctrl = _BombController(a, s.n, s.round_ticks() or (1 << (s.exponent.n_min if s.exponent else 4)), self.weights)
                for v in a.coalition:
                    by_vid[v] = ForkBombDriver(v, self._config(v), ctrl)
        drivers = []
        for vid in range(s.n):
            drivers.append(by_vid.get(vid) or HonestDriver(ValidatorState(self._config(vid), self.trace)))
        return drivers

    def honest_validators(self) -> dict[int, ValidatorState]:
        out = {}
        byz = self.scenario.byzantine_ids()
        for vid, d in enumerate(self.drivers):
            if vid in byz:
                continue
            if isinstance(d, HonestDriver):
                out[vid] = d.validator
        return out

    # -- event loop -----------------------------------------------------------

    def run(self) -> Trace:
        s = self.scenario
        self.trace.lines.append(f"# scenario\t{s.n}\t{s.delta}\t{s.gst}\t{s.horizon}\t{s.seed}")
        for tick in range(s.horizon + 1):
            for vid in range(s.n):
                self._dispatch(vid, self.drivers[vid].on_tick(tick), tick)
            pending = self._queue.pop(tick, None)
            while pending:
                ev = pending.popleft()
                self.deliver_count += 1
                self.trace.emit_transport(tick, "deliver", ev.frm, ev.to, message_digest(ev.msg))
                outs = self.drivers[ev.to].on_receive(ev.msg, tick, ev.frm)
                self._dispatch(ev.to, outs, tick)
                more = self._queue.pop(tick, None)
                if more:
                    pending.extend(more)
        self._write_summary()
        return self.trace

    def _dispatch(self, frm: int, outs: list[Outbound], tick: int) -> None:
        for ob in outs:
            if ob.to is None:
                recipients = [v for v in range(self.scenario.n) if v != frm]
            else:
                recipients = [ob.to] if ob.to != frm else []
            for rcpt in recipients:
                self._uid += 1
                uid = self._uid
                arrival = deliver_time(self.model, tick, self.seed, uid, rcpt)
                if frm in self._delayer_ids and rcpt in self._delayer_ids[frm]:
                    cap = self.model.current_cap(tick) if tick >= self.model.gst else self.model.max_pre_gst_delay
                    arrival = tick + cap
                if tick >= self.model.gst:
                    self.max_post_gst_delay = max(self.max_post_gst_delay, arrival - tick)
                self.send_count += 1
                self.trace.emit_transport(tick, "send", frm, rcpt, message_digest(ob.msg))
                self._queue.setdefault(arrival, deque()).append(_Scheduled(uid, ob.msg, frm, rcpt, arrival))

    def _write_summary(self) -> None:
        rows = []
        for vid, val in sorted(self.honest_validators().items()):
            for t in sorted(val.tracker.thresholds):
                chain = val.tracker.chains[t]
                rows.append(f"head\t{vid}\t{t}\t{chain[-1]:016x}\t{val.tree.height(chain[-1])}")
            for name in sorted(val.counters):
                rows.append(f"counter\t{vid}\t{name}\t{val.counters[name]}")
        rows.append(f"net\tsends\t{self.send_count}\tdelivers\t{self.deliver_count}")
        self.trace.summary(rows)


def run(scenario: Scenario, seed: Optional[int] = None) -> Trace:
    """Execute a scenario to its horizon; identical inputs give identical traces."""
    return Simulation(scenario, seed).run()
