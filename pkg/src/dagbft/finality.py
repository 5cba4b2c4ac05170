"""Summit detection, the finality predicate, and confidence computation.

A summit for a block is a nested sequence of unit sets C0 >= C1 >= ... >= Ck
whose members all vote for the block (or a descendant), whose senders have no
equivocation evidence in the state, whose per-sender membership is contiguous
along each sender's own chain, and where every unit of level i+1 sees at
least a quorum q of level-i senders in its closed downset.  Weighted mode
sums validator weights wherever counts appear.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:  # pragma: no cover
    from .blocks import VirtualVotes


@dataclass(frozen=True)
class Summit:
    """Finality witness: nested level sets for one block at one quorum.

    `saturated` marks a fixed point of the level construction: the same set
    satisfies the density rule against itself, so levels of every height
    exist and the height is effectively unbounded.
    """

    levels: tuple[frozenset[int], ...]
    q: int
    block: int
    saturated: bool = False

    @property
    def height(self) -> int:
        return len(self.levels) - 1


def meets_threshold(n: int, q: int, k: int, t: int, saturated: bool = False) -> bool:
    """Exact integer form of (2q - n) * (1 - 2^-k) > t."""
    if saturated:
        return 2 * q - n > t
    return (2 * q - n) * ((1 << k) - 1) > t * (1 << k)


def max_threshold(n: int, q: int, k: int, saturated: bool = False) -> int:
    """Largest integer t satisfied by a (q, k)-summit, or -1."""
    if saturated:
        return 2 * q - n - 1
    a = (2 * q - n) * ((1 << k) - 1)
    if a <= 0:
        return -1
    return (a - 1) >> k


def summit(vv: "VirtualVotes", block: int, q: int) -> Summit:
    """Greedy maximal summit for `block` at quorum weight `q`.

    Level 0 takes, for every validator with no equivocation evidence whose
    latest unit votes for the block, the maximal suffix of its chain that
    keeps voting for it.  Each further level keeps the units that see at
    least q weight of still-active senders in the previous level, pruning
    senders to a fixed point first.
    """
    state, tree, weights = vv.state, vv.tree, vv.weights
    eq = state.equivocator_ids()
    level0: list[int] = []
    senders: set[int] = set()
    for v in range(state.n):
        if v in eq or not state.by_sender[v]:
            continue
        u = state.by_sender[v][-1]
        if not vv.votes_at_least(u, block):
            continue
        senders.add(v)
        while u is not None and vv.votes_at_least(u, block):
            level0.append(u)
            u = state.self_parent(u)
    levels = [frozenset(level0)]
    if not senders:
        return Summit(tuple(levels), q, block)

    cur = set(level0)
    active = set(senders)
    while True:
        nxt, active = _next_level(state, weights, cur, active, q)
        if not nxt:
            break
        if nxt == cur:
            return Summit(tuple(levels), q, block, saturated=True)
        levels.append(frozenset(nxt))
        cur = nxt
    return Summit(tuple(levels), q, block)


def _next_level(state, weights, cur: set[int], active: set[int], q: int) -> tuple[set[int], set[int]]:
    """One level step: prune senders to a fixed point, then keep dense units."""
    by_sender: dict[int, list[int]] = {}
    for h in cur:
        by_sender.setdefault(state.units[h].sender, []).append(h)
    pos = {h: state.position(h) for h in cur}

    live = set(active)
    while True:
        # lowest unit per live sender; seeing it implies seeing the sender
        lows = {}
        for v in live:
            lows[v] = min((pos[h] for h in by_sender[v]), default=None)
        removed = False
        for v in sorted(live):
            ok = False
            for h in by_sender[v]:
                if _density(state, weights, pos[h], lows, live) >= q:
                    ok = True
                    break
            if not ok:
                live.discard(v)
                removed = True
        if not removed:
            break
    if not live:
        return set(), set()
    lows = {v: min(pos[h] for h in by_sender[v]) for v in live}
    nxt = {
        h
        for h in cur
        if state.units[h].sender in live and _density(state, weights, pos[h], lows, live) >= q
    }
    return nxt, live


def _density(state, weights, position: int, lows: dict[int, int | None], live: set[int]) -> int:
    dbar = state._down[position] | (1 << position)
    total = 0
    for v in live:
        low = lows[v]
        if low is not None and dbar >> low & 1:
            total += weights.weight(v)
    return total


def validate_summit(vv: "VirtualVotes", s: Summit) -> list[str]:
    """Independent check of the four summit conditions; returns violations."""
    state, tree, weights = vv.state, vv.tree, vv.weights
    problems = []
    for i in range(len(s.levels) - 1):
        if not s.levels[i] >= s.levels[i + 1]:
            problems.append(f"level {i + 1} is not nested in level {i}")
    for h in s.levels[0]:
        if not tree.is_descendant(vv.vote(h), s.block):
            problems.append(f"unit {h:#x} in level 0 does not vote for the block")
    eq = state.equivocator_ids()
    if eq & {state.units[h].sender for h in s.levels[0]}:
        problems.append("level 0 contains units by proven equivocators")
    for i, level in enumerate(s.levels):
        per_sender: dict[int, list[int]] = {}
        for h in level:
            per_sender.setdefault(state.units[h].sender, []).append(h)
        for v, hs in per_sender.items():
            chain = [h for h in state.by_sender[v]]
            idxs = sorted(chain.index(h) for h in hs)
            if idxs != list(range(idxs[0], idxs[-1] + 1)):
                problems.append(f"level {i} not contiguous for sender {v}")
    for i in range(len(s.levels) - 1):
        nxt_senders = {state.units[h].sender for h in s.levels[i + 1]}
        cprime = {h for h in s.levels[i] if state.units[h].sender in nxt_senders}
        for h in s.levels[i + 1]:
            seen = {
                state.units[w].sender
                for w in cprime
                if state.justifies(h, w)
            }
            if weights.sum_of(seen) < s.q:
                problems.append(f"unit {h:#x} at level {i + 1} misses the density quorum")
    return problems


def final(vv: "VirtualVotes", block: int, t: int) -> bool:
    """FINAL: some quorum admits a summit with (2q - n)(1 - 2^-k) > t."""
    if t < 0:
        raise ValueError("confidence threshold must be >= 0")
    n = vv.weights.total
    for q in range((n + t + 1) // 2, n + 1):
        s = summit(vv, block, q)
        if meets_threshold(n, q, s.height, t, s.saturated):
            return True
    return False


def confidence(vv: "VirtualVotes", block: int) -> int:
    """Largest t with FINAL true, or -1 when even t = 0 fails."""
    n = vv.weights.total
    best = -1
    for q in range((n + 1) // 2, n + 1):
        if 2 * q - n - 1 <= best:
            continue  # this quorum cannot beat the current best
        s = summit(vv, block, q)
        best = max(best, max_threshold(n, q, s.height, s.saturated))
    return best


def finalized_chain(vv: "VirtualVotes", thresholds: list[int]) -> dict[int, list[int]]:
    """Per threshold, the maximal chain from the root of blocks final there.

    Confidence is non-increasing along parent links (a summit for a block is
    a summit for each of its ancestors), which is re-checked defensively.
    """
    tree = vv.tree
    conf: dict[int, int] = {vv.root: vv.weights.total}  # the root is final by definition
    order = [vv.root]
    i = 0
    while i < len(order):
        for child in sorted(tree.children.get(order[i], ())):
            conf[child] = confidence(vv, child)
            if conf[child] > conf[order[i]] and order[i] != vv.root:
                raise AssertionError("confidence increased along a parent link")
            order.append(child)
        i += 1
    out: dict[int, list[int]] = {}
    for t in thresholds:
        final_set = {h for h, c in conf.items() if c >= t} | {vv.root}
        chain = [vv.root]
        while True:
            kids = [k for k in sorted(tree.children.get(chain[-1], ())) if k in final_set]
            if not kids:
                break
            # competing finalized children can only occur past the safety
            # bound; pick the best-supported one deterministically
            chain.append(max(kids, key=lambda k: (conf[k], -k)))
        out[t] = chain
    return out
