"""Independent brute-force recomputations used to cross-check the fast paths.

Everything here works from unit citations alone (plain set reachability), so
it shares no code with the bitmask implementations it verifies.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Callable, Iterable, Sequence

if TYPE_CHECKING:  # pragma: no cover
    from .blocks import VirtualVotes
    from .units import ProtocolState

ORACLE_MAX_UNITS = 12
_PRODUCT_CAP = 500_000


class FixtureTooLarge(ValueError):
    pass


def naive_downset(state: "ProtocolState", h: int) -> set[int]:
    seen: set[int] = set()
    stack = list(state.units[h].citations)
    while stack:
        c = stack.pop()
        if c in seen:
            continue
        seen.add(c)
        stack.extend(state.units[c].citations)
    return seen


def naive_justifies(state: "ProtocolState", a: int, b: int) -> bool:
    return a == b or b in naive_downset(state, a)


def naive_equivocators(state: "ProtocolState", hs: Iterable[int], closed: bool = False) -> set[int]:
    scope: set[int] = set()
    for h in hs:
        scope |= naive_downset(state, h)
        if closed:
            scope.add(h)
    out = set()
    units = [state.units[h] for h in scope]
    for i, u in enumerate(units):
        for w in units[i + 1 :]:
            if u.sender != w.sender:
                continue
            if not naive_justifies(state, u.digest, w.digest) and not naive_justifies(state, w.digest, u.digest):
                out.add(u.sender)
    return out


def naive_latest_messages(state: "ProtocolState", h: int) -> dict[int, int]:
    down = naive_downset(state, h)
    eq = naive_equivocators(state, [h])
    out: dict[int, int] = {}
    for v in range(state.n):
        if v in eq:
            continue
        own = [x for x in down if state.units[x].sender == v]
        maximal = [x for x in own if not any(x != y and x in naive_downset(state, y) for y in own)]
        if len(maximal) == 1:
            out[v] = maximal[0]
        elif len(maximal) > 1:
            raise AssertionError("non-equivocator with two maximal units")
    return out


# -- exhaustive summit enumeration ----------------------------------------


def _segments(chain: Sequence[int]) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = [()]
    for i in range(len(chain)):
        for j in range(i, len(chain)):
            out.append(tuple(chain[i : j + 1]))
    return out


def enumerate_summits(vv: "VirtualVotes", block: int, q: int, max_units: int = ORACLE_MAX_UNITS):
    """All reachable level sets of valid summits, as {level: set of frozensets}.

    Level-0 segments are drawn from each sender's maximal voting streak
    ending at its latest unit, matching how summits anchor to the state they
    are evaluated in.  Returns (levels, max_height, saturated).
    """
    state, weights = vv.state, vv.weights
    if len(state) > max_units:
        raise FixtureTooLarge(f"fixture has {len(state)} units, oracle bound is {max_units}")

    down = {h: naive_downset(state, h) for h in state.units}
    eq = naive_equivocators(state, state.units.keys(), closed=True)

    streaks: list[list[int]] = []
    for v in range(state.n):
        if v in eq or not state.by_sender[v]:
            continue
        chain = state.by_sender[v]
        if not vv.votes_at_least(chain[-1], block):
            continue
        i = len(chain) - 1
        while i >= 0 and vv.votes_at_least(chain[i], block):
            i -= 1
        streaks.append(chain[i + 1 :])

    def product(per_sender: list[list[tuple[int, ...]]]) -> list[frozenset[int]]:
        combos: list[tuple[int, ...]] = [()]
        for options in per_sender:
            combos = [c + o for c in combos for o in options]
            if len(combos) > _PRODUCT_CAP:
                raise FixtureTooLarge("level-set product too large for enumeration")
        return [frozenset(c) for c in combos if c]

    level0 = product([_segments(s) for s in streaks])

    def density_ok(cand: frozenset[int], prev: frozenset[int]) -> bool:
        senders_next = {state.units[h].sender for h in cand}
        cprime = {h for h in prev if state.units[h].sender in senders_next}
        for h in cand:
            seen = {state.units[w].sender for w in cprime if w == h or w in down[h]}
            if weights.sum_of(seen) < q:
                return False
        return True

    memo: dict[frozenset[int], list[frozenset[int]]] = {}

    def next_levels(prev: frozenset[int]) -> list[frozenset[int]]:
        if prev in memo:
            return memo[prev]
        per_sender: dict[int, list[int]] = {}
        for h in sorted(prev, key=lambda x: state.position(x)):
            per_sender.setdefault(state.units[h].sender, []).append(h)
        cands = product([_segments(seg) for seg in per_sender.values()])
        memo[prev] = [c for c in cands if density_ok(c, prev)]
        return memo[prev]

    levels: dict[int, set[frozenset[int]]] = {0: set(level0)}
    saturated = False
    frontier = set(level0)
    depth = 0
    while frontier:
        nxt: set[frozenset[int]] = set()
        for c in frontier:
            for c2 in next_levels(c):
                if c2 == c:
                    saturated = True
                else:
                    nxt.add(c2)
        if not nxt:
            break
        depth += 1
        levels[depth] = nxt
        frontier = nxt
    return levels, depth, saturated


def summit_contains_enumeration(greedy, levels: dict[int, set[frozenset[int]]], depth: int, saturated: bool) -> list[str]:
    """Check the greedy output levelwise contains every enumerated level set."""
    problems = []
    if saturated and not greedy.saturated:
        problems.append("enumeration saturates but greedy does not")
    if not greedy.saturated and greedy.height < depth:
        problems.append(f"greedy height {greedy.height} below enumerated {depth}")
    for i, sets in levels.items():
        # past its recorded height a saturated summit repeats its last level
        gi = min(i, greedy.height) if greedy.saturated else i
        if gi > greedy.height:
            continue
        glevel = greedy.levels[gi]
        for c in sets:
            if not c <= glevel:
                problems.append(f"level {i} set not contained in greedy level")
                return problems
    return problems


# -- maximum antichain ------------------------------------------------------


def max_antichain(elements: Sequence[int], strictly_below: Callable[[int, int], bool]) -> int:
    """Size of the largest pairwise-incomparable subset (Dilworth via matching)."""
    n = len(elements)
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, a in enumerate(elements):
        for j, b in enumerate(elements):
            if i != j and strictly_below(a, b):
                adj[i].append(j)
    match_right: list[int | None] = [None] * n

    def augment(u: int, seen: set[int]) -> bool:
        for v in adj[u]:
            if v in seen:
                continue
            seen.add(v)
            if match_right[v] is None or augment(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    matching = sum(1 for u in range(n) if augment(u, set()))
    return n - matching
