"""Block tree, the GHOST fork-choice rule, and per-unit virtual votes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Optional

from .encoding import digest64, encode_block

if TYPE_CHECKING:  # pragma: no cover
    from .units import ProtocolState, Unit, WeightMap

GENESIS_CREATOR = 0xFFFFFFFF


@dataclass(frozen=True)
class Block:
    parent: Optional[int]
    height: int
    creator: int
    slot: int
    payload: bytes
    digest: int

    def encode(self) -> bytes:
        return encode_block(self.parent, self.height, self.creator, self.slot, self.payload)


def make_block(parent: Optional["Block"], creator: int, slot: int, payload: bytes) -> Block:
    height = 0 if parent is None else parent.height + 1
    phash = None if parent is None else parent.digest
    raw = encode_block(phash, height, creator, slot, payload)
    return Block(phash, height, creator, slot, payload, digest64(raw))


def genesis_block() -> Block:
    return make_block(None, GENESIS_CREATOR, 0, b"genesis")


class BlockTree:
    """Tree of blocks rooted at genesis, with O(1) ancestry tests."""

    def __init__(self, root: Optional[Block] = None):
        root = root or genesis_block()
        self.root = root.digest
        self.blocks: dict[int, Block] = {root.digest: root}
        self.children: dict[int, set[int]] = {root.digest: set()}
        self._idx: dict[int, int] = {root.digest: 0}
        self._anc: list[int] = [1]  # self-and-ancestors mask per dense index

    def __contains__(self, h: int) -> bool:
        return h in self.blocks

    def add_block(self, block: Block) -> None:
        if block.digest in self.blocks:
            return
        if block.parent is None or block.parent not in self.blocks:
            raise KeyError(f"parent of block {block.digest:#x} not present")
        parent = self.blocks[block.parent]
        if block.height != parent.height + 1:
            raise ValueError("block height must be parent height + 1")
        idx = len(self._anc)
        self.blocks[block.digest] = block
        self.children[block.digest] = set()
        self.children[block.parent].add(block.digest)
        self._idx[block.digest] = idx
        self._anc.append(self._anc[self._idx[block.parent]] | (1 << idx))

    def index(self, h: int) -> int:
        return self._idx[h]

    def is_descendant(self, b1: int, b2: int) -> bool:
        """True iff b2 <= b1 via parent links (b1 descends from, or is, b2)."""
        return bool(self._anc[self._idx[b1]] >> self._idx[b2] & 1)

    def competing(self, a: int, b: int) -> bool:
        return not self.is_descendant(a, b) and not self.is_descendant(b, a)

    def height(self, h: int) -> int:
        return self.blocks[h].height

    def chain_to_root(self, h: int) -> list[int]:
        out = [h]
        while self.blocks[out[-1]].parent is not None:
            out.append(self.blocks[out[-1]].parent)
        out.reverse()
        return out


def ghost(
    tree: BlockTree,
    opinions: dict[int, int],
    weights: "WeightMap",
    root: Optional[int] = None,
    allowed_mask: Optional[int] = None,
) -> int:
    """Walk from the root picking the child with the largest supporting weight.

    A validator supports every ancestor of its opinion block.  Ties go to the
    ascending block hash.  The walk descends until it reaches a leaf of the
    (possibly membership-filtered) tree, even through unsupported children.
    """
    cur = root if root is not None else tree.root
    while True:
        kids = tree.children.get(cur, ())
        if allowed_mask is not None:
            kids = [k for k in kids if allowed_mask >> tree.index(k) & 1]
        if not kids:
            return cur
        best = None
        best_total = -1
        for k in sorted(kids):
            total = 0
            for v, b in opinions.items():
                if tree.is_descendant(b, k):
                    total += weights.weight(v)
            if total > best_total:
                best, best_total = k, total
        cur = best


class VirtualVotes:
    """Memoized virtual vote of every unit; a pure function of the unit's downset.

    Votes are computed eagerly at insertion (insertion order is topological,
    so every dependency is already memoized).  The memo table is the only
    mutable piece and must stay confined to one writer.
    """

    def __init__(self, state: "ProtocolState", tree: BlockTree, weights: "WeightMap", root: Optional[int] = None):
        self.state = state
        self.tree = tree
        self.weights = weights
        self.root = root if root is not None else tree.root
        self._vote: list[int] = []  # per position
        self._blockmask: list[int] = []  # blocks appearing in D-bar(u), per position

    @classmethod
    def over(cls, state: "ProtocolState", tree: BlockTree, weights: "WeightMap", root: Optional[int] = None) -> "VirtualVotes":
        vv = cls(state, tree, weights, root)
        for h in state._order:
            vv.on_insert(state.units[h])
        return vv

    def on_insert(self, unit: "Unit") -> None:
        pos = self.state.position(unit.digest)
        if pos != len(self._vote):
            raise AssertionError("votes must be fed units in insertion order")
        mask = 1 << self.tree.index(self.root)
        for c in unit.citations:
            mask |= self._blockmask[self.state.position(c)]
        if unit.block is not None:
            mask |= 1 << self.tree.index(unit.block.digest)
        self._blockmask.append(mask)
        opinions = self._opinions(self.state.latest_messages(unit.digest))
        self._vote.append(ghost(self.tree, opinions, self.weights, self.root, mask))

    def _opinions(self, latest: dict[int, int]) -> dict[int, int]:
        # absent validators default to the root, which supports no child
        return {v: self._vote[self.state.position(h)] for v, h in latest.items()}

    def vote(self, h: int) -> int:
        return self._vote[self.state.position(h)]

    def votes_at_least(self, h: int, block: int) -> bool:
        return self.tree.is_descendant(self.vote(h), block)

    def opinion_of(self, h: int, vid: int) -> int:
        lm = self.state.latest_message_of(h, vid)
        return self.vote(lm) if lm is not None else self.root

    def preview_vote(self, citations: Iterable[int], block: Optional[Block] = None) -> int:
        """Vote a fresh unit would carry, without inserting it."""
        citations = tuple(citations)
        _, _, latest = self.state.preview(citations)
        mask = 1 << self.tree.index(self.root)
        for c in citations:
            mask |= self._blockmask[self.state.position(c)]
        if block is not None:
            mask |= 1 << self.tree.index(block.digest)
        return ghost(self.tree, self._opinions(latest), self.weights, self.root, mask)

    def ghost_head(self) -> int:
        """GHOST head of the full current view."""
        opinions = self._opinions(self.state.state_latest())
        return ghost(self.tree, opinions, self.weights, self.root)


def choose_proposal_parent(vv: VirtualVotes, citations: Iterable[int]) -> int:
    """Parent for a leader's new block, guaranteeing the proposal votes for it.

    Evaluated over exactly the citations the proposal unit will carry, so the
    guarantee also holds when citation sets are restricted.
    """
    return vv.preview_vote(citations)
