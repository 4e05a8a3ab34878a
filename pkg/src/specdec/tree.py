"""Verification trees: which (draft head, candidate rank) combinations a
single decoding step will verify.

Block index 0 is always the root (the last accepted token).  Non-root nodes
are stored in order; node i's parent index is strictly less than i, and a
node at depth d carries candidates from draft head d (the root sits at
conceptual head 0).  Width counts the root, so width 1 is plain sequential
decoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ContractViolationError


@dataclass(frozen=True)
class TreeNode:
    parent: int  # block index of the parent; 0 is the root
    head: int    # draft head supplying the candidate (== depth of this node)
    rank: int    # candidate rank within that head


@dataclass(frozen=True)
class VerificationTree:
    nodes: tuple[TreeNode, ...]  # excludes the implicit root

    def __post_init__(self):
        depths = {0: 0}
        seen_slots: set[tuple[int, int]] = set()
        for i, node in enumerate(self.nodes, start=1):
            if not 0 <= node.parent < i:
                raise ContractViolationError(
                    f"node {i}: parent {node.parent} must precede it"
                )
            if node.parent not in depths:
                raise ContractViolationError(f"node {i}: unknown parent {node.parent}")
            depth = depths[node.parent] + 1
            if node.head != depth:
                raise ContractViolationError(
                    f"node {i}: head {node.head} != depth {depth}"
                )
            if node.rank < 0:
                raise ContractViolationError(f"node {i}: negative rank")
            slot = (node.parent, node.rank)
            if slot in seen_slots:
                raise ContractViolationError(f"duplicate (parent, rank) {slot}")
            seen_slots.add(slot)
            depths[i] = depth

    @property
    def width(self) -> int:
        return len(self.nodes) + 1

    def depths(self) -> list[int]:
        """Depth of every block index, root included."""
        out = [0]
        for node in self.nodes:
            out.append(out[node.parent] + 1)
        return out

    def depth(self) -> int:
        return max(self.depths())

    def parent_of(self, i: int) -> int:
        if i == 0:
            raise ContractViolationError("root has no parent")
        return self.nodes[i - 1].parent

    def ancestors(self, i: int) -> list[int]:
        """Ancestor block indices of i, nearest first, ending at the root."""
        out = []
        while i != 0:
            i = self.parent_of(i)
            out.append(i)
        return out

    def children(self) -> dict[int, list[int]]:
        ch: dict[int, list[int]] = {i: [] for i in range(self.width)}
        for i, node in enumerate(self.nodes, start=1):
            ch[node.parent].append(i)
        return ch

    def max_rank(self) -> int:
        return max((n.rank for n in self.nodes), default=-1)

    def to_json(self) -> str:
        return json.dumps(
            {"nodes": [{"parent": n.parent, "head": n.head, "rank": n.rank} for n in self.nodes]}
        )

    @classmethod
    def from_json(cls, text: str) -> "VerificationTree":
        data = json.loads(text)
        nodes = tuple(
            TreeNode(parent=int(n["parent"]), head=int(n["head"]), rank=int(n["rank"]))
            for n in data["nodes"]
        )
        return cls(nodes)


def chain_tree(depth: int, rank: int = 0) -> VerificationTree:
    """A single path of `depth` nodes, all at the given rank."""
    nodes = tuple(TreeNode(parent=i, head=i + 1, rank=rank) for i in range(depth))
    return VerificationTree(nodes)


def sequential_tree() -> VerificationTree:
    """Width-1 tree: the root alone, i.e. ordinary sequential decoding."""
    return VerificationTree(())


def balanced_tree(width: int, max_depth: int, branching: int = 4) -> VerificationTree:
    """Level-filled tree of the given width, depth-capped at max_depth.

    Table-free default shape for latency measurement; strategy tuning
    replaces it with an accuracy-driven tree.
    """
    if width < 1:
        raise ContractViolationError("width must be >= 1")
    nodes: list[TreeNode] = []
    level = [0]  # block indices of the current level
    depth = 0
    while len(nodes) + 1 < width and depth < max_depth:
        depth += 1
        nxt = []
        for parent in level:
            for rank in range(branching):
                if len(nodes) + 1 >= width:
                    break
                nodes.append(TreeNode(parent=parent, head=depth, rank=rank))
                nxt.append(len(nodes))
        level = nxt
        if not level:
            break
    if len(nodes) + 1 < width:
        raise ContractViolationError(
            f"cannot reach width {width} with depth {max_depth}, branching {branching}"
        )
    return VerificationTree(tuple(nodes))
