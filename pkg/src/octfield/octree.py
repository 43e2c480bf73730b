"""Linear octree keyed by ``(level, index)``.

Octant ``j`` of a node has child index ``8 * index + j``; bit 0 of ``j``
selects the upper half along x, bit 1 along y and bit 2 along z. Boxes are
half-open ``[min, max)`` so that points on shared faces resolve to the
higher-index octant.
"""

from __future__ import annotations

import enum
from typing import NamedTuple, Optional

import numpy as np

from .geometry import Aabb

N_CHILDREN = 8


class OctreeError(ValueError):
    """Structural precondition violated; carries the offending node."""

    def __init__(self, message: str, node: Optional["NodeId"] = None):
        super().__init__(message if node is None else f"{message}: node {tuple(node)}")
        self.node = node


class NodeId(NamedTuple):
    level: int
    index: int

    def validate(self, max_level: Optional[int] = None) -> "NodeId":
        if self.level < 0 or not 0 <= self.index < N_CHILDREN**self.level:
            raise OctreeError("index outside level capacity", self)
        if max_level is not None and self.level > max_level:
            raise OctreeError("level exceeds max_level", self)
        return self


ROOT = NodeId(0, 0)


class NodeStatus(enum.Enum):
    ACTIVE = "active"
    INTERNAL = "internal"
    INACTIVE = "inactive"


def child_ids(node: NodeId, max_level: Optional[int] = None) -> list[NodeId]:
    node = NodeId(*node).validate()
    if max_level is not None and node.level >= max_level:
        raise OctreeError("no children beyond max_level", node)
    return [NodeId(node.level + 1, N_CHILDREN * node.index + j) for j in range(N_CHILDREN)]


def parent_id(node: NodeId) -> NodeId:
    node = NodeId(*node).validate()
    if node.level == 0:
        raise OctreeError("root has no parent", node)
    return NodeId(node.level - 1, node.index // N_CHILDREN)


def octant_offsets(node: NodeId) -> np.ndarray:
    """Integer cell coordinates of ``node`` on its level's ``2^l`` grid."""
    cell = np.zeros(3, dtype=np.int64)
    for k in range(node.level):
        j = (node.index >> (3 * (node.level - 1 - k))) & 7
        cell = 2 * cell + np.array([j & 1, (j >> 1) & 1, (j >> 2) & 1])
    return cell


def node_bounds(node: NodeId, root: Aabb) -> Aabb:
    node = NodeId(*node).validate()
    size = root.extent / (1 << node.level)
    lo = root.min + octant_offsets(node) * size
    return Aabb(lo, lo + size)


def octant_of(local: np.ndarray) -> np.ndarray:
    """Octant index for node-local coordinates in ``[-1, 1]``."""
    bits = (np.asarray(local) >= 0.0).astype(np.int64)
    return bits[..., 0] | (bits[..., 1] << 1) | (bits[..., 2] << 2)


class OctreeModel:
    """Octree structure plus the network bound to every active leaf."""

    def __init__(self, root_bounds: Aabb, max_level: int = 5):
        self.root_bounds = root_bounds
        self.max_level = int(max_level)
        self.nodes: dict[NodeId, NodeStatus] = {ROOT: NodeStatus.ACTIVE}
        self.networks: dict[NodeId, object] = {}

    # -- queries -----------------------------------------------------------
    def status(self, node: NodeId) -> NodeStatus:
        try:
            return self.nodes[NodeId(*node)]
        except KeyError:
            raise OctreeError("node not in tree", NodeId(*node)) from None

    def __contains__(self, node) -> bool:
        return NodeId(*node) in self.nodes

    def is_leaf(self, node: NodeId) -> bool:
        return self.status(node) is not NodeStatus.INTERNAL

    def active_leaves(self) -> list[NodeId]:
        return sorted(n for n, s in self.nodes.items() if s is NodeStatus.ACTIVE)

    def inactive_leaves(self) -> list[NodeId]:
        return sorted(n for n, s in self.nodes.items() if s is NodeStatus.INACTIVE)

    def bounds(self, node: NodeId) -> Aabb:
        return node_bounds(node, self.root_bounds)

    def leaf_boxes(self, leaves=None) -> tuple[np.ndarray, np.ndarray]:
        leaves = self.active_leaves() if leaves is None else leaves
        boxes = [self.bounds(n) for n in leaves]
        if not boxes:
            return np.zeros((0, 3)), np.zeros((0, 3))
        return np.stack([b.min for b in boxes]), np.stack([b.max for b in boxes])

    def to_local(self, node: NodeId, points) -> np.ndarray:
        box = self.bounds(node)
        return (np.asarray(points) - box.center) / (0.5 * box.extent)

    def locate(self, p) -> Optional[NodeId]:
        p = np.asarray(p, dtype=np.float64)
        lo, hi = self.root_bounds.min, self.root_bounds.max
        if np.any(p < lo) or np.any(p >= hi):
            return None
        node = ROOT
        while self.nodes[node] is NodeStatus.INTERNAL:
            center = self.bounds(node).center
            bits = p >= center
            j = int(bits[0]) | (int(bits[1]) << 1) | (int(bits[2]) << 2)
            node = NodeId(node.level + 1, N_CHILDREN * node.index + j)
        return node if self.nodes[node] is NodeStatus.ACTIVE else None

    def locate_many(self, points, leaves=None) -> np.ndarray:
        """Slot of the containing active leaf within ``leaves``; -1 if none."""
        leaves = self.active_leaves() if leaves is None else leaves
        p = np.asarray(points, dtype=np.float64)
        root = self.root_bounds
        out = np.full(len(p), -1, dtype=np.int64)
        pending = np.all((p >= root.min) & (p < root.max), axis=1)
        cell_f = (p - root.min) / root.extent
        depth = max(n.level for n in self.nodes)
        for level in range(depth + 1):
            if not pending.any():
                break
            # dense per-level tables: 0 absent, 1 internal, 2 leaf
            kind = np.zeros(N_CHILDREN**level, dtype=np.int8)
            slot = np.full(N_CHILDREN**level, -1, dtype=np.int64)
            for n, s in self.nodes.items():
                if n.level == level:
                    kind[n.index] = 1 if s is NodeStatus.INTERNAL else 2
            for k, n in enumerate(leaves):
                if n.level == level:
                    slot[n.index] = k
            res = 1 << level
            todo = np.nonzero(pending)[0]
            cell = np.clip(np.floor(cell_f[todo] * res).astype(np.int64), 0, res - 1)
            index = morton_index(cell, level)
            done = kind[index] == 2
            out[todo[done]] = slot[index[done]]
            pending[todo[done]] = False
        return out

    # -- edits -------------------------------------------------------------
    def split(self, node: NodeId):
        """Subdivide an active leaf; returns ``(children, released_network)``.

        Children are active but carry no network until one is attached.
        """
        node = NodeId(*node)
        if self.status(node) is not NodeStatus.ACTIVE:
            raise OctreeError("split requires an active leaf", node)
        if node.level >= self.max_level:
            raise OctreeError("split beyond max_level", node)
        kids = child_ids(node)
        self.nodes[node] = NodeStatus.INTERNAL
        for c in kids:
            self.nodes[c] = NodeStatus.ACTIVE
        return kids, self.networks.pop(node, None)

    def merge(self, node: NodeId) -> list:
        """Collapse an internal node whose children are all leaves.

        Returns the released child networks in octant order (``None`` for
        inactive children).
        """
        node = NodeId(*node)
        if self.status(node) is not NodeStatus.INTERNAL:
            raise OctreeError("merge requires an internal node", node)
        kids = child_ids(node)
        if any(self.nodes.get(c) not in (NodeStatus.ACTIVE, NodeStatus.INACTIVE) for c in kids):
            raise OctreeError("merge requires all children to be leaves", node)
        released = []
        for c in kids:
            del self.nodes[c]
            released.append(self.networks.pop(c, None))
        self.nodes[node] = NodeStatus.ACTIVE
        return released

    def deactivate(self, node: NodeId):
        node = NodeId(*node)
        if self.status(node) is not NodeStatus.ACTIVE:
            raise OctreeError("deactivate requires an active leaf", node)
        self.nodes[node] = NodeStatus.INACTIVE
        return self.networks.pop(node, None)

    def reactivate(self, node: NodeId, network) -> None:
        node = NodeId(*node)
        if self.status(node) is not NodeStatus.INACTIVE:
            raise OctreeError("reactivate requires an inactive leaf", node)
        if network is None:
            raise OctreeError("reactivation needs a fresh network", node)
        self.nodes[node] = NodeStatus.ACTIVE
        self.networks[node] = network

    def attach(self, node: NodeId, network) -> None:
        node = NodeId(*node)
        if self.status(node) is not NodeStatus.ACTIVE:
            raise OctreeError("networks attach to active leaves only", node)
        self.networks[node] = network

    def subdivide_uniform(self, level: int) -> None:
        """Split every active leaf until all leaves reach ``level``."""
        level = min(level, self.max_level)
        for _ in range(level):
            for n in self.active_leaves():
                if n.level < level:
                    self.split(n)

    # -- consistency -------------------------------------------------------
    def check_invariants(self, require_networks: bool = True) -> None:
        if self.nodes.get(ROOT) is None:
            raise OctreeError("root missing", ROOT)
        for node, status in self.nodes.items():
            node.validate(self.max_level)
            if node.level > 0 and self.nodes.get(parent_id(node)) is not NodeStatus.INTERNAL:
                raise OctreeError("parent of a present node must be internal", node)
            if status is NodeStatus.INTERNAL:
                if node in self.networks:
                    raise OctreeError("internal node carries a network", node)
                if any(c not in self.nodes for c in child_ids(node)):
                    raise OctreeError("internal node with missing children", node)
            elif status is NodeStatus.INACTIVE:
                if node in self.networks:
                    raise OctreeError("inactive node carries a network", node)
            elif require_networks and self.networks.get(node) is None:
                raise OctreeError("active leaf without a network", node)
        stray = set(self.networks) - {n for n, s in self.nodes.items() if s is NodeStatus.ACTIVE}
        if stray:
            raise OctreeError("network bound to a non-active node", sorted(stray)[0])

    def dump(self) -> list[dict]:
        return [
            {"level": n.level, "index": n.index, "status": self.nodes[n].value}
            for n in sorted(self.nodes)
        ]

    @classmethod
    def from_dump(cls, entries, root_bounds: Aabb, max_level: int) -> "OctreeModel":
        model = cls(root_bounds, max_level)
        model.nodes = {
            NodeId(int(e["level"]), int(e["index"])): NodeStatus(e["status"]) for e in entries
        }
        model.check_invariants(require_networks=False)
        return model


def morton_index(cell: np.ndarray, level: int) -> np.ndarray:
    """Inverse of :func:`octant_offsets` for integer cells at ``level``."""
    cell = np.asarray(cell, dtype=np.int64)
    index = np.zeros(cell.shape[:-1], dtype=np.int64)
    for k in range(level):
        shift = level - 1 - k
        j = (
            ((cell[..., 0] >> shift) & 1)
            | (((cell[..., 1] >> shift) & 1) << 1)
            | (((cell[..., 2] >> shift) & 1) << 2)
        )
        index = index * N_CHILDREN + j
    return index
