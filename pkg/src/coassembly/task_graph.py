"""AND/OR assembly-plan graph and task-progress inference.

The plan is "one surface at a time, any surface order, any block order
within a surface".  The graph expands that into explicit progress nodes:

  * choice nodes (level 3): a set of finished surfaces, nothing active --
    the worker may open any unstarted surface next;
  * mid-surface nodes (level 1 or 2, by blocks inserted): one surface
    active with a partial block set.

Every edge is one block insertion.  Edges leaving a node are tagged OR when
they are alternatives and AND when the continuation is forced (the last
block that completes a surface's AND group).
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .labels import reach_label

CHOICE_LEVEL = 3


class InconsistentObservationError(Exception):
    """Observation sequence fits no node; carries the longest usable prefix."""

    def __init__(self, events, consistent_prefix):
        self.events = list(events)
        self.consistent_prefix = list(consistent_prefix)
        super().__init__(
            f"insertion sequence {self.events} is inconsistent with the task graph "
            f"(longest consistent prefix: {self.consistent_prefix})")


class InadmissibleInsertionError(Exception):
    pass


@dataclass(frozen=True)
class GraphNode:
    id: int
    level: int
    completed: frozenset[int]
    active_surface: int | None
    depth: int  # insertions consumed on any root path


@dataclass(frozen=True)
class GraphEdge:
    parent: int
    child: int
    block: int
    connector: str  # "and" | "or"


@dataclass(frozen=True)
class TaskState:
    """Inferred progress: a graph node plus its posterior score."""
    node_id: int
    level: int
    completed: frozenset[int]
    active_surface: int | None
    depth: int
    score: float = 1.0

    @property
    def is_between_surfaces(self) -> bool:
        return self.active_surface is None


@dataclass(frozen=True)
class InsertionEvent:
    block: int
    timestamp: float


class ObservationSeq:
    """Ordered completed-insertion events; ids unique, times nondecreasing."""

    def __init__(self, events=()):
        self.events: list[InsertionEvent] = []
        for ev in events:
            self.append(ev)

    def append(self, event: InsertionEvent) -> None:
        if any(e.block == event.block for e in self.events):
            raise ValueError(f"block {event.block} already observed")
        if self.events and event.timestamp < self.events[-1].timestamp:
            raise ValueError("timestamps must be nondecreasing")
        self.events.append(event)

    def blocks(self) -> list[int]:
        return [e.block for e in self.events]

    def __len__(self):
        return len(self.events)


class TaskGraph:
    def __init__(self, nodes: list[GraphNode], edges: list[GraphEdge],
                 root_id: int, terminal_ids: set[int],
                 surface_blocks: dict[int, tuple[int, ...]]):
        self.nodes = {n.id: n for n in nodes}
        self.edges = edges
        self.root_id = root_id
        self.terminal_ids = set(terminal_ids)
        self.surface_blocks = {int(s): tuple(b) for s, b in surface_blocks.items()}
        self._out: dict[int, list[GraphEdge]] = {n.id: [] for n in nodes}
        for e in edges:
            self._out[e.parent].append(e)
        self._validate()

    def _validate(self) -> None:
        if self.root_id not in self.nodes:
            raise ValueError("root id missing from node list")
        for node_id, out in self._out.items():
            if node_id not in self.terminal_ids and not out:
                raise ValueError(f"non-terminal node {node_id} has no outgoing connector")
        # acyclicity: every edge strictly increases depth
        for e in self.edges:
            if self.nodes[e.child].depth != self.nodes[e.parent].depth + 1:
                raise ValueError("edges must advance depth by exactly one insertion")

    # -- queries ------------------------------------------------------------

    def node(self, node_id: int) -> GraphNode:
        return self.nodes[node_id]

    def out_edges(self, node_id: int) -> list[GraphEdge]:
        return self._out[node_id]

    def state_for(self, node: GraphNode, score: float = 1.0) -> TaskState:
        return TaskState(node.id, node.level, node.completed,
                         node.active_surface, node.depth, score)

    def root_state(self) -> TaskState:
        return self.state_for(self.nodes[self.root_id])

    def surface_of_block(self, block: int) -> int:
        for surface, blocks in self.surface_blocks.items():
            if block in blocks:
                return surface
        raise ValueError(f"block {block} belongs to no surface")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "root": self.root_id,
            "terminals": sorted(self.terminal_ids),
            "surface_blocks": {str(s): list(b) for s, b in self.surface_blocks.items()},
            "nodes": [
                {"id": n.id, "level": n.level, "completed": sorted(n.completed),
                 "active_surface": n.active_surface, "depth": n.depth}
                for n in self.nodes.values()
            ],
            "edges": [
                {"parent": e.parent, "child": e.child, "block": e.block,
                 "connector": e.connector}
                for e in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskGraph":
        nodes = [GraphNode(d["id"], d["level"], frozenset(d["completed"]),
                           d["active_surface"], d["depth"]) for d in data["nodes"]]
        edges = [GraphEdge(d["parent"], d["child"], d["block"], d["connector"])
                 for d in data["edges"]]
        return cls(nodes, edges, data["root"], set(data["terminals"]),
                   {int(s): tuple(b) for s, b in data["surface_blocks"].items()})


def build_task_graph(surface_blocks: dict[int, tuple[int, ...]]) -> TaskGraph:
    """Expand the one-surface-at-a-time plan into an explicit graph."""
    surfaces = {int(s): tuple(b) for s, b in sorted(surface_blocks.items())}
    seen_blocks = [b for bs in surfaces.values() for b in bs]
    if len(seen_blocks) != len(set(seen_blocks)):
        raise ValueError("block ids must be unique across surfaces")

    nodes: list[GraphNode] = []
    edges: list[GraphEdge] = []
    index: dict[tuple, int] = {}

    def key(done, active, inserted):
        return (frozenset(done), active, frozenset(inserted))

    def add_node(done, active, inserted, depth):
        k = key(done, active, inserted)
        if k in index:
            return index[k]
        completed = frozenset(b for s in done for b in surfaces[s]) | frozenset(inserted)
        level = CHOICE_LEVEL if active is None else len(inserted)
        node = GraphNode(len(nodes), level, completed, active, depth)
        index[k] = node.id
        nodes.append(node)
        return node.id

    root = add_node(frozenset(), None, frozenset(), 0)
    frontier = [(frozenset(), None, frozenset())]
    while frontier:
        next_frontier = []
        for done, active, inserted in frontier:
            parent = index[key(done, active, inserted)]
            depth = nodes[parent].depth
            children = []
            if active is None:
                for s in surfaces:
                    if s in done:
                        continue
                    for b in surfaces[s]:
                        children.append((b, done, s, frozenset([b])))
            else:
                remaining = [b for b in surfaces[active] if b not in inserted]
                for b in remaining:
                    new_inserted = inserted | {b}
                    if len(new_inserted) == len(surfaces[active]):
                        children.append((b, done | {active}, None, frozenset()))
                    else:
                        children.append((b, done, active, new_inserted))
            connector = "or" if len(children) > 1 else "and"
            for b, c_done, c_active, c_ins in children:
                fresh = key(c_done, c_active, c_ins) not in index
                child = add_node(c_done, c_active, c_ins, depth + 1)
                edges.append(GraphEdge(parent, child, b, connector))
                if fresh:
                    next_frontier.append((c_done, c_active, c_ins))
        frontier = next_frontier

    terminal = index[key(frozenset(surfaces), None, frozenset())]
    return TaskGraph(nodes, edges, root, {terminal}, surfaces)


def default_task_graph() -> TaskGraph:
    """The 12-block, 4-surface plan (3 blocks per surface)."""
    return build_task_graph({1: (1, 2, 3), 2: (4, 5, 6), 3: (7, 8, 9), 4: (10, 11, 12)})


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _best_node(graph: TaskGraph, candidates) -> GraphNode:
    # most progressed first, then lowest id: deterministic argmax
    return min(candidates, key=lambda nid: (-graph.nodes[nid].depth, nid))


def infer_progress(graph: TaskGraph, obs: ObservationSeq) -> TaskState:
    """Most likely task node given the insertion sequence.

    Uniform prior over nodes; the likelihood of a node is 1 when some
    root path to it consumes exactly the observed sequence, else 0.  The
    returned score is the posterior mass 1/|consistent set|.
    """
    frontier = {graph.root_id}
    consumed: list[int] = []
    for event in obs.events:
        step = {e.child for nid in frontier for e in graph.out_edges(nid)
                if e.block == event.block}
        if not step:
            raise InconsistentObservationError(obs.blocks(), consumed)
        frontier = step
        consumed.append(event.block)
    best = _best_node(graph, frontier)
    return graph.state_for(graph.nodes[best], score=1.0 / len(frontier))


def valid_next_intentions(graph: TaskGraph, state: TaskState) -> set[str]:
    """Reach intentions admissible from a node under the AND/OR semantics."""
    return {reach_label(e.block) for e in graph.out_edges(state.node_id)}


def advance(graph: TaskGraph, state: TaskState, event: InsertionEvent) -> TaskState:
    """Deterministic transition on one insertion."""
    if state.node_id in graph.terminal_ids:
        raise InadmissibleInsertionError(
            f"task already complete; cannot insert block {event.block}")
    for e in graph.out_edges(state.node_id):
        if e.block == event.block:
            return graph.state_for(graph.nodes[e.child])
    raise InadmissibleInsertionError(
        f"block {event.block} is not admissible from node {state.node_id}")
