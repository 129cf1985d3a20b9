"""The split controller.

One half (provisioning) owns users, host placement and the infrastructure
topology; the other half (flow management) owns the per-valley information
bases, flows, channels and path computation. They share a process and talk
over an in-process queue; nothing about their split is externally visible.

Nodes reach the controller through typed request payloads and receive typed
replies; path advertisements additionally carry a fully encoded control
message so the wire contract is exercised end to end. Every decision here is
deterministic: ties break on 10-byte node-id order, iteration is sorted, and
ids come from monotone counters.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .codec import FloatingHeader, MessageKind, PathTree, YodelMessage, encode
from .errors import (
    AccessDenied,
    NoEligibleEdge,
    UnknownFlow,
    UnknownNode,
    UnreachableConsumer,
)
from .model import Directory, NamespaceRecord
from .services import (
    ServiceModel,
    balance_consumers,
    next_producer_edge,
    roles_for_join,
)
from .trace import CONTROLLER_NODE, Metrics, Trace
from .ynid import Yni

__all__ = [
    "CONTROLLER_YNI",
    "NodeInfo",
    "TopologyGraph",
    "compute_path",
    "HostPrefs",
    "Partition",
    "FlowObject",
    "ChannelObject",
    "JoinRequest",
    "JoinReply",
    "RemoveRole",
    "NodeRegistration",
    "PathAdvertisement",
    "PathWithdraw",
    "ActivateProducerEdge",
    "ChannelIdUpdate",
    "Controller",
]

# Reserved id the controller signs control messages with.
CONTROLLER_YNI = Yni(b"\x00" * 6, 0)


# ---------------------------------------------------------------------------
# topology


@dataclass
class NodeInfo:
    yni: Yni
    role: str  # "edge" | "connector"
    domain: str
    stats: dict[str, float] = field(default_factory=dict)


class TopologyGraph:
    """Controller-side view of the infrastructure.

    Each node's registration replaces its previous neighbor report wholesale.
    A link materializes only when both endpoints are registered and both
    currently declare each other; its latency is the smaller declared value.
    Earlier one-sided mentions stay pending until the far end confirms.
    """

    def __init__(self):
        self.nodes: dict[Yni, NodeInfo] = {}
        self.declared: dict[Yni, dict[Yni, int]] = {}

    def register(self, yni: Yni, role: str, domain: str,
                 neighbors: dict[Yni, int],
                 stats: Optional[dict[str, float]] = None) -> None:
        if role not in ("edge", "connector"):
            raise UnknownNode(f"bad infrastructure role {role!r}")
        self.nodes[yni] = NodeInfo(yni, role, domain, dict(stats or {}))
        self.declared[yni] = dict(neighbors)

    def deregister(self, yni: Yni) -> None:
        self.nodes.pop(yni, None)
        self.declared.pop(yni, None)

    def links(self) -> dict[frozenset, int]:
        out: dict[frozenset, int] = {}
        for a, decl in self.declared.items():
            if a not in self.nodes:
                continue
            for b, lat_a in decl.items():
                if b not in self.nodes or a >= b:
                    continue
                lat_b = self.declared.get(b, {}).get(a)
                if lat_b is None:
                    continue  # pending until the far end declares back
                out[frozenset((a, b))] = min(lat_a, lat_b)
        return out

    def neighbors(self, yni: Yni) -> dict[Yni, int]:
        out = {}
        for pair, lat in self.links().items():
            if yni in pair:
                (other,) = pair - {yni}
                out[other] = lat
        return out

    def edges(self) -> list[NodeInfo]:
        return [n for _, n in sorted(self.nodes.items()) if n.role == "edge"]


def compute_path(graph: TopologyGraph, source: Yni,
                 consumers: Iterable[Yni]) -> PathTree:
    """Union of shortest paths from the source edge to every consumer edge.

    Cost is (hop count, total latency); remaining ties collapse onto the
    parent with the lowest node id, so the result is a function of the graph
    alone, not of registration order. Children are stored in id order.
    Raises UnreachableConsumer listing every cut-off edge.
    """
    targets = sorted(set(consumers) - {source})
    if source not in graph.nodes:
        raise UnknownNode(f"unknown source {source}")
    for c in targets:
        if c not in graph.nodes:
            raise UnknownNode(f"unknown consumer edge {c}")

    adjacency: dict[Yni, list[tuple[Yni, int]]] = {n: [] for n in graph.nodes}
    for pair, lat in graph.links().items():
        a, b = sorted(pair)
        adjacency[a].append((b, lat))
        adjacency[b].append((a, lat))
    for lst in adjacency.values():
        lst.sort()

    dist: dict[Yni, tuple[int, int]] = {source: (0, 0)}
    parent: dict[Yni, Yni] = {}
    done: set[Yni] = set()
    heap = [(0, 0, source.to_bytes(), source)]
    while heap:
        hops, lat, _, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        for nb, edge_lat in adjacency[node]:
            cand = (hops + 1, lat + edge_lat)
            best = dist.get(nb)
            if best is None or cand < best:
                dist[nb] = cand
                parent[nb] = node
                heapq.heappush(heap, (cand[0], cand[1], nb.to_bytes(), nb))
            elif cand == best and node < parent[nb]:
                parent[nb] = node

    missing = [c for c in targets if c not in done]
    if missing:
        raise UnreachableConsumer(source, missing)

    needed: set[Yni] = {source}
    for c in targets:
        node = c
        while node != source:
            needed.add(node)
            node = parent[node]
    children: dict[Yni, list[Yni]] = {n: [] for n in needed}
    for node in needed - {source}:
        children[parent[node]].append(node)

    def build(node: Yni) -> PathTree:
        return PathTree(node, tuple(build(c) for c in sorted(children[node])))

    return build(source)


# ---------------------------------------------------------------------------
# provisioning


@dataclass(frozen=True)
class HostPrefs:
    preferred_domain: Optional[str] = None
    max_latency: Optional[int] = None


# ---------------------------------------------------------------------------
# flows


@dataclass
class Partition:
    channel_id: int
    producer_edge: Yni
    consumer_edges: list[Yni] = field(default_factory=list)


@dataclass
class FlowObject:
    valley_id: int
    namespace_id: int
    community: str
    model: ServiceModel
    initial_channel_id: int
    current_channel_id: int
    producer_edges: dict[Yni, bool] = field(default_factory=dict)  # yni -> active
    consumer_edges: set[Yni] = field(default_factory=set)
    partitions: Optional[list[Partition]] = None
    advertised: dict[tuple[Yni, int], PathTree] = field(default_factory=dict)
    precomputed: dict[Yni, PathTree] = field(default_factory=dict)
    retired_channel_ids: set[int] = field(default_factory=set)

    def active_edges(self) -> list[Yni]:
        return sorted(e for e, active in self.producer_edges.items() if active)

    def member_channel(self, edge: Yni) -> int:
        """The channel id this edge currently works under."""
        if self.partitions is not None:
            for p in self.partitions:
                if edge == p.producer_edge or edge in p.consumer_edges:
                    return p.channel_id
        return self.current_channel_id


@dataclass(frozen=True)
class ChannelObject:
    """Derived per-channel view: members plus the connector subgraph, the
    latter being the union of the advertised trees' interior nodes."""

    channel_id: int
    source_type: str  # "single" | "multi"
    producer_edges: tuple[Yni, ...]
    consumer_edges: tuple[Yni, ...]
    connectors: tuple[Yni, ...]


# ---------------------------------------------------------------------------
# controller <-> node payloads


@dataclass(frozen=True)
class NodeRegistration:
    yni: Yni
    role: str
    domain: str
    neighbors: tuple[tuple[Yni, int], ...]
    stats: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class JoinRequest:
    edge: Yni
    valley_id: int
    namespace_id: int
    community: str
    role: str  # "producer" | "consumer" | "member"
    host: Yni
    app_id: int


@dataclass(frozen=True)
class JoinReply:
    valley_id: int
    namespace_id: int
    community: str
    role: str
    host: Yni
    app_id: int
    channel_id: int
    lock_edge: bool
    service_model: ServiceModel
    anycast_randomized: bool
    anycast_q: int  # p_deliver scaled to /65535


@dataclass(frozen=True)
class RemoveRole:
    edge: Yni
    valley_id: int
    namespace_id: int
    community: str
    role: str


@dataclass(frozen=True)
class PathAdvertisement:
    message: bytes  # encoded control message with valley, channel and tree


@dataclass(frozen=True)
class PathWithdraw:
    valley_id: int
    channel_id: int


@dataclass(frozen=True)
class ActivateProducerEdge:
    valley_id: int
    namespace_id: int
    community: str
    channel_id: int


@dataclass(frozen=True)
class ChannelIdUpdate:
    valley_id: int
    old_channel_id: int
    new_channel_id: int


# ---------------------------------------------------------------------------
# the controller proper


class Controller:
    """Single logical event loop; both halves run inside it.

    `transport(dest, payload)` delivers a reply to a node (the simulator
    schedules it after the configured RPC latency; unit tests collect it).
    `clock()` supplies the tick for trace records.
    """

    def __init__(self, directory: Directory, trace: Trace, metrics: Metrics,
                 transport: Callable[[Yni, object], None],
                 clock: Callable[[], int]):
        self.directory = directory
        self.graph = TopologyGraph()
        self.trace = trace
        self.metrics = metrics
        self.transport = transport
        self.clock = clock
        self.flows: dict[tuple[int, int, str], FlowObject] = {}
        self.hosts: dict[Yni, tuple[str, Yni]] = {}  # host -> (user, edge)
        self._queue: deque = deque()

    # -- plumbing ------------------------------------------------------------

    def _emit(self, event: str, *fields: tuple[str, object]) -> None:
        self.trace.emit(self.clock(), CONTROLLER_NODE, event, *fields)

    def handle(self, payload: object) -> None:
        """Entry point for simulator-delivered requests; drains the internal
        queue so provisioning-half and flow-half hand-offs stay in-process."""
        self._queue.append(payload)
        while self._queue:
            item = self._queue.popleft()
            if isinstance(item, NodeRegistration):
                self.register_infrastructure_node(
                    item.yni, item.role, item.domain, dict(item.neighbors),
                    dict(item.stats))
            elif isinstance(item, JoinRequest):
                self.handle_edge_join(item)
            elif isinstance(item, RemoveRole):
                self.remove_edge_role(item.valley_id, item.namespace_id,
                                      item.community, item.edge, item.role)
            else:
                raise TypeError(f"controller cannot handle {type(item).__name__}")

    # -- topology half ---------------------------------------------------------

    def register_infrastructure_node(self, yni: Yni, role: str, domain: str,
                                     neighbors: dict[Yni, int],
                                     stats: Optional[dict[str, float]] = None) -> None:
        self.graph.register(yni, role, domain, neighbors, stats)
        self.reconcile_all()

    def handle_node_lost(self, yni: Yni) -> None:
        self.graph.deregister(yni)
        self.reconcile_all()

    def provision_host(self, host: Yni, user: str,
                       prefs: HostPrefs = HostPrefs()) -> Yni:
        """Place a host on the best edge.

        Score per candidate edge, lexicographically minimized:
        (misses preferences, latency estimate to the preferred domain,
        negated remaining capacity, node id). Capacity is the edge's compute
        stat minus hosts already placed there.
        """
        self.directory.check_credentials(user)
        self.metrics.provision_visit()
        edges = self.graph.edges()
        if not edges:
            raise NoEligibleEdge("no edges registered")
        placed: dict[Yni, int] = {}
        for _, (_, e) in sorted(self.hosts.items()):
            placed[e] = placed.get(e, 0) + 1

        def score(info: NodeInfo):
            est = self._domain_distance(info.yni, prefs.preferred_domain)
            meets = ((prefs.preferred_domain is None
                      or info.domain == prefs.preferred_domain)
                     and (prefs.max_latency is None or est <= prefs.max_latency))
            remaining = info.stats.get("compute", 0.0) - placed.get(info.yni, 0)
            return (0 if meets else 1, est, -remaining, info.yni)

        best = min(edges, key=score)
        self.hosts[host] = (user, best.yni)
        self._emit("PROVISION", ("host", host), ("user", user), ("edge", best.yni))
        return best.yni

    def _domain_distance(self, start: Yni, domain: Optional[str]) -> float:
        """Shortest-path latency from a node to the nearest node of a domain."""
        if domain is None or self.graph.nodes[start].domain == domain:
            return 0
        links = self.graph.links()
        adjacency: dict[Yni, list[tuple[Yni, int]]] = {}
        for pair, lat in links.items():
            a, b = sorted(pair)
            adjacency.setdefault(a, []).append((b, lat))
            adjacency.setdefault(b, []).append((a, lat))
        dist = {start: 0}
        heap = [(0, start.to_bytes(), start)]
        while heap:
            d, _, node = heapq.heappop(heap)
            if d > dist.get(node, float("inf")):
                continue
            if self.graph.nodes[node].domain == domain:
                return d
            for nb, lat in sorted(adjacency.get(node, [])):
                nd = d + lat
                if nd < dist.get(nb, float("inf")):
                    dist[nb] = nd
                    heapq.heappush(heap, (nd, nb.to_bytes(), nb))
        return float("inf")

    # -- flow half -------------------------------------------------------------

    def _flow_key(self, valley_id: int, namespace_id: int, community: str):
        return (valley_id, namespace_id, community)

    def flow(self, valley_id: int, namespace_id: int, community: str) -> FlowObject:
        try:
            return self.flows[self._flow_key(valley_id, namespace_id, community)]
        except KeyError:
            raise UnknownFlow(f"no flow for community {community!r}") from None

    def create_community(self, valley_id: int, namespace_id: int,
                         community: str) -> FlowObject:
        """Fetch-or-create the community record plus its flow; the flow's
        first channel id is allocated immediately, channels or not."""
        record = self.directory.ensure_community(valley_id, namespace_id, community)
        if record.flow is None:
            ns = self.directory.namespace_by_id(valley_id, namespace_id)
            cid = self.directory.vib(valley_id).allocate_channel_id()
            record.flow = FlowObject(valley_id, namespace_id, community,
                                     ns.service_model, cid, cid)
            self.flows[self._flow_key(valley_id, namespace_id, community)] = record.flow
        return record.flow

    def handle_edge_join(self, req: JoinRequest) -> None:
        ns = self.directory.namespace_by_id(req.valley_id, req.namespace_id)
        flow = self.create_community(req.valley_id, req.namespace_id, req.community)
        roles = roles_for_join(ns.service_model, req.role)

        lock_edge = False
        if "consumer" in roles:
            self._add_consumer_edge(flow, req.edge)
        if "producer" in roles:
            lock_edge = self._add_producer_edge(flow, ns, req.edge)

        self._emit("JOIN", ("edge", req.edge), ("valley", req.valley_id),
                   ("ns", req.namespace_id), ("community", req.community),
                   ("role", req.role), ("host", req.host), ("app", req.app_id))
        self.metrics.join_visit(str(req.edge), req.valley_id, req.community, req.role)

        self.reconcile(flow)
        reply = JoinReply(
            req.valley_id, req.namespace_id, req.community, req.role,
            req.host, req.app_id,
            channel_id=flow.member_channel(req.edge),
            lock_edge=lock_edge,
            service_model=ns.service_model,
            anycast_randomized=ns.anycast.randomized,
            anycast_q=int(round(ns.anycast.p_deliver * 65535)),
        )
        self.transport(req.edge, reply)

    def _add_consumer_edge(self, flow: FlowObject, edge: Yni) -> None:
        if edge in flow.consumer_edges:
            return
        flow.consumer_edges.add(edge)
        if flow.partitions is not None and not any(
                edge in p.consumer_edges for p in flow.partitions):
            # incremental balance: pin to its own partition if it produces
            # (so a later merge carries the consumer role along), otherwise
            # fewest consumers, ties to the lowest producer edge
            own = [p for p in flow.partitions if p.producer_edge == edge]
            target = own[0] if own else min(
                flow.partitions, key=lambda p: (len(p.consumer_edges),
                                                p.producer_edge))
            target.consumer_edges.append(edge)

    def _add_producer_edge(self, flow: FlowObject, ns: NamespaceRecord,
                           edge: Yni) -> bool:
        """Returns the edge-level lock directive for the join reply."""
        if edge in flow.producer_edges:
            return not flow.producer_edges[edge]
        if not flow.model.single_source:
            flow.producer_edges[edge] = True
            return False
        has_active = bool(flow.active_edges())
        if not has_active:
            flow.producer_edges[edge] = True
            return False
        if flow.model.attributes.partitioning and ns.auto_partition:
            flow.producer_edges[edge] = True
            self.partition_flow(flow)
            return False
        flow.producer_edges[edge] = False  # on hold
        return True

    # -- partitioning ----------------------------------------------------------

    def partition_flow(self, flow: FlowObject) -> None:
        """(Re)split a partitionable flow: one partition per producer edge.

        Existing partitions keep their channel ids; on the first split the
        partition of the already-active edge keeps the flow's current id;
        every new partition draws a fresh monotone id. Consumers are
        rebalanced wholesale and moved edges follow their new partition's id.
        """
        if not flow.model.attributes.partitioning:
            raise UnknownFlow(f"{flow.model.value} flows do not partition")
        if not flow.producer_edges:
            return
        vib = self.directory.vib(flow.valley_id)
        before = {e: flow.member_channel(e)
                  for e in set(flow.producer_edges) | flow.consumer_edges}
        old = {p.producer_edge: p.channel_id for p in (flow.partitions or [])}
        keeper = None
        if flow.partitions is None:
            active = flow.active_edges()
            keeper = active[0] if active else sorted(flow.producer_edges)[0]
        assignment = balance_consumers(sorted(flow.producer_edges),
                                       flow.consumer_edges)
        parts = []
        for producer_edge in sorted(assignment):
            if producer_edge in old:
                cid = old[producer_edge]
            elif producer_edge == keeper:
                cid = flow.current_channel_id
            else:
                cid = vib.allocate_channel_id()
            parts.append(Partition(cid, producer_edge, assignment[producer_edge]))
        flow.partitions = parts
        self._emit("PARTITION", ("valley", flow.valley_id),
                   ("community", flow.community), ("partitions", len(parts)),
                   ("channels", ",".join(str(p.channel_id) for p in parts)))
        # every partition's producer edge runs active
        for p in parts:
            if not flow.producer_edges[p.producer_edge]:
                flow.producer_edges[p.producer_edge] = True
                self.transport(p.producer_edge, ActivateProducerEdge(
                    flow.valley_id, flow.namespace_id, flow.community,
                    p.channel_id))
        self._push_channel_updates(flow, before)
        self.reconcile(flow)

    def _push_channel_updates(self, flow: FlowObject,
                              before: dict[Yni, int]) -> None:
        for edge in sorted(before):
            now_cid = flow.member_channel(edge)
            if now_cid != before[edge]:
                self.transport(edge, ChannelIdUpdate(flow.valley_id,
                                                     before[edge], now_cid))

    def merge_partition(self, flow: FlowObject, dying: Partition) -> None:
        rest = [p for p in flow.partitions if p is not dying]
        flow.partitions = rest if rest else None
        if rest:
            survivor = min(rest, key=lambda p: p.producer_edge)
            moved = [e for e in dying.consumer_edges if e in flow.consumer_edges]
            for e in moved:
                if e != survivor.producer_edge and e not in survivor.consumer_edges:
                    survivor.consumer_edges.append(e)
                self.transport(e, ChannelIdUpdate(flow.valley_id,
                                                  dying.channel_id,
                                                  survivor.channel_id))
            flow.retired_channel_ids.add(dying.channel_id)
            self._emit("MERGE", ("valley", flow.valley_id),
                       ("community", flow.community),
                       ("from_channel", dying.channel_id),
                       ("into_channel", survivor.channel_id))
        else:
            # last partition: its id simply becomes the flow's current id
            flow.current_channel_id = dying.channel_id

    # -- membership removal ----------------------------------------------------

    def remove_edge_role(self, valley_id: int, namespace_id: int,
                         community: str, edge: Yni, role: str) -> None:
        flow = self.flow(valley_id, namespace_id, community)
        roles = ("producer", "consumer") if role == "member" else (role,)
        for r in roles:
            if r == "consumer":
                self._remove_consumer_edge(flow, edge)
            else:
                self._remove_producer_edge(flow, edge)
        self._emit("ROLE_REMOVED", ("edge", edge), ("valley", valley_id),
                   ("community", community), ("role", role))
        self.reconcile(flow)

    def _remove_consumer_edge(self, flow: FlowObject, edge: Yni) -> None:
        flow.consumer_edges.discard(edge)
        if flow.partitions is not None:
            for p in flow.partitions:
                if edge in p.consumer_edges:
                    p.consumer_edges.remove(edge)

    def _remove_producer_edge(self, flow: FlowObject, edge: Yni) -> None:
        if edge not in flow.producer_edges:
            return
        was_active = flow.producer_edges.pop(edge)
        flow.precomputed.pop(edge, None)
        if flow.partitions is not None:
            dying = [p for p in flow.partitions if p.producer_edge == edge]
            if dying:
                self.merge_partition(flow, dying[0])
            return
        if flow.model.single_source and was_active:
            self._activate_next(flow)

    def _activate_next(self, flow: FlowObject) -> None:
        """Single-source failover: bring up the lowest on-hold producer edge,
        advertising its pre-computed path before the activation signal."""
        candidates = [e for e, active in flow.producer_edges.items() if not active]
        nxt = next_producer_edge(candidates)
        if nxt is None:
            return
        flow.producer_edges[nxt] = True
        leaves = flow.consumer_edges - {nxt}
        if leaves:
            # the precomputed store is refreshed on every reconcile, so a hit
            # here is current; compute on the spot only when one is missing
            tree = flow.precomputed.get(nxt)
            if tree is None:
                tree = self._tree_or_partial(flow, nxt, leaves)
            if tree is not None:
                self._advertise(flow, nxt, flow.current_channel_id, tree)
        self.transport(nxt, ActivateProducerEdge(
            flow.valley_id, flow.namespace_id, flow.community,
            flow.current_channel_id))

    # -- paths -----------------------------------------------------------------

    def _tree_or_partial(self, flow: FlowObject, source: Yni,
                         leaves: set[Yni]) -> Optional[PathTree]:
        """Strict computation first; on cut-off consumers, log them and cover
        the reachable remainder."""
        try:
            return compute_path(self.graph, source, leaves)
        except UnreachableConsumer as exc:
            self._emit("UNREACHABLE", ("valley", flow.valley_id),
                       ("community", flow.community), ("edge", source),
                       ("cut", ",".join(str(c) for c in exc.cut_off)))
            rest = leaves - set(exc.cut_off)
            if not rest:
                return None
            return compute_path(self.graph, source, rest)

    def _desired_trees(self, flow: FlowObject) -> list[tuple[int, Yni, set[Yni]]]:
        out = []
        if flow.model.single_source and flow.partitions is None:
            active = flow.active_edges()
            if active:
                leaves = flow.consumer_edges - {active[0]}
                if leaves:
                    out.append((flow.current_channel_id, active[0], leaves))
        elif flow.partitions is not None:
            for p in flow.partitions:
                leaves = set(p.consumer_edges) - {p.producer_edge}
                if leaves:
                    out.append((p.channel_id, p.producer_edge, leaves))
        else:
            for e in sorted(flow.producer_edges):
                leaves = flow.consumer_edges - {e}
                if leaves:
                    out.append((flow.current_channel_id, e, leaves))
        return out

    def _advertise(self, flow: FlowObject, edge: Yni, channel_id: int,
                   tree: PathTree) -> None:
        flow.advertised[(edge, channel_id)] = tree
        msg = YodelMessage(MessageKind.CONTROL_YPP, CONTROLLER_YNI, edge,
                           FloatingHeader(valley_id=flow.valley_id,
                                          channel_id=channel_id,
                                          path_tree=tree))
        self._emit("PATH_ADV", ("edge", edge), ("valley", flow.valley_id),
                   ("channel", channel_id), ("nodes", tree.size()))
        self.transport(edge, PathAdvertisement(encode(msg)))

    def reconcile(self, flow: FlowObject) -> None:
        """Drive advertised state to match desired trees; withdraw the rest."""
        desired: dict[tuple[Yni, int], PathTree] = {}
        for channel_id, source, leaves in self._desired_trees(flow):
            tree = self._tree_or_partial(flow, source, leaves)
            if tree is not None:
                desired[(source, channel_id)] = tree
        for key in sorted(flow.advertised.keys() - desired.keys(),
                          key=lambda k: (k[0], k[1])):
            edge, channel_id = key
            del flow.advertised[key]
            self._emit("PATH_WITHDRAW", ("edge", edge),
                       ("valley", flow.valley_id), ("channel", channel_id))
            self.transport(edge, PathWithdraw(flow.valley_id, channel_id))
        for key in sorted(desired, key=lambda k: (k[0], k[1])):
            if flow.advertised.get(key) != desired[key]:
                self._advertise(flow, key[0], key[1], desired[key])
        self._refresh_precomputed(flow)

    def _refresh_precomputed(self, flow: FlowObject) -> None:
        # proactive path computation is an SSM feature; other variants
        # compute on demand at activation time
        if flow.model is not ServiceModel.SSM or flow.partitions is not None:
            return
        flow.precomputed = {}
        for edge, active in sorted(flow.producer_edges.items()):
            if active:
                continue
            leaves = flow.consumer_edges - {edge}
            if not leaves:
                continue
            try:
                flow.precomputed[edge] = compute_path(self.graph, edge, leaves)
            except UnreachableConsumer as exc:
                rest = leaves - set(exc.cut_off)
                if rest:
                    flow.precomputed[edge] = compute_path(self.graph, edge, rest)

    def reconcile_all(self) -> None:
        for key in sorted(self.flows):
            self.reconcile(self.flows[key])

    # -- derived views ---------------------------------------------------------

    def channels(self, flow: FlowObject) -> list[ChannelObject]:
        """Channel objects as currently spawned, including the connector
        subgraph derived from advertised trees."""
        groups: dict[int, list[tuple[Yni, PathTree]]] = {}
        for (edge, channel_id), tree in flow.advertised.items():
            groups.setdefault(channel_id, []).append((edge, tree))
        out = []
        source_type = "single" if flow.model.single_source else "multi"
        for channel_id in sorted(groups):
            producers = sorted({e for e, _ in groups[channel_id]})
            consumers: set[Yni] = set()
            connectors: set[Yni] = set()
            for _, tree in groups[channel_id]:
                for node in tree.walk():
                    info = self.graph.nodes.get(node.yni)
                    if info is not None and info.role == "connector":
                        connectors.add(node.yni)
                    elif node.yni in flow.consumer_edges:
                        consumers.add(node.yni)
            out.append(ChannelObject(channel_id, source_type, tuple(producers),
                                     tuple(sorted(consumers)),
                                     tuple(sorted(connectors))))
        return out
