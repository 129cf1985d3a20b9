"""Discrete-event world: wires nodes, controller and scenario into one run.

Everything observable is a function of (topology, scenario, seed). Events are
a heap of (tick, sequence, thunk); the sequence makes same-tick ordering FIFO
and repeat runs byte-identical. Per-purpose generators are derived by hashing
the seed with a stable label, so adding a consumer of randomness in one place
never shifts the draws of another.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass
from typing import Callable, Optional

from .codec import MessageKind, YodelMessage
from .control import Controller, HostPrefs, NodeRegistration
from .dataplane import (ConnectorNode, EdgeNode, HostNode, Node,
                        parse_data_metadata)
from .errors import AccessDenied, ScenarioError, UnknownFlow, YodelError
from .model import Directory, Visibility
from .scenario import CommandSpec, ScenarioSpec, TopologySpec
from .services import AnycastMode, ServiceModel, roles_for_join
from .trace import Metrics, Trace
from .twin import TwinConfig, TwinManager
from .ynid import Yni, generate_yni

__all__ = ["SimConfig", "Simulation", "build", "run_world"]

_CONFIG_KEYS = {
    "until": int,
    "rpc_latency": int,
    "host_link_latency": int,
    "twin_period": int,
    "twin_miss_threshold": int,
    "twin_ttl": int,
    "twin_buffer_max": int,
}


def _serial_field(msg: YodelMessage) -> tuple[tuple[str, int], ...]:
    """Serial of a data message as an extra trace field, when parseable."""
    if msg.kind is MessageKind.CONTROL_YPP:
        return ()
    try:
        serial, _ = parse_data_metadata(msg.kind, msg.floating.metadata)
    except YodelError:
        return ()
    return (("serial", serial),)


@dataclass
class SimConfig:
    seed: int = 0
    until: int = 200
    rpc_latency: int = 1
    host_link_latency: int = 1
    twin_period: int = 5
    twin_miss_threshold: int = 3
    twin_ttl: int = 50
    twin_buffer_max: Optional[int] = None

    @classmethod
    def from_scenario(cls, scen: ScenarioSpec, seed: int) -> "SimConfig":
        cfg = cls(seed=seed)
        for key, raw in scen.config.items():
            if key not in _CONFIG_KEYS:
                raise ScenarioError("<scenario>", 0, f"unknown config key {key!r}")
            try:
                setattr(cfg, key, _CONFIG_KEYS[key](raw))
            except ValueError:
                raise ScenarioError("<scenario>", 0,
                                    f"config {key}: bad value {raw!r}") from None
        return cfg


class Simulation:
    """One world. Construct with parsed specs, then call run()."""

    def __init__(self, topo: TopologySpec, scen: ScenarioSpec,
                 config: SimConfig):
        self.topo = topo
        self.scen = scen
        self.config = config
        self.trace = Trace()
        self.metrics = Metrics()
        self.directory = Directory()
        self._now = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self._rngs: dict[str, random.Random] = {}
        self._inflight: dict[int, tuple[str, str]] = {}
        self.nodes: dict[str, Node] = {}        # label -> node (infra + hosts)
        self.by_yni: dict[Yni, Node] = {}
        self.edges: dict[str, EdgeNode] = {}
        self.hosts: dict[str, HostNode] = {}
        self._links: dict[frozenset, int] = {}  # {label,label} -> latency
        self._up: set[frozenset] = set()
        self._crashed: set[str] = set()
        self._current_event = 0
        self._build()

    # -- environment services (the NodeEnv contract) ---------------------------

    def rng(self, label: str) -> random.Random:
        if label not in self._rngs:
            digest = hashlib.sha256(
                f"{self.config.seed}:{label}".encode()).digest()
            self._rngs[label] = random.Random(int.from_bytes(digest, "big"))
        return self._rngs[label]

    def now(self) -> int:
        return self._now

    def next_serial(self) -> int:
        self._seq += 1
        return self._seq

    def schedule(self, tick: int, fn: Callable[[], None]) -> int:
        self._seq += 1
        heapq.heappush(self._heap, (tick, self._seq, fn))
        return self._seq

    def transmit(self, src: Node, pairs, mcast: bool = False) -> None:
        pairs = list(pairs)
        if not pairs:
            return
        if mcast and pairs[0][1].kind is not MessageKind.CONTROL_YPP:
            # one underlay transmission covers the whole batch
            self.metrics.transmission(src.domain, True, None)
        for dst_yni, msg in pairs:
            self._transmit_one(src, dst_yni, msg, mcast)

    def _transmit_one(self, src: Node, dst_yni: Yni, msg: YodelMessage,
                      mcast: bool) -> None:
        dst = self.by_yni.get(dst_yni)
        if dst is None:
            self.trace.emit(self._now, src.label, "DROP",
                            ("reason", "unknown_destination"),
                            ("to", str(dst_yni)))
            self.metrics.dropped(src.label, "unknown_destination")
            return
        if (not mcast and msg.kind is not MessageKind.CONTROL_YPP
                and not isinstance(src, HostNode)
                and not isinstance(dst, HostNode)):
            # transmission efficiency is measured on the overlay between
            # infrastructure nodes; host access lines don't count
            intra = src.domain == dst.domain
            self.metrics.transmission(src.domain, intra,
                                      (src.label, dst.label))
        self.trace.emit(self._now, src.label, "SEND", ("to", dst.label),
                        ("k", msg.kind.name), *_serial_field(msg))
        self.metrics.wire_sent(src.label, dst.label)
        key = frozenset((src.label, dst.label))
        if key not in self._up or src.label in self._crashed:
            self.metrics.wire_lost(src.label, dst.label)
            self.trace.emit(self._now, src.label, "DROP",
                            ("reason", "link_down"), ("to", dst.label))
            self.metrics.dropped(src.label, "link_down")
            return
        latency = self._links[key]
        event = self.schedule(self._now + latency,
                              lambda: self._arrive(src.label, dst, msg))
        self._inflight[event] = (src.label, dst.label)

    def _arrive(self, src_label: str, dst: Node, msg: YodelMessage) -> None:
        self._inflight.pop(self._current_event, None)
        key = frozenset((src_label, dst.label))
        if key not in self._up or dst.label in self._crashed:
            self.metrics.wire_lost(src_label, dst.label)
            self.trace.emit(self._now, dst.label, "DROP",
                            ("reason", "link_down"), ("from", src_label))
            self.metrics.dropped(dst.label, "link_down")
            return
        self.metrics.wire_received(src_label, dst.label)
        self.trace.emit(self._now, dst.label, "RECV", ("from", src_label),
                        ("k", msg.kind.name), *_serial_field(msg))
        dst.on_message(msg)

    def controller_rpc(self, src: Node, payload: object) -> None:
        if src.label in self._crashed:
            return
        self.schedule(self._now + self.config.rpc_latency,
                      lambda: self.controller.handle(payload))

    def _controller_transport(self, dest: Yni, payload: object) -> None:
        def deliver():
            node = self.by_yni.get(dest)
            if node is None or node.label in self._crashed:
                return
            node.on_controller(payload)
        self.schedule(self._now + self.config.rpc_latency, deliver)

    # -- construction ----------------------------------------------------------

    def _build(self) -> None:
        cfg = self.config
        self.controller = Controller(self.directory, self.trace, self.metrics,
                                     transport=self._controller_transport,
                                     clock=self.now)
        for spec in self.topo.nodes:
            yni = generate_yni(self.rng(f"yni:{spec.name}"), 0)
            if spec.role == "edge":
                node = EdgeNode(spec.name, yni, spec.domain, self)
                self.edges[spec.name] = node
            else:
                node = ConnectorNode(spec.name, yni, spec.domain, self)
            self.nodes[spec.name] = node
            self.by_yni[yni] = node
        for link in self.topo.links:
            key = frozenset((link.a, link.b))
            self._links[key] = link.latency
            self._up.add(key)
            a, b = self.nodes[link.a], self.nodes[link.b]
            a.act.add_neighbor(b.yni, link.latency, f"uni:{link.a}-{link.b}")
            b.act.add_neighbor(a.yni, link.latency, f"uni:{link.a}-{link.b}")
        for i, group in enumerate(self.topo.groups):
            token = f"mcast:{group.domain}:{i}"
            for member in group.members:
                others = [self.nodes[m].yni for m in group.members
                          if m != member]
                if len(others) >= 2:
                    self.nodes[member].act.add_group(others, 1, token)
        for spec in self.topo.nodes:
            node = self.nodes[spec.name]
            neighbors = {
                self.nodes[l.a if l.b == spec.name else l.b].yni: l.latency
                for l in self.topo.links if spec.name in (l.a, l.b)}
            self.controller.register_infrastructure_node(
                node.yni, spec.role, spec.domain, neighbors, dict(spec.stats))
        twin_cfg = TwinConfig(cfg.twin_period, cfg.twin_miss_threshold,
                              cfg.twin_ttl, cfg.twin_buffer_max)
        for label in self.edges:
            edge = self.edges[label]
            edge.twin = TwinManager(edge, twin_cfg,
                                    attached=self._host_attached(edge),
                                    label_for=self.label_of)
        for spec in self.topo.hosts:
            self.directory.register_user(spec.user)
            yni = generate_yni(self.rng(f"yni:{spec.name}"), 0)
            host = HostNode(spec.name, yni, self, spec.user)
            self.nodes[spec.name] = host
            self.by_yni[yni] = host
            self.hosts[spec.name] = host
            prefs = HostPrefs(spec.domain, spec.max_latency)
            edge_yni = self.controller.provision_host(yni, spec.user, prefs)
            edge = self.by_yni[edge_yni]
            key = frozenset((spec.name, edge.label))
            self._links[key] = cfg.host_link_latency
            self._up.add(key)
            host.attach(edge.yni, edge.domain)
            edge.attach_host(yni, cfg.host_link_latency, spec.name)
        if self.edges and cfg.twin_period <= cfg.until:
            self.schedule(cfg.twin_period, self._sweep_twins)
        for cmd in self.scen.commands:
            self.schedule(cmd.tick, self._command_thunk(cmd))

    def _host_attached(self, edge: EdgeNode):
        def check(host_yni: Yni) -> bool:
            node = self.by_yni.get(host_yni)
            if node is None or node.label in self._crashed:
                return False
            return frozenset((node.label, edge.label)) in self._up
        return check

    def label_of(self, yni: Yni) -> str:
        node = self.by_yni.get(yni)
        return node.label if node is not None else str(yni)

    def _sweep_twins(self) -> None:
        for label in sorted(self.edges):
            if label not in self._crashed:
                self.edges[label].twin.sweep()
        nxt = self._now + self.config.twin_period
        if nxt <= self.config.until:
            self.schedule(nxt, self._sweep_twins)

    # -- event loop ------------------------------------------------------------

    def run(self) -> "Simulation":
        while self._heap:
            tick, seq, fn = self._heap[0]
            if tick > self.config.until:
                break
            heapq.heappop(self._heap)
            self._now = tick
            self._current_event = seq
            fn()
        leftover = [self._inflight[seq] for _, seq, _ in sorted(self._heap)
                    if seq in self._inflight]
        self.metrics.finalize_conservation(leftover)
        return self

    # -- scenario commands -----------------------------------------------------

    def _command_thunk(self, cmd: CommandSpec):
        return lambda: self._run_command(cmd)

    def _run_command(self, cmd: CommandSpec) -> None:
        try:
            self._dispatch(cmd)
        except YodelError as exc:
            self.trace.emit(self._now, "scenario", "SCENARIO_ERROR",
                            ("line", cmd.line), ("verb", cmd.verb),
                            ("reason", str(exc)))
        except KeyError as exc:
            self.trace.emit(self._now, "scenario", "SCENARIO_ERROR",
                            ("line", cmd.line), ("verb", cmd.verb),
                            ("reason", f"unresolved reference {exc}"))

    def _dispatch(self, cmd: CommandSpec) -> None:
        a = cmd.args
        verb = cmd.verb
        if verb == "valley":
            # creating a valley enrolls the admin as a user if needed
            self.directory.register_user(a[0])
            self.directory.create_valley(a[0], a[1])
        elif verb == "namespace":
            self._make_namespace(a)
        elif verb == "community":
            user, valley_name, ns_name, community = a
            if not self.directory.authorize_access(user, valley_name, ns_name):
                raise AccessDenied(
                    f"{user!r} may not touch {valley_name}/{ns_name}")
            valley = self.directory.valley(valley_name)
            ns = self.directory.namespace(valley_name, ns_name)
            self.controller.create_community(valley.id, ns.id, community)
        elif verb == "member":
            self.directory.register_user(a[2])
            self.directory.add_member(a[0], a[1], a[2])
        elif verb == "grant":
            self.directory.register_user(a[3])
            self.directory.grant_access(a[0], a[1], a[2], a[3])
        elif verb == "visibility":
            self.directory.set_visibility(a[0], a[1], a[2], Visibility(a[3]))
        elif verb == "join":
            self._issue_join(a)
        elif verb == "withdraw":
            host = self.hosts[a[0]]
            valley = self.directory.valley(a[1])
            ns = self.directory.namespace(a[1], a[2])
            host.withdraw(valley.id, ns.id, a[3], a[4], int(a[5]))
        elif verb == "send":
            host = self.hosts[a[0]]
            valley = self.directory.valley(a[1])
            payload = " ".join(a[4:]).encode()
            host.send_data(valley.id, a[2], int(a[3]), payload)
        elif verb in ("lock", "unlock"):
            host = self.hosts[a[0]]
            valley = self.directory.valley(a[1])
            try:
                host.set_consumer_lock(valley.id, a[2], int(a[3]),
                                       verb == "lock")
            except KeyError:
                raise UnknownFlow(
                    f"{a[0]} has no consumer registration for {a[2]!r}") \
                    from None
        elif verb == "fault":
            self._fault(a)
        elif verb == "partition-now":
            valley = self.directory.valley(a[0])
            ns = self.directory.namespace(a[0], a[1])
            flow = self.controller.flow(valley.id, ns.id, a[2])
            if not flow.model.attributes.partitioning:
                raise UnknownFlow(
                    f"{flow.model.value} communities do not partition")
            self.controller.partition_flow(flow)
            self.controller.reconcile(flow)
        elif verb == "report":
            self.trace.emit(self._now, "scenario", "REPORT",
                            ("delivered", sum(self.metrics.deliveries.values())),
                            ("transmissions", self.metrics.transmissions_total),
                            ("proto_errors", self.metrics.proto_errors))

    def _make_namespace(self, a) -> None:
        user, valley_name, ns_name, model_name = a[:4]
        from .scenario import MODEL_NAMES
        model = MODEL_NAMES[model_name.lower()]
        visibility = Visibility.OPEN
        randomized = False
        q = 1.0
        auto_partition = True
        for extra in a[4:]:
            key, value = extra.split("=", 1)
            if key == "visibility":
                visibility = Visibility(value)
            elif key == "randomized":
                randomized = value == "on"
            elif key == "q":
                q = float(value)
            elif key == "partition":
                auto_partition = value == "auto"
        self.directory.create_namespace(
            user, valley_name, ns_name, visibility, model,
            anycast=AnycastMode(randomized, q), auto_partition=auto_partition)

    def _issue_join(self, a) -> None:
        host = self.hosts[a[0]]
        valley_name, ns_name, community, role = a[1], a[2], a[3], a[4]
        app_id = int(a[5])
        ttl = None
        if len(a) == 7:
            ttl = int(a[6].split("=", 1)[1])
        if not self.directory.authorize_access(host.user, valley_name, ns_name):
            raise AccessDenied(
                f"{host.user!r} may not join {valley_name}/{ns_name}")
        ns = self.directory.namespace(valley_name, ns_name)
        roles_for_join(ns.service_model, role)  # InvalidRole before any wire
        valley = self.directory.valley(valley_name)
        host.request_join(valley.id, ns.id, community, role, app_id, ttl)

    # -- faults ----------------------------------------------------------------

    def _fault(self, a) -> None:
        mode = a[0]
        if mode in ("link-down", "link-up"):
            key = frozenset((a[1], a[2]))
            if mode == "link-down":
                self._up.discard(key)
            else:
                self._up.add(key)
            self.trace.emit(self._now, "scenario", "FAULT", ("kind", mode),
                            ("a", a[1]), ("b", a[2]))
            for label in (a[1], a[2]):
                self.schedule(self._now + 1, self._reregister_thunk(label))
        elif mode in ("host-down", "host-up"):
            host = self.hosts[a[1]]
            edge = self.by_yni[host.edge]
            key = frozenset((a[1], edge.label))
            self.trace.emit(self._now, "scenario", "FAULT", ("kind", mode),
                            ("host", a[1]))
            if mode == "host-down":
                self._up.discard(key)
            else:
                self._up.add(key)
                host.begin_reconnect()
        elif mode == "crash":
            label = a[1]
            self._crashed.add(label)
            neighbors = []
            for key in list(self._up):
                if label in key:
                    self._up.discard(key)
                    other = next(iter(key - {label}))
                    neighbors.append(other)
            self.trace.emit(self._now, "scenario", "FAULT", ("kind", mode),
                            ("node", label))
            for other in sorted(neighbors):
                if other in self.hosts or other in self._crashed:
                    continue
                self.schedule(self._now + 1, self._reregister_thunk(other))

    def _reregister_thunk(self, label: str):
        return lambda: self._reregister(label)

    def _reregister(self, label: str) -> None:
        """Re-declare a node's live neighbor set; the controller's topology
        view follows from matching declarations."""
        if label in self._crashed or label in self.hosts:
            return
        node = self.nodes[label]
        spec = self.topo.node(label)
        neighbors = {}
        for link in self.topo.links:
            if label not in (link.a, link.b):
                continue
            other = link.a if link.b == label else link.b
            if frozenset((label, other)) in self._up \
                    and other not in self._crashed:
                neighbors[self.nodes[other].yni] = link.latency
        reg = NodeRegistration(node.yni, spec.role, spec.domain,
                               tuple(sorted(neighbors.items())),
                               spec.stats)
        self.controller.handle(reg)


def build(topo: TopologySpec, scen: ScenarioSpec,
          seed: int) -> Simulation:
    return Simulation(topo, scen, SimConfig.from_scenario(scen, seed))


def run_world(topo: TopologySpec, scen: ScenarioSpec, seed: int) -> Simulation:
    return build(topo, scen, seed).run()
