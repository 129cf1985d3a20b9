"""World description files: topology and scenario parsing plus cross-checks.

Both formats are line oriented. Blank lines and `#` comments are skipped,
tokens split on any whitespace. Parsers collect one diagnostic per bad line
instead of stopping, so a validate run reports everything at once.

Topology lines:

    domain <name>
    node <name> edge|connector <domain> [<key>=<number> ...]
    link <a> <b> <latency>
    mcastgroup <domain> <node> <node> [<node> ...]
    host <name> <user> [domain=<name>] [max_latency=<ticks>]

Scenario lines:

    config <key> <value>
    at <tick> <command> [args ...]

Commands:

    valley <user> <name>
    namespace <user> <valley> <name> <model> [visibility=open|protected]
              [randomized=on|off] [q=<0..1>] [partition=auto|manual]
    community <user> <valley> <namespace> <name>
    member <admin> <valley> <user>
    grant <admin> <valley> <namespace> <user>
    visibility <admin> <valley> <namespace> open|protected
    join <host> <valley> <namespace> <community> <role> <app> [ttl=<ticks>]
    withdraw <host> <valley> <namespace> <community> <role> <app>
    send <host> <valley> <community> <app> <payload ...>
    lock <host> <valley> <community> <app>
    unlock <host> <valley> <community> <app>
    fault link-down|link-up <a> <b>
    fault host-down|host-up <host>
    fault crash <node>
    partition-now <valley> <namespace> <community>
    report
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import ScenarioError
from .services import ServiceModel

__all__ = [
    "NodeSpec", "LinkSpec", "GroupSpec", "HostSpec", "TopologySpec",
    "CommandSpec", "ScenarioSpec",
    "parse_topology", "parse_scenario", "cross_check", "load_world",
]

MODEL_NAMES = {m.value.lower(): m for m in ServiceModel}
ROLES = ("producer", "consumer", "member")


@dataclass(frozen=True)
class NodeSpec:
    name: str
    role: str              # "edge" | "connector"
    domain: str
    stats: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class LinkSpec:
    a: str
    b: str
    latency: int


@dataclass(frozen=True)
class GroupSpec:
    domain: str
    members: tuple[str, ...]


@dataclass(frozen=True)
class HostSpec:
    name: str
    user: str
    domain: Optional[str] = None
    max_latency: Optional[int] = None


@dataclass
class TopologySpec:
    domains: list[str] = field(default_factory=list)
    nodes: list[NodeSpec] = field(default_factory=list)
    links: list[LinkSpec] = field(default_factory=list)
    groups: list[GroupSpec] = field(default_factory=list)
    hosts: list[HostSpec] = field(default_factory=list)

    def node(self, name: str) -> Optional[NodeSpec]:
        for n in self.nodes:
            if n.name == name:
                return n
        return None

    def host(self, name: str) -> Optional[HostSpec]:
        for h in self.hosts:
            if h.name == name:
                return h
        return None


@dataclass(frozen=True)
class CommandSpec:
    tick: int
    line: int
    verb: str
    args: tuple[str, ...]


@dataclass
class ScenarioSpec:
    config: dict[str, str] = field(default_factory=dict)
    commands: list[CommandSpec] = field(default_factory=list)


def _lines(text: str):
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield i, line.split()


def _kv(token: str) -> Optional[tuple[str, str]]:
    if "=" not in token:
        return None
    k, v = token.split("=", 1)
    return (k, v) if k and v else None


def parse_topology(text: str, path: str = "<topology>"):
    spec = TopologySpec()
    errors: list[ScenarioError] = []
    seen: set[str] = set()

    def err(line, reason):
        errors.append(ScenarioError(path, line, reason))

    for line_no, tok in _lines(text):
        kind, rest = tok[0], tok[1:]
        if kind == "domain":
            if len(rest) != 1:
                err(line_no, "domain takes exactly one name")
            elif rest[0] in spec.domains:
                err(line_no, f"duplicate domain {rest[0]!r}")
            else:
                spec.domains.append(rest[0])
        elif kind == "node":
            if len(rest) < 3:
                err(line_no, "node needs <name> <role> <domain>")
                continue
            name, role, domain = rest[0], rest[1], rest[2]
            if role not in ("edge", "connector"):
                err(line_no, f"node role must be edge or connector, got {role!r}")
                continue
            if name in seen:
                err(line_no, f"duplicate node name {name!r}")
                continue
            stats = []
            bad = False
            for extra in rest[3:]:
                kv = _kv(extra)
                if kv is None:
                    err(line_no, f"expected key=value stat, got {extra!r}")
                    bad = True
                    break
                try:
                    stats.append((kv[0], float(kv[1])))
                except ValueError:
                    err(line_no, f"stat {kv[0]!r} is not a number")
                    bad = True
                    break
            if bad:
                continue
            seen.add(name)
            spec.nodes.append(NodeSpec(name, role, domain, tuple(stats)))
        elif kind == "link":
            if len(rest) != 3:
                err(line_no, "link needs <a> <b> <latency>")
                continue
            try:
                latency = int(rest[2])
            except ValueError:
                err(line_no, f"latency {rest[2]!r} is not an integer")
                continue
            if latency < 1:
                err(line_no, "latency must be at least 1")
                continue
            if rest[0] == rest[1]:
                err(line_no, "link endpoints must differ")
                continue
            spec.links.append(LinkSpec(rest[0], rest[1], latency))
        elif kind == "mcastgroup":
            if len(rest) < 3:
                err(line_no, "mcastgroup needs <domain> and at least two nodes")
                continue
            members = rest[1:]
            if len(set(members)) != len(members):
                err(line_no, "mcastgroup members must be distinct")
                continue
            spec.groups.append(GroupSpec(rest[0], tuple(members)))
        elif kind == "host":
            if len(rest) < 2:
                err(line_no, "host needs <name> <user>")
                continue
            name, user = rest[0], rest[1]
            if name in seen:
                err(line_no, f"duplicate node name {name!r}")
                continue
            domain = None
            max_latency = None
            bad = False
            for extra in rest[2:]:
                kv = _kv(extra)
                if kv is None:
                    err(line_no, f"expected key=value, got {extra!r}")
                    bad = True
                    break
                if kv[0] == "domain":
                    domain = kv[1]
                elif kv[0] == "max_latency":
                    try:
                        max_latency = int(kv[1])
                    except ValueError:
                        err(line_no, "max_latency is not an integer")
                        bad = True
                        break
                else:
                    err(line_no, f"unknown host option {kv[0]!r}")
                    bad = True
                    break
            if bad:
                continue
            seen.add(name)
            spec.hosts.append(HostSpec(name, user, domain, max_latency))
        else:
            err(line_no, f"unknown directive {kind!r}")
    return spec, errors


_COMMAND_ARITY = {
    # verb: (min args, max args or None for open-ended)
    "valley": (2, 2),
    "namespace": (4, 8),
    "community": (4, 4),
    "member": (3, 3),
    "grant": (4, 4),
    "visibility": (4, 4),
    "join": (6, 7),
    "withdraw": (6, 6),
    "send": (5, None),
    "lock": (4, 4),
    "unlock": (4, 4),
    "fault": (2, 3),
    "partition-now": (3, 3),
    "report": (0, 0),
}


def parse_scenario(text: str, path: str = "<scenario>"):
    spec = ScenarioSpec()
    errors: list[ScenarioError] = []

    def err(line, reason):
        errors.append(ScenarioError(path, line, reason))

    for line_no, tok in _lines(text):
        kind, rest = tok[0], tok[1:]
        if kind == "config":
            if len(rest) != 2:
                err(line_no, "config takes <key> <value>")
            else:
                spec.config[rest[0]] = rest[1]
        elif kind == "at":
            if len(rest) < 2:
                err(line_no, "at needs <tick> <command>")
                continue
            try:
                tick = int(rest[0])
            except ValueError:
                err(line_no, f"tick {rest[0]!r} is not an integer")
                continue
            if tick < 0:
                err(line_no, "tick must be non-negative")
                continue
            verb, args = rest[1], tuple(rest[2:])
            arity = _COMMAND_ARITY.get(verb)
            if arity is None:
                err(line_no, f"unknown command {verb!r}")
                continue
            lo, hi = arity
            if len(args) < lo or (hi is not None and len(args) > hi):
                err(line_no, f"wrong argument count for {verb!r}")
                continue
            reason = _check_command(verb, args)
            if reason:
                err(line_no, reason)
                continue
            spec.commands.append(CommandSpec(tick, line_no, verb, args))
        else:
            err(line_no, f"unknown directive {kind!r}")
    return spec, errors


def _check_command(verb: str, args: tuple[str, ...]) -> Optional[str]:
    """Shape-level validation; cross-references need the topology."""
    if verb == "namespace":
        if args[3].lower() not in MODEL_NAMES:
            return (f"unknown service model {args[3]!r}; pick one of "
                    + ", ".join(sorted(MODEL_NAMES)))
        for extra in args[4:]:
            kv = _kv(extra)
            if kv is None:
                return f"expected key=value option, got {extra!r}"
            key, value = kv
            if key == "visibility" and value not in ("open", "protected"):
                return "visibility must be open or protected"
            if key == "randomized" and value not in ("on", "off"):
                return "randomized must be on or off"
            if key == "q":
                try:
                    q = float(value)
                except ValueError:
                    return "q is not a number"
                if not 0.0 <= q <= 1.0:
                    return "q must be between 0 and 1"
            if key == "partition" and value not in ("auto", "manual"):
                return "partition must be auto or manual"
            if key not in ("visibility", "randomized", "q", "partition"):
                return f"unknown namespace option {key!r}"
    elif verb in ("join", "withdraw"):
        if args[4] not in ROLES:
            return f"role must be one of {', '.join(ROLES)}"
        if not args[5].isdigit():
            return "app id must be a non-negative integer"
        if verb == "join" and len(args) == 7:
            kv = _kv(args[6])
            if kv is None or kv[0] != "ttl" or not kv[1].isdigit():
                return "join option must be ttl=<ticks>"
    elif verb in ("send", "lock", "unlock"):
        if not args[3].isdigit():
            return "app id must be a non-negative integer"
    elif verb == "visibility":
        if args[3] not in ("open", "protected"):
            return "visibility must be open or protected"
    elif verb == "fault":
        mode = args[0]
        if mode in ("link-down", "link-up"):
            if len(args) != 3:
                return f"fault {mode} needs two node names"
        elif mode in ("host-down", "host-up", "crash"):
            if len(args) != 2:
                return f"fault {mode} needs one name"
        else:
            return f"unknown fault {mode!r}"
    return None


def cross_check(topo: TopologySpec, scen: ScenarioSpec,
                topo_path: str = "<topology>",
                scen_path: str = "<scenario>") -> list[ScenarioError]:
    """Reference resolution across the pair of files."""
    errors: list[ScenarioError] = []
    domains = set(topo.domains)
    infra = {n.name: n for n in topo.nodes}
    hosts = {h.name for h in topo.hosts}
    links = {frozenset((l.a, l.b)) for l in topo.links}

    for n in topo.nodes:
        if n.domain not in domains:
            errors.append(ScenarioError(
                topo_path, 0, f"node {n.name!r} in unknown domain {n.domain!r}"))
    for l in topo.links:
        for end in (l.a, l.b):
            if end not in infra:
                errors.append(ScenarioError(
                    topo_path, 0,
                    f"link endpoint {end!r} is not an infrastructure node"))
    for g in topo.groups:
        if g.domain not in domains:
            errors.append(ScenarioError(
                topo_path, 0, f"mcastgroup in unknown domain {g.domain!r}"))
        for m in g.members:
            node = infra.get(m)
            if node is None:
                errors.append(ScenarioError(
                    topo_path, 0, f"mcastgroup member {m!r} is not a node"))
            elif node.domain != g.domain:
                errors.append(ScenarioError(
                    topo_path, 0,
                    f"mcastgroup member {m!r} is outside {g.domain!r}"))
    for h in topo.hosts:
        if h.domain is not None and h.domain not in domains:
            errors.append(ScenarioError(
                topo_path, 0, f"host {h.name!r} prefers unknown domain "
                              f"{h.domain!r}"))
    if not any(n.role == "edge" for n in topo.nodes) and topo.hosts:
        errors.append(ScenarioError(topo_path, 0, "hosts but no edge nodes"))

    for cmd in scen.commands:
        def cerr(reason):
            errors.append(ScenarioError(scen_path, cmd.line, reason))
        if cmd.verb in ("join", "withdraw", "send", "lock", "unlock"):
            if cmd.args[0] not in hosts:
                cerr(f"unknown host {cmd.args[0]!r}")
        elif cmd.verb == "fault":
            mode = cmd.args[0]
            if mode in ("link-down", "link-up"):
                a, b = cmd.args[1], cmd.args[2]
                for end in (a, b):
                    if end not in infra:
                        cerr(f"{end!r} is not an infrastructure node")
                if a in infra and b in infra \
                        and frozenset((a, b)) not in links:
                    cerr(f"no link between {a!r} and {b!r}")
            elif mode in ("host-down", "host-up"):
                if cmd.args[1] not in hosts:
                    cerr(f"unknown host {cmd.args[1]!r}")
            elif mode == "crash":
                if cmd.args[1] not in infra:
                    cerr(f"unknown node {cmd.args[1]!r}")
    return errors


def load_world(topo_text: str, scen_text: str, topo_path: str = "<topology>",
               scen_path: str = "<scenario>"):
    """Parse both files and resolve references; errors come back together."""
    topo, errs_t = parse_topology(topo_text, topo_path)
    scen, errs_s = parse_scenario(scen_text, scen_path)
    errors = errs_t + errs_s
    if not errors:
        errors += cross_check(topo, scen, topo_path, scen_path)
    return topo, scen, errors
