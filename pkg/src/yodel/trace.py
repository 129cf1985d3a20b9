"""Run observability: the structured text trace and the metrics report.

Trace lines are the replay-stable record of a run: one event per line,
`t=<tick> n=<node> ev=<NAME>` followed by event fields in fixed authorship
order. Byte-identical traces across runs with the same inputs and seed are a
package-level guarantee, so nothing non-deterministic may reach emit().
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

__all__ = ["TraceRecord", "Trace", "Metrics", "CONTROLLER_NODE"]

CONTROLLER_NODE = "controller"


@dataclass(frozen=True)
class TraceRecord:
    tick: int
    node: str
    event: str
    fields: tuple[tuple[str, str], ...] = ()

    def line(self) -> str:
        parts = [f"t={self.tick}", f"n={self.node}", f"ev={self.event}"]
        parts.extend(f"{k}={v}" for k, v in self.fields)
        return " ".join(parts)


class Trace:
    def __init__(self):
        self.records: list[TraceRecord] = []

    def emit(self, tick: int, node: str, event: str, *fields: tuple[str, object]) -> None:
        self.records.append(TraceRecord(
            tick, node, event, tuple((k, str(v)) for k, v in fields)))

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]

    def text(self) -> str:
        return "\n".join(self.lines()) + ("\n" if self.records else "")

    def count(self, event: str, **match: str) -> int:
        return sum(1 for r in self.select(event, **match))

    def select(self, event: str, **match: str) -> list[TraceRecord]:
        """Records of one event whose fields equal `match`; the key `n`
        matches the emitting node, mirroring the printed line format."""
        out = []
        for r in self.records:
            if r.event != event:
                continue
            fields = dict(r.fields)
            fields["n"] = r.node
            if all(fields.get(k) == v for k, v in match.items()):
                out.append(r)
        return out


def _link_key(a: str, b: str) -> str:
    return f"{a}>{b}"


class Metrics:
    """Counters accumulated during a run; serialized with sorted keys so the
    JSON report is as replay-stable as the trace."""

    def __init__(self):
        self.deliveries: dict[str, int] = {}
        self.drops: dict[str, dict[str, int]] = {}
        self.controller_visits: dict[str, int] = {"joins": 0, "provisions": 0}
        self.join_visits: dict[str, int] = {}
        self.latency_hist: dict[int, int] = {}
        self.transmissions_total = 0
        self.transmissions_by_domain: dict[str, int] = {}
        self.transmissions_interdomain = 0
        self.unicast_by_link: dict[str, int] = {}
        self.link_sent: dict[str, int] = {}
        self.link_received: dict[str, int] = {}
        self.link_lost: dict[str, int] = {}
        self.buffer_peaks: dict[str, int] = {}
        self.buffered_total = 0
        self.buffer_dropped = 0
        self.proto_errors = 0
        self.conservation: dict = {}
        self._send_ticks: dict[int, int] = {}

    # -- data path -----------------------------------------------------------

    def delivered(self, node: str) -> None:
        self.deliveries[node] = self.deliveries.get(node, 0) + 1

    def dropped(self, node: str, reason: str) -> None:
        per = self.drops.setdefault(node, {})
        per[reason] = per.get(reason, 0) + 1

    def note_send_tick(self, serial: int, tick: int) -> None:
        self._send_ticks[serial] = tick

    def note_delivery_latency(self, serial: int, tick: int) -> None:
        start = self._send_ticks.get(serial)
        if start is None:
            return
        lat = tick - start
        self.latency_hist[lat] = self.latency_hist.get(lat, 0) + 1

    # -- transmissions -------------------------------------------------------

    def transmission(self, domain: str, intra_domain: bool,
                     unicast_link: tuple[str, str] | None) -> None:
        self.transmissions_total += 1
        if intra_domain:
            self.transmissions_by_domain[domain] = \
                self.transmissions_by_domain.get(domain, 0) + 1
        else:
            self.transmissions_interdomain += 1
        if unicast_link is not None:
            key = _link_key(*unicast_link)
            self.unicast_by_link[key] = self.unicast_by_link.get(key, 0) + 1

    def wire_sent(self, src: str, dst: str) -> None:
        key = _link_key(src, dst)
        self.link_sent[key] = self.link_sent.get(key, 0) + 1

    def wire_received(self, src: str, dst: str) -> None:
        key = _link_key(src, dst)
        self.link_received[key] = self.link_received.get(key, 0) + 1

    def wire_lost(self, src: str, dst: str) -> None:
        key = _link_key(src, dst)
        self.link_lost[key] = self.link_lost.get(key, 0) + 1

    # -- twins ---------------------------------------------------------------

    def buffered(self, host: str, depth: int) -> None:
        self.buffered_total += 1
        if depth > self.buffer_peaks.get(host, 0):
            self.buffer_peaks[host] = depth

    # -- controller ----------------------------------------------------------

    def join_visit(self, edge: str, valley_id: int, community: str, role: str) -> None:
        self.controller_visits["joins"] += 1
        key = f"{edge}|{valley_id}|{community}|{role}"
        self.join_visits[key] = self.join_visits.get(key, 0) + 1

    def provision_visit(self) -> None:
        self.controller_visits["provisions"] += 1

    # -- epilogue ------------------------------------------------------------

    def finalize_conservation(self, in_flight: Iterable[tuple[str, str]]) -> None:
        """sends == receives + in-flight + lost, per directed link."""
        pending: dict[str, int] = {}
        for src, dst in in_flight:
            key = _link_key(src, dst)
            pending[key] = pending.get(key, 0) + 1
        per_link = {}
        ok = True
        for key in sorted(set(self.link_sent) | set(self.link_received)
                          | set(self.link_lost) | set(pending)):
            sent = self.link_sent.get(key, 0)
            entry = {
                "sent": sent,
                "received": self.link_received.get(key, 0),
                "lost": self.link_lost.get(key, 0),
                "in_flight": pending.get(key, 0),
            }
            entry["ok"] = sent == entry["received"] + entry["lost"] + entry["in_flight"]
            ok = ok and entry["ok"]
            per_link[key] = entry
        self.conservation = {"ok": ok, "links": per_link}

    def to_dict(self) -> dict:
        return {
            "deliveries": dict(sorted(self.deliveries.items())),
            "drops": {k: dict(sorted(v.items())) for k, v in sorted(self.drops.items())},
            "controller_visits": dict(sorted(self.controller_visits.items())),
            "join_visits": dict(sorted(self.join_visits.items())),
            "latency_hist": {str(k): v for k, v in sorted(self.latency_hist.items())},
            "transmissions": {
                "total": self.transmissions_total,
                "by_domain": dict(sorted(self.transmissions_by_domain.items())),
                "interdomain": self.transmissions_interdomain,
                "unicast_by_link": dict(sorted(self.unicast_by_link.items())),
            },
            "buffer_peaks": dict(sorted(self.buffer_peaks.items())),
            "buffered_total": self.buffered_total,
            "buffer_dropped": self.buffer_dropped,
            "proto_errors": self.proto_errors,
            "conservation": self.conservation,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
