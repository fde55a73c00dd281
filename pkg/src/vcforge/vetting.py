"""Node vetting: health events, bounded reboot recovery, removal and repair.

A node starts Healthy. A failing health event makes it Suspect and queues
a recovery; recovery reboots the node through the inventory facade and
re-runs its checks once it is Ready again. After ``max_reboot_attempts``
failed attempts the node leaves its vCluster and a repair ticket opens.
An operator marks the ticket repaired, and a reintegration pipeline
boots, checks and rejoins the node.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .concurrency import synchronized
from .errors import (
    DuplicateTicket,
    HookFailed,
    InvalidState,
    NodeNotReady,
    NodeVetted,
    NotAMember,
    TicketNotRepaired,
    UngatedTarget,
    UnknownTicket,
    UsageError,
)
from .inventory import Power, PowerAction
from .tenancy import SYSTEM, Principal, Resource

if TYPE_CHECKING:
    from .controlplane import ControlPlane

log = logging.getLogger(__name__)

MAX_REBOOT_ATTEMPTS = 2
REBOOT_BUDGET = 10  # ticks a reboot may take before it counts as failed
LOG_LINES = 20


class VState(str, enum.Enum):
    Healthy = "Healthy"
    Suspect = "Suspect"
    Rebooting = "Rebooting"
    Removed = "Removed"
    Reintegrating = "Reintegrating"


ALLOWED_TRANSITIONS = frozenset(
    {
        (VState.Healthy, VState.Suspect),
        (VState.Suspect, VState.Rebooting),
        (VState.Rebooting, VState.Healthy),
        (VState.Rebooting, VState.Suspect),
        (VState.Suspect, VState.Removed),
        (VState.Rebooting, VState.Removed),
        (VState.Removed, VState.Reintegrating),
        (VState.Reintegrating, VState.Healthy),
        (VState.Reintegrating, VState.Removed),
    }
)


class Trigger(str, enum.Enum):
    JobStart = "JobStart"
    JobEnd = "JobEnd"
    Manual = "Manual"


class TicketStatus(str, enum.Enum):
    Open = "Open"
    RepairedAwaitingReintegration = "RepairedAwaitingReintegration"
    Closed = "Closed"


@dataclass
class HealthEvent:
    node_id: str
    trigger: str
    checks: list[tuple[str, bool]]
    tick: int = 0

    @property
    def passed(self) -> bool:
        return all(ok for _, ok in self.checks)


@dataclass
class RepairTicket:
    ticket_id: str
    node_id: str
    opened: int
    log_lines: list[str]
    status: TicketStatus = TicketStatus.Open
    vcluster: str | None = None
    labels: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ticket_id": self.ticket_id,
            "node_id": self.node_id,
            "opened": self.opened,
            "log_lines": list(self.log_lines),
            "status": self.status.value,
            "vcluster": self.vcluster,
            "labels": list(self.labels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RepairTicket:
        return cls(
            d["ticket_id"], d["node_id"], d["opened"], list(d["log_lines"]),
            TicketStatus(d["status"]), d.get("vcluster"), list(d.get("labels", [])),
        )


@dataclass
class VettingState:
    node_id: str
    state: VState = VState.Healthy
    reboot_attempts: int = 0
    ticket: str | None = None

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "state": self.state.value,
            "reboot_attempts": self.reboot_attempts,
            "ticket": self.ticket,
        }


class Vetting:
    def __init__(self, cp: ControlPlane, max_reboot_attempts: int = MAX_REBOOT_ATTEMPTS):
        self.cp = cp
        self.max_reboot_attempts = max_reboot_attempts
        self.states: dict[str, VettingState] = {}
        self.tickets: dict[str, RepairTicket] = {}
        self.next_ticket = 1
        self.recovery_queue: list[str] = []
        self.rebooting: dict[str, dict] = {}  # node -> {"since", "run"}
        self.transitions: list[list] = []
        self.logs: dict[str, list[str]] = {}
        self.events_seen = 0

    @property
    def lock(self):
        return self.cp.lock

    # -- lookups -------------------------------------------------------
    def state_of(self, node_id: str) -> VettingState:
        vs = self.states.get(node_id)
        if vs is None:
            self.cp.inventory.node(node_id)  # raises UnknownNode
            vs = VettingState(node_id)
        return vs

    def _mutable(self, node_id: str) -> VettingState:
        vs = self.states.get(node_id)
        if vs is None:
            vs = self.states[node_id] = self.state_of(node_id)
        return vs

    def open_ticket_for(self, node_id: str) -> RepairTicket | None:
        for ticket in self.tickets.values():
            if ticket.node_id == node_id and ticket.status is not TicketStatus.Closed:
                return ticket
        return None

    def ticket(self, ticket_id: str) -> RepairTicket:
        try:
            return self.tickets[ticket_id]
        except KeyError:
            raise UnknownTicket(f"unknown ticket {ticket_id}") from None

    def _log(self, node_id: str, line: str) -> None:
        lines = self.logs.setdefault(node_id, [])
        lines.append(f"t={self.cp.clock.tick} {line}")
        del lines[:-LOG_LINES]

    def _transition(self, vs: VettingState, new: VState, why: str = "") -> None:
        old = vs.state
        if (old, new) not in ALLOWED_TRANSITIONS:
            raise InvalidState(f"node {vs.node_id}: transition {old.value} -> {new.value} is not allowed")
        vs.state = new
        self.transitions.append([self.cp.clock.tick, vs.node_id, old.value, new.value])
        self._log(vs.node_id, f"{old.value} -> {new.value} {why}".rstrip())
        self.cp.emit("vet.transition", node=vs.node_id, src=old.value, dst=new.value, why=why)

    # -- health events -------------------------------------------------
    def run_checks(self, node_id: str, trigger: str) -> bool:
        """Evaluate the node's registered checks and feed the result back."""
        checks = self.cp.orchestrator.checks_of(node_id)
        outcomes = self.cp.fleet.check_outcomes(node_id, checks, trigger)
        event = HealthEvent(node_id, trigger, outcomes, self.cp.clock.tick)
        self.process_health_event(event)
        return event.passed

    @synchronized
    def health_event(self, node_id: str, trigger: str, checks: list[tuple[str, bool]]) -> VettingState:
        return self.process_health_event(HealthEvent(node_id, trigger, list(checks), self.cp.clock.tick))

    def process_health_event(self, event: HealthEvent) -> VettingState:
        vs = self.state_of(event.node_id)
        if not event.checks:
            raise UsageError("a health event needs at least one check")
        self.events_seen += 1
        failed = [name for name, ok in event.checks if not ok]
        self._log(event.node_id, f"{event.trigger} " + " ".join(f"{n}={'pass' if ok else 'FAIL'}" for n, ok in event.checks))
        if failed:
            self.cp.emit("vet.health", node=event.node_id, trigger=event.trigger, failed=failed)
        if vs.state is VState.Healthy:
            if failed:
                vs = self._mutable(event.node_id)
                self._transition(vs, VState.Suspect, f"{event.trigger} failed {','.join(failed)}")
                self.cp.fleet.on_node_unhealthy(event.node_id)
                self.recovery_queue.append(event.node_id)
            elif vs.reboot_attempts:
                self._mutable(event.node_id).reboot_attempts = 0
        # Suspect/Rebooting nodes are already in recovery; Removed and
        # Reintegrating nodes only record the event.
        return vs

    # -- recovery ------------------------------------------------------
    def attempt_recovery(self, node_id: str) -> VettingState:
        vs = self.state_of(node_id)
        if vs.state is not VState.Suspect:
            raise InvalidState(f"node {node_id} is {vs.state.value}, not Suspect")
        vs = self._mutable(node_id)
        if node_id in self.recovery_queue:
            self.recovery_queue.remove(node_id)
        vc = self.cp.orchestrator.vc_of(node_id)
        run = self.cp.pipelines.new_run("Recovery", vc, [])
        run.begin("reboot")
        report = self.cp.inventory.power_nodes([node_id], PowerAction.Reboot)
        if not report.ok:
            # a reboot that cannot even be issued means recovery is not possible
            run.fail(f"reboot not possible: {report.outcomes[node_id]}")
            run.finish("Failed")
            vs.reboot_attempts = self.max_reboot_attempts
            self.remove_node(node_id, why=f"reboot {report.outcomes[node_id]}")
            return vs
        self._transition(vs, VState.Rebooting, f"attempt {vs.reboot_attempts + 1}")
        self.rebooting[node_id] = {"since": self.cp.clock.tick, "run": run.run_id}
        return vs

    def _finish_reboot(self, node_id: str, timed_out: bool) -> None:
        info = self.rebooting.pop(node_id)
        run = self.cp.pipelines.run(info["run"])
        vs = self._mutable(node_id)
        if timed_out or self.cp.fleet.reboot_fails(node_id):
            run.fail("reboot failed" if not timed_out else "reboot timed out")
            ok = False
        else:
            run.ok()
            run.begin("checks")
            ok = self.run_checks_quiet(node_id, "Recovery")
            if ok:
                run.ok()
            else:
                run.fail("health checks failed after reboot")
        if ok:
            run.finish("Succeeded")
            vs.reboot_attempts = 0
            self._transition(vs, VState.Healthy, "recovered")
            self.cp.fleet.sync_node(node_id)
            return
        run.finish("Failed")
        vs.reboot_attempts += 1
        if vs.reboot_attempts >= self.max_reboot_attempts:
            self.remove_node(node_id, why="reboot attempts exhausted")
        else:
            self._transition(vs, VState.Suspect, "recovery attempt failed")
            self.recovery_queue.append(node_id)

    def run_checks_quiet(self, node_id: str, trigger: str) -> bool:
        """Checks evaluated outside the Healthy->Suspect path (recovery, reintegration)."""
        checks = self.cp.orchestrator.checks_of(node_id)
        outcomes = self.cp.fleet.check_outcomes(node_id, checks, trigger)
        self._log(node_id, f"{trigger} " + " ".join(f"{n}={'pass' if ok else 'FAIL'}" for n, ok in outcomes))
        return all(ok for _, ok in outcomes)

    def step(self, now: int) -> None:
        for node_id in sorted(self.rebooting):
            node = self.cp.inventory.nodes[node_id]
            pending = any(node_id in b.pending for b in self.cp.inventory.backends.values())
            if node.power is Power.Ready and not pending:
                self._finish_reboot(node_id, timed_out=False)
            elif now - self.rebooting[node_id]["since"] > REBOOT_BUDGET:
                self._finish_reboot(node_id, timed_out=True)
        for node_id in list(self.recovery_queue):
            if self.state_of(node_id).state is not VState.Suspect:
                self.recovery_queue.remove(node_id)
                continue
            vc = self.cp.orchestrator.vc_of(node_id)
            if vc is not None and self.cp.pipelines.locked(vc):
                continue  # recovery defers to the active pipeline run
            self.attempt_recovery(node_id)

    # -- removal and repair ----------------------------------------------
    @synchronized
    def remove_node(self, node_id: str, why: str = "") -> RepairTicket:
        if self.open_ticket_for(node_id) is not None:
            raise DuplicateTicket(f"node {node_id} already has an open ticket")
        vs = self.state_of(node_id)
        if vs.state not in (VState.Suspect, VState.Rebooting):
            raise InvalidState(f"node {node_id} is {vs.state.value}; only Suspect or Rebooting nodes can be removed")
        vs = self._mutable(node_id)
        self.rebooting.pop(node_id, None)
        if node_id in self.recovery_queue:
            self.recovery_queue.remove(node_id)
        node = self.cp.inventory.nodes[node_id]
        vc = self.cp.orchestrator.vc_of(node_id)
        labels = sorted(node.labels)
        self.cp.fleet.on_node_left(node_id)
        if vc is not None:
            self.cp.orchestrator.node_leave(vc, node_id, reason="vetting")
        elif node.vc_label is not None:
            self.cp.inventory.unassign(SYSTEM, node.vc_label, [node_id])
        ticket = RepairTicket(
            f"T-{self.next_ticket:06d}",
            node_id,
            self.cp.clock.tick,
            [],
            vcluster=vc,
            labels=labels,
        )
        self.next_ticket += 1
        self._transition(vs, VState.Removed, why)
        ticket.log_lines = list(self.logs.get(node_id, []))
        self.tickets[ticket.ticket_id] = ticket
        vs.ticket = ticket.ticket_id
        self.cp.emit("vet.ticket", ticket=ticket.ticket_id, node=node_id, status=ticket.status.value)
        return ticket

    @synchronized
    def repair_done(self, principal: Principal, ticket_id: str) -> RepairTicket:
        self.cp.tenancy.require(principal, "vet.repair_done", Resource("ticket", ticket_id))
        ticket = self.ticket(ticket_id)
        if ticket.status is not TicketStatus.Open:
            raise InvalidState(f"ticket {ticket_id} is {ticket.status.value}")
        ticket.status = TicketStatus.RepairedAwaitingReintegration
        self.cp.emit("vet.ticket", ticket=ticket_id, node=ticket.node_id, status=ticket.status.value)
        return ticket

    @synchronized
    def reintegrate_node(self, principal: Principal, ticket_id: str, wait: bool = True):
        ticket = self.ticket(ticket_id)
        vc = ticket.vcluster if ticket.vcluster in self.cp.orchestrator.states else None
        tenant = self.cp.orchestrator.tenant_of(vc) if vc else None
        self.cp.tenancy.require(principal, "vet.reintegrate", Resource("vcluster", vc or ticket.node_id, tenant))
        if ticket.status is not TicketStatus.RepairedAwaitingReintegration:
            raise TicketNotRepaired(f"ticket {ticket_id} is {ticket.status.value}")
        run = self.cp.pipelines.new_run("Reintegration", vc, [], lock=vc is not None)
        self.cp.pipelines.drive(run, self._reintegrate(run, ticket, vc), wait=wait)
        return self.state_of(ticket.node_id)

    def _reintegrate(self, run, ticket: RepairTicket, vc: str | None):
        node_id = ticket.node_id
        vs = self._mutable(node_id)
        self._transition(vs, VState.Reintegrating, f"ticket {ticket.ticket_id}")
        label = None
        if vc is not None:
            manifest = self.cp.orchestrator.manifest_of(vc)
            label = manifest.hsm_groups[0]
            run.begin("relabel")
            node = self.cp.inventory.nodes[node_id]
            if node.vc_label is None:
                self.cp.inventory.assign_group(SYSTEM, label, [node_id])
            run.ok()
        run.begin("boot")
        node = self.cp.inventory.nodes[node_id]
        action = PowerAction.Boot if node.power is Power.Off else PowerAction.Reboot
        report = self.cp.inventory.power_nodes([node_id], action)
        ok = report.ok
        waited = 0
        while ok:
            yield
            waited += 1
            pending = any(node_id in b.pending for b in self.cp.inventory.backends.values())
            if node.power is Power.Ready and not pending:
                break
            if waited > REBOOT_BUDGET:
                ok = False
        if ok:
            run.ok()
            run.begin("checks")
            ok = self.run_checks_quiet(node_id, "Reintegration")
        if ok:
            run.ok()
            if vc is not None:
                run.begin("join")
                try:
                    self.cp.orchestrator.node_join(vc, node_id, vetting_states=("Reintegrating",))
                    run.ok()
                except (HookFailed, NodeNotReady, NodeVetted, NotAMember, UngatedTarget) as exc:
                    run.fail(str(exc))
                    ok = False
                    if node_id in self.cp.orchestrator.states[vc].targets:
                        self.cp.orchestrator.node_leave(vc, node_id, reason="reintegration failed")
            if ok:
                self._transition(vs, VState.Healthy, "reintegrated")
                vs.reboot_attempts = 0
                self.cp.fleet.sync_node(node_id)
        else:
            run.fail("node failed reintegration checks")
        if ok:
            ticket.status = TicketStatus.Closed
            vs.ticket = None
            self.cp.emit("vet.ticket", ticket=ticket.ticket_id, node=node_id, status=ticket.status.value)
            run.finish("Succeeded")
            return
        self._transition(vs, VState.Removed, "reintegration failed")
        node = self.cp.inventory.nodes[node_id]
        if node.vc_label is not None and self.cp.orchestrator.vc_of(node_id) is None:
            self.cp.inventory.unassign(SYSTEM, node.vc_label, [node_id])
        ticket.status = TicketStatus.Open
        ticket.log_lines = list(self.logs.get(node_id, []))
        self.cp.emit("vet.ticket", ticket=ticket.ticket_id, node=node_id, status="Reopened")
        run.finish("Failed")

    # -- audit ---------------------------------------------------------
    def violations(self) -> list[str]:
        out = []
        for tick, node, src, dst in self.transitions:
            if (VState(src), VState(dst)) not in ALLOWED_TRANSITIONS:
                out.append(f"tick {tick}: illegal transition {src}->{dst} on {node}")
        unresolved = {t.node_id for t in self.tickets.values() if t.status is not TicketStatus.Closed}
        parked = {n for n, vs in self.states.items() if vs.state in (VState.Removed, VState.Reintegrating)}
        if unresolved != parked:
            out.append(f"ticket/removal mismatch: tickets {sorted(unresolved ^ parked)}")
        counts: dict[str, int] = {}
        for t in self.tickets.values():
            if t.status is not TicketStatus.Closed:
                counts[t.node_id] = counts.get(t.node_id, 0) + 1
        out.extend(f"node {n} has {c} unresolved tickets" for n, c in sorted(counts.items()) if c > 1)
        for n, vs in sorted(self.states.items()):
            if vs.reboot_attempts > self.max_reboot_attempts:
                out.append(f"node {n} exceeded reboot attempts")
        return out

    def summary(self) -> dict:
        counts = {s.value: 0 for s in VState}
        for vs in self.states.values():
            counts[vs.state.value] += 1
        counts[VState.Healthy.value] = len(self.cp.inventory.nodes) - sum(
            c for s, c in counts.items() if s != VState.Healthy.value
        )
        return counts

    # -- persistence ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "max_reboot_attempts": self.max_reboot_attempts,
            "states": [vs.to_dict() for _, vs in sorted(self.states.items())],
            "tickets": [t.to_dict() for _, t in sorted(self.tickets.items())],
            "next_ticket": self.next_ticket,
            "recovery_queue": list(self.recovery_queue),
            "rebooting": dict(sorted(self.rebooting.items())),
            "transitions": list(self.transitions),
            "logs": dict(sorted(self.logs.items())),
            "events_seen": self.events_seen,
        }

    def load(self, d: dict) -> None:
        self.max_reboot_attempts = d["max_reboot_attempts"]
        self.states = {
            s["node_id"]: VettingState(s["node_id"], VState(s["state"]), s["reboot_attempts"], s["ticket"])
            for s in d["states"]
        }
        self.tickets = {t["ticket_id"]: RepairTicket.from_dict(t) for t in d["tickets"]}
        self.next_ticket = d["next_ticket"]
        self.recovery_queue = list(d["recovery_queue"])
        self.rebooting = dict(d["rebooting"])
        self.transitions = [list(t) for t in d["transitions"]]
        self.logs = {n: list(v) for n, v in d["logs"].items()}
        self.events_seen = d.get("events_seen", 0)
