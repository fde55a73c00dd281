"""Deterministic discrete-tick fleet simulation.

The clock only moves through :meth:`ControlPlane.step`. Every stochastic
draw comes from :class:`~vcforge.canonical.SeededStreams`, keyed by node
(or recipe), so a (seed, scenario) pair fully determines the event log.
"""

from __future__ import annotations

import contextlib
import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

from .concurrency import synchronized
from .errors import ImpossibleRequest, UnknownTarget, UnknownVCluster, UsageError
from .inventory import Power
from .manifest import Kind, Verb
from .tenancy import Principal, Resource

if TYPE_CHECKING:
    from .controlplane import ControlPlane

log = logging.getLogger(__name__)


@dataclass
class SimClock:
    tick: int = 0
    seed: int = 0


class JobState(str, enum.Enum):
    Queued = "Queued"
    Running = "Running"
    Done = "Done"
    FailedNode = "FailedNode"
    Requeued = "Requeued"


@dataclass
class Job:
    job_id: str
    vcluster: str
    nodes: int
    duration: int
    state: JobState = JobState.Queued
    submitted: int = 0
    started: int | None = None
    ends: int | None = None
    assigned: list[str] = field(default_factory=list)
    requeues: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["state"] = self.state.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Job:
        d = dict(d)
        d["state"] = JobState(d["state"])
        return cls(**d)


class FaultKind(str, enum.Enum):
    NodeCrash = "NodeCrash"
    CheckFail = "CheckFail"
    HookFail = "HookFail"
    RebootFail = "RebootFail"


@dataclass
class FaultSpec:
    """An armed fault.

    ``target`` is a node id (NodeCrash, RebootFail), a check name
    (CheckFail) or a recipe name (HookFail); ``"*"`` matches everything.
    With ``at_tick`` set, a NodeCrash fires once at that tick and other
    kinds are armed from that tick on. Probabilistic faults (0 < p < 1)
    model transient failures: CheckFail draws apply only to job-triggered
    health events.
    """

    kind: FaultKind
    target: str = "*"
    probability: float = 1.0
    at_tick: int | None = None
    hook: str | None = None
    node: str | None = None
    count: int | None = None
    fired: int = 0

    def __post_init__(self):
        self.kind = FaultKind(self.kind)
        if not 0.0 <= float(self.probability) <= 1.0:
            raise UsageError(f"fault probability must be in [0, 1], got {self.probability}")
        self.probability = float(self.probability)

    def armed(self, now: int) -> bool:
        if self.count is not None and self.fired >= self.count:
            return False
        if self.kind is FaultKind.NodeCrash:
            return self.at_tick is None or self.at_tick == now
        return self.at_tick is None or now >= self.at_tick

    @property
    def certain(self) -> bool:
        return self.probability >= 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


HEALTH_TRIGGERS = ("JobStart", "JobEnd")


class Fleet:
    """Jobs, per-vCluster scheduler registrations, drain marks and faults."""

    def __init__(self, cp: ControlPlane):
        self.cp = cp
        self.jobs: dict[str, Job] = {}
        self.queue: list[str] = []
        self.registered: dict[str, set[str]] = {}
        self.busy: dict[str, str] = {}
        self.draining: set[str] = set()
        self.updating: set[str] = set()
        self.faults: list[FaultSpec] = []
        self.violations: list[str] = []
        self.next_job = 1
        self._suspended = 0

    @property
    def lock(self):
        return self.cp.lock

    # -- faults --------------------------------------------------------
    @synchronized
    def inject_fault(self, principal: Principal, spec: FaultSpec | dict) -> FaultSpec:
        self.cp.tenancy.require(principal, "sim.fault", Resource("fault", "sim"))
        if isinstance(spec, dict):
            spec = FaultSpec(**spec)
        self._validate_target(spec)
        self.faults.append(spec)
        self.cp.emit("fault.armed", **spec.to_dict())
        return spec

    def _validate_target(self, spec: FaultSpec) -> None:
        if spec.target == "*":
            return
        if spec.kind in (FaultKind.NodeCrash, FaultKind.RebootFail):
            if spec.target not in self.cp.inventory.nodes:
                raise UnknownTarget(f"unknown node {spec.target}")
        elif spec.kind is FaultKind.HookFail:
            if spec.target not in self.cp.registry.names():
                raise UnknownTarget(f"unknown recipe {spec.target}")
        elif spec.kind is FaultKind.CheckFail:
            if spec.target not in self.known_checks():
                raise UnknownTarget(f"unknown health check {spec.target}")

    def known_checks(self) -> set[str]:
        checks = {"node-alive"}
        for recipe in self.cp.registry.recipes():
            if recipe.kind is Kind.Health:
                checks.update(e.subject for e in recipe.hooks["install"] if e.verb is Verb.RegisterHealthCheck)
        return checks

    @synchronized
    def clear_faults(self) -> None:
        self.faults.clear()

    @contextlib.contextmanager
    def faults_suspended(self):
        self._suspended += 1
        try:
            yield
        finally:
            self._suspended -= 1

    def _fire(self, fault: FaultSpec, stream: str) -> bool:
        if fault.certain or self.cp.rng.bernoulli(stream, fault.probability):
            fault.fired += 1
            return True
        return False

    def hook_fails(self, target: str, recipe: str, hook: str) -> bool:
        if self._suspended:
            return False
        now = self.cp.clock.tick
        for fault in self.faults:
            if (
                fault.kind is FaultKind.HookFail
                and fault.target in ("*", recipe)
                and fault.hook in (None, hook)
                and fault.node in (None, target)
                and fault.armed(now)
                and self._fire(fault, f"hook:{recipe}:{target}")
            ):
                return True
        return False

    def check_outcomes(self, node_id: str, checks: list[str], trigger: str) -> list[tuple[str, bool]]:
        now = self.cp.clock.tick
        out = []
        for check in checks:
            failed = False
            for fault in self.faults:
                if (
                    fault.kind is FaultKind.CheckFail
                    and fault.target in ("*", check)
                    and fault.node in (None, node_id)
                    and fault.armed(now)
                    and (fault.certain or trigger in HEALTH_TRIGGERS)
                    and self._fire(fault, f"check:{node_id}")
                ):
                    failed = True
                    break
            out.append((check, not failed))
        return out

    def reboot_fails(self, node_id: str) -> bool:
        now = self.cp.clock.tick
        for fault in self.faults:
            if (
                fault.kind is FaultKind.RebootFail
                and fault.target in ("*", node_id)
                and fault.armed(now)
                and self._fire(fault, f"reboot:{node_id}")
            ):
                return True
        return False

    def fire_node_crashes(self, now: int) -> None:
        for fault in self.faults:
            if fault.kind is not FaultKind.NodeCrash or not fault.armed(now):
                continue
            targets = sorted(self.cp.orchestrator.node_index) if fault.target == "*" else [fault.target]
            for node_id in targets:
                if self._fire(fault, f"crash:{node_id}"):
                    self.cp.emit("fault.crash", node=node_id)
                    checks = self.cp.orchestrator.checks_of(node_id)
                    self.cp.vetting.health_event(node_id, "Manual", [(c, False) for c in checks])

    # -- scheduler registrations ----------------------------------------
    def scheduler_nodes(self, vcluster: str) -> set[str]:
        return set(self.registered.get(vcluster, ()))

    def sync_node(self, node_id: str) -> None:
        vc = self.cp.orchestrator.vc_of(node_id)
        for name, nodes in self.registered.items():
            if name != vc:
                nodes.discard(node_id)
        if vc is None:
            return
        nodes = self.registered.setdefault(vc, set())
        healthy = self.cp.vetting.state_of(node_id).state.value == "Healthy"
        if healthy and self.cp.orchestrator.has_scheduler(node_id):
            nodes.add(node_id)
        else:
            nodes.discard(node_id)

    def sync_vcluster(self, vcluster: str) -> None:
        state = self.cp.orchestrator.states.get(vcluster)
        if state is None:
            self.registered.pop(vcluster, None)
            return
        self.registered[vcluster] = {
            n
            for n in state.members
            if self.cp.vetting.state_of(n).state.value == "Healthy" and self.cp.orchestrator.has_scheduler(n)
        }

    def on_node_unhealthy(self, node_id: str) -> None:
        for nodes in self.registered.values():
            nodes.discard(node_id)
        self.fail_jobs_on(node_id)

    def on_node_left(self, node_id: str) -> None:
        self.on_node_unhealthy(node_id)
        self.draining.discard(node_id)
        self.updating.discard(node_id)

    # -- jobs ----------------------------------------------------------
    @synchronized
    def submit_job(self, principal: Principal, vcluster: str, nodes: int, duration: int) -> Job:
        orch = self.cp.orchestrator
        tenant = orch.tenant_of(vcluster) if vcluster in orch.states else None
        self.cp.tenancy.require(principal, "job.submit", Resource("vcluster", vcluster, tenant))
        state = orch.states.get(vcluster)
        if state is None or state.last_applied_digest is None:
            raise UnknownVCluster(f"unknown vCluster {vcluster}")
        if nodes < 1 or duration < 1:
            raise UsageError("a job needs at least one node and one tick")
        if nodes > len(state.members):
            raise ImpossibleRequest(f"{nodes}-node job exceeds {vcluster} size {len(state.members)}")
        job = Job(f"job-{self.next_job:06d}", vcluster, nodes, duration, submitted=self.cp.clock.tick)
        self.next_job += 1
        self.jobs[job.job_id] = job
        self.queue.append(job.job_id)
        self.cp.emit("job.submit", job=job.job_id, vcluster=vcluster, nodes=nodes, duration=duration)
        return job

    def free_nodes(self, vcluster: str) -> list[str]:
        inv = self.cp.inventory
        vet = self.cp.vetting
        out = []
        for node_id in sorted(self.registered.get(vcluster, ())):
            node = inv.nodes[node_id]
            if (
                node_id not in self.busy
                and node_id not in self.draining
                and node_id not in self.updating
                and node.power is Power.Ready
                and vet.state_of(node_id).state.value == "Healthy"
                and node.partition_id == inv.partitions.get(node.vc_label)
            ):
                out.append(node_id)
        return out

    def _release(self, job: Job) -> None:
        for node_id in job.assigned:
            if self.busy.get(node_id) == job.job_id:
                del self.busy[node_id]
        job.assigned = []

    def fail_jobs_on(self, node_id: str) -> None:
        job_id = self.busy.get(node_id)
        if job_id is None:
            return
        job = self.jobs[job_id]
        self._release(job)
        if job.requeues == 0:
            job.requeues = 1
            job.state = JobState.Requeued
            self.queue.insert(0, job.job_id)
            self.cp.emit("job.requeue", job=job.job_id, node=node_id)
        else:
            job.state = JobState.FailedNode
            self.cp.emit("job.failed", job=job.job_id, node=node_id)

    def finish_jobs(self, now: int) -> None:
        running = sorted(
            (j for j in self.jobs.values() if j.state is JobState.Running and j.ends is not None and j.ends <= now),
            key=lambda j: j.job_id,
        )
        for job in running:
            nodes = list(job.assigned)
            self._release(job)
            job.state = JobState.Done
            self.cp.emit("job.end", job=job.job_id)
            for node_id in nodes:
                self.cp.vetting.run_checks(node_id, "JobEnd")

    def place_jobs(self, now: int) -> None:
        free_by_vc: dict[str, list[str]] = {}
        waiting = []
        for job_id in self.queue:
            job = self.jobs[job_id]
            if job.vcluster not in free_by_vc:
                free_by_vc[job.vcluster] = self.free_nodes(job.vcluster)
            placed = False
            while len(free_by_vc[job.vcluster]) >= job.nodes:
                free = free_by_vc[job.vcluster]
                chosen, free_by_vc[job.vcluster] = free[: job.nodes], free[job.nodes :]
                if self._start(job, chosen, now):
                    placed = True
                    break
                # a JobStart check failed: the failing node is no longer Healthy,
                # the others go back to the pool
                free_by_vc[job.vcluster] = sorted(
                    free_by_vc[job.vcluster]
                    + [n for n in chosen if self.cp.vetting.state_of(n).state.value == "Healthy"]
                )
            if not placed:
                waiting.append(job_id)
        self.queue = waiting

    def _start(self, job: Job, chosen: list[str], now: int) -> bool:
        vet = self.cp.vetting
        ok = True
        for node_id in chosen:
            if not vet.run_checks(node_id, "JobStart"):
                ok = False
        if not ok:
            self.cp.emit("job.start_aborted", job=job.job_id)
            return False
        for node_id in chosen:
            self._assert_placeable(job, node_id)
            self.busy[node_id] = job.job_id
        job.assigned = list(chosen)
        job.state = JobState.Running
        job.started = now
        job.ends = now + job.duration
        self.cp.emit("job.start", job=job.job_id, nodes=chosen)
        return True

    def _assert_placeable(self, job: Job, node_id: str) -> None:
        node = self.cp.inventory.nodes[node_id]
        if self.cp.vetting.state_of(node_id).state.value != "Healthy":
            self.violations.append(f"{job.job_id} placed on non-Healthy node {node_id}")
        if self.cp.orchestrator.vc_of(node_id) != job.vcluster:
            self.violations.append(f"{job.job_id} placed on non-member node {node_id}")
        if node.partition_id != self.cp.inventory.partitions.get(node.vc_label):
            self.violations.append(f"{job.job_id} placed across partitions on {node_id}")

    def audit_running(self) -> None:
        """Per-tick check that running jobs sit only on Healthy member nodes."""
        for node_id, job_id in self.busy.items():
            if self.cp.vetting.state_of(node_id).state.value != "Healthy":
                self.violations.append(f"tick {self.cp.clock.tick}: {job_id} occupies non-Healthy {node_id}")

    def running_on(self, node_ids) -> list[str]:
        return sorted({self.busy[n] for n in node_ids if n in self.busy})

    def idle(self) -> bool:
        return not self.queue and not self.busy

    def send_message(self, src: str, dst: str) -> bool:
        delivered = self.cp.inventory.can_communicate(src, dst)
        self.cp.emit("net.message", src=src, dst=dst, delivered=delivered)
        return delivered

    # -- persistence ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "jobs": [j.to_dict() for _, j in sorted(self.jobs.items())],
            "queue": list(self.queue),
            "registered": {vc: sorted(n) for vc, n in sorted(self.registered.items())},
            "busy": dict(sorted(self.busy.items())),
            "draining": sorted(self.draining),
            "updating": sorted(self.updating),
            "faults": [f.to_dict() for f in self.faults],
            "violations": list(self.violations),
            "next_job": self.next_job,
        }

    def load(self, d: dict) -> None:
        self.jobs = {j["job_id"]: Job.from_dict(j) for j in d["jobs"]}
        self.queue = list(d["queue"])
        self.registered = {vc: set(n) for vc, n in d["registered"].items()}
        self.busy = dict(d["busy"])
        self.draining = set(d["draining"])
        self.updating = set(d["updating"])
        self.faults = [FaultSpec(**f) for f in d["faults"]]
        self.violations = list(d["violations"])
        self.next_job = d["next_job"]
