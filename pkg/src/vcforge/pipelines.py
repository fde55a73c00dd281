"""Pipeline engine: integration gate, production deploy, rolling update, rollback.

Integration deploys a manifest onto a throwaway vCluster built from idle
nodes, runs every recipe's test hook, tears the vCluster down and stores
a gate record for the manifest digest. Production paths refuse any
digest without a Passed gate record, and the final commit of a digest is
guarded a second time, so an applied digest always had a Passed gate at
the moment it was committed.

Multi-tick runs (rolling update, rollback, reintegration) are generators
advanced once per simulation tick; ``wait=True`` steps the control plane
until the run finishes.
"""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .canonical import canonical_json
from .concurrency import synchronized
from .errors import (
    DrainTimeout,
    GateViolation,
    HookFailed,
    NoIdleNodes,
    NoRollbackTarget,
    NotDeployed,
    PipelineConflict,
    UngatedManifest,
    UsageError,
    VcforgeError,
    VClusterMismatch,
)
from .inventory import Plane, Power
from .manifest import Kind, VClusterManifest, resolve
from .orchestrator import SERVICE_PLANE, AppliedState, desired_state, diff
from .tenancy import SYSTEM, Principal, Resource

if TYPE_CHECKING:
    from .controlplane import ControlPlane

log = logging.getLogger(__name__)

DRAIN_BUDGET = 50
MAX_WAIT_TICKS = 100_000


class RunKind(str, enum.Enum):
    Integration = "Integration"
    Production = "Production"
    Rolling = "Rolling"
    Rollback = "Rollback"
    Recovery = "Recovery"
    Reintegration = "Reintegration"


class Verdict(str, enum.Enum):
    Passed = "Passed"
    Failed = "Failed"


@dataclass
class GateRecord:
    digest: str
    verdict: Verdict
    test_node_ids: list[str]
    results: dict[str, str]
    tick: int
    run_id: str = ""

    def to_dict(self) -> dict:
        return {
            "digest": self.digest,
            "verdict": self.verdict.value,
            "test_node_ids": list(self.test_node_ids),
            "results": dict(sorted(self.results.items())),
            "tick": self.tick,
            "run_id": self.run_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GateRecord:
        return cls(d["digest"], Verdict(d["verdict"]), list(d["test_node_ids"]), dict(d["results"]), d["tick"], d["run_id"])


@dataclass
class PipelineRun:
    run_id: str
    kind: RunKind
    vcluster: str | None
    digests: list[str]
    started: int
    stages: list[dict] = field(default_factory=list)
    outcome: str | None = None
    ended: int | None = None
    error: dict | None = None
    trace: list[list[int]] = field(default_factory=list)
    plan: dict | None = None
    _engine: Pipelines | None = field(default=None, repr=False, compare=False)

    @property
    def done(self) -> bool:
        return self.outcome is not None

    @property
    def succeeded(self) -> bool:
        return self.outcome == "Succeeded"

    def _event(self, stage: dict) -> None:
        if self._engine is not None:
            self._engine.log_stage(self, stage)

    def begin(self, name: str) -> dict:
        if self.stages and self.stages[-1]["status"] == "Failed":
            raise UsageError(f"run {self.run_id}: stage {name} after a failed stage")
        stage = {"name": name, "status": "Running", "log": []}
        self.stages.append(stage)
        return stage

    def note(self, line: str) -> None:
        self.stages[-1]["log"].append(line)

    def ok(self, line: str | None = None) -> None:
        stage = self.stages[-1]
        if line:
            stage["log"].append(line)
        stage["status"] = "Passed"
        self._event(stage)

    def fail(self, line: str) -> None:
        stage = self.stages[-1]
        stage["log"].append(line)
        stage["status"] = "Failed"
        self._event(stage)

    def finish(self, outcome: str) -> None:
        if self.outcome is not None:
            raise UsageError(f"run {self.run_id} already finished as {self.outcome}")
        if self.stages and self.stages[-1]["status"] == "Running":
            self.stages[-1]["status"] = "Passed" if outcome == "Succeeded" else "Failed"
            self._event(self.stages[-1])
        self.outcome = outcome
        if self._engine is not None:
            self.ended = self._engine.cp.clock.tick
            self._engine.finished(self)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "kind": self.kind.value,
            "vcluster": self.vcluster,
            "digests": list(self.digests),
            "started": self.started,
            "ended": self.ended,
            "stages": self.stages,
            "outcome": self.outcome,
            "error": self.error,
            "trace": self.trace,
            "plan": self.plan,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PipelineRun:
        return cls(
            d["run_id"], RunKind(d["kind"]), d["vcluster"], list(d["digests"]), d["started"],
            list(d["stages"]), d["outcome"], d["ended"], d["error"], [list(t) for t in d["trace"]],
            d.get("plan"),
        )


@dataclass
class RollingPlan:
    from_digest: str
    to_digest: str
    batch_size: int
    batches: list[list[str]]
    drain_required: bool

    def to_dict(self) -> dict:
        return {
            "from_digest": self.from_digest,
            "to_digest": self.to_digest,
            "batch_size": self.batch_size,
            "batches": self.batches,
            "drain_required": self.drain_required,
        }


def scheduler_signature(manifest: VClusterManifest, registry) -> set[tuple]:
    out = set()
    for recipe in resolve(manifest, registry):
        if recipe.kind is Kind.Scheduler:
            out.add((recipe.name, recipe.version, canonical_json(manifest.ref(recipe.name).config_map, pretty=False)))
    return out


def plan_rolling(
    old: VClusterManifest, new: VClusterManifest, members: list[str], batch_size: int, registry
) -> RollingPlan:
    if batch_size < 1:
        raise UsageError("batch size must be >= 1")
    members = sorted(members)
    batches = [members[i : i + batch_size] for i in range(0, len(members), batch_size)]
    drain = scheduler_signature(old, registry) != scheduler_signature(new, registry)
    return RollingPlan(old.digest, new.digest, batch_size, batches, drain)


class Pipelines:
    def __init__(self, cp: ControlPlane, drain_budget: int = DRAIN_BUDGET):
        self.cp = cp
        self.drain_budget = drain_budget
        self.gates: dict[str, GateRecord] = {}
        self.runs: dict[str, PipelineRun] = {}
        self.run_log: list[dict] = []
        self.locks: dict[str, str] = {}
        self.driven: list[tuple[PipelineRun, Iterator]] = []
        self.next_run = 1

    @property
    def lock(self):
        return self.cp.lock

    # -- bookkeeping ---------------------------------------------------
    def is_gated(self, digest: str) -> bool:
        gate = self.gates.get(digest)
        return gate is not None and gate.verdict is Verdict.Passed

    def gate(self, digest: str) -> GateRecord | None:
        return self.gates.get(digest)

    def locked(self, vcluster: str) -> str | None:
        return self.locks.get(vcluster)

    def run(self, run_id: str) -> PipelineRun:
        return self.runs[run_id]

    def new_run(self, kind: str | RunKind, vcluster: str | None, digests: list[str], lock: bool = False) -> PipelineRun:
        kind = RunKind(kind)
        if lock and vcluster is not None:
            holder = self.locks.get(vcluster)
            if holder is not None:
                raise PipelineConflict(f"{vcluster} is locked by run {holder}", run=holder)
        run = PipelineRun(f"run-{self.next_run:06d}", kind, vcluster, list(digests), self.cp.clock.tick, _engine=self)
        self.next_run += 1
        self.runs[run.run_id] = run
        if lock and vcluster is not None:
            self.locks[vcluster] = run.run_id
        self.cp.emit("pipeline.start", run=run.run_id, kind=kind.value, vcluster=vcluster, digests=list(digests))
        return run

    def log_stage(self, run: PipelineRun, stage: dict) -> None:
        entry = {
            "run": run.run_id,
            "kind": run.kind.value,
            "tick": self.cp.clock.tick,
            "stage": stage["name"],
            "status": stage["status"],
            "log": list(stage["log"]),
        }
        self.run_log.append(entry)
        self.cp.emit("pipeline.stage", run=run.run_id, stage=stage["name"], status=stage["status"])

    def finished(self, run: PipelineRun) -> None:
        for vc, holder in list(self.locks.items()):
            if holder == run.run_id:
                del self.locks[vc]
        self.cp.emit("pipeline.end", run=run.run_id, outcome=run.outcome)

    def _fail_run(self, run: PipelineRun, exc: VcforgeError) -> None:
        run.error = exc.to_dict()
        if run.stages and run.stages[-1]["status"] == "Running":
            run.fail(f"{exc.code}: {exc.message}")
        if not run.done:
            run.finish("Failed")

    def drive(self, run: PipelineRun, gen: Iterator, wait: bool = True) -> PipelineRun:
        """Run the first segment now, then one segment per tick."""
        try:
            next(gen)
        except StopIteration:
            return self._settled(run)
        except VcforgeError as exc:
            self._fail_run(run, exc)
            raise
        self.driven.append((run, gen))
        if wait:
            for _ in range(MAX_WAIT_TICKS):
                if run.done:
                    break
                self.cp.step()
            return self._settled(run)
        return run

    def _settled(self, run: PipelineRun) -> PipelineRun:
        if not run.done:
            run.finish("Succeeded")
        if run.error is not None:
            raise _rebuild_error(run.error)
        return run

    def step(self, now: int) -> None:
        active = []
        for run, gen in self.driven:
            try:
                next(gen)
                active.append((run, gen))
            except StopIteration:
                if not run.done:
                    run.finish("Succeeded")
            except VcforgeError as exc:
                self._fail_run(run, exc)
        self.driven = active

    def trace_point(self, run: PipelineRun, members: list[str]) -> None:
        fleet, inv, vet = self.cp.fleet, self.cp.inventory, self.cp.vetting
        unavailable = 0
        for node_id in members:
            if (
                node_id in fleet.draining
                or node_id in fleet.updating
                or inv.nodes[node_id].power is not Power.Ready
                or vet.state_of(node_id).state.value != "Healthy"
            ):
                unavailable += 1
        run.trace.append([self.cp.clock.tick, len(members) - unavailable, unavailable])

    def _commit_digest(self, state: AppliedState, digest: str, run: PipelineRun, previous: str | None | bool = True) -> None:
        """The only place last_applied_digest changes."""
        gate = self.gates.get(digest)
        verdict = gate.verdict.value if gate else None
        if verdict != Verdict.Passed.value:
            raise GateViolation(f"refusing to commit {digest[:12]}: gate verdict {verdict}")
        state.commit_log.append({"digest": digest, "verdict": verdict, "run": run.run_id, "tick": self.cp.clock.tick})
        if previous is True:
            if state.last_applied_digest != digest:
                state.previous_digest = state.last_applied_digest
        else:
            state.previous_digest = previous or None
        state.last_applied_digest = digest
        self.cp.emit("pipeline.commit", vcluster=state.vcluster_name, digest=digest, run=run.run_id)

    def _scope(self, principal: Principal, verb: str, vcluster: str, manifest: VClusterManifest | None) -> str | None:
        """Authorize against both the vCluster owner and the owner of its labels."""
        owners = {self.cp.tenancy.owner_of_vcluster(vcluster)}
        if vcluster in self.cp.orchestrator.states:
            owners.add(self.cp.orchestrator.tenant_of(vcluster))
        if manifest is not None:
            owners.add(self.cp.vcluster_tenant(manifest))
        owners.discard(None)
        if not owners:
            self.cp.tenancy.require(principal, verb, Resource("vcluster", vcluster, None))
            return None
        for owner in sorted(owners):
            self.cp.tenancy.require(principal, verb, Resource("vcluster", vcluster, owner))
        return sorted(owners)[0]

    # -- integration ---------------------------------------------------
    def idle_nodes(self, preferred_kinds: set[str] = frozenset()) -> list[str]:
        inv, vet, fleet = self.cp.inventory, self.cp.vetting, self.cp.fleet
        out = []
        for node in inv.nodes.values():
            if (
                node.plane is Plane.Resource
                and node.vc_label is None
                and node.power is Power.Ready
                and node.base_image is not None
                and node.node_id not in fleet.busy
                and vet.state_of(node.node_id).state.value == "Healthy"
                and not any(node.node_id in b.pending for b in inv.backends.values())
            ):
                out.append(node)
        out.sort(key=lambda n: (n.hw_kind.value not in preferred_kinds, n.node_id))
        return [n.node_id for n in out]

    @synchronized
    def run_integration(self, principal: Principal, manifest: VClusterManifest, test_node_count: int = 1) -> GateRecord:
        self._scope(principal, "pipeline.integrate", manifest.vcluster_name, manifest)
        if test_node_count < 1:
            raise UsageError("integration needs at least one test node")
        live = sorted(n for n, s in self.cp.orchestrator.states.items() if s.last_applied_digest == manifest.digest)
        if live:
            # a failing re-run would leave a running vCluster without a Passed gate
            raise GateViolation(f"{manifest.digest[:12]} is applied on {','.join(live)}; it cannot be re-gated", vclusters=live)
        recipes = resolve(manifest, self.cp.registry)
        inv = self.cp.inventory
        preferred = set()
        for label in manifest.hsm_groups:
            if label in inv.groups:
                preferred.update(inv.nodes[n].hw_kind.value for n in inv.groups[label].member_ids)
        idle = self.idle_nodes(preferred)
        if len(idle) < test_node_count:
            raise NoIdleNodes(f"need {test_node_count} idle healthy nodes, found {len(idle)}")
        digest = manifest.digest
        self.cp.manifests[digest] = manifest
        run = self.new_run(RunKind.Integration, manifest.vcluster_name, [digest])
        nodes = idle[:test_node_count]
        label = f"vc:it-{digest[:12]}"
        results: dict[str, str] = {}
        verdict = Verdict.Failed
        try:
            run.begin("provision")
            inv.assign_group(SYSTEM, label, nodes)
            run.ok(f"test nodes {','.join(nodes)}")
            run.begin("deploy")
            eph = AppliedState(f"it-{digest[:12]}")
            desired = desired_state(manifest, nodes, self.cp.registry, allow_empty=True)
            _, plan = diff(eph, desired, self.cp.registry)
            try:
                self.cp.orchestrator.apply(eph, plan, desired.order)
            except VcforgeError as exc:
                results[exc.details.get("recipe", "<deploy>")] = "fail"
                run.fail(exc.message)
            else:
                run.ok(f"{len(plan.steps)} hook steps")
                run.begin("test")
                for recipe in recipes:
                    targets = [t for t in desired.targets() if recipe.name in desired.target_map(t)]
                    passed = True
                    for target in targets:
                        if self.cp.fleet.hook_fails(target, recipe.name, "test"):
                            passed = False
                            run.note(f"{recipe.name} test failed on {target}")
                            break
                        eph.ledgers[target].append(
                            "test", recipe.name, recipe.version, desired.configs[recipe.name],
                            recipe.effects("test", desired.configs[recipe.name], "Service" if target == SERVICE_PLANE else "Resource"),
                        )
                    results[recipe.name] = "pass" if passed else "fail"
                if all(v == "pass" for v in results.values()):
                    verdict = Verdict.Passed
                    run.ok()
                else:
                    run.fail("failing recipes: " + ",".join(n for n, v in sorted(results.items()) if v != "pass"))
        finally:
            # teardown always runs and is never fault-injected
            with self.cp.fleet.faults_suspended():
                if label in inv.groups:
                    inv.drop_group(SYSTEM, label)
            run.stages.append({"name": "destroy", "status": "Passed", "log": [f"released {len(nodes)} nodes"]})
            self.log_stage(run, run.stages[-1])
        gate = GateRecord(digest, verdict, nodes, results, self.cp.clock.tick, run.run_id)
        self.gates[digest] = gate
        run.finish("Succeeded" if verdict is Verdict.Passed else "Failed")
        self.cp.emit("pipeline.gate", digest=digest, verdict=verdict.value)
        return gate

    # -- production ----------------------------------------------------
    @synchronized
    def run_production(self, principal: Principal, vcluster_name: str, manifest: VClusterManifest) -> PipelineRun:
        if manifest.vcluster_name != vcluster_name:
            raise VClusterMismatch(f"manifest names {manifest.vcluster_name}, not {vcluster_name}")
        owner = self._scope(principal, "pipeline.deploy", vcluster_name, manifest)
        digest = manifest.digest
        if not self.is_gated(digest):
            gate = self.gates.get(digest)
            why = "no gate record" if gate is None else f"gate verdict {gate.verdict.value}"
            raise UngatedManifest(f"{digest[:12]} is not gated: {why}", digest=digest)
        resolve(manifest, self.cp.registry)
        orch = self.cp.orchestrator
        existing = orch.states.get(vcluster_name)
        deployed = existing is not None and existing.last_applied_digest is not None
        members = orch.members_for(vcluster_name, manifest)
        desired = desired_state(manifest, members, self.cp.registry, allow_empty=deployed)
        run = self.new_run(RunKind.Production, vcluster_name, [digest], lock=True)
        self.cp.manifests[digest] = manifest
        if owner is not None:
            self.cp.tenancy.claim_vcluster(vcluster_name, owner)
        state = orch.ensure_state(vcluster_name)
        try:
            run.begin("gate")
            run.ok(f"gate {digest[:12]} Passed")
            run.begin("preflight-drift")
            report, plan = diff(state, desired, self.cp.registry)
            run.ok(f"{len(report.entries)} drift entries, {len(plan.steps)} plan steps")
            run.begin("service-plane")
            orch.apply(state, plan.for_targets([SERVICE_PLANE]))
            run.ok()
            run.begin("resource-plane")
            orch.apply(state, plan.for_targets(t for t in plan.targets() if t != SERVICE_PLANE), desired.order)
            state.order = list(desired.order)
            for target in orch.prune(state, desired):
                self.cp.fleet.on_node_left(target)
            for node_id in desired.per_node:
                orch.node_index[node_id] = vcluster_name
                state.targets.setdefault(node_id, {})
            run.ok()
            run.begin("verify")
            after, _ = diff(state, desired, self.cp.registry)
            if not after.empty:
                raise HookFailed(f"{len(after.entries)} drift entries remain after deploy")
            self._commit_digest(state, digest, run)
            run.ok()
            self.cp.fleet.sync_vcluster(vcluster_name)
            run.finish("Succeeded")
        except VcforgeError as exc:
            self.cp.fleet.sync_vcluster(vcluster_name)
            self._fail_run(run, exc)
            raise
        return run

    # -- rolling update and rollback --------------------------------------
    @synchronized
    def rolling_update(
        self,
        principal: Principal,
        vcluster_name: str,
        new_manifest: VClusterManifest,
        batch_size: int,
        wait: bool = True,
    ) -> PipelineRun:
        if new_manifest.vcluster_name != vcluster_name:
            raise VClusterMismatch(f"manifest names {new_manifest.vcluster_name}, not {vcluster_name}")
        self._scope(principal, "update.rolling", vcluster_name, new_manifest)
        state = self.cp.orchestrator.states.get(vcluster_name)
        if state is None or state.last_applied_digest is None:
            raise NotDeployed(f"{vcluster_name} has no deployed manifest")
        digest = new_manifest.digest
        if not self.is_gated(digest):
            raise UngatedManifest(f"{digest[:12]} is not gated", digest=digest)
        if batch_size < 1:
            raise UsageError("batch size must be >= 1")
        self.cp.manifests[digest] = new_manifest
        return self._start_rolling(RunKind.Rolling, vcluster_name, new_manifest, batch_size, wait)

    @synchronized
    def rollback(self, principal: Principal, vcluster_name: str, batch_size: int | None = None, wait: bool = True) -> PipelineRun:
        self._scope(principal, "rollback", vcluster_name, None)
        state = self.cp.orchestrator.states.get(vcluster_name)
        if state is None or state.last_applied_digest is None:
            raise NotDeployed(f"{vcluster_name} has no deployed manifest")
        if self.locks.get(vcluster_name):
            raise PipelineConflict(f"{vcluster_name} is locked by run {self.locks[vcluster_name]}")
        if state.previous_digest is None:
            raise NoRollbackTarget(f"{vcluster_name} has no previous digest")
        target = self.cp.manifests[state.previous_digest]
        if batch_size is None:
            batch_size = max(1, math.ceil(len(state.members) / 10))
        return self._start_rolling(RunKind.Rollback, vcluster_name, target, batch_size, wait)

    def _start_rolling(self, kind: RunKind, vcluster_name: str, new: VClusterManifest, batch_size: int, wait: bool) -> PipelineRun:
        state = self.cp.orchestrator.states[vcluster_name]
        old = self.cp.manifests[state.last_applied_digest]
        rplan = plan_rolling(old, new, state.members, batch_size, self.cp.registry)
        run = self.new_run(kind, vcluster_name, [old.digest, new.digest], lock=True)
        run.plan = rplan.to_dict()
        self.cp.emit("pipeline.rolling_plan", run=run.run_id, batches=len(rplan.batches), drain=rplan.drain_required)
        return self.drive(run, self._rolling(run, state, old, new, rplan, kind), wait=wait)

    def _rolling(self, run: PipelineRun, state: AppliedState, old: VClusterManifest, new: VClusterManifest, rplan: RollingPlan, kind: RunKind):
        orch, fleet, registry = self.cp.orchestrator, self.cp.fleet, self.cp.registry
        all_members = sorted({n for b in rplan.batches for n in b})
        done_batches: list[list[str]] = []
        current: list[str] = []

        def members() -> list[str]:
            return state.members

        def plan_for(manifest: VClusterManifest, targets) -> tuple:
            desired = desired_state(manifest, members(), registry, allow_empty=True)
            return desired, diff(state, desired, registry, targets=targets)[1]

        try:
            run.begin("gate")
            if not self.is_gated(new.digest):
                raise UngatedManifest(f"{new.digest[:12]} is not gated")
            run.ok(f"{len(rplan.batches)} batches of <= {rplan.batch_size}, drain={rplan.drain_required}")
            self.trace_point(run, all_members)

            run.begin("service-plane")
            _, plan = plan_for(new, [SERVICE_PLANE])
            orch.apply(state, plan)
            run.ok(f"{len(plan.steps)} steps")

            for i, batch in enumerate(rplan.batches, 1):
                current = [n for n in batch if n in state.targets]
                run.begin(f"batch-{i}")
                if rplan.drain_required:
                    fleet.draining.update(current)
                    waited = 0
                    while fleet.running_on(current):
                        if waited >= self.drain_budget:
                            busy = [n for n in current if n in fleet.busy]
                            raise DrainTimeout(f"batch {i} still busy after {waited} ticks", node=busy[0], budget=self.drain_budget)
                        yield
                        self.trace_point(run, all_members)
                        waited += 1
                        current = [n for n in current if n in state.targets]
                    run.note(f"drained in {waited} ticks")
                fleet.updating.update(current)
                _, plan = plan_for(new, current)
                orch.apply(state, plan)
                yield  # the hook swap occupies one tick
                self.trace_point(run, all_members)
                fleet.updating.difference_update(current)
                fleet.draining.difference_update(current)
                for node_id in current:
                    if node_id in state.targets:
                        fleet.sync_node(node_id)
                run.ok(f"{len(current)} nodes moved")
                done_batches.append(current)
                current = []

            run.begin("verify")
            desired = desired_state(new, members(), registry, allow_empty=True)
            report, plan = diff(state, desired, registry)
            if not plan.empty:
                orch.apply(state, plan)
            state.order = list(desired.order)
            if kind is RunKind.Rollback:
                self._commit_digest(state, new.digest, run, previous=None)
            else:
                self._commit_digest(state, new.digest, run)
            fleet.sync_vcluster(state.vcluster_name)
            self.trace_point(run, all_members)
            run.ok()
            run.finish("Succeeded")
        except VcforgeError as exc:
            self._revert(run, state, old, current, done_batches)
            self.trace_point(run, all_members)
            raise exc
        finally:
            fleet.draining.difference_update(all_members)
            fleet.updating.difference_update(all_members)

    def _revert(self, run, state: AppliedState, old: VClusterManifest, current: list[str], done_batches: list[list[str]]) -> None:
        """Return the failed batch, then earlier batches, then the service plane to the old digest."""
        orch, registry = self.cp.orchestrator, self.cp.registry
        with self.cp.fleet.faults_suspended():
            desired = desired_state(old, state.members, registry, allow_empty=True)
            for group in [current] + list(reversed(done_batches)) + [[SERVICE_PLANE]]:
                targets = [t for t in group if t in state.targets or t == SERVICE_PLANE]
                _, plan = diff(state, desired, registry, targets=targets)
                orch.apply(state, plan)
        self.cp.fleet.sync_vcluster(state.vcluster_name)
        self.cp.emit("pipeline.revert", run=run.run_id, vcluster=state.vcluster_name)

    # -- persistence ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "gates": {d: g.to_dict() for d, g in sorted(self.gates.items())},
            "runs": [r.to_dict() for _, r in sorted(self.runs.items())],
            "locks": dict(sorted(self.locks.items())),
            "next_run": self.next_run,
            "drain_budget": self.drain_budget,
        }

    def load(self, d: dict) -> None:
        self.gates = {k: GateRecord.from_dict(v) for k, v in d["gates"].items()}
        self.runs = {}
        for r in d["runs"]:
            run = PipelineRun.from_dict(r)
            run._engine = self
            self.runs[run.run_id] = run
        # generator runs do not survive a process boundary; their locks go with them
        self.locks = {}
        self.next_run = d["next_run"]
        self.drain_budget = d.get("drain_budget", DRAIN_BUDGET)


def _rebuild_error(d: dict) -> VcforgeError:
    from . import errors

    for name in dir(errors):
        cls = getattr(errors, name)
        if isinstance(cls, type) and issubclass(cls, VcforgeError) and cls.code == d["code"]:
            return cls(d["message"], **d.get("details", {}))
    return VcforgeError(d["message"])
