"""Service-management reconciler.

Desired state is computed from a resolved manifest and a member list:
Resource-plane recipes fan out to every member node, Service-plane
recipes land on the single service-plane target. Applied state is what
actually ran, recorded per target as a hash-chained ledger of hook
executions. Reconciling diffs the two and applies the minimal plan.
"""

from __future__ import annotations

import enum
import logging
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .canonical import canonical_json, digest_of, sha256_hex
from .concurrency import synchronized
from .errors import (
    EmptyMembership,
    HookFailed,
    NodeNotReady,
    NodeVetted,
    NotAMember,
    PipelineConflict,
    UngatedTarget,
    UnknownVCluster,
)
from .inventory import Power
from .manifest import Kind, Registry, VClusterManifest, VServiceRecipe, resolve
from .tenancy import SYSTEM, Principal, Resource

if TYPE_CHECKING:
    from .controlplane import ControlPlane

log = logging.getLogger(__name__)

SERVICE_PLANE = "service-plane"
GENESIS = "0" * 64

INSTALL_HOOKS = ("install", "configure", "start")
REMOVE_HOOKS = ("stop", "remove")
RESTART_HOOKS = ("stop", "configure", "start")


def config_digest(config: dict) -> str:
    return digest_of(config)[:16]


def plane_of(target: str) -> str:
    return "Service" if target == SERVICE_PLANE else "Resource"


# ---------------------------------------------------------------------------
# ledgers
# ---------------------------------------------------------------------------


def _entry_hash(entry: dict) -> str:
    body = {k: v for k, v in entry.items() if k != "hash"}
    return sha256_hex(canonical_json(body, pretty=False))


class Ledger:
    """Append-only, hash-chained record of hook executions on one target."""

    def __init__(self, entries: list[dict] | None = None):
        self.entries: list[dict] = entries if entries is not None else []

    @property
    def head(self) -> str:
        return self.entries[-1]["hash"] if self.entries else GENESIS

    def append(self, hook: str, recipe: str = "", version: str = "", config: dict | None = None, effects=()) -> dict:
        entry = {
            "seq": len(self.entries),
            "hook": hook,
            "recipe": recipe,
            "version": version,
            "config": config or {},
            "effects": list(effects),
            "prev": self.head,
        }
        entry["hash"] = _entry_hash(entry)
        self.entries.append(entry)
        return entry

    def verify(self) -> bool:
        prev = GENESIS
        for i, entry in enumerate(self.entries):
            if entry.get("seq") != i or entry.get("prev") != prev or entry.get("hash") != _entry_hash(entry):
                return False
            prev = entry["hash"]
        return True

    def replay(self) -> dict[str, dict]:
        state: dict[str, dict] = {}
        for entry in self.entries:
            hook, name = entry["hook"], entry["recipe"]
            if hook == "reimage":
                state = {}
            elif hook == "install":
                state[name] = {"version": entry["version"], "config": entry["config"]}
            elif hook == "configure" and name in state:
                state[name] = {"version": entry["version"], "config": entry["config"]}
            elif hook == "remove":
                state.pop(name, None)
        return state


# ---------------------------------------------------------------------------
# state types
# ---------------------------------------------------------------------------


@dataclass
class DesiredState:
    vcluster_name: str
    digest: str
    per_node: dict[str, frozenset[tuple[str, str]]]
    service_plane: frozenset[tuple[str, str]]
    configs: dict[str, dict]
    order: list[str]
    recipes: dict[str, VServiceRecipe] = field(repr=False, default_factory=dict)

    def targets(self) -> list[str]:
        out = sorted(self.per_node)
        if self.service_plane:
            out.append(SERVICE_PLANE)
        return out

    def target_map(self, target: str) -> dict[str, dict]:
        pairs = self.service_plane if target == SERVICE_PLANE else self.per_node.get(target, frozenset())
        return {name: {"version": version, "config": self.configs[name]} for name, version in pairs}

    def to_dict(self) -> dict:
        return {
            "vcluster": self.vcluster_name,
            "digest": self.digest,
            "per_node": {n: sorted(map(list, s)) for n, s in sorted(self.per_node.items())},
            "service_plane": sorted(map(list, self.service_plane)),
            "order": list(self.order),
        }


@dataclass
class AppliedState:
    vcluster_name: str
    targets: dict[str, dict[str, dict]] = field(default_factory=dict)
    ledgers: dict[str, Ledger] = field(default_factory=dict)
    heads: dict[str, list] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)
    last_applied_digest: str | None = None
    previous_digest: str | None = None
    commit_log: list[dict] = field(default_factory=list)

    @property
    def members(self) -> list[str]:
        return sorted(t for t in self.targets if t != SERVICE_PLANE)

    def recipe_set(self, target: str) -> frozenset[tuple[str, str]]:
        return frozenset((n, r["version"]) for n, r in self.targets.get(target, {}).items())

    def ledger_ok(self, target: str) -> bool:
        ledger = self.ledgers.get(target)
        recorded = self.heads.get(target)
        if ledger is None:
            return recorded is None
        if recorded is None or recorded != [len(ledger.entries), ledger.head]:
            return False
        return ledger.verify() and ledger.replay() == self.targets.get(target, {})

    def _record(self, target: str) -> None:
        ledger = self.ledgers[target]
        self.heads[target] = [len(ledger.entries), ledger.head]

    def drop(self, target: str) -> None:
        self.targets.pop(target, None)
        self.ledgers.pop(target, None)
        self.heads.pop(target, None)

    def to_dict(self) -> dict:
        return {
            "vcluster": self.vcluster_name,
            "targets": {t: dict(sorted(r.items())) for t, r in sorted(self.targets.items())},
            "ledgers": {t: l.entries for t, l in sorted(self.ledgers.items())},
            "heads": dict(sorted(self.heads.items())),
            "order": list(self.order),
            "last_applied_digest": self.last_applied_digest,
            "previous_digest": self.previous_digest,
            "commit_log": list(self.commit_log),
        }

    @classmethod
    def from_dict(cls, d: dict) -> AppliedState:
        return cls(
            vcluster_name=d["vcluster"],
            targets={t: dict(r) for t, r in d["targets"].items()},
            ledgers={t: Ledger(list(e)) for t, e in d["ledgers"].items()},
            heads={t: list(h) for t, h in d["heads"].items()},
            order=list(d["order"]),
            last_applied_digest=d["last_applied_digest"],
            previous_digest=d["previous_digest"],
            commit_log=list(d.get("commit_log", [])),
        )


class DriftClass(str, enum.Enum):
    Missing = "Missing"
    Unexpected = "Unexpected"
    VersionSkew = "VersionSkew"
    OutOfBandEdit = "OutOfBandEdit"


@dataclass(frozen=True)
class DriftEntry:
    target: str
    expected: str | None
    found: str | None
    classification: DriftClass

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "expected": self.expected,
            "found": self.found,
            "classification": self.classification.value,
        }


@dataclass
class DriftReport:
    vcluster_name: str
    entries: list[DriftEntry] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.entries

    def by_class(self, cls: DriftClass) -> list[DriftEntry]:
        return [e for e in self.entries if e.classification is cls]

    def to_dict(self) -> dict:
        return {"vcluster": self.vcluster_name, "entries": [e.to_dict() for e in self.entries]}


@dataclass(frozen=True)
class PlanStep:
    target: str
    recipe: str
    version: str
    hook: str
    action: str  # install | remove | restart | reimage
    config: dict = field(default_factory=dict, compare=False, hash=False)
    effects: tuple = field(default=(), compare=False, hash=False)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "recipe": self.recipe,
            "version": self.version,
            "hook": self.hook,
            "action": self.action,
            "effects": list(self.effects),
        }


@dataclass
class ApplyPlan:
    vcluster_name: str
    steps: list[PlanStep] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.steps

    def triples(self, action: str) -> set[tuple[str, str, str]]:
        return {(s.target, s.recipe, s.version) for s in self.steps if s.action == action}

    def targets(self) -> list[str]:
        return sorted({s.target for s in self.steps})

    def for_targets(self, targets: Iterable[str]) -> ApplyPlan:
        keep = set(targets)
        return ApplyPlan(self.vcluster_name, [s for s in self.steps if s.target in keep])

    def to_dict(self) -> dict:
        return {"vcluster": self.vcluster_name, "steps": [s.to_dict() for s in self.steps]}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


@dataclass
class ApplyReport:
    vcluster_name: str
    node_id: str | None = None
    steps_applied: int = 0
    effects: list[dict] = field(default_factory=list)
    noop: bool = False

    def to_dict(self) -> dict:
        return {
            "vcluster": self.vcluster_name,
            "node": self.node_id,
            "steps_applied": self.steps_applied,
            "effects": self.effects,
            "noop": self.noop,
        }


# ---------------------------------------------------------------------------
# pure functions
# ---------------------------------------------------------------------------


def desired_state(
    manifest: VClusterManifest, members: Iterable[str], registry: Registry, allow_empty: bool = False
) -> DesiredState:
    recipes = resolve(manifest, registry)
    members = sorted(set(members))
    resource = frozenset((r.name, r.version) for r in recipes if "Resource" in r.planes)
    if resource and not members and not allow_empty:
        raise EmptyMembership(f"{manifest.vcluster_name} has Resource-plane recipes but no member nodes")
    return DesiredState(
        vcluster_name=manifest.vcluster_name,
        digest=manifest.digest,
        per_node={n: resource for n in members} if resource else {},
        service_plane=frozenset((r.name, r.version) for r in recipes if "Service" in r.planes),
        configs={r.name: manifest.ref(r.name).config_map for r in recipes},
        order=[r.name for r in recipes],
        recipes={r.name: r for r in recipes},
    )


def _label(name: str, rec: dict) -> str:
    return f"{name}@{rec['version']}"


def diff(
    state: AppliedState, desired: DesiredState, registry: Registry, targets: Iterable[str] | None = None
) -> tuple[DriftReport, ApplyPlan]:
    """Classify drift and build the minimal plan from applied to desired.

    Per target: tampered ledgers are reimaged first, then removals in
    reverse of the previously applied order, then restarts and installs in
    resolve order.
    """
    report = DriftReport(desired.vcluster_name)
    plan = ApplyPlan(desired.vcluster_name)
    all_targets = set(desired.targets()) | set(state.targets) | set(state.ledgers)
    if targets is not None:
        all_targets &= set(targets)
    old_rank = {name: i for i, name in enumerate(state.order)}
    new_rank = {name: i for i, name in enumerate(desired.order)}

    for target in sorted(all_targets, key=lambda t: (t == SERVICE_PLANE, t)):
        plane = plane_of(target)
        want = desired.target_map(target)
        if not state.ledger_ok(target):
            ledger = state.ledgers.get(target)
            report.entries.append(
                DriftEntry(
                    target,
                    str(state.heads.get(target, [0, GENESIS])[1]),
                    ledger.head if ledger else None,
                    DriftClass.OutOfBandEdit,
                )
            )
            plan.steps.append(PlanStep(target, "*", "", "reimage", "reimage"))
            have: dict[str, dict] = {}
        else:
            have = state.targets.get(target, {})
            for name in sorted(set(want) | set(have)):
                w, h = want.get(name), have.get(name)
                if w and not h:
                    report.entries.append(DriftEntry(target, _label(name, w), None, DriftClass.Missing))
                elif h and not w:
                    report.entries.append(DriftEntry(target, None, _label(name, h), DriftClass.Unexpected))
                elif w["version"] != h["version"]:
                    report.entries.append(DriftEntry(target, _label(name, w), _label(name, h), DriftClass.VersionSkew))
                elif w["config"] != h["config"]:
                    report.entries.append(
                        DriftEntry(
                            target,
                            f"{_label(name, w)} config {config_digest(w['config'])}",
                            f"{_label(name, h)} config {config_digest(h['config'])}",
                            DriftClass.VersionSkew,
                        )
                    )

        removals, restarts, installs = [], [], []
        for name, h in have.items():
            w = want.get(name)
            if w is None or w["version"] != h["version"]:
                removals.append(name)
            elif w["config"] != h["config"]:
                if registry.get(name, h["version"]).install_uses_config:
                    removals.append(name)
                else:
                    restarts.append(name)
        for name in want:
            if name not in have or name in removals:
                installs.append(name)

        removals.sort(key=lambda n: (old_rank.get(n, -1), n), reverse=True)
        for name in removals:
            h = have[name]
            recipe = registry.get(name, h["version"])
            for hook in REMOVE_HOOKS:
                plan.steps.append(
                    PlanStep(target, name, h["version"], hook, "remove", h["config"],
                             tuple(recipe.effects(hook, h["config"], plane)))
                )
        for name in sorted(restarts + installs, key=lambda n: new_rank[n]):
            w = want[name]
            recipe = desired.recipes[name]
            action, hooks = ("restart", RESTART_HOOKS) if name in restarts else ("install", INSTALL_HOOKS)
            for hook in hooks:
                plan.steps.append(
                    PlanStep(target, name, w["version"], hook, action, w["config"],
                             tuple(recipe.effects(hook, w["config"], plane)))
                )
    return report, plan


# ---------------------------------------------------------------------------
# reconciler service
# ---------------------------------------------------------------------------


class Orchestrator:
    def __init__(self, cp: ControlPlane):
        self.cp = cp
        self.states: dict[str, AppliedState] = {}
        self.node_index: dict[str, str] = {}

    @property
    def lock(self):
        return self.cp.lock

    # -- lookups -------------------------------------------------------
    def state(self, vcluster_name: str) -> AppliedState:
        try:
            return self.states[vcluster_name]
        except KeyError:
            raise UnknownVCluster(f"unknown vCluster {vcluster_name}") from None

    def ensure_state(self, vcluster_name: str) -> AppliedState:
        return self.states.setdefault(vcluster_name, AppliedState(vcluster_name))

    def vc_of(self, node_id: str) -> str | None:
        return self.node_index.get(node_id)

    def manifest_of(self, vcluster_name: str) -> VClusterManifest:
        state = self.state(vcluster_name)
        if state.last_applied_digest is None:
            raise UngatedTarget(f"{vcluster_name} has no deployed manifest")
        return self.cp.manifests[state.last_applied_digest]

    def tenant_of(self, vcluster_name: str) -> str | None:
        owner = self.cp.tenancy.owner_of_vcluster(vcluster_name)
        if owner is None and vcluster_name in self.states and self.states[vcluster_name].last_applied_digest:
            owner = self.cp.vcluster_tenant(self.manifest_of(vcluster_name))
        return owner

    def checks_of(self, node_id: str) -> list[str]:
        """Health checks registered on a node by its Health-kind recipes."""
        vc = self.node_index.get(node_id)
        checks: list[str] = []
        if vc is not None:
            for name, rec in sorted(self.states[vc].targets.get(node_id, {}).items()):
                recipe = self.cp.registry.get(name, rec["version"])
                if recipe.kind is Kind.Health:
                    for e in recipe.effects("install", rec["config"], "Resource"):
                        if e["verb"] == "RegisterHealthCheck":
                            checks.append(e["subject"])
        return checks or ["node-alive"]

    def has_scheduler(self, node_id: str) -> bool:
        vc = self.node_index.get(node_id)
        if vc is None:
            return False
        for name, rec in self.states[vc].targets.get(node_id, {}).items():
            if self.cp.registry.get(name, rec["version"]).kind is Kind.Scheduler:
                return True
        return False

    def eligible(self, node_id: str) -> bool:
        node = self.cp.inventory.nodes[node_id]
        return (
            node.power is Power.Ready
            and node.base_image is not None
            and self.cp.vetting.state_of(node_id).state.value == "Healthy"
        )

    def members_for(self, vcluster_name: str, manifest: VClusterManifest) -> list[str]:
        """Joined members still labeled, plus labeled nodes ready to join."""
        labeled: set[str] = set()
        for label in manifest.hsm_groups:
            labeled.update(self.cp.inventory.group_members(label))
        joined = set(self.states[vcluster_name].members) if vcluster_name in self.states else set()
        return sorted((joined & labeled) | {n for n in labeled - joined if self.eligible(n)})

    # -- applying ------------------------------------------------------
    def apply(self, state: AppliedState, plan: ApplyPlan, order: list[str] | None = None) -> ApplyReport:
        """Execute plan steps in order, appending each hook to its target ledger.

        Injected hook faults raise HookFailed after the ledger reflects every
        step that did run, so partial progress is always auditable.
        """
        report = ApplyReport(plan.vcluster_name)
        fleet = self.cp.fleet
        for step in plan.steps:
            target = step.target
            if step.action == "reimage":
                state.ledgers[target] = Ledger()
                state.ledgers[target].append("reimage")
                state.targets[target] = {}
                state._record(target)
                continue
            if fleet.hook_fails(target, step.recipe, step.hook):
                raise HookFailed(
                    f"hook {step.hook} of {step.recipe}@{step.version} failed on {target}",
                    target=target, recipe=step.recipe, hook=step.hook,
                )
            ledger = state.ledgers.setdefault(target, Ledger())
            ledger.append(step.hook, step.recipe, step.version, step.config, step.effects)
            recipes = state.targets.setdefault(target, {})
            if step.hook == "install" or (step.hook == "configure" and step.recipe in recipes):
                recipes[step.recipe] = {"version": step.version, "config": step.config}
            elif step.hook == "remove":
                recipes.pop(step.recipe, None)
            state._record(target)
            report.steps_applied += 1
            report.effects.extend({"target": target, **e} for e in step.effects)
            if target != SERVICE_PLANE and state is self.states.get(state.vcluster_name):
                self.node_index[target] = state.vcluster_name
        if order is not None:
            state.order = list(order)
        return report

    def prune(self, state: AppliedState, desired: DesiredState) -> list[str]:
        """Forget targets that hold nothing and are no longer desired."""
        dropped = []
        wanted = set(desired.targets())
        for target in list(state.targets):
            if target not in wanted and not state.targets[target]:
                state.drop(target)
                dropped.append(target)
                if self.node_index.get(target) == state.vcluster_name:
                    del self.node_index[target]
        return dropped

    def _require_gated(self, vcluster_name: str) -> VClusterManifest:
        state = self.state(vcluster_name)
        digest = state.last_applied_digest
        if digest is None or not self.cp.pipelines.is_gated(digest):
            raise UngatedTarget(f"{vcluster_name} has no gated target digest")
        return self.cp.manifests[digest]

    @synchronized
    def reconcile(
        self, principal: Principal, vcluster_name: str, dry_run: bool = True
    ) -> tuple[DriftReport, ApplyPlan]:
        tenant = self.tenant_of(vcluster_name)
        verb = "status" if dry_run else "reconcile"
        self.cp.tenancy.require(principal, verb, Resource("vcluster", vcluster_name, tenant))
        manifest = self._require_gated(vcluster_name)
        if not dry_run and self.cp.pipelines.locked(vcluster_name):
            raise PipelineConflict(f"{vcluster_name} is locked by run {self.cp.pipelines.locked(vcluster_name)}")
        state = self.states[vcluster_name]
        members = self.members_for(vcluster_name, manifest)
        desired = desired_state(manifest, members, self.cp.registry, allow_empty=True)
        report, plan = diff(state, desired, self.cp.registry)
        if not dry_run and not plan.empty:
            self.apply(state, plan, desired.order)
            for target in self.prune(state, desired):
                self.cp.fleet.on_node_left(target)
            self.cp.fleet.sync_vcluster(vcluster_name)
        return report, plan

    def status(self, principal: Principal, vcluster_name: str) -> DriftReport:
        return self.reconcile(principal, vcluster_name, dry_run=True)[0]

    @synchronized
    def node_join(self, vcluster_name: str, node_id: str, vetting_states=("Healthy",)) -> ApplyReport:
        manifest = self._require_gated(vcluster_name)
        state = self.states[vcluster_name]
        node = self.cp.inventory.node(node_id)
        if node.power is not Power.Ready:
            raise NodeNotReady(f"node {node_id} is {node.power.value}")
        vet = self.cp.vetting.state_of(node_id).state.value
        if vet not in vetting_states:
            raise NodeVetted(f"node {node_id} vetting state is {vet}")
        if node.vc_label not in manifest.hsm_groups:
            raise NotAMember(f"node {node_id} does not carry a label of {vcluster_name}")
        members = sorted(set(state.members) | {node_id})
        desired = desired_state(manifest, members, self.cp.registry)
        _, plan = diff(state, desired, self.cp.registry, targets=[node_id])
        if plan.empty and node_id in state.targets:
            return ApplyReport(vcluster_name, node_id, noop=True)
        report = self.apply(state, plan)
        report.node_id = node_id
        self.node_index[node_id] = vcluster_name
        state.targets.setdefault(node_id, {})
        self.cp.fleet.sync_node(node_id)
        self.cp.emit("orchestrator.join", vcluster=vcluster_name, node=node_id)
        return report

    @synchronized
    def node_leave(self, vcluster_name: str, node_id: str, reason: str = "") -> ApplyReport:
        state = self.state(vcluster_name)
        if node_id not in state.targets:
            raise NotAMember(f"node {node_id} is not a member of {vcluster_name}")
        self.cp.fleet.on_node_left(node_id)
        have = state.targets[node_id] if state.ledger_ok(node_id) else {}
        rank = {name: i for i, name in enumerate(state.order)}
        plan = ApplyPlan(vcluster_name)
        for name in sorted(have, key=lambda n: (rank.get(n, -1), n), reverse=True):
            rec = have[name]
            recipe = self.cp.registry.get(name, rec["version"])
            for hook in REMOVE_HOOKS:
                plan.steps.append(
                    PlanStep(node_id, name, rec["version"], hook, "remove", rec["config"],
                             tuple(recipe.effects(hook, rec["config"], "Resource")))
                )
        # teardown is not subject to injected hook faults
        with self.cp.fleet.faults_suspended():
            report = self.apply(state, plan)
        report.node_id = node_id
        state.drop(node_id)
        self.node_index.pop(node_id, None)
        node = self.cp.inventory.node(node_id)
        if node.vc_label is not None:
            self.cp.inventory.unassign(SYSTEM, node.vc_label, [node_id])
        self.cp.emit("orchestrator.leave", vcluster=vcluster_name, node=node_id, reason=reason)
        return report

    # -- persistence ---------------------------------------------------
    def to_dict(self) -> dict:
        return {name: s.to_dict() for name, s in sorted(self.states.items())}

    def load(self, data: dict) -> None:
        self.states = {name: AppliedState.from_dict(d) for name, d in data.items()}
        self.node_index = {n: name for name, s in self.states.items() for n in s.members}
