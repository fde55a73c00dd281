"""The control plane: one object owning every layer plus the simulation clock."""

from __future__ import annotations

from typing import Any

from .canonical import SeededStreams, canonical_json, digest_of
from .catalog import builtin_registry
from .concurrency import synchronized
from .inventory import Inventory, Power
from .manifest import (
    Registry,
    VClusterManifest,
    VServiceRecipe,
    parse_manifest,
    serialize_manifest,
)
from .orchestrator import Orchestrator
from .pipelines import Pipelines
from .simfleet import Fleet, SimClock
from .tenancy import Principal, Resource, Tenancy
from .vetting import MAX_REBOOT_ATTEMPTS, Vetting


class ControlPlane:
    def __init__(
        self,
        seed: int = 0,
        tenancy: Tenancy | None = None,
        registry: Registry | None = None,
        max_reboot_attempts: int = MAX_REBOOT_ATTEMPTS,
        drain_budget: int | None = None,
    ):
        self.clock = SimClock(0, int(seed))
        self.rng = SeededStreams(int(seed))
        self.tenancy = tenancy if tenancy is not None else Tenancy()
        self.inventory = Inventory(self.tenancy, self.clock)
        self.registry = registry if registry is not None else builtin_registry()
        self.manifests: dict[str, VClusterManifest] = {}
        self.events: list[dict] = []
        self.orchestrator = Orchestrator(self)
        self.pipelines = Pipelines(self) if drain_budget is None else Pipelines(self, drain_budget)
        self.vetting = Vetting(self, max_reboot_attempts)
        self.fleet = Fleet(self)

    @property
    def lock(self):
        """The single writer lock, shared with the inventory facade."""
        return self.inventory.lock

    # -- events and time -------------------------------------------------
    def emit(self, type_: str, **fields: Any) -> None:
        self.events.append({"tick": self.clock.tick, "type": type_, **fields})

    def event_log(self) -> str:
        return "".join(canonical_json(e, pretty=False) for e in self.events)

    @synchronized
    def step(self) -> int:
        self.clock.tick += 1
        now = self.clock.tick
        self.emit("tick")
        self.inventory.tick(now)
        self.fleet.fire_node_crashes(now)
        self.fleet.finish_jobs(now)
        self.vetting.step(now)
        self.pipelines.step(now)
        self.fleet.place_jobs(now)
        self.fleet.audit_running()
        return now

    def run(self, ticks: int) -> None:
        for _ in range(ticks):
            self.step()

    def busy(self) -> bool:
        """Anything still in flight that a later tick would change."""
        return bool(
            self.pipelines.driven
            or self.vetting.rebooting
            or self.vetting.recovery_queue
            or any(b.pending for b in self.inventory.backends.values())
        )

    def settle(self, max_ticks: int = 1000) -> int:
        n = 0
        while self.busy() and n < max_ticks:
            self.step()
            n += 1
        return n

    # -- ownership -----------------------------------------------------
    def vcluster_tenant(self, manifest: VClusterManifest) -> str | None:
        for label in manifest.hsm_groups:
            owner = self.inventory.label_tenant(label)
            if owner is not None:
                return owner
        return None

    @synchronized
    def publish_recipe(self, principal: Principal, recipe: VServiceRecipe) -> bool:
        self.tenancy.require(principal, "registry.publish", Resource("registry", f"{recipe.name}@{recipe.version}"))
        added = self.registry.publish(recipe)
        if added:
            self.emit("registry.publish", recipe=recipe.name, version=recipe.version)
        return added

    @synchronized
    def boot_all(self, image: str = "alps-base") -> None:
        """Stage an image on every node and power everything on (fixture bring-up)."""
        inv = self.inventory
        todo = sorted(n for n, node in inv.nodes.items() if node.base_image is None)
        if todo:
            inv._dispatch("image", todo, image=image)
        off = sorted(n for n, node in inv.nodes.items() if node.power is Power.Off)
        if off:
            inv.power_nodes(off, "Boot")
        self.settle()

    # -- audit ---------------------------------------------------------
    def check_invariants(self) -> list[str]:
        out = list(self.fleet.violations)
        out.extend(self.vetting.violations())
        healthy = lambda n: self.vetting.state_of(n).state.value == "Healthy"
        for vc, nodes in sorted(self.fleet.registered.items()):
            bad = sorted(n for n in nodes if not healthy(n))
            if bad:
                out.append(f"scheduler of {vc} registers non-Healthy nodes {bad}")
        for node_id, job_id in sorted(self.fleet.busy.items()):
            node = self.inventory.nodes[node_id]
            if not healthy(node_id):
                out.append(f"{job_id} on non-Healthy {node_id}")
            if node.partition_id != self.inventory.partitions.get(node.vc_label):
                out.append(f"{job_id} on {node_id} outside its vCluster partition")
        for node in self.inventory.nodes.values():
            vcs = [l for l in node.labels if l.startswith("vc:")]
            if len(vcs) > 1:
                out.append(f"node {node.node_id} carries several vc labels {sorted(vcs)}")
        for name, state in sorted(self.orchestrator.states.items()):
            for entry in state.commit_log:
                if entry["verdict"] != "Passed":
                    out.append(f"{name}: committed {entry['digest'][:12]} with verdict {entry['verdict']}")
            if state.last_applied_digest is not None:
                gate = self.pipelines.gates.get(state.last_applied_digest)
                if gate is None:
                    out.append(f"{name}: applied digest has no gate record")
                if not state.commit_log or state.commit_log[-1]["digest"] != state.last_applied_digest:
                    out.append(f"{name}: applied digest was not committed by a pipeline")
            if not self.pipelines.locked(name):
                sets = {
                    frozenset((r, v["version"], canonical_json(v["config"], pretty=False)) for r, v in state.targets[n].items())
                    for n in state.members
                }
                if len(sets) > 1:
                    out.append(f"{name}: member nodes have differing recipe sets")
            for node_id in state.members:
                if self.orchestrator.node_index.get(node_id) != name:
                    out.append(f"{name}: member {node_id} missing from node index")
        return out

    # -- snapshots -----------------------------------------------------
    def state_snapshot(self) -> dict:
        """Domain state without clock, rng and event history."""
        pipes = self.pipelines.to_dict()
        return {
            "inventory": self.inventory.snapshot(),
            "tenancy": self.tenancy.to_dict(),
            "orchestrator": self.orchestrator.to_dict(),
            "gates": pipes["gates"],
            "vetting": {
                "states": self.vetting.to_dict()["states"],
                "tickets": self.vetting.to_dict()["tickets"],
            },
            "fleet": {k: v for k, v in self.fleet.to_dict().items() if k != "faults"},
            "manifests": sorted(self.manifests),
        }

    def snapshot_digest(self) -> str:
        return digest_of(self.state_snapshot())

    def to_dict(self) -> dict:
        return {
            "clock": {"tick": self.clock.tick, "seed": self.clock.seed},
            "rng": self.rng.to_dict(),
            "tenancy": self.tenancy.to_dict(),
            "inventory": self.inventory.to_dict(),
            "registry": self.registry.to_dict(),
            "manifests": {d: serialize_manifest(m) for d, m in sorted(self.manifests.items())},
            "orchestrator": self.orchestrator.to_dict(),
            "pipelines": self.pipelines.to_dict(),
            "vetting": self.vetting.to_dict(),
            "fleet": self.fleet.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> ControlPlane:
        tenancy = Tenancy.from_dict(data["tenancy"])
        cp = cls(data["clock"]["seed"], tenancy, Registry.from_dict(data["registry"]))
        cp.clock.tick = data["clock"]["tick"]
        cp.rng = SeededStreams.from_dict(data["rng"])
        cp.inventory = Inventory.from_dict(data["inventory"], tenancy, cp.clock)
        for digest, text in data["manifests"].items():
            manifest = parse_manifest(text)
            cp.manifests[manifest.digest] = manifest
        cp.orchestrator.load(data["orchestrator"])
        cp.pipelines.load(data["pipelines"])
        cp.vetting.load(data["vetting"])
        cp.fleet.load(data["fleet"])
        return cp
