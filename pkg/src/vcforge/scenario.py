"""Scripted scenarios: a seed, an inventory, principals and timed commands.

A scenario document is JSON::

    {"seed": 7, "inventory": "builtin:alps", "principals": "builtin:alps",
     "ticks": 40, "steps": [{"at": 0, "as": "admin", "command": "inv label",
                             "args": {"label": "vc:daint", "nodes": ["gh200-0001"]}}]}

Fixture bring-up (image staging, power on) happens before tick 0 and is
not part of the event log. Step ``at`` values are ticks relative to the
start of the scenario; steps at tick t run before the t+1-th step of the
clock. A failing step is recorded as an ``error`` event and the run goes
on.
"""

from __future__ import annotations

import json
from collections.abc import Callable
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .canonical import SeededStreams, canonical_json, load_toml
from .catalog import extra_recipe
from .controlplane import ControlPlane
from .errors import ScenarioParseError, UnknownVCluster, UsageError, VcforgeError
from .inventory import HwKind
from .manifest import VServiceRecipe, parse_manifest
from .orchestrator import _entry_hash
from .simfleet import FaultSpec
from .tenancy import Principal, Resource, Tenancy

BUILTIN = "builtin:alps"


def data_text(name: str) -> str:
    return (resources.files("vcforge") / "data" / name).read_text()


def load_fixture(ref: Any, base: Path | None = None) -> dict:
    if isinstance(ref, dict):
        return ref
    if ref == BUILTIN:
        return load_toml(data_text("alps.toml"))
    return load_toml(_resolve_path(ref, base).read_text())


def load_principals(ref: Any, base: Path | None = None) -> Tenancy:
    if isinstance(ref, dict):
        return Tenancy.from_dict(ref)
    if ref == BUILTIN:
        return Tenancy.from_toml(data_text("principals.toml"))
    return Tenancy.from_toml(_resolve_path(ref, base).read_text())


def _resolve_path(ref: str, base: Path | None) -> Path:
    path = Path(ref)
    if not path.is_absolute() and base is not None:
        path = base / path
    if not path.exists():
        raise ScenarioParseError(f"referenced file {ref} does not exist")
    return path


def _manifest(arg: Any, base: Path | None):
    if isinstance(arg, dict):
        arg = arg["toml"]
    if "\n" not in arg and arg.endswith(".toml"):
        arg = _resolve_path(arg, base).read_text()
    return parse_manifest(arg)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _nodes(cp: ControlPlane, args: dict) -> list[str]:
    if "nodes" in args:
        return list(args["nodes"])
    sel = args.get("select") or {}
    kind = HwKind(sel["hw_kind"]) if "hw_kind" in sel else None
    chosen = [
        n.node_id
        for n in sorted(cp.inventory.nodes.values(), key=lambda n: n.node_id)
        if (kind is None or n.hw_kind is kind) and (not sel.get("unlabeled") or n.vc_label is None)
    ]
    start = int(sel.get("offset", 0))
    count = sel.get("count")
    return chosen[start : start + int(count)] if count is not None else chosen[start:]


def execute(cp: ControlPlane, principal: Principal, command: str, args: dict, base: Path | None = None) -> Any:
    """Run one CLI-equivalent command against a control plane."""
    inv, pipes, orch, vet, fleet = cp.inventory, cp.pipelines, cp.orchestrator, cp.vetting, cp.fleet
    wait = bool(args.get("wait", False))
    if command == "inv label":
        return inv.assign_group(principal, args["label"], _nodes(cp, args), tenant=args.get("tenant")).to_dict()
    if command == "inv unlabel":
        return inv.unassign(principal, args["label"], _nodes(cp, args)).to_dict()
    if command == "inv power":
        return inv.node_power(principal, args["label"], args["action"]).to_dict()
    if command == "inv partition":
        return inv.set_partition(principal, args["label"], args.get("partition")).to_dict()
    if command == "inv image":
        return inv.stage_image(principal, args["label"], args.get("image")).to_dict()
    if command == "registry publish":
        recipe = args["recipe"]
        recipe = VServiceRecipe.from_dict(recipe) if isinstance(recipe, dict) else VServiceRecipe.from_toml(recipe)
        return cp.publish_recipe(principal, recipe)
    if command == "pipeline integrate":
        return pipes.run_integration(principal, _manifest(args["manifest"], base), int(args.get("nodes", 1))).to_dict()
    if command == "pipeline deploy":
        return pipes.run_production(principal, args["vcluster"], _manifest(args["manifest"], base)).to_dict()
    if command == "update rolling":
        m = _manifest(args["manifest"], base)
        return pipes.rolling_update(principal, args["vcluster"], m, int(args["batch"]), wait=wait).to_dict()
    if command == "rollback":
        batch = args.get("batch")
        return pipes.rollback(principal, args["vcluster"], int(batch) if batch else None, wait=wait).to_dict()
    if command == "reconcile":
        report, plan = orch.reconcile(principal, args["vcluster"], dry_run=bool(args.get("dry_run", False)))
        return {"drift": report.to_dict(), "plan": plan.to_dict()}
    if command == "status":
        return orch.status(principal, args["vcluster"]).to_dict()
    if command == "vet repair-done":
        return vet.repair_done(principal, args["ticket"]).to_dict()
    if command == "vet reintegrate":
        return vet.reintegrate_node(principal, args["ticket"], wait=wait).to_dict()
    if command == "job submit":
        jobs = [
            fleet.submit_job(principal, args["vcluster"], int(args["nodes"]), int(args["duration"]))
            for _ in range(int(args.get("count", 1)))
        ]
        return [j.job_id for j in jobs]
    if command == "fault inject":
        return fleet.inject_fault(principal, FaultSpec(**args)).to_dict()
    if command == "fault clear":
        cp.tenancy.require(principal, "sim.fault", _res("fault", "sim"))
        fleet.clear_faults()
        return None
    if command == "sim tamper":
        cp.tenancy.require(principal, "sim.fault", _res("ledger", args["vcluster"]))
        return tamper_ledger(cp, args["vcluster"], args.get("target"), args.get("mode", "mutate"), int(args.get("salt", 0)))
    raise UsageError(f"unknown scenario command {command!r}")


def _res(kind, name):
    return Resource(kind, name)


# ---------------------------------------------------------------------------
# out-of-band edits (the thing drift detection must catch)
# ---------------------------------------------------------------------------

TAMPER_MODES = ("mutate", "drop", "forge", "rehash", "applied", "truncate")


def tamper_ledger(cp: ControlPlane, vcluster: str, target: str | None, mode: str, salt: int = 0) -> dict:
    """Edit a target's ledger or applied record behind the control plane's back."""
    state = cp.orchestrator.states.get(vcluster)
    if state is None:
        raise UnknownVCluster(f"unknown vCluster {vcluster}")
    targets = sorted(state.ledgers)
    if not targets:
        raise UsageError(f"{vcluster} has no ledgers to edit")
    if target is None:
        target = targets[salt % len(targets)]
    ledger = state.ledgers[target]
    entries = ledger.entries
    i = salt % len(entries)
    if mode == "mutate":
        entries[i] = dict(entries[i], version=entries[i]["version"] + "-hotfix")
    elif mode == "drop":
        del entries[i]
    elif mode == "forge":
        entries.append({"seq": len(entries), "hook": "install", "recipe": "vs-rogue", "version": "0.0.1",
                        "config": {}, "effects": [], "prev": ledger.head, "hash": ""})
        entries[-1]["hash"] = _entry_hash(entries[-1])
    elif mode == "rehash":
        # an edit whose author recomputes the whole chain
        entries[i] = dict(entries[i], config={"edited": salt})
        prev = "0" * 64
        for j, e in enumerate(entries):
            e = dict(e, seq=j, prev=prev)
            e["hash"] = _entry_hash(e)
            entries[j] = e
            prev = e["hash"]
    elif mode == "applied":
        recs = state.targets.setdefault(target, {})
        recs["vs-rogue"] = {"version": "0.0.1", "config": {}}
    elif mode == "truncate":
        del entries[i:]
    else:
        raise UsageError(f"unknown tamper mode {mode}")
    cp.emit("sim.tamper", vcluster=vcluster, target=target, mode=mode)
    return {"vcluster": vcluster, "target": target, "mode": mode}


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    events: list[dict]
    snapshot: dict
    errors: list[dict] = field(default_factory=list)
    cp: ControlPlane | None = field(default=None, repr=False)

    @property
    def event_log(self) -> str:
        return "".join(canonical_json(e, pretty=False) for e in self.events)

    @property
    def ok(self) -> bool:
        return not self.errors


def parse_scenario(doc: Any) -> dict:
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ScenarioParseError(f"scenario is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioParseError("scenario must be a JSON object")
    for key in ("seed", "inventory", "principals", "steps"):
        if key not in doc:
            raise ScenarioParseError(f"scenario lacks field {key!r}")
    if not isinstance(doc["steps"], list):
        raise ScenarioParseError("steps must be a list")
    for i, step in enumerate(doc["steps"]):
        if not isinstance(step, dict) or "at" not in step or "command" not in step:
            raise ScenarioParseError(f"step {i} needs 'at' and 'command'")
        if not isinstance(step["at"], int) or step["at"] < 0:
            raise ScenarioParseError(f"step {i}: 'at' must be a tick >= 0")
    return doc


def build(doc: dict, base: Path | None = None) -> ControlPlane:
    tenancy = load_principals(doc["principals"], base)
    cp = ControlPlane(int(doc["seed"]), tenancy, drain_budget=doc.get("drain_budget"))
    cp.inventory.load_inventory(load_fixture(doc["inventory"], base))
    if doc.get("boot", True):
        cp.boot_all(doc.get("image", "alps-base"))
    cp.events.clear()
    return cp


def run_scenario(
    doc: Any,
    seed: int | None = None,
    base: Path | None = None,
    on_tick: Callable[[ControlPlane], None] | None = None,
) -> ScenarioResult:
    doc = parse_scenario(doc)
    if seed is not None:
        doc = dict(doc, seed=seed)
    cp = build(doc, base)
    steps = sorted(enumerate(doc["steps"]), key=lambda p: (p[1]["at"], p[0]))
    last = max((s["at"] for _, s in steps), default=-1)
    ticks = int(doc.get("ticks", last + 1))
    errors: list[dict] = []
    pos = 0
    for t in range(ticks):
        while pos < len(steps) and steps[pos][1]["at"] <= t:
            i, step = steps[pos]
            pos += 1
            _run_step(cp, i, step, errors, base)
        cp.step()
        if on_tick is not None:
            on_tick(cp)
    while pos < len(steps):  # steps scheduled past the last tick still run
        i, step = steps[pos]
        pos += 1
        _run_step(cp, i, step, errors, base)
    if doc.get("settle"):
        cp.settle(int(doc.get("settle_max", 10_000)))
    assert all(a["tick"] <= b["tick"] for a, b in zip(cp.events, cp.events[1:])), "clock went backwards"
    return ScenarioResult(list(cp.events), cp.state_snapshot(), errors, cp)


def _run_step(cp: ControlPlane, i: int, step: dict, errors: list[dict], base: Path | None) -> None:
    try:
        principal = cp.tenancy.principal(step.get("as", "admin"))
        execute(cp, principal, step["command"], dict(step.get("args", {})), base)
        cp.emit("step", index=i, command=step["command"], ok=True)
    except VcforgeError as exc:
        err = {"index": i, "command": step["command"], **exc.to_dict()}
        errors.append(err)
        cp.emit("error", **err)


# ---------------------------------------------------------------------------
# paper-scale deployment
# ---------------------------------------------------------------------------

PAPER_TENANTS = {
    "cscs": "hpc-platform",
    "mch": "mch-icon-22",
    "psi": "merlin7",
    "swissai": "ml-platform",
    "cw": "cw-platform",
}

# (name, tenant, hw kind, node count); 16 vClusters covering the fixture
PAPER_VCLUSTERS = [
    ("daint", "cscs", "gpu-gh200", 1000),
    ("clariden", "swissai", "gpu-gh200", 800),
    ("bristen", "swissai", "gpu-gh200", 300),
    ("santis", "cw", "gpu-gh200", 250),
    ("todi", "cscs", "gpu-gh200", 200),
    ("starlex", "cscs", "gpu-gh200", 120),
    ("mch-icon-22", "mch", "gpu-gh200", 10),
    ("eiger", "cscs", "cpu-rome", 600),
    ("pilatus", "cscs", "cpu-rome", 200),
    ("merlin7", "psi", "cpu-rome", 200),
    ("balfrin", "mch", "gpu-a100", 136),
    ("tasna", "cw", "gpu-mi250x", 20),
    ("beverin", "cscs", "gpu-mi300a", 60),
    ("lumen", "swissai", "gpu-mi300a", 60),
    ("hohgant", "cscs", "gpu-gh200", 2),
    ("frontdoor", "cw", "gpu-a100", 4),
]

EXTRA_SERVICES = [f"vs-extra-{i:02d}" for i in range(1, 9)]


def _paper_manifest(name: str, n_services: int, rng: SeededStreams) -> str:
    core = {
        "vs-cscs-config": ("2.0.1", {"hsm_groups": [name]}),
        "vs-slurm": ("23.11.0", {}),
        "vs-storage": ("1.0.0", {"mounts": ["/capstor", f"/users/{name}"]}),
        "vs-node-validator": ("1.0.0", {}),
        "vs-network": ("1.0.0", {}),
        "vs-iam": ("1.0.0", {}),
        "vs-firecrest": ("1.0.0", {}),
        "vs-uenv": ("1.0.0", {}),
    }
    optional = ["vs-enroot", "vs-podman", "vs-pyxis", "vs-cdi", "vs-alpernetes"] + EXTRA_SERVICES
    refs = dict(core)
    while len(refs) < n_services:
        pick = optional[rng.randint(f"manifest:{name}", 0, len(optional) - 1)]
        refs.setdefault(pick, ("1.0.0", {}))
    lines = [f'name = "{name}"', ""]
    for svc, (version, config) in sorted(refs.items()):
        lines.append("[[vservice]]")
        lines.append(f'name = "{svc}"')
        lines.append(f'source = {{ repo = "https://git.example.org/vservices/{svc}.git", version = "{version}" }}')
        if config:
            body = ", ".join(f"{k} = {json.dumps(v)}" for k, v in sorted(config.items()))
            lines.append(f"config = {{ {body} }}")
        lines.append("")
    return "\n".join(lines)


def paper_scale_scenario(seed: int = 2025, jobs: int = 200) -> dict:
    """16 vClusters with 10-20 vServices each over the full fixture.

    Every vCluster goes through integrate -> deploy, one gets a rolling
    update, and a batch of jobs runs across the fleet.
    """
    rng = SeededStreams(seed)
    fixture = load_toml(data_text("alps.toml"))
    tenants = [
        {"id": t, "platform": p, "labels": [f"vc:{v[0]}" for v in PAPER_VCLUSTERS if v[1] == t]}
        for t, p in PAPER_TENANTS.items()
    ]
    principals = [{"id": "admin", "role": "InfraAdmin", "tenant": "*"},
                  {"id": "svc", "role": "ServiceManager", "tenant": "cscs"}]
    for t in PAPER_TENANTS:
        principals += [
            {"id": f"{t}-admin", "role": "TenantAdmin", "tenant": t},
            {"id": f"{t}-pe", "role": "PlatformEngineer", "tenant": t},
            {"id": f"{t}-user", "role": "Scientist", "tenant": t},
        ]
    steps: list[dict] = []
    for name in EXTRA_SERVICES:
        steps.append({"at": 0, "as": "svc", "command": "registry publish", "args": {"recipe": extra_recipe(name).to_dict()}})
    offsets: dict[str, int] = {}
    manifests = {}
    for name, tenant, kind, count in PAPER_VCLUSTERS:
        n_services = 10 + rng.randint("paper:services", 0, 10)
        text = _paper_manifest(name, n_services, rng)
        manifests[name] = text
        steps.append({
            "at": 0, "as": f"{tenant}-admin", "command": "inv label",
            "args": {"label": f"vc:{name}", "select": {"hw_kind": kind, "offset": offsets.get(kind, 0), "count": count}},
        })
        offsets[kind] = offsets.get(kind, 0) + count
        steps.append({"at": 1, "as": f"{tenant}-pe", "command": "pipeline integrate", "args": {"manifest": text, "nodes": 2}})
        steps.append({"at": 1, "as": f"{tenant}-pe", "command": "pipeline deploy", "args": {"vcluster": name, "manifest": text}})
    for name, tenant, kind, count in PAPER_VCLUSTERS:
        if count >= 10:
            steps.append({
                "at": 2, "as": f"{tenant}-user", "command": "job submit",
                "args": {"vcluster": name, "nodes": max(1, count // 20), "duration": 4, "count": max(1, jobs // 16)},
            })
    # a scheduler upgrade on one vCluster while jobs run
    upgraded = manifests["todi"].replace('version = "23.11.0"', 'version = "24.5.0"')
    steps.append({"at": 3, "as": "cscs-pe", "command": "pipeline integrate", "args": {"manifest": upgraded, "nodes": 2}})
    steps.append({"at": 3, "as": "cscs-pe", "command": "update rolling",
                  "args": {"vcluster": "todi", "manifest": upgraded, "batch": 20}})
    return {
        "seed": seed,
        "inventory": fixture,
        "principals": {"tenants": tenants, "principals": principals},
        "ticks": 60,
        "settle": True,
        "steps": steps,
    }


def paper_scale_counts(doc: dict) -> dict[str, int]:
    """vService count per vCluster in a paper-scale scenario."""
    out = {}
    for step in doc["steps"]:
        if step["command"] == "pipeline deploy":
            m = parse_manifest(step["args"]["manifest"])
            out[m.vcluster_name] = len(m.refs)
    return out
