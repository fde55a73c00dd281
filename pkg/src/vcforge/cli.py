"""vcforge command line.

Every invocation loads the state directory, performs one operation,
and persists atomically (write a new file, then rename). Exit status is
0 on success, 1 on a domain error or failed pipeline outcome, 2 on
usage errors and 3 when access is denied.
"""

from __future__ import annotations

import json
import os
import sys
from functools import wraps
from pathlib import Path

import click
from filelock import FileLock, Timeout

from .canonical import canonical_json, load_toml
from .controlplane import ControlPlane
from .errors import (
    ManifestError,
    StateLocked,
    StateNotInitialized,
    UsageError,
    VcforgeError,
)
from .inventory import HwKind
from .manifest import VServiceRecipe, manifest_json, parse_manifest
from .scenario import BUILTIN, data_text, load_fixture, run_scenario
from .tenancy import Resource, Tenancy

CONTEXT_SETTINGS = dict(help_option_names=["-h", "--help"], max_content_width=100)
STATE_FILE = "state.json"


# ---------------------------------------------------------------------------
# state directory
# ---------------------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class StateDir:
    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def state_file(self) -> Path:
        return self.root / STATE_FILE

    def exists(self) -> bool:
        return self.state_file.exists()

    def lock(self, wait: bool) -> FileLock:
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / ".lock"), timeout=-1 if wait else 0)

    def load(self) -> ControlPlane:
        if not self.exists():
            raise StateNotInitialized(f"{self.root} is not initialized; run `vcforge init` first")
        return ControlPlane.from_dict(json.loads(self.state_file.read_text()))

    def save(self, cp: ControlPlane) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "logs").mkdir(exist_ok=True)
        cp.registry.dump_dir(self.root / "registry")
        self._append(self.root / "logs" / "events.jsonl", cp.events)
        self._append(self.root / "logs" / "runs.jsonl", cp.pipelines.run_log)
        atomic_write(self.state_file, canonical_json(cp.to_dict()))

    @staticmethod
    def _append(path: Path, records: list[dict]) -> None:
        if not records:
            return
        if path.exists():
            # drop a line torn by an interrupted earlier append
            with open(path, "rb+") as fh:
                data = fh.read()
                if data and not data.endswith(b"\n"):
                    fh.truncate(data.rfind(b"\n") + 1)
        with open(path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(canonical_json(r, pretty=False) for r in records))


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


class Ctx:
    def __init__(self, principal_id: str | None, as_json: bool, state_dir: str, wait: bool):
        self.principal_id = principal_id
        self.as_json = as_json
        self.state = StateDir(Path(state_dir))
        self.wait = wait

    def emit(self, data, text: str | None = None) -> None:
        if self.as_json:
            click.echo(canonical_json(data), nl=False)
        else:
            click.echo(text if text is not None else canonical_json(data), nl=text is not None)

    def fail(self, exc: VcforgeError) -> None:
        if self.as_json:
            click.echo(canonical_json({"error": exc.to_dict()}), nl=False)
        else:
            click.echo(f"error: {exc.code}: {exc.message}", err=True)
        sys.exit(exc.exit_code)


def _guard(fn):
    """Map domain errors to exit codes."""

    @wraps(fn)
    def wrapper(*args, **kwargs):
        ctx: Ctx = click.get_current_context().obj
        try:
            return fn(*args, **kwargs)
        except VcforgeError as exc:
            ctx.fail(exc)

    return wrapper


def stateful(mutating: bool = True):
    """Load state under the directory lock, call, and persist on success."""

    def deco(fn):
        @wraps(fn)
        @_guard
        def wrapper(*args, **kwargs):
            ctx: Ctx = click.get_current_context().obj
            try:
                with ctx.state.lock(ctx.wait):
                    cp = ctx.state.load()
                    if ctx.principal_id is None:
                        raise UsageError("this command needs --as <principal-id> (or VCFORGE_AS)")
                    principal = cp.tenancy.principal(ctx.principal_id)
                    ok = True
                    try:
                        ok = fn(ctx, cp, principal, *args, **kwargs)
                    finally:
                        # state changes made before a failure are real and must persist
                        if mutating:
                            ctx.state.save(cp)
            except Timeout:
                raise StateLocked(f"{ctx.state.root} is locked by another vcforge process (use --wait)") from None
            if ok is False:
                sys.exit(1)

        return wrapper

    return deco


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


# ---------------------------------------------------------------------------
# root
# ---------------------------------------------------------------------------


@click.group(context_settings=CONTEXT_SETTINGS)
@click.option("--as", "principal_id", envvar="VCFORGE_AS", help="Principal id to act as (env VCFORGE_AS).")
@click.option("--json", "as_json", is_flag=True, help="Emit canonical JSON.")
@click.option("--state-dir", default=".vcforge", show_default=True, envvar="VCFORGE_STATE_DIR", help="State directory.")
@click.option("--wait", is_flag=True, help="Wait for the state-directory lock instead of failing fast.")
@click.pass_context
def main(ctx, principal_id, as_json, state_dir, wait):
    """Control plane for software-defined vClusters on a shared HPC fleet."""
    ctx.obj = Ctx(principal_id, as_json, state_dir, wait)


@main.command()
@click.option("--inventory", "inventory", default=BUILTIN, show_default=True, help="Inventory fixture TOML.")
@click.option("--principals", "principals", default=BUILTIN, show_default=True, help="principals.toml.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--boot/--no-boot", default=True, show_default=True, help="Stage a base image and power nodes on.")
@click.option("--force", is_flag=True, help="Overwrite an existing state directory.")
@click.pass_obj
@_guard
def init(ctx: Ctx, inventory, principals, seed, boot, force):
    """Create a state directory from an inventory fixture and principals file."""
    if ctx.state.exists() and not force:
        raise UsageError(f"{ctx.state.root} already initialized (use --force)")
    text = data_text("principals.toml") if principals == BUILTIN else _read(principals)
    tenancy = Tenancy.from_toml(text)
    fixture = load_fixture(inventory) if inventory == BUILTIN else load_toml(_read(inventory))
    with ctx.state.lock(ctx.wait):
        cp = ControlPlane(seed, tenancy)
        summary = cp.inventory.load_inventory(fixture)
        if boot:
            cp.boot_all()
        ctx.state.root.mkdir(parents=True, exist_ok=True)
        atomic_write(ctx.state.root / "principals.toml", text)
        ctx.state.save(cp)
    s = summary.to_dict()
    ctx.emit(s, f"initialized {ctx.state.root}: {s['total_nodes']} nodes, {s['total_gpus']} GPUs")


# ---------------------------------------------------------------------------
# inventory
# ---------------------------------------------------------------------------


@main.group()
def inv():
    """Nodes, sites, labels, power and partitions."""


@inv.command("sites")
@stateful(mutating=False)
def inv_sites(ctx, cp, principal):
    """List sites and their backend dialects."""
    sites = [s.to_dict() | {"node_ids": len(s.node_ids)} for _, s in sorted(cp.inventory.sites.items())]
    ctx.emit(sites, "\n".join(f"{s['site_id']:<12} {s['dialect']:<10} nodes={s['node_ids']}" for s in sites))


@inv.command("nodes")
@click.option("--label", help="Only nodes carrying this label.")
@click.option("--kind", type=click.Choice([k.value for k in HwKind]), help="Only nodes of this hardware kind.")
@stateful(mutating=False)
def inv_nodes(ctx, cp, principal, label, kind):
    """List nodes, or print the summary counts with no filter."""
    if label is None and kind is None:
        s = cp.inventory.summary().to_dict()
        lines = [f"total nodes {s['total_nodes']}, GPUs {s['total_gpus']}"]
        lines += [f"  {k:<12} {n:>5} nodes {s['gpus_per_kind'][k]:>6} GPUs" for k, n in s["per_kind"].items()]
        ctx.emit(s, "\n".join(lines))
        return
    nodes = [
        n.to_dict()
        for _, n in sorted(cp.inventory.nodes.items())
        if (label is None or label in n.labels) and (kind is None or n.hw_kind.value == kind)
    ]
    for d in nodes:
        d["vetting"] = cp.vetting.state_of(d["node_id"]).state.value
    ctx.emit(nodes, "\n".join(f"{d['node_id']:<14} {d['power']:<8} {d['vetting']:<10} {','.join(d['labels'])}" for d in nodes))


@inv.command("groups")
@stateful(mutating=False)
def inv_groups(ctx, cp, principal):
    """List labels and their members."""
    groups = [g.to_dict() for _, g in sorted(cp.inventory.groups.items())]
    ctx.emit(groups, "\n".join(f"{g['label']:<20} tenant={g['tenant']} members={len(g['member_ids'])}" for g in groups))


@inv.command("label")
@click.argument("label")
@click.argument("nodes", nargs=-1)
@click.option("--kind", type=click.Choice([k.value for k in HwKind]), help="Select unlabeled nodes of this kind.")
@click.option("--count", type=int, help="How many nodes to select with --kind.")
@click.option("--tenant", help="Owner tenant for a new label (InfraAdmin).")
@stateful()
def inv_label(ctx, cp, principal, label, nodes, kind, count, tenant):
    """Attach LABEL to NODES (or to --count unlabeled nodes of --kind)."""
    if not nodes:
        if kind is None or count is None:
            raise UsageError("give node ids or --kind with --count")
        nodes = [
            n.node_id for _, n in sorted(cp.inventory.nodes.items())
            if n.hw_kind.value == kind and n.vc_label is None
        ][:count]
        if len(nodes) < count:
            raise UsageError(f"only {len(nodes)} unlabeled {kind} nodes are available, {count} requested")
    group = cp.inventory.assign_group(principal, label, list(nodes), tenant=tenant)
    ctx.emit(group.to_dict(), f"{label}: {len(group.member_ids)} members")


@inv.command("unlabel")
@click.argument("label")
@click.argument("nodes", nargs=-1, required=True)
@stateful()
def inv_unlabel(ctx, cp, principal, label, nodes):
    """Detach LABEL from NODES."""
    group = cp.inventory.unassign(principal, label, list(nodes))
    ctx.emit(group.to_dict(), f"{label}: {len(group.member_ids)} members")


@inv.command("power")
@click.argument("label")
@click.argument("action", type=click.Choice(["Boot", "Reboot", "Off"], case_sensitive=False))
@stateful()
def inv_power(ctx, cp, principal, label, action):
    """Power every node of LABEL (Boot, Reboot, Off)."""
    report = cp.inventory.node_power(principal, label, action.capitalize())
    ctx.emit(report.to_dict(), f"{action} {label}: {len(report.outcomes)} nodes, {len(report.failures)} failed")
    return report.ok


@inv.command("partition")
@click.argument("label")
@click.argument("partition", required=False)
@stateful()
def inv_partition(ctx, cp, principal, label, partition):
    """Put the members of LABEL into network PARTITION (omit to reset)."""
    report = cp.inventory.set_partition(principal, label, partition)
    ctx.emit(report.to_dict(), f"{label} -> partition {partition}")


@inv.command("image")
@click.argument("label")
@click.argument("image")
@stateful()
def inv_image(ctx, cp, principal, label, image):
    """Stage base IMAGE on the members of LABEL."""
    report = cp.inventory.stage_image(principal, label, image)
    ctx.emit(report.to_dict(), f"{label}: image {image} staged on {len(report.outcomes)} nodes")


# ---------------------------------------------------------------------------
# manifests and registry
# ---------------------------------------------------------------------------


@main.group()
def manifest():
    """Parse, validate and hash vCluster manifests."""


def _parse_file(path: str):
    return parse_manifest(_read(path))


@manifest.command("validate")
@click.argument("path", type=click.Path())
@click.pass_obj
def manifest_validate(ctx: Ctx, path):
    """Validate a manifest and print its digest."""
    try:
        m = _parse_file(path)
    except ManifestError as exc:
        if ctx.as_json:
            click.echo(canonical_json({"error": exc.to_dict(), "violations": [v.to_dict() for v in exc.violations]}), nl=False)
        else:
            for v in exc.violations:
                click.echo(f"{path}: {v}", err=True)
        sys.exit(exc.exit_code)
    except VcforgeError as exc:
        ctx.fail(exc)
    ctx.emit({"valid": True, "vcluster": m.vcluster_name, "digest": m.digest}, f"{m.vcluster_name} valid, digest {m.digest}")


@manifest.command("hash")
@click.argument("path", type=click.Path())
@click.pass_obj
@_guard
def manifest_hash(ctx: Ctx, path):
    """Print the content digest of a manifest."""
    m = _parse_file(path)
    ctx.emit({"digest": m.digest}, m.digest)


@manifest.command("show")
@click.argument("path", type=click.Path())
@click.pass_obj
@_guard
def manifest_show(ctx: Ctx, path):
    """Print the canonical form of a manifest."""
    m = _parse_file(path)
    text = manifest_json(m)
    ctx.emit(json.loads(text), text.rstrip("\n"))


@main.group()
def registry():
    """The vService recipe registry."""


@registry.command("publish")
@click.argument("path", type=click.Path())
@stateful()
def registry_publish(ctx, cp, principal, path):
    """Publish a recipe TOML file as a new version."""
    recipe = VServiceRecipe.from_toml(_read(path))
    added = cp.publish_recipe(principal, recipe)
    verb = "published" if added else "already present"
    ctx.emit({"recipe": recipe.name, "version": recipe.version, "added": added}, f"{recipe.name}@{recipe.version} {verb}")


@registry.command("list")
@stateful(mutating=False)
def registry_list(ctx, cp, principal):
    """List recipes and their versions."""
    rows = [{"name": n, "versions": cp.registry.versions(n)} for n in cp.registry.names()]
    ctx.emit(rows, "\n".join(f"{r['name']:<22} {' '.join(r['versions'])}" for r in rows))


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


@main.group()
def pipeline():
    """Integration and production pipelines."""


@pipeline.command("integrate")
@click.argument("path", type=click.Path())
@click.option("--nodes", "count", default=1, show_default=True, type=int, help="Test node count.")
@stateful()
def pipeline_integrate(ctx, cp, principal, path, count):
    """Run the integration pipeline and record a gate for the manifest digest."""
    gate = cp.pipelines.run_integration(principal, _parse_file(path), count)
    ctx.emit(gate.to_dict(), f"gate {gate.digest[:12]}: {gate.verdict.value} on {','.join(gate.test_node_ids)}")
    return gate.verdict.value == "Passed"


@pipeline.command("deploy")
@click.argument("vcluster")
@click.argument("path", type=click.Path())
@stateful()
def pipeline_deploy(ctx, cp, principal, vcluster, path):
    """Deploy a gated manifest to VCLUSTER."""
    run = cp.pipelines.run_production(principal, vcluster, _parse_file(path))
    ctx.emit(run.to_dict(), f"{run.run_id} {run.kind.value} {vcluster}: {run.outcome}")
    return run.succeeded


@main.group()
def update():
    """Updates of running vClusters."""


@update.command("rolling")
@click.argument("vcluster")
@click.argument("path", type=click.Path())
@click.option("--batch", "batch", required=True, type=int, help="Nodes per batch.")
@stateful()
def update_rolling(ctx, cp, principal, vcluster, path, batch):
    """Move VCLUSTER to a new gated manifest batch by batch."""
    run = cp.pipelines.rolling_update(principal, vcluster, _parse_file(path), batch, wait=True)
    ctx.emit(run.to_dict(), f"{run.run_id} Rolling {vcluster}: {run.outcome} in {len(run.plan['batches'])} batches")
    return run.succeeded


@main.command()
@click.argument("vcluster")
@click.option("--batch", "batch", type=int, help="Nodes per batch (default: a tenth of the members).")
@stateful()
def rollback(ctx, cp, principal, vcluster, batch):
    """Return VCLUSTER to its previous manifest."""
    run = cp.pipelines.rollback(principal, vcluster, batch, wait=True)
    ctx.emit(run.to_dict(), f"{run.run_id} Rollback {vcluster}: {run.outcome}")
    return run.succeeded


@main.command()
@click.argument("vcluster")
@click.option("--plan", "show_plan", is_flag=True, help="Also print the plan that would converge the drift.")
@stateful(mutating=False)
def status(ctx, cp, principal, vcluster, show_plan):
    """Report drift between applied and desired state of VCLUSTER."""
    report, plan = cp.orchestrator.reconcile(principal, vcluster, dry_run=True)
    data = report.to_dict()
    if show_plan:
        data["plan"] = plan.to_dict()
    lines = [f"{vcluster}: {'no drift' if report.empty else f'{len(report.entries)} drift entries'}"]
    lines += [f"  {e.target:<16} {e.classification.value:<14} expected={e.expected} found={e.found}" for e in report.entries]
    if show_plan:
        lines += [f"  plan {s.target} {s.action} {s.recipe}@{s.version} {s.hook}" for s in plan.steps]
    ctx.emit(data, "\n".join(lines))


@main.command()
@click.argument("vcluster")
@stateful()
def reconcile(ctx, cp, principal, vcluster):
    """Apply the plan that converges VCLUSTER to its gated manifest."""
    report, plan = cp.orchestrator.reconcile(principal, vcluster, dry_run=False)
    ctx.emit({"drift": report.to_dict(), "plan": plan.to_dict()}, f"{vcluster}: applied {len(plan.steps)} steps")


# ---------------------------------------------------------------------------
# vetting, jobs, simulation
# ---------------------------------------------------------------------------


@main.group()
def vet():
    """Node health, repair tickets and reintegration."""


@vet.command("status")
@click.argument("node", required=False)
@stateful(mutating=False)
def vet_status(ctx, cp, principal, node):
    """Vetting state of NODE, or counts and open tickets."""
    if node:
        vs = cp.vetting.state_of(node)
        data = vs.to_dict()
        if vs.ticket:
            data["ticket_detail"] = cp.vetting.tickets[vs.ticket].to_dict()
        ctx.emit(data, f"{node}: {vs.state.value} attempts={vs.reboot_attempts} ticket={vs.ticket}")
        return
    tickets = [t.to_dict() for _, t in sorted(cp.vetting.tickets.items())]
    data = {"counts": cp.vetting.summary(), "tickets": tickets}
    lines = [" ".join(f"{k}={v}" for k, v in data["counts"].items())]
    lines += [f"  {t['ticket_id']} {t['node_id']:<14} {t['status']}" for t in tickets]
    ctx.emit(data, "\n".join(lines))


@vet.command("repair-done")
@click.argument("ticket")
@stateful()
def vet_repair_done(ctx, cp, principal, ticket):
    """Mark a repair ticket as repaired."""
    t = cp.vetting.repair_done(principal, ticket)
    ctx.emit(t.to_dict(), f"{ticket}: {t.status.value}")


@vet.command("reintegrate")
@click.argument("ticket")
@stateful()
def vet_reintegrate(ctx, cp, principal, ticket):
    """Run the reintegration pipeline for a repaired node."""
    vs = cp.vetting.reintegrate_node(principal, ticket, wait=True)
    ctx.emit(vs.to_dict(), f"{vs.node_id}: {vs.state.value}")
    return vs.state.value == "Healthy"


@main.group()
def job():
    """Simulated jobs."""


@job.command("submit")
@click.argument("vcluster")
@click.option("--nodes", "nodes", required=True, type=int)
@click.option("--duration", "duration", required=True, type=int, help="Ticks.")
@stateful()
def job_submit(ctx, cp, principal, vcluster, nodes, duration):
    """Queue a job on VCLUSTER."""
    j = cp.fleet.submit_job(principal, vcluster, nodes, duration)
    ctx.emit(j.to_dict(), f"{j.job_id} queued")


@main.group()
def sim():
    """Deterministic simulation."""


@sim.command("run")
@click.argument("path", type=click.Path())
@click.option("--seed", type=int, help="Override the scenario seed.")
@click.option("--log", "log_path", type=click.Path(), help="Write the JSON-lines event log here.")
@click.option("--snapshot", "snap_path", type=click.Path(), help="Write the final canonical snapshot here.")
@click.pass_obj
@_guard
def sim_run(ctx: Ctx, path, seed, log_path, snap_path):
    """Run a scenario file and print (or write) its event log."""
    result = run_scenario(_read(path), seed=seed, base=Path(path).resolve().parent)
    if log_path:
        atomic_write(Path(log_path), result.event_log)
    if snap_path:
        atomic_write(Path(snap_path), canonical_json(result.snapshot))
    if ctx.as_json:
        click.echo(canonical_json({"events": len(result.events), "errors": result.errors}), nl=False)
    elif not log_path:
        click.echo(result.event_log, nl=False)
    for err in result.errors:
        click.echo(f"step {err['index']} ({err['command']}): {err['code']}: {err['message']}", err=True)
    sys.exit(0 if result.ok else 1)


@sim.command("step")
@click.option("--ticks", default=1, show_default=True, type=int)
@stateful()
def sim_step(ctx, cp, principal, ticks):
    """Advance the simulation clock of the state directory."""
    cp.tenancy.require(principal, "sim.fault", Resource("sim", "clock"))
    cp.run(ticks)
    ctx.emit({"tick": cp.clock.tick}, f"tick {cp.clock.tick}")


if __name__ == "__main__":  # pragma: no cover
    main()
