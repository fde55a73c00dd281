"""Shared builders for the test suite."""

from __future__ import annotations

from vcforge.controlplane import ControlPlane
from vcforge.manifest import parse_manifest
from vcforge.scenario import BUILTIN, data_text, load_fixture, load_principals

REPO = "https://git.example.org/vservices"


def small_fixture(gh200: int = 24, rome: int = 8, a100: int = 4, delay: int = 2) -> dict:
    """Two sites, one per dialect, shaped like the real fleet but small."""
    return {
        "sites": [
            {"site_id": "alps-a", "dialect": "DialectA"},
            {"site_id": "alps-b", "dialect": "DialectB", "power_delay": delay},
        ],
        "nodes": [
            {"site": "alps-a", "hw_kind": "gpu-gh200", "count": gh200, "gpus_per_node": 4, "prefix": "gh200-"},
            {"site": "alps-b", "hw_kind": "cpu-rome", "count": rome, "gpus_per_node": 0, "prefix": "rome"},
            {"site": "alps-a", "hw_kind": "gpu-a100", "count": a100, "gpus_per_node": 4, "prefix": "a100-"},
        ],
    }


def make_cp(seed: int = 0, fixture: dict | str | None = None, boot: bool = True, **kw) -> ControlPlane:
    cp = ControlPlane(seed, load_principals(BUILTIN), **kw)
    if fixture == BUILTIN:
        fixture = load_fixture(BUILTIN)
    cp.inventory.load_inventory(fixture if fixture is not None else small_fixture())
    if boot:
        cp.boot_all()
    return cp


def who(cp: ControlPlane, principal_id: str):
    return cp.tenancy.principal(principal_id)


def manifest_text(name: str, services: dict[str, str], label: str | None = None, configs: dict | None = None) -> str:
    """Build a manifest. The first service listed carries hsm_groups."""
    configs = dict(configs or {})
    lines = [f'name = "{name}"', ""]
    for i, (svc, version) in enumerate(services.items()):
        cfg = dict(configs.get(svc, {}))
        if i == 0:
            cfg["hsm_groups"] = [label or name]
        lines.append("[[vservice]]")
        lines.append(f'name = "{svc}"')
        lines.append(f'source = {{ repo = "{REPO}/{svc}.git", version = "{version}" }}')
        if cfg:
            lines.append("config = { " + ", ".join(f"{k} = {_toml(v)}" for k, v in cfg.items()) + " }")
        lines.append("")
    return "\n".join(lines)


def _toml(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml(x) for x in v) + "]"
    return '"' + str(v) + '"'


BASE_SERVICES = {
    "vs-cscs-config": "2.0.1",
    "vs-slurm": "23.11.0",
    "vs-storage": "1.0.0",
    "vs-node-validator": "1.0.0",
}
BASE_CONFIGS = {"vs-storage": {"mounts": ["/capstor", "/users"]}}


def base_manifest(name: str = "daint", label: str | None = None, **overrides):
    services = dict(BASE_SERVICES, **{k.replace("_", "-"): v for k, v in overrides.items()})
    return parse_manifest(manifest_text(name, services, label, BASE_CONFIGS))


def daint_manifest():
    return parse_manifest(data_text("daint.toml"))


def deploy(cp: ControlPlane, vc: str = "daint", n: int = 8, manifest=None, kind: str = "gpu-gh200",
           admin: str = "cscs-admin", pe: str = "cscs-pe"):
    """Label n idle nodes, gate the manifest and deploy it."""
    manifest = manifest if manifest is not None else base_manifest(vc)
    label = manifest.hsm_groups[0]
    nodes = [
        nid for nid, node in sorted(cp.inventory.nodes.items())
        if node.hw_kind.value == kind and node.vc_label is None
    ][:n]
    assert len(nodes) == n, f"fixture has only {len(nodes)} free {kind} nodes"
    cp.inventory.assign_group(who(cp, admin), label, nodes)
    gate = cp.pipelines.run_integration(who(cp, pe), manifest)
    assert gate.verdict.value == "Passed", gate.to_dict()
    run = cp.pipelines.run_production(who(cp, pe), vc, manifest)
    assert run.succeeded, run.to_dict()
    return manifest, nodes


def gate(cp: ControlPlane, manifest, pe: str = "cscs-pe"):
    g = cp.pipelines.run_integration(who(cp, pe), manifest)
    assert g.verdict.value == "Passed", g.to_dict()
    return g
