"""Built-in vService recipes: the common service catalog.

Every recipe is a declarative stub; effects are recorded in node ledgers,
never executed.
"""

from __future__ import annotations

from .manifest import Effect, Registry, VServiceRecipe

E = Effect.make
R, S = "Resource", "Service"
BOTH = frozenset({R, S})

DEFAULT_HEALTH_CHECKS = ("node-alive", "gpu-link", "mem-ecc")


def _test(name: str, *checks: str) -> tuple[Effect, ...]:
    return tuple(E("FileWrite", f"/var/lib/vcforge/tests/{name}/{c}.result", check=c) for c in checks)


def _daemon(package: str, daemon: str, plane: str | None = None, version: str = "1.0.0") -> dict:
    extra = {"plane": plane} if plane else {}
    return {
        "install": (E("PackageAdd", package, version=version, **extra),),
        "configure": (E("FileWrite", f"/etc/{package}/{package}.conf", **extra),),
        "start": (E("DaemonStart", daemon, **extra),),
        "stop": (E("DaemonStop", daemon, **extra),),
        "remove": (E("PackageRemove", package, **extra),),
    }


def _slurm(version: str) -> VServiceRecipe:
    return VServiceRecipe(
        "vs-slurm",
        version,
        "Scheduler",
        BOTH,
        hooks={
            "install": (
                E("PackageAdd", "slurm", version=version),
                E("PackageAdd", "slurmdbd", version=version, plane=S),
            ),
            "configure": (E("FileWrite", "/etc/slurm/slurm.conf"),),
            "start": (
                E("DaemonStart", "slurmd", plane=R),
                E("DaemonStart", "slurmctld", plane=S),
                E("DaemonStart", "slurmdbd", plane=S),
                E("DaemonStart", "slurmrestd", plane=S),
            ),
            "stop": (
                E("DaemonStop", "slurmd", plane=R),
                E("DaemonStop", "slurmrestd", plane=S),
                E("DaemonStop", "slurmdbd", plane=S),
                E("DaemonStop", "slurmctld", plane=S),
            ),
            "remove": (E("PackageRemove", "slurmdbd", plane=S), E("PackageRemove", "slurm")),
            "test": _test("vs-slurm", "sinfo", "srun-hostname"),
        },
        description="Deploys Slurm, databases and rest service",
    )


def _storage(version: str) -> VServiceRecipe:
    return VServiceRecipe(
        "vs-storage",
        version,
        "Storage",
        frozenset({R}),
        hooks={
            "install": (E("PackageAdd", "lustre-client", version=version), E("Mount", "{item}", foreach="mounts")),
            "configure": (E("FileWrite", "/etc/fstab.d/vcforge"),),
            "remove": (E("Unmount", "{item}", foreach="mounts"), E("PackageRemove", "lustre-client")),
            "test": _test("vs-storage", "mounts-visible"),
        },
        description="Mounts and unmounts file systems",
    )


def _cscs_config(version: str) -> VServiceRecipe:
    return VServiceRecipe(
        "vs-cscs-config",
        version,
        "Plain",
        BOTH,
        hooks={
            "install": (E("FileWrite", "/etc/cscs/site.conf", version=version),),
            "configure": (E("FileWrite", "/etc/cscs/vcluster.conf"),),
            "remove": (E("FileWrite", "/etc/cscs/site.conf", state="absent"),),
            "test": _test("vs-cscs-config", "config-present"),
        },
        description="Applies specific CSCS configuration of Alps",
    )


def _node_validator(version: str) -> VServiceRecipe:
    return VServiceRecipe(
        "vs-node-validator",
        version,
        "Health",
        BOTH,
        hooks={
            "install": (E("PackageAdd", "reframe", version=version),)
            + tuple(E("RegisterHealthCheck", c, plane=R) for c in DEFAULT_HEALTH_CHECKS),
            "configure": (E("FileWrite", "/etc/reframe/checks.py"),),
            "start": (E("DaemonStart", "vetting-controller", plane=S),),
            "stop": (E("DaemonStop", "vetting-controller", plane=S),),
            "remove": (E("PackageRemove", "reframe"),),
            "test": _test("vs-node-validator", "reframe-selftest"),
        },
        description="Installs Reframe and runs health checks",
    )


def _simple(name, version, kind, planes, description, depends=(), package=None, daemon=None, plane=None, extra=None):
    hooks = _daemon(package or name.removeprefix("vs-"), daemon or (package or name.removeprefix("vs-")), plane, version)
    if extra:
        for hook, effects in extra.items():
            hooks[hook] = hooks.get(hook, ()) + effects
    hooks["test"] = _test(name, "smoke")
    return VServiceRecipe(name, version, kind, planes, depends, hooks, description)


def builtin_recipes() -> list[VServiceRecipe]:
    out = [
        _cscs_config("2.0.1"),
        _cscs_config("2.0.2"),
        _simple("vs-uenv", "1.0.0", "UserEnv", frozenset({R}), "Deploys uenv tool", package="uenv", daemon="squashfs-mount"),
        _simple("vs-enroot", "1.0.0", "ContainerRuntime", frozenset({R}), "Deploys enroot container engine", daemon="enroot-ready"),
        _simple("vs-podman", "1.0.0", "ContainerRuntime", frozenset({R}), "Deploys podman container engine"),
        _simple(
            "vs-pyxis", "1.0.0", "Plain", frozenset({R}), "Deploys Slurm plugin for containers",
            depends=("vs-slurm",), daemon="pyxis-spank",
        ),
        _simple("vs-cdi", "1.0.0", "ContainerRuntime", frozenset({R}), "Injects HPC devices within containers", daemon="cdi-generate"),
        _simple(
            "vs-firecrest", "1.0.0", "ApiGateway", frozenset({S}), "Sets up login nodes to accept API requests",
            depends=("vs-slurm",), extra={"start": (E("OpenEndpoint", "https://firecrest/api"),)},
        ),
        _simple("vs-iam", "1.0.0", "Identity", BOTH, "Sets up of SSSD for SSH access", package="sssd"),
        _simple(
            "vs-network", "1.0.0", "Network", frozenset({S}), "Sets up DNS and public IPs",
            package="dns-stub", extra={"start": (E("OpenEndpoint", "dns://vcluster"),)},
        ),
        _node_validator("1.0.0"),
        _slurm("23.11.0"),
        _slurm("24.5.0"),
        _storage("1.0.0"),
        _storage("1.1.0"),
        _simple(
            "vs-alpernetes", "1.0.0", "Plain", BOTH, "Connects Alps compute nodes to Kubernetes",
            package="kubelet",
        ),
    ]
    return out


def builtin_registry() -> Registry:
    return Registry(builtin_recipes())


def extra_recipe(name: str, version: str = "1.0.0", planes=frozenset({R})) -> VServiceRecipe:
    """A generic Plain recipe, used to pad test and scale manifests."""
    return _simple(name, version, "Plain", planes, f"generic service {name}")
