"""vCluster manifests, vService recipes and the versioned recipe registry.

A manifest is a TOML document with a top-level ``name`` and repeated
``[[vservice]]`` tables::

    name = "daint"

    [[vservice]]
    name = "vs-cscs-config"
    source = { repo = "https://git.example.org/vs-cscs-config.git", version = "2.0.1" }
    config = { hsm_groups = ["daint"] }

Exactly one vservice carries ``hsm_groups``; its values name the
infrastructure labels (``daint`` means label ``vc:daint``) whose members
form the resource plane.
"""

from __future__ import annotations

import enum
import heapq
import os
import re
import tempfile
from collections.abc import Iterable
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import tomli_w

from .canonical import TOMLDecodeError, canonical_json, digest_of, load_toml
from .errors import (
    DependencyCycle,
    DuplicateRecipeVersion,
    InvalidConfig,
    ManifestError,
    MissingDependency,
    RecipeError,
    UnknownRecipe,
)
from .inventory import cluster_label

SEMVER = re.compile(r"^(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)$")
LABEL_NAME = re.compile(r"^(vc:)?[a-z0-9][a-z0-9._-]*$")
HSM_GROUPS = "hsm_groups"

HOOKS = ("install", "configure", "start", "stop", "remove", "test")


class Kind(str, enum.Enum):
    Plain = "Plain"
    Scheduler = "Scheduler"
    Storage = "Storage"
    Network = "Network"
    Health = "Health"
    Identity = "Identity"
    ApiGateway = "ApiGateway"
    ContainerRuntime = "ContainerRuntime"
    UserEnv = "UserEnv"


class Verb(str, enum.Enum):
    PackageAdd = "PackageAdd"
    PackageRemove = "PackageRemove"
    FileWrite = "FileWrite"
    Mount = "Mount"
    Unmount = "Unmount"
    DaemonStart = "DaemonStart"
    DaemonStop = "DaemonStop"
    RegisterHealthCheck = "RegisterHealthCheck"
    OpenEndpoint = "OpenEndpoint"


# among otherwise independent recipes
_KIND_RANK = {Kind.Network: 0, Kind.Storage: 1, Kind.Scheduler: 2}


def parse_version(text: str) -> tuple[int, int, int]:
    m = SEMVER.match(text or "")
    if not m:
        raise ValueError(f"not a MAJOR.MINOR.PATCH version: {text!r}")
    return tuple(int(g) for g in m.groups())


@dataclass(frozen=True)
class Effect:
    """One declarative side effect of a hook.

    ``args["foreach"]`` names a config list; the effect is expanded once
    per item with ``{item}`` substituted in the subject. ``args["plane"]``
    restricts the effect to one plane.
    """

    verb: Verb
    subject: str
    args: tuple[tuple[str, Any], ...] = ()

    @classmethod
    def make(cls, verb: str | Verb, subject: str, **args) -> Effect:
        return cls(Verb(verb), subject, tuple(sorted(args.items())))

    @property
    def arg_map(self) -> dict:
        return dict(self.args)

    def to_dict(self) -> dict:
        out = {"verb": self.verb.value, "subject": self.subject}
        if self.args:
            out["args"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.args}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> Effect:
        args = {k: (tuple(v) if isinstance(v, list) else v) for k, v in (d.get("args") or {}).items()}
        return cls.make(d["verb"], d["subject"], **args)

    def expand(self, config: dict, plane: str) -> list[dict]:
        """Concrete effects for one plane under one vservice config."""
        args = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.args}
        only = args.pop("plane", None)
        if only is not None and only != plane:
            return []
        key = args.pop("foreach", None)
        if key is None:
            return [{"verb": self.verb.value, "subject": self.subject, "args": args}]
        items = config.get(key, [])
        if not isinstance(items, list):
            items = [items]
        out = []
        for item in items:
            subject = self.subject.replace("{item}", str(item))
            if self.verb in (Verb.Mount, Verb.Unmount) and not subject.startswith("/"):
                raise InvalidConfig(f"{self.verb.value} subject must be an absolute path, got {subject!r}")
            out.append({"verb": self.verb.value, "subject": subject, "args": args})
        return out


@dataclass
class VServiceRecipe:
    name: str
    version: str
    kind: Kind
    planes: frozenset[str]
    depends: tuple[str, ...] = ()
    hooks: dict[str, tuple[Effect, ...]] = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        self.kind = Kind(self.kind)
        self.planes = frozenset(self.planes)
        self.depends = tuple(self.depends)
        self.hooks = {h: tuple(self.hooks.get(h, ())) for h in HOOKS}
        problems = self.problems()
        if problems:
            raise RecipeError(f"recipe {self.name}@{self.version}: " + "; ".join(problems))

    @property
    def key(self) -> tuple[str, str]:
        return (self.name, self.version)

    @property
    def install_uses_config(self) -> bool:
        return any("foreach" in e.arg_map for e in self.hooks["install"])

    def problems(self) -> list[str]:
        out = []
        if not self.name:
            out.append("empty name")
        if not SEMVER.match(self.version or ""):
            out.append(f"bad version {self.version!r}")
        if not self.planes or not self.planes <= {"Resource", "Service"}:
            out.append(f"planes must be a non-empty subset of Resource/Service, got {sorted(self.planes)}")
        if self.name in self.depends:
            out.append("recipe depends on itself")
        if not self.hooks["test"]:
            out.append("test hook is empty")
        for hook, effects in self.hooks.items():
            for e in effects:
                if e.verb in (Verb.Mount, Verb.Unmount) and not e.subject.startswith(("/", "{item}")):
                    out.append(f"{hook}: {e.verb.value} subject {e.subject!r} is not an absolute path")
        if self.kind is Kind.Storage:
            mounts = {(e.subject, e.arg_map.get("foreach")) for e in self.hooks["install"] if e.verb is Verb.Mount}
            unmounts = {(e.subject, e.arg_map.get("foreach")) for e in self.hooks["remove"] if e.verb is Verb.Unmount}
            if not mounts:
                out.append("Storage recipe installs no Mount effect")
            if mounts != unmounts:
                out.append("Storage recipe Mount effects in install are not paired with Unmount effects in remove")
        return out

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "version": self.version,
            "kind": self.kind.value,
            "planes": sorted(self.planes),
            "depends": list(self.depends),
            "hooks": {h: [e.to_dict() for e in effects] for h, effects in self.hooks.items() if effects},
        }
        if self.description:
            out["description"] = self.description
        return out

    @classmethod
    def from_dict(cls, d: dict) -> VServiceRecipe:
        try:
            hooks = {h: tuple(Effect.from_dict(e) for e in effects) for h, effects in (d.get("hooks") or {}).items()}
            unknown = set(hooks) - set(HOOKS)
            if unknown:
                raise RecipeError(f"unknown hooks {sorted(unknown)}")
            return cls(
                name=d["name"],
                version=d["version"],
                kind=Kind(d["kind"]),
                planes=frozenset(d.get("planes", ["Resource"])),
                depends=tuple(d.get("depends", ())),
                hooks=hooks,
                description=d.get("description", ""),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise RecipeError(f"invalid recipe document: {exc}") from None

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> VServiceRecipe:
        try:
            return cls.from_dict(load_toml(text))
        except TOMLDecodeError as exc:
            raise RecipeError(f"recipe TOML: {exc}") from None

    def effects(self, hook: str, config: dict, plane: str) -> list[dict]:
        out = []
        for effect in self.hooks[hook]:
            out.extend(effect.expand(config, plane))
        return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    line: int | None = None
    column: int | None = None

    def __str__(self) -> str:
        where = f" (line {self.line}, column {self.column})" if self.line is not None else ""
        return f"{self.code}: {self.message}{where}"

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "line": self.line, "column": self.column}


def _freeze(value):
    if isinstance(value, list):
        return tuple(value)
    return value


@dataclass(frozen=True)
class VServiceRef:
    name: str
    source_repo: str
    source_version: str
    config: tuple[tuple[str, Any], ...] = ()

    @property
    def config_map(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.config}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "source": {"repo": self.source_repo, "version": self.source_version},
            "config": self.config_map,
        }


@dataclass(frozen=True)
class VClusterManifest:
    vcluster_name: str
    refs: tuple[VServiceRef, ...]

    @cached_property
    def digest(self) -> str:
        return manifest_digest(self)

    def ref(self, name: str) -> VServiceRef:
        for r in self.refs:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def hsm_groups(self) -> list[str]:
        """Infrastructure labels bound to this vCluster."""
        for r in self.refs:
            groups = r.config_map.get(HSM_GROUPS)
            if groups is not None:
                return [cluster_label(g) for g in groups]
        return []

    def to_dict(self) -> dict:
        return {"name": self.vcluster_name, "vservice": [r.to_dict() for r in self.refs]}


def _scalar_ok(v) -> bool:
    return isinstance(v, (str, int, float, bool))


def _vservice_lines(text: str) -> list[int]:
    return [i + 1 for i, line in enumerate(text.splitlines()) if re.match(r"\s*\[\[\s*vservice\s*\]\]", line)]


def parse_manifest(text: str) -> VClusterManifest:
    """Parse and validate a manifest, reporting every violation at once."""
    violations: list[Violation] = []
    if not text.strip():
        violations.append(Violation("SyntaxError", "empty document", 1, 1))
        violations.append(Violation("MissingHsmGroups", "no vservice carries hsm_groups"))
        raise ManifestError(violations)
    try:
        doc = load_toml(text)
    except TOMLDecodeError as exc:
        raise ManifestError(
            [Violation("SyntaxError", str(exc).split(" (at")[0], getattr(exc, "lineno", None), getattr(exc, "colno", None))]
        ) from None

    lines = _vservice_lines(text)
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        violations.append(Violation("MissingField", "top-level 'name' must be a non-empty string"))
    unknown_top = set(doc) - {"name", "vservice"}
    if unknown_top:
        violations.append(Violation("InvalidField", f"unknown top-level keys {sorted(unknown_top)}"))
    entries = doc.get("vservice", [])
    if not isinstance(entries, list):
        violations.append(Violation("InvalidField", "'vservice' must be an array of tables"))
        entries = []

    refs: list[VServiceRef] = []
    seen: dict[str, int] = {}
    hsm_carriers = []
    for i, entry in enumerate(entries):
        line = lines[i] if i < len(lines) else None
        if not isinstance(entry, dict):
            violations.append(Violation("InvalidField", f"vservice #{i + 1} is not a table", line))
            continue
        ref_name = entry.get("name")
        if not isinstance(ref_name, str) or not ref_name:
            violations.append(Violation("MissingField", f"vservice #{i + 1} has no name", line))
            ref_name = None
        elif ref_name in seen:
            violations.append(Violation("DuplicateVService", f"vservice {ref_name!r} listed twice", line))
        else:
            seen[ref_name] = i
        source = entry.get("source")
        repo = version = None
        if not isinstance(source, dict):
            violations.append(Violation("MissingField", f"vservice {ref_name!r} has no source table", line))
        else:
            repo, version = source.get("repo"), source.get("version")
            if not isinstance(repo, str) or not repo:
                violations.append(Violation("MissingField", f"vservice {ref_name!r} source has no repo", line))
            if not isinstance(version, str) or not SEMVER.match(version):
                violations.append(Violation("BadVersion", f"vservice {ref_name!r} version {version!r} is not MAJOR.MINOR.PATCH", line))
        config = entry.get("config", {})
        if not isinstance(config, dict):
            violations.append(Violation("InvalidField", f"vservice {ref_name!r} config is not a table", line))
            config = {}
        for key, value in config.items():
            if isinstance(value, list):
                if not all(_scalar_ok(v) for v in value):
                    violations.append(Violation("InvalidField", f"{ref_name}.config.{key} must be a list of scalars", line))
            elif not _scalar_ok(value):
                violations.append(Violation("InvalidField", f"{ref_name}.config.{key} must be a scalar or list", line))
        if HSM_GROUPS in config:
            hsm_carriers.append(ref_name)
            groups = config[HSM_GROUPS]
            if isinstance(groups, str):
                groups = config[HSM_GROUPS] = [groups]
            if not isinstance(groups, list) or not groups:
                violations.append(Violation("InvalidField", "hsm_groups must be a non-empty list of labels", line))
            else:
                for g in groups:
                    if not isinstance(g, str) or not LABEL_NAME.match(g):
                        violations.append(Violation("BadLabel", f"hsm_groups entry {g!r} is not a valid label", line))
        unknown = set(entry) - {"name", "source", "config"}
        if unknown:
            violations.append(Violation("InvalidField", f"vservice {ref_name!r} has unknown keys {sorted(unknown)}", line))
        if ref_name is not None:
            refs.append(
                VServiceRef(
                    ref_name,
                    repo if isinstance(repo, str) else "",
                    version if isinstance(version, str) else "",
                    tuple(sorted((k, _freeze(v)) for k, v in config.items())),
                )
            )
    if not hsm_carriers:
        violations.append(Violation("MissingHsmGroups", "no vservice carries hsm_groups"))
    elif len(hsm_carriers) > 1:
        violations.append(Violation("MultipleHsmGroups", f"hsm_groups set by more than one vservice: {hsm_carriers}"))
    if violations:
        raise ManifestError(violations)
    return VClusterManifest(name, tuple(sorted(refs, key=lambda r: r.name)))


def canonical_manifest(manifest: VClusterManifest) -> dict:
    return manifest.to_dict()


def manifest_digest(manifest: VClusterManifest) -> str:
    return digest_of(canonical_manifest(manifest))


def serialize_manifest(manifest: VClusterManifest) -> str:
    """Canonical TOML form: refs sorted by name, keys sorted."""
    doc = {"name": manifest.vcluster_name, "vservice": []}
    for r in manifest.refs:
        doc["vservice"].append(
            {
                "name": r.name,
                "source": {"repo": r.source_repo, "version": r.source_version},
                "config": dict(sorted(r.config_map.items())),
            }
        )
    return tomli_w.dumps(doc)


def manifest_json(manifest: VClusterManifest) -> str:
    out = canonical_manifest(manifest)
    out["digest"] = manifest.digest
    return canonical_json(out)


# ---------------------------------------------------------------------------
# registry and resolution
# ---------------------------------------------------------------------------


class Registry:
    """Append-only store of recipe versions.

    Publishing an identical recipe again is a no-op; publishing different
    content under an existing (name, version) is refused.
    """

    def __init__(self, recipes: Iterable[VServiceRecipe] = ()):
        self._recipes: dict[tuple[str, str], VServiceRecipe] = {}
        for r in recipes:
            self.publish(r)

    def publish(self, recipe: VServiceRecipe) -> bool:
        existing = self._recipes.get(recipe.key)
        if existing is not None:
            if existing.to_dict() != recipe.to_dict():
                raise DuplicateRecipeVersion(f"{recipe.name}@{recipe.version} already published with different content")
            return False
        self._recipes[recipe.key] = recipe
        return True

    def get(self, name: str, version: str) -> VServiceRecipe:
        try:
            return self._recipes[(name, version)]
        except KeyError:
            raise UnknownRecipe(f"unknown recipe {name}@{version}", name=name, version=version) from None

    def __contains__(self, key) -> bool:
        return key in self._recipes

    def __len__(self) -> int:
        return len(self._recipes)

    def names(self) -> list[str]:
        return sorted({n for n, _ in self._recipes})

    def versions(self, name: str) -> list[str]:
        return sorted((v for n, v in self._recipes if n == name), key=parse_version)

    def recipes(self) -> list[VServiceRecipe]:
        return [self._recipes[k] for k in sorted(self._recipes, key=lambda k: (k[0], parse_version(k[1])))]

    def to_dict(self) -> dict:
        return {"recipes": [r.to_dict() for r in self.recipes()]}

    @classmethod
    def from_dict(cls, data: dict) -> Registry:
        return cls(VServiceRecipe.from_dict(d) for d in data.get("recipes", []))

    # on-disk layout: <root>/<name>/<version>.toml
    def dump_dir(self, root: str | os.PathLike) -> None:
        root = Path(root)
        for recipe in self.recipes():
            path = root / recipe.name / f"{recipe.version}.toml"
            if path.exists():
                continue
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(recipe.to_toml())
            os.replace(tmp, path)

    @classmethod
    def load_dir(cls, root: str | os.PathLike) -> Registry:
        reg = cls()
        root = Path(root)
        if root.is_dir():
            for path in sorted(root.glob("*/*.toml")):
                recipe = VServiceRecipe.from_toml(path.read_text(encoding="utf-8"))
                if (recipe.name, recipe.version) != (path.parent.name, path.stem):
                    raise RecipeError(f"{path} holds {recipe.name}@{recipe.version}")
                reg.publish(recipe)
        return reg


def _find_cycle(remaining: dict[str, set[str]]) -> list[str]:
    start = min(remaining)
    path: list[str] = []
    index: dict[str, int] = {}
    node = start
    while node not in index:
        index[node] = len(path)
        path.append(node)
        node = min(d for d in remaining[node] if d in remaining)
    return path[index[node]:]


def resolve(manifest: VClusterManifest, registry: Registry) -> list[VServiceRecipe]:
    """Recipes in apply order.

    Dependencies come first; among recipes that are ready at the same
    time, Network precedes Storage precedes Scheduler precedes the rest,
    with ties broken by name.
    """
    recipes = {r.name: registry.get(r.name, r.source_version) for r in manifest.refs}
    deps: dict[str, set[str]] = {}
    for name, recipe in recipes.items():
        for dep in recipe.depends:
            if dep not in recipes:
                raise MissingDependency(f"{name} depends on {dep}, which the manifest does not list", name=name, dependency=dep)
        deps[name] = set(recipe.depends)

    def priority(name: str):
        return (_KIND_RANK.get(recipes[name].kind, len(_KIND_RANK)), name)

    waiting = {n: set(d) for n, d in deps.items()}
    dependents: dict[str, list[str]] = {n: [] for n in recipes}
    for n, ds in deps.items():
        for d in ds:
            dependents[d].append(n)
    ready = [priority(n) for n, ds in waiting.items() if not ds]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        _, name = heapq.heappop(ready)
        order.append(name)
        for child in dependents[name]:
            waiting[child].discard(name)
            if not waiting[child]:
                heapq.heappush(ready, priority(child))
    if len(order) != len(recipes):
        remaining = {n: deps[n] for n in recipes if n not in order}
        raise DependencyCycle(_find_cycle(remaining))
    return [recipes[n] for n in order]
