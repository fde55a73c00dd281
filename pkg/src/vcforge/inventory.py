"""Multi-site node inventory behind one facade over two backend dialects.

Nodes are grouped by labels. A label in the reserved ``vc:`` namespace
marks vCluster membership and a node carries at most one of them. Every
facade call is translated into exactly one dialect-specific message per
affected site; the backends own the node state changes, so replaying the
message log against fresh backends reproduces the inventory.
"""

from __future__ import annotations

import enum
import logging
import math
import threading
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

import jsonschema

from .canonical import load_toml
from .concurrency import synchronized
from .errors import (
    BackendRejected,
    ConflictingClusterLabel,
    DuplicateNode,
    InventoryError,
    RbacDenied,
    UnknownHwKind,
    UnknownLabel,
    UnknownNode,
    UnknownSite,
)
from .tenancy import ALL_SCOPE, Principal, Resource, Tenancy

log = logging.getLogger(__name__)

VC_PREFIX = "vc:"


class HwKind(str, enum.Enum):
    CPU_ROME = "cpu-rome"
    GPU_A100 = "gpu-a100"
    GPU_MI250X = "gpu-mi250x"
    GPU_MI300A = "gpu-mi300a"
    GPU_GH200 = "gpu-gh200"
    SERVICE = "service"


class Power(str, enum.Enum):
    Off = "Off"
    Booting = "Booting"
    Ready = "Ready"


class Plane(str, enum.Enum):
    Resource = "Resource"
    Service = "Service"


class Dialect(str, enum.Enum):
    A = "DialectA"
    B = "DialectB"


class PowerAction(str, enum.Enum):
    Boot = "Boot"
    Reboot = "Reboot"
    Off = "Off"


DEFAULT_DIALECT_B_DELAY = 2


def is_cluster_label(label: str) -> bool:
    return label.startswith(VC_PREFIX)


def cluster_label(name: str) -> str:
    return name if is_cluster_label(name) else VC_PREFIX + name


@dataclass
class Site:
    site_id: str
    backend_dialect: Dialect
    node_ids: set[str] = field(default_factory=set)
    power_delay: int = 1

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "dialect": self.backend_dialect.value,
            "power_delay": self.power_delay,
            "node_ids": sorted(self.node_ids),
        }


@dataclass
class Node:
    node_id: str
    site_id: str
    hw_kind: HwKind
    gpus: int = 0
    labels: set[str] = field(default_factory=set)
    power: Power = Power.Off
    base_image: str | None = None
    partition_id: str | None = None
    plane: Plane = Plane.Resource

    @property
    def vc_label(self) -> str | None:
        for label in self.labels:
            if is_cluster_label(label):
                return label
        return None

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "site_id": self.site_id,
            "hw_kind": self.hw_kind.value,
            "gpus": self.gpus,
            "labels": sorted(self.labels),
            "power": self.power.value,
            "base_image": self.base_image,
            "partition_id": self.partition_id,
            "plane": self.plane.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Node:
        return cls(
            node_id=d["node_id"],
            site_id=d["site_id"],
            hw_kind=HwKind(d["hw_kind"]),
            gpus=d["gpus"],
            labels=set(d["labels"]),
            power=Power(d["power"]),
            base_image=d["base_image"],
            partition_id=d["partition_id"],
            plane=Plane(d["plane"]),
        )


@dataclass
class NodeGroup:
    label: str
    tenant: str | None
    member_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"label": self.label, "tenant": self.tenant, "member_ids": list(self.member_ids)}


@dataclass
class InventorySummary:
    total_nodes: int
    total_gpus: int
    per_kind: dict[str, int]
    gpus_per_kind: dict[str, int]
    sites: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "total_nodes": self.total_nodes,
            "total_gpus": self.total_gpus,
            "per_kind": dict(sorted(self.per_kind.items())),
            "gpus_per_kind": dict(sorted(self.gpus_per_kind.items())),
            "sites": dict(sorted(self.sites.items())),
        }


@dataclass
class ActionReport:
    action: str
    label: str
    outcomes: dict[str, str] = field(default_factory=dict)
    messages: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(v == "ok" for v in self.outcomes.values())

    @property
    def failures(self) -> dict[str, str]:
        return {n: v for n, v in self.outcomes.items() if v != "ok"}

    def to_dict(self) -> dict:
        return {
            "action": self.action,
            "label": self.label,
            "outcomes": dict(sorted(self.outcomes.items())),
            "messages": self.messages,
        }


# ---------------------------------------------------------------------------
# backend dialects
# ---------------------------------------------------------------------------

_ID_LIST = {"type": "array", "items": {"type": "string"}, "minItems": 1, "uniqueItems": True}
_NULLABLE_STR = {"type": ["string", "null"]}

DIALECT_A_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {
                "verb": {"const": "SetGroup"},
                "group": {"type": "string"},
                "op": {"enum": ["add", "remove", "attr"]},
                "members": _ID_LIST,
                "attrs": {
                    "type": "object",
                    "properties": {"partition": _NULLABLE_STR},
                    "additionalProperties": False,
                },
            },
            "required": ["verb", "group", "op", "members"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "verb": {"const": "PowerBatch"},
                "action": {"enum": ["on", "off", "reset"]},
                "xnames": _ID_LIST,
            },
            "required": ["verb", "action", "xnames"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "verb": {"const": "StageImage"},
                "image": _NULLABLE_STR,
                "xnames": _ID_LIST,
            },
            "required": ["verb", "image", "xnames"],
            "additionalProperties": False,
        },
    ]
}

DIALECT_B_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {
                "op": {"const": "label/apply"},
                "label": {"type": "string"},
                "mode": {"enum": ["attach", "detach", "annotate"]},
                "nodes": _ID_LIST,
                "annotations": {
                    "type": "object",
                    "properties": {"partition": _NULLABLE_STR},
                    "additionalProperties": False,
                },
            },
            "required": ["op", "label", "mode", "nodes"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "op": {"const": "node/cycle"},
                "action": {"enum": ["boot", "reboot", "shutdown"]},
                "nodes": _ID_LIST,
            },
            "required": ["op", "action", "nodes"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "op": {"const": "image/bind"},
                "image": _NULLABLE_STR,
                "nodes": _ID_LIST,
            },
            "required": ["op", "image", "nodes"],
            "additionalProperties": False,
        },
    ]
}

_VALIDATORS = {
    Dialect.A: jsonschema.Draft202012Validator(DIALECT_A_SCHEMA),
    Dialect.B: jsonschema.Draft202012Validator(DIALECT_B_SCHEMA),
}


def validate_message(dialect: Dialect, message: dict) -> None:
    try:
        _VALIDATORS[dialect].validate(message)
    except jsonschema.ValidationError as exc:
        raise BackendRejected(f"{dialect.value} rejected message: {exc.message}") from None


class Backend:
    """In-process simulated control-plane endpoint for one site.

    Power requests are accepted immediately (node goes Booting) and
    complete ``delay`` ticks later.
    """

    dialect: Dialect

    def __init__(self, site: Site, nodes: dict[str, Node]):
        self.site = site
        self.nodes = nodes
        self.pending: dict[str, tuple[int, Power]] = {}

    @property
    def delay(self) -> int:
        return self.site.power_delay

    def handle(self, message: dict, now: int) -> None:
        validate_message(self.dialect, message)
        for node_id in self._targets(message):
            if node_id not in self.site.node_ids:
                raise BackendRejected(f"node {node_id} is not managed by site {self.site.site_id}")
        self._apply(message, now)

    def tick(self, now: int) -> list[str]:
        done = sorted(n for n, (due, _) in self.pending.items() if due <= now)
        for node_id in done:
            _, target = self.pending.pop(node_id)
            self.nodes[node_id].power = target
        return done

    def _schedule(self, node_id: str, target: Power, now: int) -> None:
        self.pending[node_id] = (now + self.delay, target)

    def _set_labels(self, label: str, members: Iterable[str], attach: bool) -> None:
        for node_id in members:
            if attach:
                self.nodes[node_id].labels.add(label)
            else:
                self.nodes[node_id].labels.discard(label)

    def _targets(self, message: dict) -> list[str]:
        raise NotImplementedError

    def _apply(self, message: dict, now: int) -> None:
        raise NotImplementedError


class DialectABackend(Backend):
    """Verb-style API: SetGroup / PowerBatch / StageImage. Completes next tick."""

    dialect = Dialect.A

    @property
    def delay(self) -> int:
        return 1

    def _targets(self, message):
        return message.get("members") or message.get("xnames") or []

    def _apply(self, message, now):
        verb = message["verb"]
        if verb == "SetGroup":
            if message["op"] == "attr":
                for node_id in message["members"]:
                    self.nodes[node_id].partition_id = message.get("attrs", {}).get("partition")
            else:
                self._set_labels(message["group"], message["members"], message["op"] == "add")
        elif verb == "PowerBatch":
            for node_id in message["xnames"]:
                if message["action"] == "off":
                    self.pending.pop(node_id, None)
                    self.nodes[node_id].power = Power.Off
                else:
                    self.nodes[node_id].power = Power.Booting
                    self._schedule(node_id, Power.Ready, now)
        elif verb == "StageImage":
            for node_id in message["xnames"]:
                self.nodes[node_id].base_image = message["image"]


class DialectBBackend(Backend):
    """Resource-path API: label/apply, node/cycle, image/bind.

    Eventually consistent: every power action, including shutdown,
    completes only after the site's configured delay.
    """

    dialect = Dialect.B

    def _targets(self, message):
        return message["nodes"]

    def _apply(self, message, now):
        op = message["op"]
        if op == "label/apply":
            if message["mode"] == "annotate":
                for node_id in message["nodes"]:
                    self.nodes[node_id].partition_id = message.get("annotations", {}).get("partition")
            else:
                self._set_labels(message["label"], message["nodes"], message["mode"] == "attach")
        elif op == "node/cycle":
            for node_id in message["nodes"]:
                if message["action"] == "shutdown":
                    self._schedule(node_id, Power.Off, now)
                else:
                    self.nodes[node_id].power = Power.Booting
                    self._schedule(node_id, Power.Ready, now)
        elif op == "image/bind":
            for node_id in message["nodes"]:
                self.nodes[node_id].base_image = message["image"]


_BACKENDS = {Dialect.A: DialectABackend, Dialect.B: DialectBBackend}


def translate(dialect: Dialect, intent: str, members: list[str], **kw) -> dict:
    """Turn a facade intent into one dialect-correct message."""
    if dialect is Dialect.A:
        if intent == "label":
            op = "add" if kw["attach"] else "remove"
            return {"verb": "SetGroup", "group": kw["label"], "op": op, "members": members}
        if intent == "partition":
            return {
                "verb": "SetGroup",
                "group": kw["label"],
                "op": "attr",
                "members": members,
                "attrs": {"partition": kw["partition"]},
            }
        if intent == "power":
            action = {"Boot": "on", "Reboot": "reset", "Off": "off"}[kw["action"]]
            return {"verb": "PowerBatch", "action": action, "xnames": members}
        if intent == "image":
            return {"verb": "StageImage", "image": kw["image"], "xnames": members}
    else:
        if intent == "label":
            mode = "attach" if kw["attach"] else "detach"
            return {"op": "label/apply", "label": kw["label"], "mode": mode, "nodes": members}
        if intent == "partition":
            return {
                "op": "label/apply",
                "label": kw["label"],
                "mode": "annotate",
                "nodes": members,
                "annotations": {"partition": kw["partition"]},
            }
        if intent == "power":
            action = {"Boot": "boot", "Reboot": "reboot", "Off": "shutdown"}[kw["action"]]
            return {"op": "node/cycle", "action": action, "nodes": members}
        if intent == "image":
            return {"op": "image/bind", "image": kw["image"], "nodes": members}
    raise ValueError(f"unknown intent {intent}")


# ---------------------------------------------------------------------------
# facade
# ---------------------------------------------------------------------------


class _ManualClock:
    def __init__(self):
        self.tick = 0


def _node_ids(prefix: str, count: int, start: int = 1) -> list[str]:
    width = max(3, int(math.log10(max(count + start - 1, 1))) + 1)
    return [f"{prefix}{i:0{width}d}" for i in range(start, start + count)]


class Inventory:
    """Facade over all sites; the only write path to node state."""

    def __init__(self, tenancy: Tenancy | None = None, clock=None):
        self.tenancy = tenancy if tenancy is not None else Tenancy()
        self.clock = clock if clock is not None else _ManualClock()
        self.sites: dict[str, Site] = {}
        self.nodes: dict[str, Node] = {}
        self.groups: dict[str, NodeGroup] = {}
        self.partitions: dict[str, str | None] = {}
        self.backends: dict[str, Backend] = {}
        self.message_log: list[dict] = []
        self.fixture: dict = {}
        self.lock = threading.RLock()

    # -- loading -------------------------------------------------------
    def add_site(self, site_id: str, dialect: Dialect | str, power_delay: int | None = None) -> Site:
        if site_id in self.sites:
            raise InventoryError(f"duplicate site {site_id}")
        dialect = Dialect(dialect)
        if power_delay is None:
            power_delay = 1 if dialect is Dialect.A else DEFAULT_DIALECT_B_DELAY
        site = Site(site_id, dialect, power_delay=int(power_delay))
        self.sites[site_id] = site
        self.backends[site_id] = _BACKENDS[dialect](site, self.nodes)
        return site

    @synchronized
    def load_inventory(self, fixture: dict | str) -> InventorySummary:
        """Register every node described by ``fixture`` (powered Off, unlabeled).

        ``fixture`` is the parsed document or TOML text. Validation runs
        over the whole document before anything is registered.
        """
        if isinstance(fixture, str):
            fixture = load_toml(fixture)
        sites = fixture.get("sites", [])
        blocks = fixture.get("nodes", [])
        known_sites = set(self.sites) | {s["site_id"] for s in sites}
        new_nodes: list[Node] = []
        seen = set(self.nodes)
        for block in blocks:
            try:
                kind = HwKind(block["hw_kind"])
            except ValueError:
                raise UnknownHwKind(f"unknown hw_kind {block['hw_kind']!r}") from None
            count = int(block.get("count", 0))
            gpus = int(block.get("gpus_per_node", 0))
            if count < 0 or gpus < 0:
                raise InventoryError("node counts and GPU counts must be >= 0")
            site_id = block["site"]
            if site_id not in known_sites:
                raise UnknownSite(f"unknown site {site_id!r}")
            plane = Plane(block.get("plane", "Resource"))
            if "ids" in block:
                ids = list(block["ids"])
            else:
                ids = _node_ids(block["prefix"], count, int(block.get("start", 1)))
            for node_id in ids:
                if node_id in seen:
                    raise DuplicateNode(f"duplicate node_id {node_id}")
                seen.add(node_id)
                new_nodes.append(Node(node_id, site_id, kind, gpus, plane=plane))
        for s in sites:
            self.add_site(s["site_id"], s.get("dialect", "DialectA"), s.get("power_delay"))
        for node in new_nodes:
            self.nodes[node.node_id] = node
            self.sites[node.site_id].node_ids.add(node.node_id)
        self.fixture = fixture
        return self.summary()

    def summary(self) -> InventorySummary:
        per_kind: dict[str, int] = {}
        gpus_per_kind: dict[str, int] = {}
        for node in self.nodes.values():
            per_kind[node.hw_kind.value] = per_kind.get(node.hw_kind.value, 0) + 1
            gpus_per_kind[node.hw_kind.value] = gpus_per_kind.get(node.hw_kind.value, 0) + node.gpus
        return InventorySummary(
            total_nodes=len(self.nodes),
            total_gpus=sum(gpus_per_kind.values()),
            per_kind=per_kind,
            gpus_per_kind=gpus_per_kind,
            sites={s.site_id: len(s.node_ids) for s in self.sites.values()},
        )

    # -- helpers -------------------------------------------------------
    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"unknown node {node_id}") from None

    def group(self, label: str) -> NodeGroup:
        try:
            return self.groups[label]
        except KeyError:
            raise UnknownLabel(f"unknown label {label}") from None

    def label_tenant(self, label: str) -> str | None:
        group = self.groups.get(label)
        if group is not None and group.tenant is not None:
            return group.tenant
        return self.tenancy.owner_of_label(label)

    def node_tenant(self, node: Node) -> str | None:
        vc = node.vc_label
        return self.label_tenant(vc) if vc else None

    def _check_node_scope(self, principal: Principal, nodes: Iterable[Node], action: str) -> None:
        """Scoped principals may not reach nodes of another tenant's vCluster."""
        if principal.tenant == ALL_SCOPE:
            return
        for node in nodes:
            owner = self.node_tenant(node)
            if owner is not None and owner != principal.tenant:
                raise RbacDenied(
                    f"{principal.principal_id} may not {action} node {node.node_id}: foreign tenant",
                    reason="foreign tenant",
                )

    def _dispatch(self, intent: str, node_ids: list[str], **kw) -> list[dict]:
        """Send one message per affected site, in site order."""
        by_site: dict[str, list[str]] = {}
        for node_id in node_ids:
            by_site.setdefault(self.nodes[node_id].site_id, []).append(node_id)
        sent = []
        now = self.clock.tick
        for site_id in sorted(by_site):
            site = self.sites[site_id]
            message = translate(site.backend_dialect, intent, sorted(by_site[site_id]), **kw)
            self.backends[site_id].handle(message, now)
            entry = {"tick": now, "site": site_id, "message": message}
            self.message_log.append(entry)
            sent.append(entry)
        return sent

    def _refresh_group(self, label: str) -> None:
        group = self.groups.get(label)
        if group is not None:
            group.member_ids = sorted(n.node_id for n in self.nodes.values() if label in n.labels)

    def _select(self, selector) -> list[Node]:
        if callable(selector):
            chosen = [n for n in self.nodes.values() if selector(n)]
        else:
            chosen = [self.node(n) for n in selector]
        return sorted(chosen, key=lambda n: n.node_id)

    # -- operations ----------------------------------------------------
    @synchronized
    def assign_group(
        self,
        principal: Principal,
        label: str,
        selector: Callable[[Node], bool] | Iterable[str],
        tenant: str | None = None,
    ) -> NodeGroup:
        owner = self.label_tenant(label)
        if owner is None:
            owner = tenant or (principal.tenant if principal.tenant != ALL_SCOPE else None)
        self.tenancy.require(principal, "inv.label", Resource("label", label, owner))
        nodes = self._select(selector)
        self._check_node_scope(principal, nodes, "inv.label")
        if is_cluster_label(label):
            for node in nodes:
                other = node.vc_label
                if other is not None and other != label:
                    raise ConflictingClusterLabel(
                        f"node {node.node_id} already belongs to {other}", node=node.node_id, label=other
                    )
        todo = [n.node_id for n in nodes if label not in n.labels]
        if owner is not None and self.tenancy.owner_of_label(label) is None:
            self.tenancy.claim_label(label, owner)
        group = self.groups.get(label)
        if group is None:
            group = self.groups[label] = NodeGroup(label, owner)
        if todo:
            self._dispatch("label", todo, label=label, attach=True)
            self._sync_partition(label, todo, self.partitions.get(label))
        self._refresh_group(label)
        return group

    def _sync_partition(self, label: str, node_ids: list[str], partition_id: str | None) -> None:
        # vCluster members follow the partition of their vc label
        if not is_cluster_label(label) or label not in self.partitions:
            return
        todo = [n for n in node_ids if self.nodes[n].partition_id != partition_id]
        if todo:
            self._dispatch("partition", todo, label=label, partition=partition_id)

    @synchronized
    def unassign(self, principal: Principal, label: str, node_ids: Iterable[str]) -> NodeGroup:
        group = self.group(label)
        self.tenancy.require(principal, "inv.unlabel", Resource("label", label, group.tenant))
        nodes = self._select(node_ids)
        todo = [n.node_id for n in nodes if label in n.labels]
        if todo:
            self._dispatch("label", todo, label=label, attach=False)
            self._sync_partition(label, todo, None)
        self._refresh_group(label)
        return group

    @synchronized
    def drop_group(self, principal: Principal, label: str) -> None:
        """Delete a group record; its members are unlabeled first."""
        group = self.group(label)
        if group.member_ids:
            self.unassign(principal, label, list(group.member_ids))
        del self.groups[label]
        self.partitions.pop(label, None)

    def group_members(self, label: str) -> list[str]:
        return list(self.group(label).member_ids)

    @synchronized
    def node_power(self, principal: Principal, label: str, action: PowerAction | str) -> ActionReport:
        group = self.group(label)
        self.tenancy.require(principal, "inv.power", Resource("label", label, group.tenant))
        nodes = [self.nodes[n] for n in group.member_ids]
        self._check_node_scope(principal, nodes, "inv.power")
        return self.power_nodes(group.member_ids, action, label=label)

    @synchronized
    def power_nodes(self, node_ids: Iterable[str], action: PowerAction | str, label: str = "") -> ActionReport:
        """Unscoped power path used by the vetting and pipeline services."""
        action = PowerAction(action)
        report = ActionReport(action.value, label)
        todo = []
        for node_id in sorted(node_ids):
            node = self.node(node_id)
            if action is not PowerAction.Off and node.base_image is None:
                report.outcomes[node_id] = "NoImage"
                continue
            if action is PowerAction.Boot and node.power is not Power.Off:
                report.outcomes[node_id] = "ok"
                continue
            report.outcomes[node_id] = "ok"
            todo.append(node_id)
        if todo:
            report.messages = self._dispatch("power", todo, action=action.value)
        return report

    @synchronized
    def set_partition(self, principal: Principal, label: str, partition_id: str | None) -> ActionReport:
        group = self.group(label)
        self.tenancy.require(principal, "inv.partition", Resource("label", label, group.tenant))
        nodes = [self.nodes[n] for n in group.member_ids]
        self._check_node_scope(principal, nodes, "inv.partition")
        report = ActionReport("partition", label, {n.node_id: "ok" for n in nodes})
        self.partitions[label] = partition_id
        todo = [n.node_id for n in nodes if n.partition_id != partition_id]
        if todo:
            report.messages = self._dispatch("partition", todo, label=label, partition=partition_id)
        return report

    @synchronized
    def stage_image(self, principal: Principal, label: str, image: str | None) -> ActionReport:
        group = self.group(label)
        self.tenancy.require(principal, "inv.image", Resource("label", label, group.tenant))
        nodes = [self.nodes[n] for n in group.member_ids]
        self._check_node_scope(principal, nodes, "inv.image")
        report = ActionReport("image", label, {n.node_id: "ok" for n in nodes})
        todo = [n.node_id for n in nodes if n.base_image != image]
        if todo:
            report.messages = self._dispatch("image", todo, image=image)
        return report

    def can_communicate(self, src: str, dst: str) -> bool:
        """Traffic is delivered only within one network partition."""
        return self.node(src).partition_id == self.node(dst).partition_id

    @synchronized
    def tick(self, now: int) -> list[str]:
        completed = []
        for site_id in sorted(self.backends):
            completed.extend(self.backends[site_id].tick(now))
        return completed

    # -- persistence ---------------------------------------------------
    def snapshot(self) -> dict:
        """Inventory state without the message log."""
        return {
            "sites": [s.to_dict() for _, s in sorted(self.sites.items())],
            "nodes": [n.to_dict() for _, n in sorted(self.nodes.items())],
            "groups": [g.to_dict() for _, g in sorted(self.groups.items())],
            "partitions": dict(sorted(self.partitions.items())),
            "pending": {
                site_id: {n: [due, p.value] for n, (due, p) in sorted(b.pending.items())}
                for site_id, b in sorted(self.backends.items())
                if b.pending
            },
        }

    def to_dict(self) -> dict:
        return {"state": self.snapshot(), "message_log": self.message_log, "fixture": self.fixture}

    @classmethod
    def from_dict(cls, data: dict, tenancy: Tenancy | None = None, clock=None) -> Inventory:
        inv = cls(tenancy, clock)
        state = data["state"]
        for s in state["sites"]:
            site = inv.add_site(s["site_id"], s["dialect"], s["power_delay"])
            site.node_ids = set(s["node_ids"])
        for d in state["nodes"]:
            inv.nodes[d["node_id"]] = Node.from_dict(d)
        for g in state["groups"]:
            inv.groups[g["label"]] = NodeGroup(g["label"], g["tenant"], list(g["member_ids"]))
        inv.partitions = dict(state.get("partitions", {}))
        for site_id, pending in state.get("pending", {}).items():
            inv.backends[site_id].pending = {n: (due, Power(p)) for n, (due, p) in pending.items()}
        inv.message_log = list(data.get("message_log", []))
        inv.fixture = data.get("fixture", {})
        return inv


def replay(fixture: dict, message_log: list[dict], until_tick: int) -> Inventory:
    """Rebuild node state by replaying a message log against fresh backends.

    Group records are facade bookkeeping, so only node and site state is
    comparable after a replay.
    """
    inv = Inventory()
    inv.load_inventory(fixture)
    for entry in message_log:
        inv.tick(entry["tick"])
        inv.backends[entry["site"]].handle(entry["message"], entry["tick"])
    inv.tick(until_tick)
    return inv
