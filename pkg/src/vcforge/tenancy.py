"""Tenants, principals and the fixed role permission matrix.

The matrix below is normative: every mutating operation elsewhere in the
package calls :func:`authorize` (via :meth:`Tenancy.require`) before it
touches state. Unknown verbs are denied.

============================  =====  ======  ========  =======  =========
verb                          Infra  Tenant  Platform  Service  Scientist
                              Admin  Admin   Engineer  Manager
============================  =====  ======  ========  =======  =========
read verbs (status, inv.read,  yes    yes     yes       yes      yes
manifest.read, registry.read,
vet.status, pipeline.read)
inv.label / inv.unlabel        yes    tenant  -         -        -
inv.power / inv.partition      yes    tenant  -         -        -
inv.image                      yes    tenant  -         -        -
pipeline.integrate             yes    -       tenant    -        -
pipeline.deploy                yes    -       tenant    -        -
update.rolling / rollback      yes    -       tenant    -        -
reconcile / vet.reintegrate    yes    -       tenant    -        -
registry.publish               yes    -       -         global   -
job.submit                     yes    tenant  tenant    -        tenant
vet.repair_done, sim.fault     yes    -       -         -        -
============================  =====  ======  ========  =======  =========

"tenant" means allowed only on resources owned by the principal's tenant
(or unowned resources); "global" means no tenant scoping applies.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .canonical import load_toml
from .errors import RbacDenied, UsageError


class Role(str, enum.Enum):
    InfraAdmin = "InfraAdmin"
    TenantAdmin = "TenantAdmin"
    PlatformEngineer = "PlatformEngineer"
    ServiceManager = "ServiceManager"
    Scientist = "Scientist"


ALL_SCOPE = "*"

READ_VERBS = frozenset(
    {"status", "inv.read", "manifest.read", "registry.read", "vet.status", "pipeline.read"}
)

MUTATING_VERBS = (
    "inv.label",
    "inv.unlabel",
    "inv.power",
    "inv.partition",
    "inv.image",
    "pipeline.integrate",
    "pipeline.deploy",
    "update.rolling",
    "rollback",
    "reconcile",
    "vet.reintegrate",
    "vet.repair_done",
    "registry.publish",
    "job.submit",
    "sim.fault",
)

_TENANT_ADMIN = {"inv.label", "inv.unlabel", "inv.power", "inv.partition", "inv.image", "job.submit"}
_PLATFORM_ENGINEER = {
    "pipeline.integrate",
    "pipeline.deploy",
    "update.rolling",
    "rollback",
    "reconcile",
    "vet.reintegrate",
    "job.submit",
}

# role -> mutating verb -> scoping ("tenant" | "global")
PERMISSIONS: dict[Role, dict[str, str]] = {
    Role.InfraAdmin: {verb: "global" for verb in MUTATING_VERBS},
    Role.TenantAdmin: {verb: "tenant" for verb in _TENANT_ADMIN},
    Role.PlatformEngineer: {verb: "tenant" for verb in _PLATFORM_ENGINEER},
    Role.ServiceManager: {"registry.publish": "global"},
    Role.Scientist: {"job.submit": "tenant"},
}


@dataclass(frozen=True)
class Principal:
    principal_id: str
    role: Role
    tenant: str

    def __post_init__(self):
        if self.tenant == ALL_SCOPE and self.role is not Role.InfraAdmin:
            raise UsageError(f"principal {self.principal_id}: '*' scope is reserved for InfraAdmin")

    def to_dict(self) -> dict:
        return {"id": self.principal_id, "role": self.role.value, "tenant": self.tenant}


@dataclass(frozen=True)
class Resource:
    """What an action targets. ``tenant`` None means unowned/global."""

    kind: str
    name: str
    tenant: str | None = None


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


def authorize(principal: Principal, action: str, resource: Resource) -> Decision:
    if action in READ_VERBS:
        return ALLOW
    scoping = PERMISSIONS.get(principal.role, {}).get(action)
    if scoping is None:
        return Decision(False, f"role {principal.role.value} lacks privilege {action}")
    if scoping == "global" or principal.tenant == ALL_SCOPE:
        return ALLOW
    if resource.tenant is not None and resource.tenant != principal.tenant:
        return Decision(False, "foreign tenant")
    return ALLOW


# Internal actors (vetting service, pipeline engine) act with full scope.
SYSTEM = Principal("system", Role.InfraAdmin, ALL_SCOPE)


@dataclass
class Tenant:
    tenant_id: str
    platform: str = ""
    labels: set[str] = field(default_factory=set)
    vclusters: set[str] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {
            "id": self.tenant_id,
            "platform": self.platform,
            "labels": sorted(self.labels),
            "vclusters": sorted(self.vclusters),
        }


class Tenancy:
    """Principals, tenants, and label/vCluster ownership."""

    def __init__(self):
        self.principals: dict[str, Principal] = {}
        self.tenants: dict[str, Tenant] = {}

    def add_tenant(self, tenant_id: str, platform: str = "", labels=(), vclusters=()) -> Tenant:
        tenant = self.tenants.setdefault(tenant_id, Tenant(tenant_id, platform))
        if platform:
            tenant.platform = platform
        for label in labels:
            self.claim_label(label, tenant_id)
        for name in vclusters:
            self.claim_vcluster(name, tenant_id)
        return tenant

    def add_principal(self, principal_id: str, role: str | Role, tenant: str) -> Principal:
        p = Principal(principal_id, Role(role), tenant)
        if tenant != ALL_SCOPE and tenant not in self.tenants:
            self.add_tenant(tenant)
        self.principals[principal_id] = p
        return p

    def principal(self, principal_id: str) -> Principal:
        try:
            return self.principals[principal_id]
        except KeyError:
            raise RbacDenied(f"unknown principal {principal_id!r}") from None

    def owner_of_label(self, label: str) -> str | None:
        for tenant in self.tenants.values():
            if label in tenant.labels:
                return tenant.tenant_id
        return None

    def owner_of_vcluster(self, name: str) -> str | None:
        for tenant in self.tenants.values():
            if name in tenant.vclusters:
                return tenant.tenant_id
        return None

    def claim_label(self, label: str, tenant_id: str) -> None:
        owner = self.owner_of_label(label)
        if owner is not None and owner != tenant_id:
            raise RbacDenied(f"label {label} is owned by another tenant")
        self.tenants.setdefault(tenant_id, Tenant(tenant_id)).labels.add(label)

    def release_label(self, label: str) -> None:
        for tenant in self.tenants.values():
            tenant.labels.discard(label)

    def claim_vcluster(self, name: str, tenant_id: str) -> None:
        owner = self.owner_of_vcluster(name)
        if owner is not None and owner != tenant_id:
            raise RbacDenied(f"vCluster {name} is owned by another tenant")
        self.tenants.setdefault(tenant_id, Tenant(tenant_id)).vclusters.add(name)

    def require(self, principal: Principal, action: str, resource: Resource) -> None:
        decision = authorize(principal, action, resource)
        if not decision:
            raise RbacDenied(
                f"{principal.principal_id} may not {action} on {resource.kind} {resource.name}: {decision.reason}",
                reason=decision.reason,
            )

    # persistence
    def to_dict(self) -> dict:
        return {
            "principals": [p.to_dict() for _, p in sorted(self.principals.items())],
            "tenants": [t.to_dict() for _, t in sorted(self.tenants.items())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> Tenancy:
        tenancy = cls()
        for t in data.get("tenants", []):
            tenancy.add_tenant(t["id"], t.get("platform", ""), t.get("labels", ()), t.get("vclusters", ()))
        for p in data.get("principals", []):
            tenancy.add_principal(p["id"], p["role"], p.get("tenant", ALL_SCOPE))
        return tenancy

    @classmethod
    def from_toml(cls, text: str) -> Tenancy:
        return cls.from_dict(load_toml(text))
