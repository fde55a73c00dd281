"""Exception hierarchy shared by every vcforge module.

Each error carries a stable machine-readable ``code`` (used by the CLI's
``--json`` output) and an exit status.
"""

from __future__ import annotations

from typing import Any


class VcforgeError(Exception):
    """Base class for domain errors."""

    code = "ERROR"
    exit_code = 1

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def to_dict(self) -> dict:
        out = {"code": self.code, "message": self.message}
        if self.details:
            out["details"] = self.details
        return out


class RbacDenied(VcforgeError):
    code = "RBAC_DENIED"
    exit_code = 3


class UsageError(VcforgeError):
    code = "USAGE"
    exit_code = 2


# inventory
class InventoryError(VcforgeError):
    code = "INVENTORY_ERROR"


class DuplicateNode(InventoryError):
    code = "DUPLICATE_NODE"


class UnknownHwKind(InventoryError):
    code = "UNKNOWN_HW_KIND"


class UnknownNode(InventoryError):
    code = "UNKNOWN_NODE"


class UnknownSite(InventoryError):
    code = "UNKNOWN_SITE"


class UnknownLabel(InventoryError):
    code = "UNKNOWN_LABEL"


class ConflictingClusterLabel(InventoryError):
    code = "CONFLICTING_CLUSTER_LABEL"


class BackendRejected(InventoryError):
    code = "BACKEND_REJECTED"


# manifest / registry
class ManifestError(VcforgeError):
    """Raised with every violation found, not just the first."""

    code = "INVALID_MANIFEST"

    def __init__(self, violations: list):
        self.violations = list(violations)
        summary = "; ".join(str(v) for v in self.violations)
        super().__init__(summary, violations=[v.to_dict() for v in self.violations])

    @property
    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


class RecipeError(VcforgeError):
    code = "INVALID_RECIPE"


class UnknownRecipe(VcforgeError):
    code = "UNKNOWN_RECIPE"


class DuplicateRecipeVersion(VcforgeError):
    code = "DUPLICATE_RECIPE_VERSION"


class MissingDependency(VcforgeError):
    code = "MISSING_DEPENDENCY"


class DependencyCycle(VcforgeError):
    code = "DEPENDENCY_CYCLE"

    def __init__(self, cycle: list[str]):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(cycle + cycle[:1]), cycle=self.cycle)


class InvalidConfig(VcforgeError):
    code = "INVALID_CONFIG"


# orchestrator
class EmptyMembership(VcforgeError):
    code = "EMPTY_MEMBERSHIP"


class UngatedTarget(VcforgeError):
    code = "UNGATED_TARGET"


class NodeNotReady(VcforgeError):
    code = "NODE_NOT_READY"


class NodeVetted(VcforgeError):
    code = "NODE_VETTED"


class NotAMember(VcforgeError):
    code = "NOT_A_MEMBER"


class UnknownVCluster(VcforgeError):
    code = "UNKNOWN_VCLUSTER"


class HookFailed(VcforgeError):
    code = "HOOK_FAILED"


# pipelines
class UngatedManifest(VcforgeError):
    code = "UNGATED_MANIFEST"


class PipelineConflict(VcforgeError):
    code = "PIPELINE_CONFLICT"


class NoIdleNodes(VcforgeError):
    code = "NO_IDLE_NODES"


class NoRollbackTarget(VcforgeError):
    code = "NO_ROLLBACK_TARGET"


class NotDeployed(VcforgeError):
    code = "NOT_DEPLOYED"


class VClusterMismatch(VcforgeError):
    code = "VCLUSTER_MISMATCH"


class DrainTimeout(VcforgeError):
    code = "DRAIN_TIMEOUT"


class GateViolation(VcforgeError):
    """Internal guard: an applied digest without a Passed gate record."""

    code = "GATE_VIOLATION"


# vetting
class InvalidState(VcforgeError):
    code = "INVALID_STATE"


class DuplicateTicket(VcforgeError):
    code = "DUPLICATE_TICKET"


class UnknownTicket(VcforgeError):
    code = "UNKNOWN_TICKET"


class TicketNotRepaired(VcforgeError):
    code = "TICKET_NOT_REPAIRED"


# simulation
class ImpossibleRequest(VcforgeError):
    code = "IMPOSSIBLE_REQUEST"


class UnknownTarget(VcforgeError):
    code = "UNKNOWN_TARGET"


class ScenarioParseError(VcforgeError):
    code = "SCENARIO_PARSE_ERROR"


class StateLocked(VcforgeError):
    code = "STATE_LOCKED"


class StateNotInitialized(VcforgeError):
    code = "STATE_NOT_INITIALIZED"
