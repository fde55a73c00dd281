import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st
from support import make_cp, who

from vcforge.errors import RbacDenied, UsageError
from vcforge.scenario import BUILTIN, data_text, load_principals
from vcforge.tenancy import (
    MUTATING_VERBS,
    READ_VERBS,
    Principal,
    Resource,
    Role,
    Tenancy,
    authorize,
)

# The published matrix, transcribed by hand: verb -> role -> "all" | "own" | "-".
# "own" allows the principal's own tenant and unowned resources.
MATRIX = {
    "inv.label":          {"InfraAdmin": "all", "TenantAdmin": "own", "PlatformEngineer": "-", "ServiceManager": "-", "Scientist": "-"},
    "inv.unlabel":        {"InfraAdmin": "all", "TenantAdmin": "own", "PlatformEngineer": "-", "ServiceManager": "-", "Scientist": "-"},
    "inv.power":          {"InfraAdmin": "all", "TenantAdmin": "own", "PlatformEngineer": "-", "ServiceManager": "-", "Scientist": "-"},
    "inv.partition":      {"InfraAdmin": "all", "TenantAdmin": "own", "PlatformEngineer": "-", "ServiceManager": "-", "Scientist": "-"},
    "inv.image":          {"InfraAdmin": "all", "TenantAdmin": "own", "PlatformEngineer": "-", "ServiceManager": "-", "Scientist": "-"},
    "pipeline.integrate": {"InfraAdmin": "all", "TenantAdmin": "-", "PlatformEngineer": "own", "ServiceManager": "-", "Scientist": "-"},
    "pipeline.deploy":    {"InfraAdmin": "all", "TenantAdmin": "-", "PlatformEngineer": "own", "ServiceManager": "-", "Scientist": "-"},
    "update.rolling":     {"InfraAdmin": "all", "TenantAdmin": "-", "PlatformEngineer": "own", "ServiceManager": "-", "Scientist": "-"},
    "rollback":           {"InfraAdmin": "all", "TenantAdmin": "-", "PlatformEngineer": "own", "ServiceManager": "-", "Scientist": "-"},
    "reconcile":          {"InfraAdmin": "all", "TenantAdmin": "-", "PlatformEngineer": "own", "ServiceManager": "-", "Scientist": "-"},
    "vet.reintegrate":    {"InfraAdmin": "all", "TenantAdmin": "-", "PlatformEngineer": "own", "ServiceManager": "-", "Scientist": "-"},
    "registry.publish":   {"InfraAdmin": "all", "TenantAdmin": "-", "PlatformEngineer": "-", "ServiceManager": "all", "Scientist": "-"},
    "job.submit":         {"InfraAdmin": "all", "TenantAdmin": "own", "PlatformEngineer": "own", "ServiceManager": "-", "Scientist": "own"},
    "vet.repair_done":    {"InfraAdmin": "all", "TenantAdmin": "-", "PlatformEngineer": "-", "ServiceManager": "-", "Scientist": "-"},
    "sim.fault":          {"InfraAdmin": "all", "TenantAdmin": "-", "PlatformEngineer": "-", "ServiceManager": "-", "Scientist": "-"},
}


def test_matrix_covers_every_mutating_verb():
    assert set(MATRIX) == set(MUTATING_VERBS)
    assert all(set(row) == {r.value for r in Role} for row in MATRIX.values())


def test_exhaustive_role_verb_scope_matrix():
    checked = 0
    for role, verb, where in itertools.product(Role, list(MATRIX) + sorted(READ_VERBS), ("own", "foreign", "none")):
        tenant = "*" if role is Role.InfraAdmin else "t1"
        p = Principal("p", role, tenant)
        res_tenant = {"own": "t1", "foreign": "t2", "none": None}[where]
        decision = authorize(p, verb, Resource("label", "vc:x", res_tenant))
        if verb in READ_VERBS:
            expected = True
        else:
            cell = MATRIX[verb][role.value]
            expected = cell == "all" or (cell == "own" and where != "foreign")
        assert bool(decision) == expected, (role, verb, where, decision)
        if not expected:
            assert decision.reason
        checked += 1
    assert checked == len(Role) * (len(MATRIX) + len(READ_VERBS)) * 3


@given(st.text(min_size=1, max_size=12))
def test_unknown_verbs_are_denied(verb):
    if verb in READ_VERBS or verb in MATRIX:
        return
    for role in Role:
        p = Principal("p", role, "*" if role is Role.InfraAdmin else "t")
        assert not authorize(p, verb, Resource("x", "y"))


def test_wildcard_scope_is_admin_only():
    with pytest.raises(UsageError):
        Principal("x", Role.TenantAdmin, "*")
    Principal("x", Role.InfraAdmin, "*")


def test_scientist_status_vs_deploy():
    p = Principal("alice", Role.Scientist, "mch")
    assert authorize(p, "status", Resource("vcluster", "mch-icon-22", "mch"))
    assert not authorize(p, "pipeline.deploy", Resource("vcluster", "mch-icon-22", "mch"))


def test_tenant_admin_examples_against_inventory():
    cp = make_cp()
    cp.inventory.assign_group(who(cp, "mch-admin"), "vc:mch-icon-22", ["gh200-001"])
    cp.inventory.assign_group(who(cp, "psi-admin"), "vc:merlin7", ["rome001"])
    with pytest.raises(RbacDenied) as err:
        cp.inventory.node_power(who(cp, "mch-admin"), "vc:merlin7", "Reboot")
    assert err.value.details["reason"] == "foreign tenant"


def test_labels_have_one_owner():
    t = Tenancy.from_toml(data_text("principals.toml"))
    owners = {}
    for tenant in t.tenants.values():
        for label in tenant.labels:
            assert label not in owners
            owners[label] = tenant.tenant_id
    with pytest.raises(RbacDenied):
        t.claim_label("vc:daint", "mch")


def test_principals_fixture_and_round_trip():
    t = load_principals(BUILTIN)
    assert {p.role for p in t.principals.values()} == set(Role)
    assert {x.platform for x in t.tenants.values()} >= {"mch-icon-22", "merlin7", "hpc-platform", "ml-platform", "cw-platform"}
    assert Tenancy.from_dict(t.to_dict()).to_dict() == t.to_dict()


def test_unknown_principal():
    with pytest.raises(RbacDenied):
        load_principals(BUILTIN).principal("mallory")
