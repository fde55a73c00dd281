import itertools
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from support import make_cp, small_fixture, who

from vcforge.canonical import canonical_json
from vcforge.errors import (
    BackendRejected,
    ConflictingClusterLabel,
    DuplicateNode,
    RbacDenied,
    UnknownHwKind,
    UnknownLabel,
    UnknownSite,
)
from vcforge.inventory import (
    Dialect,
    Inventory,
    Power,
    replay,
    translate,
    validate_message,
)
from vcforge.scenario import BUILTIN, load_fixture, load_principals
from vcforge.tenancy import SYSTEM

TABLE_1 = {
    # kind: (nodes, GPUs) as published for the fleet
    "cpu-rome": (1024, 0),
    "gpu-a100": (144, 576),
    "gpu-mi250x": (24, 96),
    "gpu-mi300a": (128, 512),
    "gpu-gh200": (2688, 10752),
}


def test_table1_fixture_counts():
    inv = Inventory()
    summary = inv.load_inventory(load_fixture(BUILTIN))
    assert summary.total_nodes == 4008
    assert summary.total_gpus == 11936
    for kind, (nodes, gpus) in TABLE_1.items():
        assert summary.per_kind[kind] == nodes
        assert summary.gpus_per_kind[kind] == gpus
    assert all(n.power is Power.Off and not n.labels for n in inv.nodes.values())


def test_empty_fixture():
    s = Inventory().load_inventory({})
    assert (s.total_nodes, s.total_gpus, s.per_kind) == (0, 0, {})


def test_load_errors_leave_inventory_untouched():
    inv = Inventory()
    bad = small_fixture()
    bad["nodes"].append({"site": "alps-a", "hw_kind": "gpu-gh200", "count": 1, "prefix": "gh200-"})
    with pytest.raises(DuplicateNode):
        inv.load_inventory(bad)
    assert not inv.nodes and not inv.sites
    with pytest.raises(UnknownHwKind):
        inv.load_inventory({"sites": [{"site_id": "s"}], "nodes": [{"site": "s", "hw_kind": "tpu", "count": 1, "prefix": "t"}]})
    with pytest.raises(UnknownSite):
        inv.load_inventory({"nodes": [{"site": "nowhere", "hw_kind": "cpu-rome", "count": 1, "prefix": "r"}]})


def test_group_members_sorted_and_idempotent():
    cp = make_cp()
    admin = who(cp, "cscs-admin")
    cp.inventory.assign_group(admin, "vc:daint", ["gh200-003", "gh200-001"])
    assert cp.inventory.group_members("vc:daint") == ["gh200-001", "gh200-003"]
    before = canonical_json(cp.inventory.to_dict())
    cp.inventory.assign_group(admin, "vc:daint", ["gh200-001", "gh200-003"])
    assert canonical_json(cp.inventory.to_dict()) == before
    cp.inventory.unassign(admin, "vc:daint", ["gh200-001"])
    assert cp.inventory.group_members("vc:daint") == ["gh200-003"]
    with pytest.raises(UnknownLabel):
        cp.inventory.group_members("vc:nope")


def test_empty_group_is_not_an_error():
    cp = make_cp()
    cp.inventory.assign_group(SYSTEM, "maintenance", [])
    assert cp.inventory.group_members("maintenance") == []


def test_conflicting_cluster_label_names_the_node():
    cp = make_cp()
    cp.inventory.assign_group(SYSTEM, "vc:eiger", ["gh200-002"])
    with pytest.raises(ConflictingClusterLabel) as err:
        cp.inventory.assign_group(SYSTEM, "vc:daint", ["gh200-001", "gh200-002"])
    assert err.value.details["node"] == "gh200-002"
    # all-or-nothing: gh200-001 was not labeled either
    assert "vc:daint" not in cp.inventory.nodes["gh200-001"].labels


def test_cluster_groups_disjoint_bruteforce():
    """Every assignment sequence over a 5-node toy keeps vc groups pairwise disjoint."""
    nodes = [f"n{i}" for i in range(1, 6)]
    fixture = {"sites": [{"site_id": "s", "dialect": "DialectA"}],
               "nodes": [{"site": "s", "hw_kind": "gpu-gh200", "ids": nodes, "gpus_per_node": 4}]}
    labels = ["vc:a", "vc:b"]
    ops = [(label, frozenset(sel)) for label in labels for r in (1, 2) for sel in itertools.combinations(nodes, r)]
    for seq in itertools.product(ops, repeat=2):
        inv = Inventory()
        inv.load_inventory(fixture)
        owner: dict[str, str] = {}
        for label, sel in seq:
            # oracle: a conflict exists iff some selected node is owned by the other label
            expect_conflict = any(owner.get(n, label) != label for n in sel)
            try:
                inv.assign_group(SYSTEM, label, sorted(sel))
                assert not expect_conflict
                owner.update({n: label for n in sel})
            except ConflictingClusterLabel:
                assert expect_conflict
        a = set(inv.groups.get("vc:a").member_ids if "vc:a" in inv.groups else [])
        b = set(inv.groups.get("vc:b").member_ids if "vc:b" in inv.groups else [])
        assert not a & b


def test_dialect_a_boot_is_ready_next_tick():
    cp = make_cp(boot=False)
    cp.inventory._dispatch("image", ["gh200-001", "gh200-002", "gh200-003", "gh200-004"], image="img")
    cp.inventory.assign_group(SYSTEM, "quad", ["gh200-001", "gh200-002", "gh200-003", "gh200-004"])
    report = cp.inventory.node_power(SYSTEM, "quad", "Boot")
    assert report.ok
    assert all(cp.inventory.nodes[n].power is Power.Booting for n in report.outcomes)
    cp.step()
    assert all(cp.inventory.nodes[n].power is Power.Ready for n in report.outcomes)


def test_dialect_b_boot_completes_after_delay():
    cp = make_cp(fixture=small_fixture(delay=3), boot=False)
    cp.inventory._dispatch("image", ["rome001"], image="img")
    start = cp.clock.tick
    cp.inventory.power_nodes(["rome001"], "Boot")
    seen = []
    for _ in range(4):
        cp.step()
        seen.append((cp.clock.tick - start, cp.inventory.nodes["rome001"].power))
    assert seen == [(1, Power.Booting), (2, Power.Booting), (3, Power.Ready), (4, Power.Ready)]


def test_boot_without_image_is_a_per_node_failure():
    cp = make_cp(boot=False)
    cp.inventory._dispatch("image", ["gh200-001"], image="img")
    cp.inventory.assign_group(SYSTEM, "pair", ["gh200-001", "gh200-002"])
    report = cp.inventory.node_power(SYSTEM, "pair", "Boot")
    assert report.outcomes == {"gh200-001": "ok", "gh200-002": "NoImage"}
    assert not report.ok
    cp.step()
    assert cp.inventory.nodes["gh200-001"].power is Power.Ready
    assert cp.inventory.nodes["gh200-002"].power is Power.Off


def test_ready_implies_image_after_boot_all():
    cp = make_cp()
    assert all(n.base_image for n in cp.inventory.nodes.values() if n.power is Power.Ready)


def test_partition_tags_members_and_blocks_traffic():
    cp = make_cp()
    cp.inventory.assign_group(SYSTEM, "vc:ml", ["gh200-001", "gh200-002"])
    cp.inventory.assign_group(SYSTEM, "vc:hpc", ["gh200-003"])
    report = cp.inventory.set_partition(SYSTEM, "vc:ml", "pkey-0x21")
    assert report.messages
    assert {cp.inventory.nodes[n].partition_id for n in ("gh200-001", "gh200-002")} == {"pkey-0x21"}
    again = cp.inventory.set_partition(SYSTEM, "vc:ml", "pkey-0x21")
    assert again.messages == []
    cp.inventory.set_partition(SYSTEM, "vc:hpc", "pkey-0x22")
    assert cp.fleet.send_message("gh200-001", "gh200-002")
    assert not cp.fleet.send_message("gh200-001", "gh200-003")


def test_partition_follows_cluster_label():
    cp = make_cp()
    cp.inventory.assign_group(SYSTEM, "vc:ml", ["gh200-001"])
    cp.inventory.set_partition(SYSTEM, "vc:ml", "p1")
    cp.inventory.assign_group(SYSTEM, "vc:ml", ["gh200-002"])
    assert cp.inventory.nodes["gh200-002"].partition_id == "p1"
    cp.inventory.unassign(SYSTEM, "vc:ml", ["gh200-001"])
    assert cp.inventory.nodes["gh200-001"].partition_id is None


def test_translation_is_dialect_correct():
    for dialect in Dialect:
        for intent, kw in [
            ("label", {"label": "vc:x", "attach": True}),
            ("label", {"label": "vc:x", "attach": False}),
            ("partition", {"label": "vc:x", "partition": "p"}),
            ("power", {"action": "Boot"}),
            ("power", {"action": "Reboot"}),
            ("power", {"action": "Off"}),
            ("image", {"image": "img"}),
        ]:
            msg = translate(dialect, intent, ["n1"], **kw)
            validate_message(dialect, msg)
            other = Dialect.B if dialect is Dialect.A else Dialect.A
            with pytest.raises(BackendRejected):
                validate_message(other, msg)


def test_one_message_per_affected_site():
    cp = make_cp()
    cp.inventory.message_log.clear()
    cp.inventory.assign_group(SYSTEM, "mixed", ["gh200-001", "rome001", "a100-001", "rome002"])
    sites = [e["site"] for e in cp.inventory.message_log]
    assert sites == ["alps-a", "alps-b"]


def test_backend_rejects_foreign_nodes():
    cp = make_cp()
    msg = translate(Dialect.A, "power", ["rome001"], action="Boot")
    with pytest.raises(BackendRejected):
        cp.inventory.backends["alps-a"].handle(msg, 0)


def test_replay_reproduces_node_state():
    cp = make_cp()
    inv = cp.inventory
    inv.assign_group(SYSTEM, "vc:a", ["gh200-001", "rome001"])
    inv.set_partition(SYSTEM, "vc:a", "p7")
    inv.node_power(SYSTEM, "vc:a", "Reboot")
    cp.step()
    inv.unassign(SYSTEM, "vc:a", ["rome001"])
    cp.run(3)
    rebuilt = replay(inv.fixture, inv.message_log, cp.clock.tick)
    assert [n.to_dict() for _, n in sorted(rebuilt.nodes.items())] == [n.to_dict() for _, n in sorted(inv.nodes.items())]


def test_foreign_tenant_node_scope():
    cp = make_cp()
    cp.inventory.assign_group(who(cp, "cscs-admin"), "vc:daint", ["gh200-001"])
    with pytest.raises(RbacDenied):
        cp.inventory.assign_group(who(cp, "mch-admin"), "scratch", ["gh200-001"])
    with pytest.raises(RbacDenied):
        cp.inventory.node_power(who(cp, "mch-admin"), "vc:daint", "Reboot")
    with pytest.raises(RbacDenied):
        cp.inventory.assign_group(who(cp, "cscs-pe"), "vc:daint", ["gh200-002"])


def test_round_trip_is_byte_identical():
    cp = make_cp()
    cp.inventory.assign_group(SYSTEM, "vc:a", ["gh200-001"])
    cp.inventory.power_nodes(["rome001"], "Reboot")
    data = canonical_json(cp.inventory.to_dict())
    again = Inventory.from_dict(cp.inventory.to_dict(), load_principals(BUILTIN))
    assert canonical_json(again.to_dict()) == data


def test_concurrent_label_calls_are_serialized():
    cp = make_cp()
    errors = []

    def worker(i):
        try:
            for j in range(20):
                cp.inventory.assign_group(SYSTEM, f"grp-{i}", [f"gh200-{(i * 20 + j) % 24 + 1:03d}"])
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    for label, group in cp.inventory.groups.items():
        assert group.member_ids == sorted(n for n, node in cp.inventory.nodes.items() if label in node.labels)


ops = st.lists(
    st.tuples(
        st.sampled_from(["assign", "unassign", "power"]),
        st.sampled_from(["vc:a", "vc:b", "misc"]),
        st.lists(st.integers(1, 6), min_size=1, max_size=3, unique=True),
    ),
    max_size=12,
)


@settings(max_examples=60, deadline=None)
@given(ops)
def test_inventory_invariants_hold_under_random_ops(seq):
    cp = make_cp(fixture=small_fixture(gh200=6, rome=0, a100=0))
    inv = cp.inventory
    counts = inv.summary().to_dict()
    for op, label, idx in seq:
        ids = [f"gh200-{i:03d}" for i in idx]
        try:
            if op == "assign":
                inv.assign_group(SYSTEM, label, ids)
            elif op == "unassign" and label in inv.groups:
                inv.unassign(SYSTEM, label, ids)
            elif op == "power" and label in inv.groups:
                inv.node_power(SYSTEM, label, "Reboot")
        except ConflictingClusterLabel:
            pass
        cp.step()
        for n in inv.nodes.values():
            assert sum(1 for lab in n.labels if lab.startswith("vc:")) <= 1
            assert n.power is not Power.Ready or n.base_image
        for label, group in inv.groups.items():
            assert group.member_ids == sorted(k for k, n in inv.nodes.items() if label in n.labels)
        assert inv.summary().to_dict() == counts
