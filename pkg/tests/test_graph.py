import numpy as np
import pytest

from airvtr.graph import (
    GraphError,
    IntegrityError,
    PayloadUnavailable,
    PoseGraph,
    VertexPayload,
    dump_text,
    load_graph,
    save_graph,
)
from airvtr.se3 import RigidTransform


def random_payload(rng, n=20):
    return VertexPayload(
        rng.normal(0, 5, (n, 3)),
        rng.integers(0, 10_000, n).astype(np.int64),
        rng.integers(0, 10_000, n).astype(np.int64),
        rng.uniform(0, 300, (n, 3)),
    )


def random_transform(rng):
    return RigidTransform.from_rotvec(rng.normal(0, 0.1, 3), rng.normal(0, 1.0, 3))


def build_path(n, seed=0, live=0):
    rng = np.random.default_rng(seed)
    g = PoseGraph()
    g.begin_run(True)
    prev = None
    for k in range(n):
        prev = g.add_keyframe(random_payload(rng), random_transform(rng), 0.1 * k, prev,
                              None if prev is None else random_transform(rng))
    if live:
        g.begin_run(False)
        prev = None
        for k in range(live):
            prev = g.add_keyframe(random_payload(rng), random_transform(rng), 100 + k, prev,
                                  None if prev is None else random_transform(rng))
    return g


def test_first_vertex_has_id_zero_and_no_edge():
    g = PoseGraph()
    vid = g.add_keyframe(VertexPayload.empty(), RigidTransform.identity(), 0.0)
    assert vid == 0 and not g.edges and g.privileged_path == [0]


def test_second_vertex_composes_to_edge():
    g = PoseGraph()
    a = g.add_keyframe(VertexPayload.empty(), RigidTransform.identity(), 0.0)
    T = RigidTransform.from_euler(0.1, 0.0, 0.0, (1.0, 2.0, 0.0))
    b = g.add_keyframe(VertexPayload.empty(), RigidTransform.identity(), 0.1, a, T)
    assert len(g.privileged_path) == 2
    assert g.compose_privileged(b, a).is_close(T, 0.0)


def test_hundred_inserts_form_ordered_path():
    assert build_path(100).privileged_path == list(range(100))


def test_dangling_edge_rejected():
    g = build_path(3)
    with pytest.raises(GraphError):
        g.add_keyframe(VertexPayload.empty(), RigidTransform.identity(), 1.0, 42, RigidTransform.identity())
    assert len(g) == 3


def test_privileged_chain_must_be_consecutive():
    g = build_path(3)
    with pytest.raises(GraphError):
        g.add_keyframe(VertexPayload.empty(), RigidTransform.identity(), 1.0, 0, RigidTransform.identity())


def test_live_vertices_are_not_privileged():
    g = build_path(5, live=3)
    assert g.privileged_path == list(range(5))
    assert not any(g.is_privileged(v) for v in (5, 6, 7))


def test_local_window_radius_zero():
    g = build_path(10)
    w = g.local_window(4, 0)
    assert [v for v, _ in w] == [4]
    assert w[0][1].is_close(RigidTransform.identity(), 0.0)


def test_local_window_truncates_at_start():
    g = build_path(10)
    assert [v for v, _ in g.local_window(0, 3)] == [0, 1, 2, 3]
    assert [v for v, _ in g.local_window(9, 3)] == [6, 7, 8, 9]


def edge_chain_oracle(g, center, v):
    """T_center_v by multiplying 4x4 edge matrices step by step."""
    ic, iv = g.path_index(center), g.path_index(v)
    M = np.eye(4)
    if iv > ic:
        for i in range(ic, iv):
            M = M @ np.linalg.inv(g.edge_transform(i, i + 1).matrix())
    else:
        for i in range(ic - 1, iv - 1, -1):
            M = M @ g.edge_transform(i, i + 1).matrix()
    return M


def test_local_window_matches_edge_chain_oracle():
    g = build_path(20, seed=4)
    w = g.local_window(10, 3)
    assert [v for v, _ in w] == list(range(7, 14))
    for v, T in w:
        np.testing.assert_allclose(T.matrix(), edge_chain_oracle(g, 10, v), atol=1e-12)
        assert T.is_close(g.compose_privileged(10, v), 1e-12)


def test_local_window_rejects_non_privileged_center():
    g = build_path(4, live=2)
    with pytest.raises(GraphError):
        g.local_window(5, 1)


def test_graph_has_no_world_pose_getter():
    public = [n for n in dir(PoseGraph) if not n.startswith("_")]
    for name in public:
        assert not any(w in name.lower() for w in ("world", "global", "absolute")), name


# --- persistence -----------------------------------------------------------


def test_empty_graph_round_trip(tmp_path):
    g = PoseGraph()
    save_graph(g, tmp_path / "g.bin")
    h = load_graph(tmp_path / "g.bin")
    assert len(h) == 0 and h.structurally_equal(g)


def test_round_trip_is_bit_exact(tmp_path):
    g = build_path(30, seed=2, live=10)
    save_graph(g, tmp_path / "g.bin")
    h = load_graph(tmp_path / "g.bin")
    assert g.structurally_equal(h)
    for k, e in g.edges.items():
        assert e.transform.matrix().tobytes() == h.edges[k].transform.matrix().tobytes()
    assert h.privileged_path == g.privileged_path
    assert h.run_window(39, 4) == g.run_window(39, 4)
    # saving the loaded graph reproduces the file byte for byte
    save_graph(h, tmp_path / "h.bin")
    assert (tmp_path / "g.bin").read_bytes() == (tmp_path / "h.bin").read_bytes()


def test_truncated_file_reports_record(tmp_path):
    g = build_path(10)
    p = tmp_path / "g.bin"
    offsets = save_graph(g, p)
    data = p.read_bytes()
    off, length = offsets[5]
    p.write_bytes(data[: off + length // 2])
    with pytest.raises(IntegrityError) as exc:
        load_graph(p)
    # META is record 0, so vertex 5 is record 6
    assert exc.value.record_index == 6


def test_flipped_byte_detected(tmp_path):
    g = build_path(10)
    p = tmp_path / "g.bin"
    offsets = save_graph(g, p)
    data = bytearray(p.read_bytes())
    data[offsets[3][0] + 40] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(IntegrityError) as exc:
        load_graph(p)
    assert exc.value.record_index == 4


def test_missing_footer_detected(tmp_path):
    p = tmp_path / "g.bin"
    save_graph(build_path(3), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(IntegrityError):
        load_graph(p)


# --- memory manager --------------------------------------------------------


def test_evict_with_whole_window_is_noop(tmp_path):
    g = build_path(10)
    save_graph(g, tmp_path / "g.bin")
    assert g.evict(range(10)) == 0
    assert all(g.resident(v) for v in range(10))


def test_evicted_payload_reloads_bit_identical(tmp_path):
    g = build_path(15, seed=6)
    before = {v: g.payload(v) for v in range(15)}
    save_graph(g, tmp_path / "g.bin")
    assert g.evict([7, 8]) == 13
    assert not g.resident(2)
    assert g.payload(2).equals(before[2])
    assert g.cache_misses == 1
    assert g.prefetch(range(10)) == 7
    assert g.cache_misses == 1
    for v in range(15):
        assert g.payload(v).equals(before[v])


def test_unpersisted_payload_is_never_evicted():
    g = build_path(5)
    assert g.evict([]) == 0
    g.vertices[2].payload = None
    with pytest.raises(PayloadUnavailable):
        g.payload(2)


def test_dump_text_lists_everything(tmp_path):
    g = build_path(4, live=2)
    text = dump_text(g)
    assert text.count("\nV ") == 6
    assert text.count("\nE ") == 4
    assert "E 0->1 priv=1" in text
