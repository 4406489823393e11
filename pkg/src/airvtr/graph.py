"""Relative pose graph with a privileged (learnt) path.

The graph never stores or returns a global pose: every query yields a
transform relative to a named vertex. Edge ``(a -> b)`` stores ``T_ba``,
mapping coordinates of vertex ``a``'s vehicle frame into vertex ``b``'s.

Binary file layout (little-endian), version 1::

    header   : magic b"AVTRGRPH" | u16 version | u16 reserved | u32 record_count
    record   : u8 type | u32 payload_len | payload | u32 crc32(type..payload)
    footer   : magic b"AVTR_END" | u32 crc32(header + all records) | u64 body_len

    type 1 META   : i64 next_track_id | u32 n_vertices | u32 n_edges | i32 current_run
    type 2 VERTEX : i64 id | i32 run | u8 privileged | f64 timestamp | 12 f64 T_sv
                    | u32 n | n*3 f64 landmarks | n i64 descriptor ids
                    | n i64 track ids | n*3 f64 observations (u, v, d)
    type 3 EDGE   : i64 from | i64 to | u8 privileged | 12 f64 transform

A 12-float transform is the row-major rotation followed by the translation.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .se3 import RigidTransform

MAGIC = b"AVTRGRPH"
FOOTER_MAGIC = b"AVTR_END"
VERSION = 1
REC_META, REC_VERTEX, REC_EDGE = 1, 2, 3


class GraphError(ValueError):
    pass


class IntegrityError(GraphError):
    """Corrupt or truncated graph file."""

    def __init__(self, message: str, record_index: int | None = None):
        super().__init__(message if record_index is None else f"record {record_index}: {message}")
        self.record_index = record_index


class PayloadUnavailable(RuntimeError):
    """A vertex payload was evicted and cannot be reloaded."""


@dataclass(frozen=True, eq=False)
class VertexPayload:
    """Landmarks (camera frame at capture) and the stereo records they came from."""

    landmarks: np.ndarray
    descriptor_ids: np.ndarray
    track_ids: np.ndarray
    observations: np.ndarray

    def __len__(self) -> int:
        return len(self.descriptor_ids)

    @classmethod
    def empty(cls) -> "VertexPayload":
        return cls(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))

    def equals(self, other: "VertexPayload") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("landmarks", "descriptor_ids", "track_ids", "observations")
        )


@dataclass
class GraphVertex:
    id: int
    T_sv: RigidTransform
    timestamp: float
    privileged: bool
    run: int
    payload: VertexPayload | None = field(default=None, repr=False)


@dataclass(frozen=True)
class GraphEdge:
    from_id: int
    to_id: int
    transform: RigidTransform  # T_to_from
    privileged: bool


class PoseGraph:
    """Vertices, edges and the privileged path index."""

    def __init__(self) -> None:
        self.vertices: dict[int, GraphVertex] = {}
        self.edges: dict[tuple[int, int], GraphEdge] = {}
        self.privileged_path: list[int] = []
        self._path_pos: dict[int, int] = {}
        self._incoming: dict[int, int] = {}
        self.next_track_id = 0
        self.current_run = -1
        self.privileged_phase = False
        # memory manager
        self._store: Path | None = None
        self._offsets: dict[int, tuple[int, int]] = {}
        self.cache_misses = 0
        self.loads = 0

    # ------------------------------------------------------------------ build

    def begin_run(self, privileged: bool) -> int:
        """Start a new run; vertices added afterwards inherit ``privileged``."""
        if privileged and self.privileged_path:
            raise GraphError("only a single privileged experience is supported")
        self.current_run += 1
        self.privileged_phase = privileged
        return self.current_run

    def new_track_ids(self, n: int) -> np.ndarray:
        ids = np.arange(self.next_track_id, self.next_track_id + n, dtype=np.int64)
        self.next_track_id += n
        return ids

    def add_keyframe(
        self,
        payload: VertexPayload,
        T_sv: RigidTransform,
        timestamp: float,
        previous: int | None = None,
        T_new_prev: RigidTransform | None = None,
    ) -> int:
        """Insert a vertex and its edge from ``previous`` atomically."""
        if self.current_run < 0:
            self.begin_run(privileged=True)
        if previous is not None:
            if previous not in self.vertices:
                raise GraphError(f"edge references unknown vertex {previous}")
            if T_new_prev is None:
                raise GraphError("edge transform required with a previous vertex")
        elif self.vertices and self.privileged_phase and self.privileged_path:
            raise GraphError("privileged vertex must link to the previous privileged vertex")
        privileged = self.privileged_phase
        if privileged and self.privileged_path and previous != self.privileged_path[-1]:
            raise GraphError("privileged edges must connect consecutive privileged vertices")
        vid = max(self.vertices) + 1 if self.vertices else 0
        v = GraphVertex(vid, T_sv, float(timestamp), privileged, self.current_run, payload)
        edge = None
        if previous is not None:
            edge = GraphEdge(previous, vid, T_new_prev, privileged)
        # commit
        self.vertices[vid] = v
        if edge is not None:
            self.edges[(previous, vid)] = edge
            self._incoming[vid] = previous
        if privileged:
            self._path_pos[vid] = len(self.privileged_path)
            self.privileged_path.append(vid)
        return vid

    def set_edge_transform(self, from_id: int, to_id: int, T: RigidTransform) -> None:
        e = self.edges[(from_id, to_id)]
        self.edges[(from_id, to_id)] = replace(e, transform=T)
        for vid in (from_id, to_id):
            self._offsets.pop(vid, None)

    def update_landmarks(self, vid: int, landmarks: np.ndarray) -> None:
        pay = self.payload(vid)
        self.vertices[vid].payload = replace(pay, landmarks=landmarks)
        # diverged from the persisted copy; pin it in memory
        self._offsets.pop(vid, None)

    # ---------------------------------------------------------------- queries

    def __len__(self) -> int:
        return len(self.vertices)

    def vertex(self, vid: int) -> GraphVertex:
        try:
            return self.vertices[vid]
        except KeyError:
            raise GraphError(f"unknown vertex {vid}") from None

    def is_privileged(self, vid: int) -> bool:
        return vid in self._path_pos

    def path_index(self, vid: int) -> int:
        try:
            return self._path_pos[vid]
        except KeyError:
            raise GraphError(f"vertex {vid} is not privileged") from None

    def previous(self, vid: int) -> int | None:
        return self._incoming.get(vid)

    def edge_transform(self, from_id: int, to_id: int) -> RigidTransform:
        """T_to_from for a stored edge."""
        return self.edges[(from_id, to_id)].transform

    def compose_privileged(self, a: int, b: int) -> RigidTransform:
        """T_ab between two privileged vertices by chaining privileged edges."""
        ia, ib = self.path_index(a), self.path_index(b)
        if ia == ib:
            return RigidTransform.identity()
        lo, hi = min(ia, ib), max(ia, ib)
        T = RigidTransform.identity()  # T_{hi, lo}
        for i in range(lo, hi):
            T = self.edge_transform(self.privileged_path[i], self.privileged_path[i + 1]) @ T
        return T if ia > ib else T.inverse()

    def local_window(self, center: int, radius: int) -> list[tuple[int, RigidTransform]]:
        """Privileged vertices within ``radius`` path steps of ``center``.

        Returns (vertex id, T_center_vertex) pairs ordered along the path.
        """
        ic = self.path_index(center)
        path = self.privileged_path
        lo, hi = max(0, ic - radius), min(len(path) - 1, ic + radius)
        out = {center: RigidTransform.identity()}
        T = RigidTransform.identity()
        for i in range(ic + 1, hi + 1):
            # T_center_i = T_center_{i-1} @ T_{i-1, i}
            T = T @ self.edge_transform(path[i - 1], path[i]).inverse()
            out[path[i]] = T
        T = RigidTransform.identity()
        for i in range(ic - 1, lo - 1, -1):
            T = T @ self.edge_transform(path[i], path[i + 1])
            out[path[i]] = T
        return [(path[i], out[path[i]]) for i in range(lo, hi + 1)]

    def run_window(self, newest: int, size: int) -> list[int]:
        """Up to ``size`` vertices ending at ``newest``, following incoming
        edges within the same run; ordered oldest first."""
        run = self.vertex(newest).run
        ids = [newest]
        cur = newest
        while len(ids) < size:
            prev = self._incoming.get(cur)
            if prev is None or self.vertices[prev].run != run:
                break
            ids.append(prev)
            cur = prev
        return ids[::-1]

    def compose_run(self, a: int, b: int) -> RigidTransform:
        """T_ab where ``b`` is an ancestor of ``a`` along incoming edges."""
        T = RigidTransform.identity()
        cur = a
        while cur != b:
            prev = self._incoming.get(cur)
            if prev is None:
                raise GraphError(f"vertex {b} is not an ancestor of {a}")
            T = T @ self.edge_transform(prev, cur)
            cur = prev
        return T

    # --------------------------------------------------------- memory manager

    def payload(self, vid: int) -> VertexPayload:
        """Vertex payload, reloading it from disk if it was evicted."""
        v = self.vertex(vid)
        if v.payload is None:
            self._load_payload(vid)
            self.cache_misses += 1
        return v.payload

    def resident(self, vid: int) -> bool:
        return self.vertex(vid).payload is not None

    def attach_store(self, path: str | Path | None, offsets: dict[int, tuple[int, int]]) -> None:
        """Register the file holding persisted payloads; None detaches it."""
        self._store = None if path is None else Path(path)
        self._offsets = dict(offsets) if path is not None else {}

    def evict(self, keep: set[int] | list[int]) -> int:
        """Drop persisted payloads of vertices not in ``keep``; returns count."""
        keep = set(keep)
        n = 0
        for vid in self._offsets:
            v = self.vertices.get(vid)
            if v is not None and vid not in keep and v.payload is not None:
                v.payload = None
                n += 1
        return n

    def prefetch(self, ids) -> int:
        """Make payloads of ``ids`` resident (blocking loads)."""
        n = 0
        for vid in ids:
            if self.vertex(vid).payload is None:
                self._load_payload(vid)
                n += 1
        return n

    def _load_payload(self, vid: int) -> None:
        if self._store is None or vid not in self._offsets:
            raise PayloadUnavailable(f"vertex {vid} payload evicted and not persisted")
        off, length = self._offsets[vid]
        with open(self._store, "rb") as fh:
            fh.seek(off)
            blob = fh.read(length)
        rtype, body = _unwrap_record(blob, None)
        if rtype != REC_VERTEX:
            raise PayloadUnavailable(f"vertex {vid}: stored record has type {rtype}")
        v, _ = _decode_vertex(body)
        if v.id != vid:
            raise PayloadUnavailable(f"vertex {vid}: stored record holds vertex {v.id}")
        self.vertices[vid].payload = v.payload
        self.loads += 1

    # ------------------------------------------------------------------ misc

    def structurally_equal(self, other: "PoseGraph") -> bool:
        if (
            self.privileged_path != other.privileged_path
            or set(self.vertices) != set(other.vertices)
            or set(self.edges) != set(other.edges)
            or self.next_track_id != other.next_track_id
        ):
            return False
        for vid, v in self.vertices.items():
            w = other.vertices[vid]
            if (
                v.timestamp != w.timestamp
                or v.privileged != w.privileged
                or v.run != w.run
                or not _bit_equal(v.T_sv, w.T_sv)
                or not self.payload(vid).equals(other.payload(vid))
            ):
                return False
        for k, e in self.edges.items():
            f = other.edges[k]
            if e.privileged != f.privileged or not _bit_equal(e.transform, f.transform):
                return False
        return True


def _bit_equal(a: RigidTransform, b: RigidTransform) -> bool:
    return np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)


# ---------------------------------------------------------------- encoding


def _pack_T(T: RigidTransform) -> bytes:
    return np.concatenate([T.rotation.reshape(-1), T.translation]).astype("<f8").tobytes()


def _unpack_T(buf: bytes, off: int) -> tuple[RigidTransform, int]:
    a = np.frombuffer(buf, dtype="<f8", count=12, offset=off).astype(float)
    return RigidTransform(a[:9].reshape(3, 3), a[9:]), off + 96


def _encode_vertex(v: GraphVertex, payload: VertexPayload) -> bytes:
    n = len(payload)
    out = io.BytesIO()
    out.write(struct.pack("<qiBd", v.id, v.run, int(v.privileged), v.timestamp))
    out.write(_pack_T(v.T_sv))
    out.write(struct.pack("<I", n))
    out.write(np.ascontiguousarray(payload.landmarks, dtype="<f8").tobytes())
    out.write(np.ascontiguousarray(payload.descriptor_ids, dtype="<i8").tobytes())
    out.write(np.ascontiguousarray(payload.track_ids, dtype="<i8").tobytes())
    out.write(np.ascontiguousarray(payload.observations, dtype="<f8").tobytes())
    return out.getvalue()


def _decode_vertex(buf: bytes) -> tuple[GraphVertex, int]:
    head = struct.calcsize("<qiBd")
    vid, run, priv, ts = struct.unpack_from("<qiBd", buf, 0)
    T_sv, off = _unpack_T(buf, head)
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    need = off + n * (24 + 8 + 8 + 24)
    if len(buf) != need:
        raise GraphError(f"vertex payload length {len(buf)} != expected {need}")

    def take(dtype, count, shape=None):
        nonlocal off
        a = np.frombuffer(buf, dtype=dtype, count=count, offset=off).copy()
        off += a.nbytes
        return a.reshape(shape) if shape else a

    lms = take("<f8", 3 * n, (n, 3)).astype(float)
    desc = take("<i8", n).astype(np.int64)
    trk = take("<i8", n).astype(np.int64)
    obs = take("<f8", 3 * n, (n, 3)).astype(float)
    v = GraphVertex(int(vid), T_sv, float(ts), bool(priv), int(run), VertexPayload(lms, desc, trk, obs))
    return v, off


def _encode_edge(e: GraphEdge) -> bytes:
    return struct.pack("<qqB", e.from_id, e.to_id, int(e.privileged)) + _pack_T(e.transform)


def _decode_edge(buf: bytes) -> GraphEdge:
    if len(buf) != 17 + 96:
        raise GraphError("edge record has wrong length")
    a, b, priv = struct.unpack_from("<qqB", buf, 0)
    T, _ = _unpack_T(buf, 17)
    return GraphEdge(int(a), int(b), T, bool(priv))


def _wrap_record(rtype: int, body: bytes) -> bytes:
    head = struct.pack("<BI", rtype, len(body))
    crc = zlib.crc32(head + body)
    return head + body + struct.pack("<I", crc)


def _unwrap_record(blob: bytes, index: int | None) -> tuple[int, bytes]:
    if len(blob) < 9:
        raise IntegrityError("truncated record header", index)
    rtype, n = struct.unpack_from("<BI", blob, 0)
    if len(blob) < 5 + n + 4:
        raise IntegrityError("truncated record body", index)
    body = blob[5 : 5 + n]
    (crc,) = struct.unpack_from("<I", blob, 5 + n)
    if zlib.crc32(blob[: 5 + n]) != crc:
        raise IntegrityError("record checksum mismatch", index)
    return rtype, body


def save_graph(graph: PoseGraph, path: str | Path) -> dict[int, tuple[int, int]]:
    """Write ``graph`` to ``path`` and register the file as its payload store.

    Returns the byte (offset, length) of each vertex record.
    """
    records: list[tuple[int, bytes, int | None]] = []
    meta = struct.pack("<qIIi", graph.next_track_id, len(graph.vertices), len(graph.edges), graph.current_run)
    records.append((REC_META, meta, None))
    for vid in sorted(graph.vertices):
        v = graph.vertices[vid]
        records.append((REC_VERTEX, _encode_vertex(v, graph.payload(vid)), vid))
    for key in sorted(graph.edges):
        records.append((REC_EDGE, _encode_edge(graph.edges[key]), None))

    body = io.BytesIO()
    body.write(MAGIC + struct.pack("<HHI", VERSION, 0, len(records)))
    offsets = {}
    for rtype, payload, vid in records:
        rec = _wrap_record(rtype, payload)
        if vid is not None:
            offsets[vid] = (body.tell(), len(rec))
        body.write(rec)
    data = body.getvalue()
    footer = FOOTER_MAGIC + struct.pack("<IQ", zlib.crc32(data), len(data))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data + footer)
    tmp.replace(path)
    graph.attach_store(path, offsets)
    return offsets


def load_graph(path: str | Path) -> PoseGraph:
    """Read a graph file, verifying every record checksum and the footer."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise IntegrityError("bad magic or truncated header")
    version, _, count = struct.unpack_from("<HHI", data, 8)
    if version != VERSION:
        raise IntegrityError(f"unsupported version {version}")
    g = PoseGraph()
    off = 16
    offsets = {}
    meta = None
    edges: list[GraphEdge] = []
    for i in range(count):
        if off + 9 > len(data):
            raise IntegrityError("truncated record header", i)
        (n,) = struct.unpack_from("<I", data, off + 1)
        blob = data[off : off + 9 + n]
        rtype, body = _unwrap_record(blob, i)
        try:
            if rtype == REC_META:
                meta = struct.unpack("<qIIi", body)
            elif rtype == REC_VERTEX:
                v, _ = _decode_vertex(body)
                g.vertices[v.id] = v
                offsets[v.id] = (off, len(blob))
            elif rtype == REC_EDGE:
                edges.append(_decode_edge(body))
            else:
                raise IntegrityError(f"unknown record type {rtype}", i)
        except (GraphError, struct.error, ValueError) as exc:
            if isinstance(exc, IntegrityError):
                raise
            raise IntegrityError(str(exc), i) from exc
        off += len(blob)
    if len(data) < off + 20 or data[off : off + 8] != FOOTER_MAGIC:
        raise IntegrityError("missing or truncated footer", count)
    crc, body_len = struct.unpack_from("<IQ", data, off + 8)
    if body_len != off or zlib.crc32(data[:off]) != crc:
        raise IntegrityError("file checksum mismatch", count)
    if meta is None:
        raise IntegrityError("missing META record", 0)
    g.next_track_id, nv, ne, g.current_run = meta
    if nv != len(g.vertices) or ne != len(edges):
        raise IntegrityError("record counts disagree with META", 0)
    for e in edges:
        g.edges[(e.from_id, e.to_id)] = e
        g._incoming[e.to_id] = e.from_id
    path_ids = sorted(vid for vid, v in g.vertices.items() if v.privileged)
    g.privileged_path = path_ids
    g._path_pos = {vid: i for i, vid in enumerate(path_ids)}
    g.attach_store(path, offsets)
    return g


def dump_text(graph: PoseGraph) -> str:
    """Human-readable listing of vertices and edges."""
    lines = [
        f"# pose graph: {len(graph.vertices)} vertices, {len(graph.edges)} edges, "
        f"{len(graph.privileged_path)} privileged"
    ]
    for vid in sorted(graph.vertices):
        v = graph.vertices[vid]
        n = len(v.payload) if v.payload is not None else "evicted"
        t = v.T_sv.translation
        lines.append(
            f"V {vid} run={v.run} priv={int(v.privileged)} t={v.timestamp:.3f} "
            f"landmarks={n} T_sv.t=({t[0]:.3f},{t[1]:.3f},{t[2]:.3f})"
        )
    for key in sorted(graph.edges):
        e = graph.edges[key]
        t = e.transform.translation
        lines.append(
            f"E {e.from_id}->{e.to_id} priv={int(e.privileged)} t=({t[0]:.4f},{t[1]:.4f},{t[2]:.4f})"
        )
    return "\n".join(lines) + "\n"
