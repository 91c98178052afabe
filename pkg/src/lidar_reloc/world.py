"""Procedural tunnel networks and a ray-cast spinning LiDAR.

Tunnels are planar graphs of straight corridor pieces with rectangular
cross-sections. Each edge is an oriented box around its centerline, pushed
past shared nodes by the narrowest incident half-width so corners and
junctions stay watertight. A ray's return is the far end of the connected
run of box intervals that contains the sensor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .formats import write_labels, write_pcd, write_trajectory
from .geometry import Pose, PointCloud, Trajectory, transform_points, voxel_downsample

log = logging.getLogger(__name__)

STRAIGHT, JUNCTION, TURN = 0, 1, 2
JUNCTION_RADIUS = 5.0
SEGMENT_KINDS = ("straight", "turn", "junction")


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    width: float
    height: float
    kind: str  # "straight" | "turn"


@dataclass(frozen=True, eq=False)
class TunnelGraph:
    """Centerline graph. ``waves`` rows are ``(kx, ky, kz, phase)`` of the
    wall relief; ``roughness`` is its standard deviation in meters."""

    nodes: np.ndarray
    edges: tuple[Edge, ...]
    roughness: float = 0.0
    waves: np.ndarray | None = None

    def __post_init__(self):
        if self.roughness < 0:
            raise WorldError("roughness must be >= 0")
        if self.roughness > 0 and self.waves is None:
            raise WorldError("rough walls need wave parameters")
        nodes = np.array(self.nodes, dtype=float).reshape(-1, 3)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", tuple(self.edges))
        for e in self.edges:
            if not 2.0 <= e.width <= 12.0:
                raise WorldError(f"edge width {e.width} outside [2, 12] m")
            if e.kind not in ("straight", "turn"):
                raise WorldError(f"unknown edge kind {e.kind!r}")
        if self.edges and self._components() != 1:
            raise WorldError("tunnel graph is not connected")

    def _components(self) -> int:
        from scipy.sparse.csgraph import connected_components
        return connected_components(self._adjacency(), directed=False)[0]

    def _adjacency(self, weights=None):
        n = len(self.nodes)
        u = [e.u for e in self.edges]
        v = [e.v for e in self.edges]
        w = weights if weights is not None else np.ones(len(u))
        return csr_matrix((np.r_[w, w], (np.r_[u, v], np.r_[v, u])), shape=(n, n))

    def relief(self, points: np.ndarray) -> np.ndarray:
        """Outward wall displacement at world points (zero for smooth walls)."""
        if self.roughness == 0:
            return np.zeros(len(points))
        k, phase = self.waves[:, :3], self.waves[:, 3]
        return self.roughness * np.sqrt(2.0 / len(phase)) * np.sin(points @ k.T + phase).sum(axis=1)

    @property
    def degree(self) -> np.ndarray:
        deg = np.zeros(len(self.nodes), dtype=int)
        for e in self.edges:
            deg[e.u] += 1
            deg[e.v] += 1
        return deg

    @property
    def junctions(self) -> np.ndarray:
        return np.flatnonzero(self.degree >= 3)

    def segment(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        e = self.edges[k]
        return self.nodes[e.u], self.nodes[e.v]

    def total_length(self) -> float:
        return float(sum(np.linalg.norm(b - a) for a, b in map(self.segment, range(len(self.edges)))))

    def chains(self) -> list[list[int]]:
        """Node sequences between nodes whose degree is not 2."""
        deg = self.degree
        adj: dict[int, list[int]] = {i: [] for i in range(len(self.nodes))}
        for k, e in enumerate(self.edges):
            adj[e.u].append(k)
            adj[e.v].append(k)
        used = set()
        out = []
        for k, e in enumerate(self.edges):
            if k in used:
                continue
            # walk back to a chain end, then forward
            start, prev_edge = e.u, k
            while deg[start] == 2:
                other = [x for x in adj[start] if x != prev_edge][0]
                if other == k:
                    break
                oe = self.edges[other]
                start = oe.u if oe.v == start else oe.v
                prev_edge = other
            chain = [start]
            cur, edge = start, prev_edge
            while True:
                used.add(edge)
                ce = self.edges[edge]
                cur = ce.v if ce.u == cur else ce.u
                chain.append(cur)
                if deg[cur] != 2:
                    break
                nxt = [x for x in adj[cur] if x != edge]
                if not nxt or nxt[0] in used:
                    break
                edge = nxt[0]
            out.append(chain)
        return out


def _segment_distance(p1, q1, p2, q2) -> float:
    """Minimum distance between two 2-D segments."""
    def point_seg(p, a, b):
        ab = b - a
        t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
        return np.linalg.norm(p - (a + t * ab))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    d1, d2 = cross(p2, q2, p1), cross(p2, q2, q1)
    d3, d4 = cross(p1, q1, p2), cross(p1, q1, q2)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return 0.0
    return min(point_seg(p1, p2, q2), point_seg(q1, p2, q2),
               point_seg(p2, p1, q1), point_seg(q2, p1, q1))


class _Builder:
    def __init__(self):
        self.nodes = [np.zeros(3)]
        self.edges: list[Edge] = []

    def add_node(self, p) -> int:
        self.nodes.append(np.asarray(p, dtype=float))
        return len(self.nodes) - 1

    def add_edge(self, u, v, w, h, kind):
        self.edges.append(Edge(u, v, w, h, kind))


def _op_straight(b, node, heading, rng, w, h, length=None):
    L = rng.uniform(20.0, 40.0) if length is None else length
    d = np.array([np.cos(heading), np.sin(heading), 0.0])
    new = b.add_node(b.nodes[node] + L * d)
    b.add_edge(node, new, w, h, "straight")
    return new, heading


def _op_turn(b, node, heading, rng, w, h):
    angle = rng.uniform(np.radians(45), np.radians(90)) * rng.choice([-1.0, 1.0])
    radius = rng.uniform(12.0, 20.0)
    pieces = int(np.ceil(abs(angle) / np.radians(15.0)))
    sign = np.sign(angle)
    center = b.nodes[node] + radius * np.array([-np.sin(heading), np.cos(heading), 0.0]) * sign
    phi0 = heading - sign * np.pi / 2
    cur = node
    for i in range(1, pieces + 1):
        phi = phi0 + angle * i / pieces
        p = center + radius * np.array([np.cos(phi), np.sin(phi), 0.0])
        nxt = b.add_node(p)
        b.add_edge(cur, nxt, w, h, "turn")
        cur = nxt
    return cur, heading + angle


def _op_junction(b, node, heading, rng, w, h):
    j, _ = _op_straight(b, node, heading, rng, w, h, rng.uniform(15.0, 25.0))
    side = heading + rng.choice([-1.0, 1.0]) * rng.uniform(np.radians(70), np.radians(110))
    sw = float(np.clip(w * rng.uniform(0.8, 1.2), 2.0, 12.0))
    _op_straight(b, j, side, rng, sw, h, rng.uniform(15.0, 30.0))
    return _op_straight(b, j, heading, rng, w, h, rng.uniform(15.0, 25.0))


def _waves(seed: int, n: int = 12) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    k = d * (2 * np.pi / rng.uniform(1.5, 6.0, size=(n, 1)))
    return np.column_stack([k, rng.uniform(0, 2 * np.pi, n)])


_OPS = {"straight": _op_straight, "turn": _op_turn, "junction": _op_junction}
CLEARANCE = 3.0
SKIP_PATH = 15.0


def _intersects(b: _Builder, first_new_edge: int) -> bool:
    """Whether any new edge comes too close to an edge far away along the graph."""
    nodes = np.array(b.nodes)
    n = len(nodes)
    lengths = [np.linalg.norm(nodes[e.v] - nodes[e.u]) for e in b.edges]
    adj = csr_matrix((np.r_[lengths, lengths],
                      (np.r_[[e.u for e in b.edges], [e.v for e in b.edges]],
                       np.r_[[e.v for e in b.edges], [e.u for e in b.edges]])), shape=(n, n))
    D = dijkstra(adj, directed=False)
    for k in range(first_new_edge, len(b.edges)):
        ek = b.edges[k]
        for m in range(k):
            em = b.edges[m]
            path = min(D[a, c] for a in (ek.u, ek.v) for c in (em.u, em.v))
            if path < SKIP_PATH:
                continue
            gap = _segment_distance(nodes[ek.u, :2], nodes[ek.v, :2], nodes[em.u, :2], nodes[em.v, :2])
            if gap < (ek.width + em.width) / 2 + CLEARANCE:
                return True
    return False


def generate_world(seed: int, spec: dict, width_range=(3.5, 6.0), height_range=(3.0, 4.5),
                   roughness: float = 0.0, max_attempts: int = 200) -> TunnelGraph:
    """Random tunnel network with the requested number of each segment kind.

    ``spec`` maps ``straight`` / ``turn`` / ``junction`` to counts. Ops are
    applied in a seed-shuffled order, each continuing from the previous end.
    A junction op lays a lead-in corridor, a dead-end side branch and a
    continuation, so it adds exactly one node of degree 3.
    """
    unknown = set(spec) - set(SEGMENT_KINDS)
    if unknown:
        raise WorldError(f"unknown segment kinds {sorted(unknown)}")
    counts = {k: int(spec.get(k, 0)) for k in SEGMENT_KINDS}
    if any(c < 0 for c in counts.values()):
        raise WorldError("segment counts must be >= 0")
    if sum(counts.values()) < 1:
        raise WorldError("world spec must request at least one segment")
    lo, hi = width_range
    if not 2.0 <= lo <= hi <= 12.0:
        raise WorldError("width range must lie within [2, 12] m")
    rng = np.random.default_rng(seed)
    ops = [k for k in SEGMENT_KINDS for _ in range(counts[k])]
    for _ in range(max_attempts):
        order = [ops[i] for i in rng.permutation(len(ops))]
        b = _Builder()
        node, heading = 0, 0.0
        ok = True
        for op in order:
            for _ in range(30):
                saved = (len(b.nodes), len(b.edges))
                w = rng.uniform(lo, hi)
                h = rng.uniform(*height_range)
                n_new, h_new = _OPS[op](b, node, heading, rng, w, h)
                if not _intersects(b, saved[1]):
                    node, heading = n_new, h_new
                    break
                del b.nodes[saved[0]:]
                del b.edges[saved[1]:]
            else:
                ok = False
                break
        if ok:
            return TunnelGraph(np.array(b.nodes), b.edges, roughness, _waves(seed))
    raise WorldError(f"could not lay out {counts} without self-intersection")


# ---------------------------------------------------------------- ray casting

@dataclass(frozen=True)
class LidarModel:
    channels: int = 16
    fov_up_deg: float = 15.0
    fov_down_deg: float = -15.0
    azimuth_steps: int = 900
    max_range: float = 100.0
    noise_sigma: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.channels < 1 or self.azimuth_steps < 1:
            raise ValueError("channels and azimuth steps must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not self.fov_up_deg > self.fov_down_deg:
            raise ValueError("fov_up_deg must exceed fov_down_deg")

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, channel-major.

        Beams sit at the centers of ``channels`` equal elevation bins across
        the field of view, so each maps onto one range-image row.
        """
        up, down = np.radians(self.fov_up_deg), np.radians(self.fov_down_deg)
        el = up - (np.arange(self.channels) + 0.5) * (up - down) / self.channels
        az = 2 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        E, A = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class _Boxes:
    center: np.ndarray   # (B, 3)
    axes: np.ndarray     # (B, 3, 3) rows: along, lateral, up
    half: np.ndarray     # (B, 3)
    start: np.ndarray    # (B, 3) segment endpoints, for culling
    end: np.ndarray


def _boxes(world: TunnelGraph) -> _Boxes:
    deg = world.degree
    ext = np.zeros(len(world.nodes))
    for i in range(len(world.nodes)):
        inc = [e.width / 2 for e in world.edges if i in (e.u, e.v)]
        ext[i] = min(inc) if deg[i] >= 2 else 0.0
    C, A, H, S, E = [], [], [], [], []
    for e in world.edges:
        a, b = world.nodes[e.u], world.nodes[e.v]
        L = np.linalg.norm(b - a)
        d = (b - a) / L
        lat = np.array([-d[1], d[0], 0.0])
        up = np.cross(d, lat)
        lo, hi = -ext[e.u], L + ext[e.v]
        C.append(a + d * (lo + hi) / 2)
        A.append(np.stack([d, lat, up]))
        H.append([(hi - lo) / 2, e.width / 2, e.height / 2])
        S.append(a)
        E.append(b)
    return _Boxes(np.array(C), np.array(A), np.array(H), np.array(S), np.array(E))


def _point_segment_dist(p, a, b):
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def inside_world(world: TunnelGraph, point, boxes: _Boxes | None = None) -> bool:
    bx = boxes or _boxes(world)
    local = np.einsum("bij,bj->bi", bx.axes, np.asarray(point, dtype=float) - bx.center)
    return bool(np.any(np.all(np.abs(local) <= bx.half, axis=1)))


def cast_rays(world: TunnelGraph, origin, dirs: np.ndarray, max_range: float,
              boxes: _Boxes | None = None) -> np.ndarray:
    """Distance along each world-frame unit ray to the tunnel surface."""
    bx = boxes or _boxes(world)
    origin = np.asarray(origin, dtype=float)
    reach = _point_segment_dist(np.broadcast_to(origin, bx.start.shape), bx.start, bx.end)
    near = reach <= max_range + np.linalg.norm(bx.half, axis=1)
    center, axes, half = bx.center[near], bx.axes[near], bx.half[near]
    o = np.einsum("bij,bj->bi", axes, origin - center)           # (B, 3)
    if not np.any(np.all(np.abs(o) <= half, axis=1)):
        raise WorldError(f"pose {origin.tolist()} lies outside every tunnel")
    d = np.einsum("bij,rj->rbi", axes, dirs)                      # (R, B, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    # a ray parallel to a slab is inside it everywhere or nowhere
    par = d == 0
    inside_slab = np.abs(o) <= half
    near_t = np.where(par, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    far_t = np.where(par, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_in = near_t.max(axis=2)
    t_out = far_t.min(axis=2)
    valid = t_out >= np.maximum(t_in, 0.0)
    t_in = np.where(valid, t_in, np.inf)
    t_out = np.where(valid, t_out, -np.inf)
    reach_t = np.zeros(len(dirs))
    exit_box = np.zeros(len(dirs), dtype=np.int64)
    rows = np.arange(len(dirs))
    for _ in range(len(center) + 1):
        cover = (t_in <= reach_t[:, None] + 1e-9) & (t_out > reach_t[:, None])
        masked = np.where(cover, t_out, -np.inf)
        box = masked.argmax(axis=1)
        new = masked[rows, box]
        grow = new > reach_t
        if not grow.any():
            break
        reach_t = np.where(grow, new, reach_t)
        exit_box = np.where(grow, box, exit_box)
    if world.roughness > 0:
        # move the hit along the exit face normal by the local relief
        far = far_t[rows, exit_box]                               # (R, 3)
        axis = far.argmin(axis=1)
        cos = np.abs(d[rows, exit_box, axis])
        hit = origin + reach_t[:, None] * dirs
        reach_t = reach_t + world.relief(hit) / np.maximum(cos, 0.25)
    return reach_t


def simulate_scan(world: TunnelGraph, pose: Pose, lidar: LidarModel,
                  rng: np.random.Generator, boxes: _Boxes | None = None) -> PointCloud:
    """Ray-cast scan in the sensor frame, with range noise and dropout."""
    dirs = lidar.directions()
    r = cast_rays(world, pose.translation, dirs @ pose.rotation.T, lidar.max_range, boxes)
    if lidar.noise_sigma > 0:
        r = r + rng.normal(0.0, lidar.noise_sigma, size=r.shape)
    keep = (r > 0) & (r <= lidar.max_range)
    if lidar.dropout > 0:
        keep &= rng.random(r.shape) >= lidar.dropout
    return PointCloud(dirs[keep] * r[keep, None])


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True, eq=False)
class LabeledSample:
    cloud: PointCloud
    pose: Pose
    label: int


def label_for_pose(world: TunnelGraph, position) -> int:
    """Junction within 5 m of a junction node, else the nearest edge's kind."""
    p = np.asarray(position, dtype=float)
    J = world.junctions
    if len(J) and np.min(np.linalg.norm(world.nodes[J, :2] - p[:2], axis=1)) <= JUNCTION_RADIUS:
        return JUNCTION
    S = np.array([world.nodes[e.u] for e in world.edges])
    E = np.array([world.nodes[e.v] for e in world.edges])
    d = _point_segment_dist(np.broadcast_to(p, S.shape)[:, :2], S[:, :2], E[:, :2])
    return TURN if world.edges[int(np.argmin(d))].kind == "turn" else STRAIGHT


def sample_poses(world: TunnelGraph, spacing: float, offset: float | None = None,
                 rng: np.random.Generator | None = None, heading_jitter: float = 0.0) -> list[Pose]:
    """Poses every ``spacing`` m along each chain, heading along the tangent.

    Sampling starts ``offset`` m into each chain (default half a spacing).
    ``heading_jitter`` adds a uniform yaw in ``[-jitter, jitter]``.
    """
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    offset = spacing / 2 if offset is None else offset
    if heading_jitter > 0 and rng is None:
        raise ValueError("heading jitter needs an rng")
    poses = []
    for chain in world.chains():
        P = world.nodes[chain]
        seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
        cum = np.r_[0.0, np.cumsum(seg)]
        for s in np.arange(offset, cum[-1], spacing):
            k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
            d = (P[k + 1] - P[k]) / seg[k]
            pos = P[k] + d * (s - cum[k])
            yaw = float(np.arctan2(d[1], d[0]))
            if heading_jitter > 0:
                yaw += rng.uniform(-heading_jitter, heading_jitter)
            poses.append(Pose.from_yaw(yaw, pos))
    return poses


def scan_poses(world: TunnelGraph, poses, lidar: LidarModel, seed: int) -> list[PointCloud]:
    """One scan per pose; pose ``i`` draws from its own stream ``(seed, i)``."""
    boxes = _boxes(world)
    return [simulate_scan(world, p, lidar, np.random.default_rng([seed, i]), boxes)
            for i, p in enumerate(poses)]


def generate_dataset(world: TunnelGraph, spacing: float, lidar: LidarModel, seed: int,
                     offset: float | None = None, heading_jitter: float = 0.0) -> list[LabeledSample]:
    rng = np.random.default_rng([seed, 1 << 20])
    poses = sample_poses(world, spacing, offset, rng, heading_jitter)
    clouds = scan_poses(world, poses, lidar, seed)
    return [LabeledSample(c, p, label_for_pose(world, p.translation)) for c, p in zip(clouds, poses)]


def build_map(world: TunnelGraph, poses, lidar: LidarModel, seed: int,
              voxel: float = 0.05) -> PointCloud:
    """Union of scans from ``poses`` in the world frame, voxel-filtered."""
    clouds = scan_poses(world, poses, lidar, seed)
    pts = np.concatenate([transform_points(c.xyz, p) for c, p in zip(clouds, poses)])
    return PointCloud(voxel_downsample(pts, voxel))


def export_dataset(samples, out_dir) -> None:
    """``scans/NNNNNN.pcd``, ``trajectory.tum`` and ``labels.csv``."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_pcd(s.cloud, out / "scans" / f"{i:06d}.pcd")
    write_trajectory(Trajectory.from_poses([s.pose for s in samples],
                                           [float(i) for i in range(len(samples))]),
                     out / "trajectory.tum")
    write_labels([s.label for s in samples], out / "labels.csv")


@dataclass
class WorldSpec:
    """Everything ``simulate`` needs, loadable from JSON."""

    segments: dict = field(default_factory=lambda: {"straight": 4, "turn": 2, "junction": 2})
    roughness: float = 0.1
    map_spacing: float = 1.0
    query_spacing: float = 1.0
    query_offset: float = 1.0
    heading_jitter: float = 0.0
    noise_sigma: float = 0.0
    dropout: float = 0.0
    voxel: float = 0.05

    @classmethod
    def from_dict(cls, doc: dict) -> WorldSpec:
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise WorldError(f"unknown world spec keys {sorted(unknown)}")
        return cls(**doc)
