"""Frame-to-keyframe stereo visual odometry.

Pipeline per frame: descriptor matching against the last keyframe, MLESAC
pose hypothesis search, Gauss-Newton pose refinement with the landmarks held
fixed, keyframe policy, and (on keyframes) windowed refinement of the most
recent vertices.

All estimated transforms between camera frames map the *target* (keyframe or
map) camera coordinates into the *live* camera coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .se3 import RigidTransform, exp_so3, rotation_magnitude, skew
from .world import StereoCameraModel, triangulable, triangulate

log = logging.getLogger(__name__)


class EstimationError(RuntimeError):
    """Robust estimation did not produce an acceptable hypothesis."""


class InsufficientMatchesError(EstimationError, ValueError):
    pass


# --------------------------------------------------------------------------
# Matching
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Matches:
    """Parallel arrays of putative correspondences.

    ``corrupted`` marks pairs whose descriptor was deliberately confused; it is
    simulator bookkeeping for tests and metrics only.
    """

    frame_index: np.ndarray
    target_index: np.ndarray
    corrupted: np.ndarray

    def __len__(self) -> int:
        return len(self.frame_index)

    @classmethod
    def empty(cls) -> "Matches":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0, dtype=bool))

    def subset(self, idx) -> "Matches":
        return Matches(self.frame_index[idx], self.target_index[idx], self.corrupted[idx])


@dataclass(frozen=True)
class MatchConfig:
    confusion_rate: float = 0.0
    # log-range ratio tolerance of the descriptor; None disables the scale model
    scale_sigma: float | None = None


def match(
    frame_ids: np.ndarray,
    target_ids: np.ndarray,
    config: MatchConfig = MatchConfig(),
    seed=0,
    frame_range: np.ndarray | None = None,
    target_range: np.ndarray | None = None,
    target_priority: np.ndarray | None = None,
) -> Matches:
    """Match frame descriptors to target descriptors by identity.

    When a descriptor occurs several times among the targets, the occurrence
    with the lowest ``target_priority`` wins. With ``config.scale_sigma`` set,
    a pairing survives with probability exp(-0.5 (ln(r_f / r_t) / sigma)^2),
    where r are the viewing ranges. A fraction ``confusion_rate`` of the
    surviving pairings is then re-pointed to a target with a different id.
    """
    frame_ids = np.asarray(frame_ids)
    target_ids = np.asarray(target_ids)
    if len(frame_ids) == 0 or len(target_ids) == 0:
        return Matches.empty()
    rng = np.random.default_rng(seed)

    order = np.lexsort(
        (np.arange(len(target_ids)), target_priority if target_priority is not None else np.zeros(len(target_ids)), target_ids)
    )
    sorted_ids = target_ids[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_ids[1:] != sorted_ids[:-1]
    uniq_ids, uniq_idx = sorted_ids[first], order[first]

    pos = np.searchsorted(uniq_ids, frame_ids)
    pos = np.minimum(pos, len(uniq_ids) - 1)
    hit = uniq_ids[pos] == frame_ids
    fi = np.flatnonzero(hit)
    ti = uniq_idx[pos[hit]]

    if config.scale_sigma is not None and len(fi):
        if frame_range is None or target_range is None:
            raise ValueError("scale model needs frame and target ranges")
        with np.errstate(divide="ignore", invalid="ignore"):
            lr = np.log(frame_range[fi] / target_range[ti])
        p = np.exp(-0.5 * (np.nan_to_num(lr, nan=np.inf, posinf=np.inf) / config.scale_sigma) ** 2)
        keep = rng.random(len(fi)) < p
        fi, ti = fi[keep], ti[keep]

    corrupted = np.zeros(len(fi), dtype=bool)
    if config.confusion_rate > 0.0 and len(fi):
        flip = np.flatnonzero(rng.random(len(fi)) < config.confusion_rate)
        # re-point each flipped pairing to a uniformly drawn target with another id
        for k in flip:
            wrong = np.flatnonzero(target_ids != frame_ids[fi[k]])
            if len(wrong):
                ti[k] = wrong[int(rng.integers(len(wrong)))]
                corrupted[k] = True
    return Matches(fi.astype(np.int64), ti.astype(np.int64), corrupted)


# --------------------------------------------------------------------------
# Reprojection model
# --------------------------------------------------------------------------


def reprojection_residuals(
    R: np.ndarray, t: np.ndarray, points: np.ndarray, obs: np.ndarray, camera: StereoCameraModel
) -> np.ndarray:
    """(N, 3) residuals of projected (u, v, d) minus observed (u, v, d)."""
    p = points @ R.T + t
    z = p[:, 2]
    bad = z <= 1e-6
    z = np.where(bad, 1.0, z)
    pred = np.column_stack(
        [camera.focal * p[:, 0] / z + camera.cx, camera.focal * p[:, 1] / z + camera.cy, camera.fb / z]
    )
    r = pred - obs
    r[bad] = 1e6
    return r


def projection_jacobian(p: np.ndarray, camera: StereoCameraModel) -> np.ndarray:
    """d(u, v, d)/dp for camera-frame points p, shape (N, 3, 3)."""
    f = camera.focal
    iz = 1.0 / p[:, 2]
    iz2 = iz * iz
    J = np.zeros((len(p), 3, 3))
    J[:, 0, 0] = f * iz
    J[:, 0, 2] = -f * p[:, 0] * iz2
    J[:, 1, 1] = f * iz
    J[:, 1, 2] = -f * p[:, 1] * iz2
    J[:, 2, 2] = -camera.fb * iz2
    return J


def _skew_batch(p: np.ndarray) -> np.ndarray:
    S = np.zeros((len(p), 3, 3))
    S[:, 0, 1] = -p[:, 2]
    S[:, 0, 2] = p[:, 1]
    S[:, 1, 0] = p[:, 2]
    S[:, 1, 2] = -p[:, 0]
    S[:, 2, 0] = -p[:, 1]
    S[:, 2, 1] = p[:, 0]
    return S


def pose_jacobian(R: np.ndarray, t: np.ndarray, points: np.ndarray, camera: StereoCameraModel) -> np.ndarray:
    """Jacobian of the residuals w.r.t. the left perturbation (rho, phi).

    The perturbed pose is (Exp(phi) R, Exp(phi) t + rho); shape (N, 3, 6).
    """
    p = points @ R.T + t
    Jp = projection_jacobian(p, camera)
    J = np.empty((len(p), 3, 6))
    J[:, :, :3] = Jp
    J[:, :, 3:] = -Jp @ _skew_batch(p)
    return J


def perturb(R: np.ndarray, t: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dR = exp_so3(delta[3:])
    return dR @ R, dR @ t + delta[:3]


# --------------------------------------------------------------------------
# Single-pose optimisation with fixed landmarks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PoseOptimization:
    transform: RigidTransform
    cost: float
    initial_cost: float
    iterations: int
    converged: bool


def optimize_pose(
    initial: RigidTransform,
    points: np.ndarray,
    obs: np.ndarray,
    camera: StereoCameraModel,
    max_iterations: int = 20,
    rel_tol: float = 1e-9,
) -> PoseOptimization:
    """Gauss-Newton on the total squared reprojection error of one pose.

    Landmarks (``points``, in the target camera frame) stay fixed. If the very
    first step cannot reduce the cost even with heavy damping, the initial
    transform is returned with ``converged=False``.
    """
    if len(points) < 3:
        raise InsufficientMatchesError("pose optimisation needs at least 3 correspondences")
    R, t = initial.rotation.copy(), initial.translation.copy()
    r = reprojection_residuals(R, t, points, obs, camera)
    cost = float(np.sum(r * r))
    initial_cost = cost
    it = 0
    lam = 0.0
    for it in range(1, max_iterations + 1):
        if cost < 1e-24:
            return PoseOptimization(RigidTransform(R, t), cost, initial_cost, it - 1, True)
        J = pose_jacobian(R, t, points, camera).reshape(-1, 6)
        H = J.T @ J
        g = J.T @ r.reshape(-1)
        accepted = False
        for _ in range(10):
            try:
                delta = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam = max(lam * 10.0, 1e-6)
                continue
            R2, t2 = perturb(R, t, delta)
            r2 = reprojection_residuals(R2, t2, points, obs, camera)
            cost2 = float(np.sum(r2 * r2))
            if cost2 < cost:
                accepted = True
                lam = lam * 0.1 if lam > 1e-9 else 0.0
                break
            lam = max(lam * 10.0, 1e-6)
        if not accepted:
            if it == 1:
                log.warning("pose optimisation could not decrease the cost; returning initial")
                return PoseOptimization(initial, initial_cost, initial_cost, 1, False)
            break
        rel = (cost - cost2) / max(cost, 1e-300)
        R, t, r, cost = R2, t2, r2, cost2
        if rel < rel_tol:
            break
    return PoseOptimization(RigidTransform(R, t), cost, initial_cost, it, True)


# --------------------------------------------------------------------------
# MLESAC
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MlesacConfig:
    threshold: float = 2.0  # pixels
    max_hypotheses: int = 200
    confidence: float = 0.99
    min_inliers: int = 10
    batch: int = 25
    refit_rounds: int = 4


@dataclass(frozen=True, eq=False)
class RobustEstimate:
    transform: RigidTransform
    inliers: np.ndarray  # indices into the match set
    iterations: int
    cost: float = 0.0

    @property
    def inlier_count(self) -> int:
        return int(len(self.inliers))


def kabsch(P: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched rigid alignment, Q ~ R P + t, for P, Q of shape (H, k, 3)."""
    pc = P.mean(axis=1, keepdims=True)
    qc = Q.mean(axis=1, keepdims=True)
    Hm = np.einsum("hki,hkj->hij", P - pc, Q - qc)
    U, _, Vt = np.linalg.svd(Hm)
    d = np.sign(np.linalg.det(np.einsum("hij,hjk->hik", Vt.transpose(0, 2, 1), U.transpose(0, 2, 1))))
    d[d == 0] = 1.0
    D = np.zeros((len(P), 3, 3))
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = Vt.transpose(0, 2, 1) @ D @ U.transpose(0, 2, 1)
    t = qc[:, 0, :] - np.einsum("hij,hj->hi", R, pc[:, 0, :])
    return R, t


def _polish_minimal(R, t, P, obs, camera, iterations=3):
    """A few damped Gauss-Newton steps of each hypothesis on its own sample.

    Stereo depth is far noisier than image position, so the raw rigid
    alignment of triangulated points is re-fit against the (u, v, d)
    observations of the same three points. R, t: (H,3,3), (H,3); P, obs: (H,3,3).
    """
    H = len(R)
    for _ in range(iterations):
        p = np.einsum("hij,hkj->hki", R, P) + t[:, None, :]
        z = p[..., 2]
        if np.any(z <= 1e-6):
            z = np.where(z <= 1e-6, 1e-6, z)
            p = p.copy()
            p[..., 2] = z
        flat = p.reshape(-1, 3)
        pred = camera.project(flat).reshape(H, 3, 3)
        r = (pred - obs).reshape(H, 9)
        Jp = projection_jacobian(flat, camera)
        J = np.empty((H * 3, 3, 6))
        J[:, :, :3] = Jp
        J[:, :, 3:] = -Jp @ _skew_batch(flat)
        J = J.reshape(H, 3, 3, 6).reshape(H, 9, 6)
        A = np.einsum("hki,hkj->hij", J, J) + 1e-6 * np.eye(6)
        g = np.einsum("hki,hk->hi", J, r)
        try:
            d = -np.linalg.solve(A, g[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            break
        d[~np.all(np.isfinite(d), axis=1)] = 0.0
        for h in range(H):
            R[h], t[h] = perturb(R[h], t[h], d[h])
    return R, t


def _batch_sq_errors(R, t, points, obs, camera):
    p = np.einsum("hij,nj->hni", R, points) + t[:, None, :]
    z = p[..., 2]
    bad = z <= 1e-6
    z = np.where(bad, 1.0, z)
    du = camera.focal * p[..., 0] / z + camera.cx - obs[None, :, 0]
    dv = camera.focal * p[..., 1] / z + camera.cy - obs[None, :, 1]
    dd = camera.fb / z - obs[None, :, 2]
    e2 = du * du + dv * dv + dd * dd
    e2[bad] = np.inf
    return e2


def mlesac_pose(
    matches: Matches,
    observations: np.ndarray,
    targets: np.ndarray,
    camera: StereoCameraModel,
    config: MlesacConfig = MlesacConfig(),
    seed=0,
) -> RobustEstimate:
    """Robustly estimate T_live_target from stereo matches.

    Hypotheses come from 3-point rigid alignment of triangulated live points to
    target points; each is scored with the truncated quadratic
    sum(min(e^2, threshold^2)) over stereo reprojection errors. The best
    hypothesis is refit on its inliers by Gauss-Newton, alternating with
    inlier re-selection.

    Args:
        matches: correspondences; frame_index indexes ``observations``,
            target_index indexes ``targets``.
        observations: (N, 3) live (u, v, disparity).
        targets: (M, 3) target points in the target camera frame.
    """
    n = len(matches)
    if n < 3:
        raise InsufficientMatchesError(f"MLESAC needs >= 3 matches, got {n}")
    obs = np.asarray(observations, dtype=float)[matches.frame_index]
    P = np.asarray(targets, dtype=float)[matches.target_index]
    pool = np.flatnonzero(triangulable(obs[:, 2], camera))
    if len(pool) < 3:
        raise EstimationError("fewer than 3 triangulable matches")
    Q = np.full((n, 3), np.nan)
    Q[pool] = triangulate(obs[pool, :2], obs[pool, 2], camera)

    rng = np.random.default_rng(seed)
    thr2 = config.threshold**2
    best_cost = np.inf
    best = None
    done = 0
    needed = config.max_hypotheses
    m = len(pool)
    while done < min(needed, config.max_hypotheses):
        H = min(config.batch, config.max_hypotheses - done)
        s = rng.integers(0, m, size=(H, 3))
        while True:
            clash = (s[:, 0] == s[:, 1]) | (s[:, 0] == s[:, 2]) | (s[:, 1] == s[:, 2])
            if not clash.any():
                break
            s[clash] = rng.integers(0, m, size=(int(clash.sum()), 3))
        sel = pool[s]
        Ps, Qs = P[sel], Q[sel]
        area = np.linalg.norm(np.cross(Ps[:, 1] - Ps[:, 0], Ps[:, 2] - Ps[:, 0]), axis=1)
        R, t = kabsch(Ps, Qs)
        R, t = _polish_minimal(R, t, Ps, obs[sel], camera)
        e2 = _batch_sq_errors(R, t, P, obs, camera)
        cost = np.minimum(e2, thr2).sum(axis=1)
        cost[area < 1e-4] = np.inf
        done += H
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            best_cost = float(cost[k])
            best = (R[k], t[k], e2[k])
            w = float(np.mean(e2[k] <= thr2))
            if w >= 1.0:
                needed = 0
            elif w > 0.0:
                needed = int(math.ceil(math.log(1.0 - config.confidence) / math.log(1.0 - w**3)))
    if best is None or not np.isfinite(best_cost):
        raise EstimationError("no valid hypothesis")

    R, t, e2 = best
    inl = e2 <= thr2
    min_needed = max(3, config.min_inliers)
    if inl.sum() < min_needed:
        raise EstimationError(f"best hypothesis has {int(inl.sum())} inliers (< {min_needed})")
    T = RigidTransform(R, t)
    for _ in range(config.refit_rounds):
        T = optimize_pose(T, P[inl], obs[inl], camera).transform
        r = reprojection_residuals(T.rotation, T.translation, P, obs, camera)
        new_inl = np.einsum("ij,ij->i", r, r) <= thr2
        if new_inl.sum() < 3:
            break
        same = np.array_equal(new_inl, inl)
        inl = new_inl
        if same:
            break
    r = reprojection_residuals(T.rotation, T.translation, P, obs, camera)
    e2 = np.einsum("ij,ij->i", r, r)
    inl = e2 <= thr2
    if inl.sum() < min_needed:
        raise EstimationError(f"refit left {int(inl.sum())} inliers (< {min_needed})")
    return RobustEstimate(T, np.flatnonzero(inl), done, float(np.minimum(e2, thr2).sum()))


# --------------------------------------------------------------------------
# Keyframes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyframePolicy:
    min_inliers: int = 120
    max_translation: float = 2.0
    max_rotation: float = math.radians(10.0)

    def __post_init__(self):
        if self.min_inliers <= 0 or self.max_translation <= 0 or self.max_rotation <= 0:
            raise ValueError("keyframe thresholds must be positive")


def keyframe_decision(estimate: RobustEstimate, policy: KeyframePolicy) -> bool:
    T = estimate.transform
    return (
        estimate.inlier_count < policy.min_inliers
        or float(np.linalg.norm(T.translation)) > policy.max_translation
        or rotation_magnitude(T) > policy.max_rotation
    )


# --------------------------------------------------------------------------
# Windowed refinement
# --------------------------------------------------------------------------


@dataclass
class RefinementResult:
    vertex_ids: list[int] = field(default_factory=list)
    poses: dict[int, RigidTransform] = field(default_factory=dict)  # T_v_oldest
    cost_history: list[float] = field(default_factory=list)
    skipped: bool = False
    reason: str = ""


def windowed_refinement(
    graph,
    newest: int,
    window_size: int,
    camera: StereoCameraModel,
    refine_landmarks: bool = True,
    max_iterations: int = 10,
    gate: float = 6.0,
    min_shared: int = 6,
    rel_tol: float = 1e-9,
) -> RefinementResult:
    """Bundle-adjust the last ``window_size`` vertices of ``newest``'s run.

    The oldest pose in the window is the gauge and stays fixed. Observations
    are grouped into landmarks by track id; only tracks seen from at least two
    window vertices take part. Accepted steps strictly decrease the total
    squared reprojection cost. On success the window's edges and landmark
    positions are rewritten in the graph.
    """
    if not 2 <= window_size <= 10:
        raise ValueError(f"window size {window_size} outside [2, 10]")
    ids = graph.run_window(newest, window_size)
    if len(ids) < 2:
        return RefinementResult(ids, skipped=True, reason="window has fewer than 2 vertices")

    K = len(ids)
    verts = [graph.vertex(v) for v in ids]
    pays = [graph.payload(v) for v in ids]
    # camera poses relative to the oldest camera frame
    Rs, ts = [np.eye(3)], [np.zeros(3)]
    for k in range(1, K):
        T_v = graph.edge_transform(ids[k - 1], ids[k])  # T_{k, k-1} in vehicle frames
        T_c = verts[k].T_sv @ T_v @ verts[k - 1].T_sv.inverse()
        Rs.append(T_c.rotation @ Rs[-1])
        ts.append(T_c.rotation @ ts[-1] + T_c.translation)
    Rs, ts = np.array(Rs), np.array(ts)

    kk = np.concatenate([np.full(len(p.track_ids), k) for k, p in enumerate(pays)])
    tracks = np.concatenate([p.track_ids for p in pays])
    zobs = np.concatenate([p.observations for p in pays])
    local = np.concatenate([p.landmarks for p in pays])

    uniq, inv, counts = np.unique(tracks, return_inverse=True, return_counts=True)
    multi = counts[inv] >= 2
    kk, tracks, zobs, local, inv = kk[multi], tracks[multi], zobs[multi], local[multi], inv[multi]
    if len(kk) == 0:
        return RefinementResult(ids, skipped=True, reason="no shared landmarks")
    # initial landmark estimate: from the oldest observing vertex
    order = np.lexsort((kk, inv))
    firsts = order[np.r_[True, inv[order][1:] != inv[order][:-1]]]
    lm_of = {int(inv[i]): i for i in firsts}
    j_raw = inv
    X0 = np.zeros((len(uniq), 3))
    for j, i in lm_of.items():
        X0[j] = Rs[kk[i]].T @ (local[i] - ts[kk[i]])

    def residuals(Rs_, ts_, X_, k_, j_, z_):
        p = np.einsum("nij,nj->ni", Rs_[k_], X_[j_]) + ts_[k_]
        zc = np.where(p[:, 2] > 1e-6, p[:, 2], 1e-6)
        pred = np.column_stack(
            [camera.focal * p[:, 0] / zc + camera.cx, camera.focal * p[:, 1] / zc + camera.cy, camera.fb / zc]
        )
        return pred - z_, p

    r0, _ = residuals(Rs, ts, X0, kk, j_raw, zobs)
    good = np.einsum("ij,ij->i", r0, r0) <= gate * gate
    kk, j_raw, zobs, tracks = kk[good], j_raw[good], zobs[good], tracks[good]
    # keep landmarks still seen twice after gating, re-index compactly
    cnt = np.bincount(j_raw, minlength=len(uniq))
    keep = cnt[j_raw] >= 2
    kk, j_raw, zobs, tracks = kk[keep], j_raw[keep], zobs[keep], tracks[keep]
    used, jj = np.unique(j_raw, return_inverse=True)
    X = X0[used]
    track_of_lm = uniq[used]
    L = len(X)

    shared = np.bincount(kk, minlength=K)
    if L == 0 or np.any(shared[1:] < min_shared) or shared[0] < min_shared:
        log.warning("windowed refinement skipped: rank deficient window %s", ids)
        return RefinementResult(ids, skipped=True, reason="rank deficient")

    P = K - 1
    r, p = residuals(Rs, ts, X, kk, jj, zobs)
    cost = float(np.sum(r * r))
    history = [cost]
    lam = 0.0
    for _ in range(max_iterations):
        if cost < 1e-20:
            break
        Jp = projection_jacobian(p, camera)
        Jpose = np.empty((len(p), 3, 6))
        Jpose[:, :, :3] = Jp
        Jpose[:, :, 3:] = -Jp @ _skew_batch(p)
        Jpt = Jp @ Rs[kk]
        free = kk > 0
        pi = kk[free] - 1

        B = np.zeros((P, 6, 6))
        np.add.at(B, pi, np.einsum("nki,nkj->nij", Jpose[free], Jpose[free]))
        gp = np.zeros((P, 6))
        np.add.at(gp, pi, np.einsum("nki,nk->ni", Jpose[free], r[free]))
        if refine_landmarks:
            V = np.zeros((L, 3, 3))
            np.add.at(V, jj, np.einsum("nki,nkj->nij", Jpt, Jpt))
            gl = np.zeros((L, 3))
            np.add.at(gl, jj, np.einsum("nki,nk->ni", Jpt, r))
            W = np.zeros((P, L, 6, 3))
            np.add.at(W, (pi, jj[free]), np.einsum("nki,nkj->nij", Jpose[free], Jpt[free]))

        accepted = False
        for _ in range(10):
            Bd = B + lam * (np.einsum("pii->pi", B)[:, :, None] * np.eye(6) + 1e-9 * np.eye(6))
            try:
                if refine_landmarks:
                    Vd = V + lam * (np.einsum("lii->li", V)[:, :, None] * np.eye(3)) + 1e-12 * np.eye(3)
                    Vinv = np.linalg.inv(Vd)
                    WV = np.einsum("pljc,lcd->pljd", W, Vinv)
                    S = -np.einsum("pljd,qlkd->pjqk", WV, W).reshape(6 * P, 6 * P)
                    for q in range(P):
                        S[6 * q : 6 * q + 6, 6 * q : 6 * q + 6] += Bd[q]
                    b = -(gp - np.einsum("pljd,ld->pj", WV, gl)).reshape(-1)
                    dp = np.linalg.solve(S, b).reshape(P, 6)
                    dl = -np.einsum("lcd,ld->lc", Vinv, gl + np.einsum("pljd,pj->ld", W, dp))
                else:
                    dp = -np.linalg.solve(Bd, gp[:, :, None])[:, :, 0]
                    dl = np.zeros((L, 3))
            except np.linalg.LinAlgError:
                lam = max(lam * 10.0, 1e-6)
                continue
            Rs2, ts2 = Rs.copy(), ts.copy()
            for q in range(P):
                Rs2[q + 1], ts2[q + 1] = perturb(Rs[q + 1], ts[q + 1], dp[q])
            X2 = X + dl
            r2, p2 = residuals(Rs2, ts2, X2, kk, jj, zobs)
            cost2 = float(np.sum(r2 * r2))
            if cost2 < cost:
                accepted = True
                lam = lam * 0.1 if lam > 1e-9 else 0.0
                break
            lam = max(lam * 10.0, 1e-6)
        if not accepted:
            break
        rel = (cost - cost2) / cost
        Rs, ts, X, r, p, cost = Rs2, ts2, X2, r2, p2, cost2
        history.append(cost)
        if rel < rel_tol:
            break

    result = RefinementResult(ids, cost_history=history)
    if len(history) == 1:
        for k, v in enumerate(ids):
            result.poses[v] = graph.compose_run(v, ids[0])
        return result

    # write back edges and landmark positions
    Tc = [RigidTransform(Rs[k], ts[k]) for k in range(K)]
    for k in range(1, K):
        T_v = verts[k].T_sv.inverse() @ Tc[k] @ Tc[k - 1].inverse() @ verts[k - 1].T_sv
        graph.set_edge_transform(ids[k - 1], ids[k], T_v)
    lm_index = {int(tid): j for j, tid in enumerate(track_of_lm)}
    for k, v in enumerate(ids if refine_landmarks else ()):
        pay = pays[k]
        js = np.array([lm_index.get(int(tid), -1) for tid in pay.track_ids], dtype=np.int64)
        sel = js >= 0
        if sel.any():
            new = pay.landmarks.copy()
            new[sel] = X[js[sel]] @ Rs[k].T + ts[k]
            graph.update_landmarks(v, new)
    T0 = verts[0].T_sv
    for k, v in enumerate(ids):
        result.poses[v] = verts[k].T_sv.inverse() @ Tc[k] @ T0
    return result


# --------------------------------------------------------------------------
# Stateful frame-to-keyframe pipeline
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VOConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    mlesac: MlesacConfig = field(default_factory=MlesacConfig)
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    window_size: int = 7
    refine: bool = True
    refine_landmarks: bool = True


@dataclass(frozen=True, eq=False)
class VOStep:
    """Outcome of one frame.

    ``delta`` is T_new_old between consecutive live vehicle frames (None on
    failure or for the very first frame); ``keyframe`` is the new vertex id
    when the frame was promoted.
    """

    success: bool
    delta: RigidTransform | None
    keyframe: int | None
    inliers: int
    corrupted_inliers: int = 0
    refinement: RefinementResult | None = None


def frame_payload(frame, camera: StereoCameraModel, track_ids: np.ndarray | None = None):
    """Triangulate the usable records of a frame into a vertex payload."""
    from .graph import VertexPayload

    ok = triangulable(frame.disparity, camera)
    pts = triangulate(frame.uv[ok], frame.disparity[ok], camera) if ok.any() else np.zeros((0, 3))
    tracks = np.full(int(ok.sum()), -1, dtype=np.int64) if track_ids is None else track_ids[ok]
    return VertexPayload(pts, frame.ids[ok].astype(np.int64), tracks, frame.observations[ok]), np.flatnonzero(ok)


class VisualOdometry:
    """Tracks the live camera against the last keyframe and grows the graph.

    Args:
        graph: PoseGraph receiving keyframes.
        camera: stereo model used for projection.
        config: VO thresholds.
        seed: base seed; each frame derives its own stream from it.
    """

    def __init__(self, graph, camera: StereoCameraModel, config: VOConfig = VOConfig(), seed=0):
        self.graph = graph
        self.camera = camera
        self.config = config
        self.seed = seed
        self.keyframe_id: int | None = None
        # T_livecam_kfcam for the previous frame, in camera and vehicle terms
        self._prev_T_live_kf: RigidTransform | None = None
        self.frames = 0
        self.failures = 0

    def _seed(self, stream: int):
        return [int(s) for s in np.atleast_1d(self.seed)] + [self.frames, stream]

    def process(self, frame, T_sv: RigidTransform, force_keyframe: bool = False) -> VOStep:
        g = self.graph
        self.frames += 1
        if self.keyframe_id is None:
            pay, _ = frame_payload(frame, self.camera)
            pay = _with_tracks(pay, g.new_track_ids(len(pay)))
            vid = g.add_keyframe(pay, T_sv, frame.timestamp)
            self.keyframe_id = vid
            self._prev_T_live_kf = RigidTransform.identity()
            return VOStep(True, None, vid, len(pay))

        kf = g.vertex(self.keyframe_id)
        kp = g.payload(self.keyframe_id)
        cfg = self.config
        frame_range = np.where(frame.disparity > 0, self.camera.fb / np.maximum(frame.disparity, 1e-12), np.inf)
        m = match(
            frame.ids, kp.descriptor_ids, cfg.match, self._seed(1),
            frame_range=frame_range, target_range=kp.landmarks[:, 2],
        )
        try:
            est = mlesac_pose(m, frame.observations, kp.landmarks, self.camera, cfg.mlesac, self._seed(2))
        except EstimationError as exc:
            self.failures += 1
            log.debug("VO failure at t=%.3f: %s", frame.timestamp, exc)
            return VOStep(False, None, None, 0)

        # vehicle-frame pose of the live frame relative to the keyframe
        T_live_kf = T_sv.inverse() @ est.transform @ kf.T_sv
        delta = T_live_kf @ self._prev_T_live_kf.inverse()
        n_corrupt = int(m.corrupted[est.inliers].sum())

        if not (force_keyframe or keyframe_decision(est, cfg.keyframe)):
            self._prev_T_live_kf = T_live_kf
            return VOStep(True, delta, None, est.inlier_count, n_corrupt)

        pay, rows = frame_payload(frame, self.camera)
        tracks = np.full(len(frame.ids), -1, dtype=np.int64)
        inl = m.subset(est.inliers)
        tracks[inl.frame_index] = kp.track_ids[inl.target_index]
        tracks = tracks[rows]
        fresh = tracks < 0
        tracks[fresh] = g.new_track_ids(int(fresh.sum()))
        pay = _with_tracks(pay, tracks)
        vid = g.add_keyframe(pay, T_sv, frame.timestamp, previous=self.keyframe_id, T_new_prev=T_live_kf)
        refinement = None
        if cfg.refine:
            refinement = windowed_refinement(
                g, vid, cfg.window_size, self.camera, refine_landmarks=cfg.refine_landmarks
            )
        self.keyframe_id = vid
        self._prev_T_live_kf = RigidTransform.identity()
        return VOStep(True, delta, vid, est.inlier_count, n_corrupt, refinement)


def _with_tracks(payload, tracks):
    from dataclasses import replace

    return replace(payload, track_ids=np.asarray(tracks, dtype=np.int64))
