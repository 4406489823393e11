"""Return-phase localisation against the privileged path.

The chain keeps four vertex ids: the trunk (closest privileged vertex), the
branch (trunk at the last successful localisation), the twig (live vertex at
that time) and the leaf (newest live vertex). ``T_leaf_trunk`` is the prior
mapping trunk vehicle coordinates into the *live* vehicle frame; it is
propagated on every VO frame, not only at keyframes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .se3 import RigidTransform, matrix_to_euler, rotation_magnitude
from .vo import EstimationError, MatchConfig, MlesacConfig, match, mlesac_pose
from .world import BODY_TO_OPTICAL, StereoCameraModel

log = logging.getLogger(__name__)


class ChainNotInitialised(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LocalizationChain:
    trunk: int
    branch: int
    twig: int
    leaf: int
    T_leaf_trunk: RigidTransform
    T_twig_branch: RigidTransform
    last_vo_time: float = 0.0
    last_localization_time: float = 0.0
    vo_updates: int = 0
    localizations: int = 0
    consecutive_failures: int = 0

    def __post_init__(self):
        if not (np.all(np.isfinite(self.T_leaf_trunk.translation))):
            raise ValueError("prior must be finite")


def start_chain(graph, trunk: int, leaf: int, T_leaf_trunk: RigidTransform, now: float = 0.0) -> LocalizationChain:
    """Initialise the chain at the hand-over from learn to return."""
    if not graph.is_privileged(trunk):
        raise ValueError(f"trunk {trunk} is not privileged")
    return LocalizationChain(trunk, trunk, leaf, leaf, T_leaf_trunk, T_leaf_trunk, now, now)


def select_trunk(graph, trunk: int, T_leaf_trunk: RigidTransform, radius: int | None = 10):
    """Closest privileged vertex (translation norm) to the leaf.

    Searches ``radius`` path steps either side of ``trunk`` (None: whole path).
    Returns (new trunk, T_leaf_newtrunk). Ties keep the earlier candidate in
    distance order, with the current trunk winning ties against others.
    """
    if radius is None:
        radius = len(graph.privileged_path)
    best_id, best_T = trunk, T_leaf_trunk
    best_d = float(np.linalg.norm(T_leaf_trunk.translation))
    for vid, T_trunk_v in graph.local_window(trunk, radius):
        if vid == trunk:
            continue
        T_leaf_v = T_leaf_trunk @ T_trunk_v
        d = float(np.linalg.norm(T_leaf_v.translation))
        if d < best_d:
            best_id, best_T, best_d = vid, T_leaf_v, d
    return best_id, best_T


def update_on_vo(
    chain: LocalizationChain | None,
    T_new_old: RigidTransform,
    graph,
    now: float | None = None,
    radius: int | None = 10,
) -> LocalizationChain:
    """Propagate the prior by one VO increment and re-select the trunk."""
    if chain is None:
        raise ChainNotInitialised("localisation chain has not been started")
    T = T_new_old @ chain.T_leaf_trunk
    trunk, T = select_trunk(graph, chain.trunk, T, radius)
    return replace(
        chain,
        trunk=trunk,
        T_leaf_trunk=T,
        vo_updates=chain.vo_updates + 1,
        last_vo_time=chain.last_vo_time if now is None else float(now),
    )


def with_leaf(chain: LocalizationChain, leaf: int) -> LocalizationChain:
    return replace(chain, leaf=leaf)


# --------------------------------------------------------------------------
# Landmark migration
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MigratedMap:
    origin: int
    points: np.ndarray  # (N, 3) in the trunk camera frame
    descriptor_ids: np.ndarray
    source: np.ndarray  # source vertex per point
    hops: np.ndarray  # path distance of the source vertex to the trunk
    ranges: np.ndarray  # viewing range of the original observation

    def __len__(self) -> int:
        return len(self.descriptor_ids)


def migrate_landmarks(graph, trunk: int, radius: int = 5) -> MigratedMap:
    """Express every landmark of the privileged window in the trunk camera frame.

    A landmark p seen from vertex k maps as T_sv^t T_{t,k} (T_sv^k)^-1 p.
    """
    T_sv_t = graph.vertex(trunk).T_sv
    ic = graph.path_index(trunk)
    pts, ids, src, hops, rng = [], [], [], [], []
    for vid, T_tk in graph.local_window(trunk, radius):
        pay = graph.payload(vid)
        if len(pay) == 0:
            continue
        T = T_sv_t @ T_tk @ graph.vertex(vid).T_sv.inverse()
        pts.append(T.apply(pay.landmarks))
        ids.append(pay.descriptor_ids)
        src.append(np.full(len(pay), vid, dtype=np.int64))
        hops.append(np.full(len(pay), abs(graph.path_index(vid) - ic), dtype=np.int64))
        rng.append(pay.landmarks[:, 2])
    if not pts:
        z = np.zeros(0, dtype=np.int64)
        return MigratedMap(trunk, np.zeros((0, 3)), z, z.copy(), z.copy(), np.zeros(0))
    return MigratedMap(
        trunk, np.vstack(pts), np.concatenate(ids), np.concatenate(src), np.concatenate(hops), np.concatenate(rng)
    )


# --------------------------------------------------------------------------
# Localisation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalizationConfig:
    window_radius: int = 5
    trunk_search_radius: int = 10
    failure_limit: int = 5
    min_inliers: int = 20
    # reject estimates further than this from the prior
    max_prior_translation: float = 5.0
    max_prior_rotation: float = math.radians(25.0)
    latency_frames: int = 0
    match: MatchConfig = MatchConfig()
    mlesac: MlesacConfig = MlesacConfig()


@dataclass(frozen=True, eq=False)
class LocalizationResult:
    success: bool
    T_leaf_trunk: RigidTransform | None
    trunk: int
    inliers: int
    matches: int
    corrupted_inliers: int = 0
    reason: str = ""


def localize(
    frame,
    mmap: MigratedMap,
    prior: RigidTransform,
    camera: StereoCameraModel,
    T_sv_live: RigidTransform,
    T_sv_trunk: RigidTransform,
    config: LocalizationConfig = LocalizationConfig(),
    seed=0,
) -> LocalizationResult:
    """Estimate T_leaf_trunk (vehicle frames) from one live frame.

    The frame is matched against all migrated descriptors; when a descriptor
    occurs in several source vertices, the one closest to the trunk wins.
    """
    if len(mmap) == 0:
        return LocalizationResult(False, None, mmap.origin, 0, 0, reason="empty map")
    frame_range = np.where(frame.disparity > 0, camera.fb / np.maximum(frame.disparity, 1e-12), np.inf)
    m = match(
        frame.ids, mmap.descriptor_ids, config.match, seed,
        frame_range=frame_range, target_range=mmap.ranges, target_priority=mmap.hops,
    )
    mcfg = replace(config.mlesac, min_inliers=max(config.mlesac.min_inliers, config.min_inliers))
    try:
        est = mlesac_pose(m, frame.observations, mmap.points, camera, mcfg, seed=[*np.atleast_1d(seed), 7])
    except EstimationError as exc:
        return LocalizationResult(False, None, mmap.origin, 0, len(m), reason=str(exc))
    T_lt = T_sv_live.inverse() @ est.transform @ T_sv_trunk
    diff = T_lt @ prior.inverse()
    n_bad = int(m.corrupted[est.inliers].sum())
    if (
        float(np.linalg.norm(diff.translation)) > config.max_prior_translation
        or rotation_magnitude(diff) > config.max_prior_rotation
    ):
        return LocalizationResult(
            False, None, mmap.origin, est.inlier_count, len(m), n_bad, reason="disagrees with prior"
        )
    return LocalizationResult(True, T_lt, mmap.origin, est.inlier_count, len(m), n_bad)


def apply_localization(
    chain: LocalizationChain,
    result: LocalizationResult,
    graph,
    now: float,
    since: RigidTransform | None = None,
    radius: int | None = 10,
) -> LocalizationChain:
    """Fold a localisation result into the chain.

    ``since`` is the VO motion accumulated between the localised frame and
    now (T_now_frame), for results that arrive late. On failure only the
    failure counter changes and the prior keeps dead-reckoning.
    """
    if not result.success:
        return replace(chain, consecutive_failures=chain.consecutive_failures + 1)
    T_frame_trunk = result.T_leaf_trunk
    # re-anchor from the trunk used at localisation time, which may be stale
    T_now = T_frame_trunk if since is None else since @ T_frame_trunk
    trunk, T_now = select_trunk(graph, result.trunk, T_now, radius)
    return replace(
        chain,
        trunk=trunk,
        branch=result.trunk,
        twig=chain.leaf,
        T_leaf_trunk=T_now,
        T_twig_branch=T_frame_trunk,
        last_localization_time=float(now),
        localizations=chain.localizations + 1,
        consecutive_failures=0,
    )


# --------------------------------------------------------------------------
# Camera-frame error
# --------------------------------------------------------------------------


def camera_frame_error(chain: LocalizationChain, graph, T_sv_leaf: RigidTransform | None = None) -> RigidTransform:
    """T_sv^leaf T_leaf_trunk (T_sv^trunk)^-1: trunk camera -> leaf camera.

    ``T_sv_leaf`` defaults to the leaf vertex's stored gimbal transform; pass
    the live gimbal state to evaluate the current view.
    """
    T_sv_t = graph.vertex(chain.trunk).T_sv
    if T_sv_leaf is None:
        T_sv_leaf = graph.vertex(chain.leaf).T_sv
    if T_sv_t is None or T_sv_leaf is None:
        raise ValueError("both vertices need a gimbal transform")
    return T_sv_leaf @ chain.T_leaf_trunk @ T_sv_t.inverse()


def camera_error_angles(T_fa: RigidTransform) -> tuple[float, float, float]:
    """(yaw, pitch, roll) of the leaf camera relative to the trunk camera.

    Angles are in camera-body axes (x along the optical axis, z up), so a
    leaf camera turned left by 10 degrees reports yaw = +10 degrees.
    """
    E = BODY_TO_OPTICAL.T @ T_fa.rotation.T @ BODY_TO_OPTICAL
    return matrix_to_euler(E)
