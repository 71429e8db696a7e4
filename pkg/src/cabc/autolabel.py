"""Safety auto-labeling: negatives are undecided states outside the local
convex hull of known-safe neighbors.

A failed rollout proves nothing about the individual states it visited, so
they start out merely *undecided*.  A state is excluded from the negative
set when it lies in the convex hull of the known-safe states within a ball
of radius ``rho`` around it (in standardized coordinates): such a state is
within ``rho`` of the safe set, hence not confidently unsafe.  Shrinking
``rho`` makes the exclusion more conservative around concave boundary
regions.

The hull test is an away-step conditional-gradient solve of the nearest
point in the simplex-weighted hull, with a duality-gap certificate for both
accept and reject decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .core import LabeledPool, VehicleState

SIGMA_MIN = 1e-6
HULL_TOL = 1e-7


# --- state embedding and normalization ---------------------------------------

def embed_state(x: VehicleState, lap_length: float) -> np.ndarray:
    """6-D state -> 7-D embedding with ``s`` mapped to the unit circle.

    The embedding makes the neighbor metric periodic in ``s``: states just
    before and just after the start line are close.
    """
    ang = 2.0 * math.pi * x.s / lap_length
    return np.array([x.v_long, x.v_tran, x.omega_psi,
                     math.cos(ang), math.sin(ang), x.x_tran, x.e_psi])


def embed_states(states: Sequence[VehicleState], lap_length: float) -> np.ndarray:
    if not states:
        return np.zeros((0, 7))
    arr = np.array([st.as_tuple() for st in states])
    ang = 2.0 * math.pi * arr[:, 3] / lap_length
    return np.column_stack([arr[:, 0], arr[:, 1], arr[:, 2],
                            np.cos(ang), np.sin(ang), arr[:, 4], arr[:, 5]])


@dataclass(frozen=True)
class NormStats:
    """Per-dimension standardization fitted on the known-safe pool."""

    mean: np.ndarray
    std: np.ndarray
    lap_length: float

    def normalize(self, embedded: np.ndarray) -> np.ndarray:
        return (embedded - self.mean) / self.std

    def denormalize(self, normalized: np.ndarray) -> np.ndarray:
        return normalized * self.std + self.mean

    def normalize_states(self, states: Sequence[VehicleState]) -> np.ndarray:
        return self.normalize(embed_states(states, self.lap_length))

    def normalize_state(self, x: VehicleState) -> np.ndarray:
        return self.normalize(embed_state(x, self.lap_length))

    @staticmethod
    def identity(dim: int) -> "NormStats":
        return NormStats(mean=np.zeros(dim), std=np.ones(dim), lap_length=1.0)


def fit_norm(d_plus: Sequence[VehicleState], lap_length: float) -> NormStats:
    """Mean/std over the embedded positive pool, stds floored at ``SIGMA_MIN``."""
    if len(d_plus) < 2:
        raise ValueError("need at least 2 states to fit normalization")
    emb = embed_states(d_plus, lap_length)
    mean = emb.mean(axis=0)
    std = np.maximum(emb.std(axis=0), SIGMA_MIN)
    return NormStats(mean=mean, std=std, lap_length=lap_length)


# --- radius neighbors ---------------------------------------------------------

def radius_neighbors(x: VehicleState, d_plus: Sequence[VehicleState],
                     norm: NormStats, rho: float) -> List[VehicleState]:
    """All pool states within normalized Euclidean distance ``rho`` of ``x``.

    Reference implementation: exhaustive linear scan.  Indexed queries must
    return exactly this set.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if not d_plus:
        return []
    q = norm.normalize_state(x)
    pts = norm.normalize_states(d_plus)
    d2 = ((pts - q) ** 2).sum(axis=1)
    return [d_plus[i] for i in np.flatnonzero(d2 <= rho * rho)]


class NeighborIndex:
    """KD-tree over normalized points; returns the same sets as the linear scan."""

    def __init__(self, points_norm: np.ndarray):
        self.points = np.asarray(points_norm, dtype=float)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def query(self, q: np.ndarray, rho: float) -> np.ndarray:
        if self._tree is None:
            return np.zeros(0, dtype=int)
        return np.asarray(self._tree.query_ball_point(np.asarray(q, dtype=float), rho,
                                                      return_sorted=True), dtype=int)

    def query_nearest(self, q: np.ndarray, rho: float, cap: int) -> np.ndarray:
        """At most ``cap`` nearest neighbors within ``rho``, nearest first."""
        if self._tree is None:
            return np.zeros(0, dtype=int)
        dist, idx = self._tree.query(np.asarray(q, dtype=float),
                                     k=min(cap, len(self.points)),
                                     distance_upper_bound=rho * (1 + 1e-12))
        idx = np.atleast_1d(idx)
        dist = np.atleast_1d(dist)
        return idx[np.isfinite(dist)]


# --- convex hull membership ---------------------------------------------------

def _affine_correction(P: np.ndarray, x: np.ndarray, w: np.ndarray) -> bool:
    """Try jumping to the affine least-squares optimum over the active set.

    The jump is taken only when it stays inside the simplex, so it can only
    shortcut convergence, never change the iterate's feasibility.  Returns
    whether the jump was taken; ``w`` is updated in place.
    """
    active = np.flatnonzero(w > 0)
    if len(active) < 2:
        return False
    A = np.vstack([P[active].T, np.ones(len(active))])
    b = np.concatenate([x, [1.0]])
    w_aff, *_ = np.linalg.lstsq(A, b, rcond=None)
    if w_aff.min() < 0.0:
        return False
    ssum = w_aff.sum()
    if ssum <= 0.0:
        return False
    w_aff = w_aff / ssum
    r_new = w_aff @ P[active] - x
    r_old = w @ P - x
    if r_new @ r_new >= r_old @ r_old:
        return False
    w[:] = 0.0
    w[active] = w_aff
    return True


def hull_membership(x: np.ndarray, points: np.ndarray, tol: float = HULL_TOL,
                    max_iter: int = 3000) -> bool:
    """Is ``x`` a convex combination of ``points`` (within ``tol`` in max norm)?

    Solves ``min_w 0.5 * ||P^T w - x||^2`` over the simplex by away-step
    conditional gradient, accelerated by an exact least-squares jump over the
    current active set whenever that jump is simplex-feasible.  Accepts as
    soon as an iterate lands within ``tol``; rejects once the duality gap
    certifies that no point of the hull can be that close.  The empty hull
    contains nothing.
    """
    P = np.asarray(points, dtype=float)
    x = np.asarray(x, dtype=float)
    if P.ndim != 2 or (len(P) and P.shape[1] != x.shape[0]):
        raise ValueError("points must be (n, d) matching x")
    n = len(P)
    if n == 0:
        return False
    d = x.shape[0]
    reject_level = 0.5 * d * tol * tol

    i0 = int(np.argmin(((P - x) ** 2).sum(axis=1)))
    w = np.zeros(n)
    w[i0] = 1.0
    v = P[i0].copy()

    for _ in range(max_iter):
        r = v - x
        if np.abs(r).max() <= tol:
            return True
        f = 0.5 * float(r @ r)
        g = P @ r
        i_fw = int(np.argmin(g))
        wg = float(w @ g)
        gap_fw = wg - g[i_fw]
        if f - gap_fw > reject_level:
            return False
        active = np.flatnonzero(w > 0)
        i_aw = int(active[np.argmax(g[active])])
        gap_aw = g[i_aw] - wg
        if gap_fw >= gap_aw:
            direction = P[i_fw] - v
            gamma_max = 1.0
            drop = None
        else:
            direction = v - P[i_aw]
            w_aw = w[i_aw]
            if w_aw >= 1.0:
                break  # single-vertex away step cannot improve
            gamma_max = w_aw / (1.0 - w_aw)
            drop = i_aw
        denom = float(direction @ direction)
        if denom <= 0.0:
            break
        gamma = min(max(-float(r @ direction) / denom, 0.0), gamma_max)
        if gamma <= 0.0:
            break
        if drop is None:
            w *= 1.0 - gamma
            w[i_fw] += gamma
        else:
            w *= 1.0 + gamma
            w[drop] -= gamma
            if gamma >= gamma_max - 1e-15:
                w[drop] = 0.0
        np.clip(w, 0.0, None, out=w)
        ssum = w.sum()
        if ssum <= 0.0:
            break
        w /= ssum
        _affine_correction(P, x, w)
        v = w @ P
    r = v - x
    return bool(np.abs(r).max() <= tol)


def member_mask(plus_norm: np.ndarray, query_norm: np.ndarray, rho: float,
                tol: float = HULL_TOL,
                assume_member: Optional[np.ndarray] = None,
                workers: int = 1,
                max_neighbors: Optional[int] = None) -> np.ndarray:
    """Hull-membership flags for each query point against its radius neighbors.

    ``assume_member`` lets callers skip points already decided as members:
    with a fixed normalization, membership can only grow as the positive
    pool grows, so cached positives stay valid.  With ``workers > 1`` the
    queries (which are independent) are processed in index-disjoint chunks.
    ``max_neighbors`` caps each hull at the nearest such neighbors; a subset
    hull is contained in the full one, so capping only errs toward keeping
    points in the negative set.
    """
    m = len(query_norm)
    mask = np.zeros(m, dtype=bool) if assume_member is None else assume_member.copy()
    index = NeighborIndex(plus_norm)

    def run(indices) -> None:
        for i in indices:
            if mask[i]:
                continue
            if max_neighbors is None:
                idx = index.query(query_norm[i], rho)
            else:
                idx = index.query_nearest(query_norm[i], rho, max_neighbors)
            if len(idx) == 0:
                continue
            mask[i] = hull_membership(query_norm[i], plus_norm[idx], tol)

    workers = max(1, int(workers))
    if workers == 1 or m < 2 * workers:
        run(range(m))
    else:
        from concurrent.futures import ThreadPoolExecutor
        chunks = np.array_split(np.arange(m), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    return mask


def build_negatives(pool: LabeledPool, norm: NormStats, rho: float,
                    tol: float = HULL_TOL) -> LabeledPool:
    """Rebuild the negative set: undecided states not in any local safe hull.

    The undecided pool is retained untouched so the exclusion can be
    recomputed as the positive pool grows.
    """
    plus_norm = norm.normalize_states(pool.d_plus)
    query_norm = norm.normalize_states(pool.d_query)
    mask = member_mask(plus_norm, query_norm, rho, tol)
    d_minus = [st for st, member in zip(pool.d_query, mask) if not member]
    return LabeledPool(d_plus=list(pool.d_plus), d_query=list(pool.d_query),
                       d_minus=d_minus)


# --- synthetic 2-D benchmark sets ---------------------------------------------

def _wrap_angle(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _arc_distance(pts: np.ndarray, center, radius: float,
                  ang_center: float, ang_halfwidth: float) -> np.ndarray:
    """Distance from each point to a circular arc given by an angular window."""
    rel = pts - np.asarray(center)
    dist_c = np.hypot(rel[:, 0], rel[:, 1])
    phi = np.arctan2(rel[:, 1], rel[:, 0])
    dphi = _wrap_angle(phi - ang_center)
    on_arc = np.abs(dphi) <= ang_halfwidth
    d = np.empty(len(pts))
    d[on_arc] = np.abs(dist_c[on_arc] - radius)
    if (~on_arc).any():
        end_angle = ang_center + np.sign(dphi[~on_arc]) * ang_halfwidth
        ex = np.asarray(center)[0] + radius * np.cos(end_angle)
        ey = np.asarray(center)[1] + radius * np.sin(end_angle)
        d[~on_arc] = np.hypot(pts[~on_arc, 0] - ex, pts[~on_arc, 1] - ey)
    return d


def _segment_distance(pts: np.ndarray, a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ab = b - a
    t = np.clip(((pts - a) @ ab) / float(ab @ ab), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(pts[:, 0] - proj[:, 0], pts[:, 1] - proj[:, 1])


@dataclass(frozen=True)
class SyntheticSet:
    """A constructed planar region with an exact signed distance to its boundary.

    ``kind`` is one of ``disk``, ``crescent`` (disk minus an offset disk), or
    ``sector`` (disk with an angular notch, leaving a sharp concave corner).
    Signed distance is positive inside, zero exactly on the boundary.
    """

    kind: str
    params: tuple

    @staticmethod
    def disk(center=(0.0, 0.0), radius: float = 3.0) -> "SyntheticSet":
        return SyntheticSet("disk", (float(center[0]), float(center[1]), float(radius)))

    @staticmethod
    def crescent(center_a=(0.0, 0.0), radius_a: float = 3.0,
                 center_b=(2.0, 0.0), radius_b: float = 2.0) -> "SyntheticSet":
        d = math.hypot(center_b[0] - center_a[0], center_b[1] - center_a[1])
        if not (abs(radius_a - radius_b) < d < radius_a + radius_b):
            raise ValueError("crescent circles must intersect properly")
        return SyntheticSet("crescent", (float(center_a[0]), float(center_a[1]), float(radius_a),
                                         float(center_b[0]), float(center_b[1]), float(radius_b)))

    @staticmethod
    def sector(center=(0.0, 0.0), radius: float = 3.0,
               keep_halfangle: float = math.radians(130.0)) -> "SyntheticSet":
        if not 0.0 < keep_halfangle < math.pi:
            raise ValueError("keep_halfangle must be in (0, pi)")
        return SyntheticSet("sector", (float(center[0]), float(center[1]), float(radius),
                                       float(keep_halfangle)))

    # membership -------------------------------------------------------------
    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "disk":
            cx, cy, r = self.params
            return np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) <= r
        if self.kind == "crescent":
            ax, ay, ra, bx, by, rb = self.params
            in_a = np.hypot(pts[:, 0] - ax, pts[:, 1] - ay) <= ra
            in_b = np.hypot(pts[:, 0] - bx, pts[:, 1] - by) < rb
            return in_a & ~in_b
        cx, cy, r, half = self.params
        rel_ang = np.arctan2(pts[:, 1] - cy, pts[:, 0] - cx)
        return (np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) <= r) & (np.abs(rel_ang) <= half)

    # signed distance ----------------------------------------------------------
    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        inside = self.contains(pts)
        sign = np.where(inside, 1.0, -1.0)
        if self.kind == "disk":
            cx, cy, r = self.params
            return r - np.hypot(pts[:, 0] - cx, pts[:, 1] - cy)
        if self.kind == "crescent":
            ax, ay, ra, bx, by, rb = self.params
            d = math.hypot(bx - ax, by - ay)
            ang_ab = math.atan2(by - ay, bx - ax)
            cos_ga = (d * d + ra * ra - rb * rb) / (2.0 * d * ra)
            cos_gb = (d * d + rb * rb - ra * ra) / (2.0 * d * rb)
            gamma_a = math.acos(min(max(cos_ga, -1.0), 1.0))
            gamma_b = math.acos(min(max(cos_gb, -1.0), 1.0))
            # outer boundary: arc of A facing away from B
            d_outer = _arc_distance(pts, (ax, ay), ra, ang_ab + math.pi, math.pi - gamma_a)
            # inner boundary: arc of B facing toward A
            d_inner = _arc_distance(pts, (bx, by), rb, ang_ab + math.pi, gamma_b)
            return sign * np.minimum(d_outer, d_inner)
        cx, cy, r, half = self.params
        d_arc = _arc_distance(pts, (cx, cy), r, 0.0, half)
        e1 = (cx + r * math.cos(half), cy + r * math.sin(half))
        e2 = (cx + r * math.cos(-half), cy + r * math.sin(-half))
        d_seg = np.minimum(_segment_distance(pts, (cx, cy), e1),
                           _segment_distance(pts, (cx, cy), e2))
        return sign * np.minimum(d_arc, d_seg)

    # sampling -----------------------------------------------------------------
    def bounding_box(self) -> Tuple[float, float, float, float]:
        if self.kind == "disk":
            cx, cy, r = self.params
            return (cx - r, cy - r, cx + r, cy + r)
        if self.kind == "crescent":
            ax, ay, ra = self.params[:3]
            return (ax - ra, ay - ra, ax + ra, ay + ra)
        cx, cy, r, _ = self.params
        return (cx - r, cy - r, cx + r, cy + r)

    def sample_inside(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform interior samples by rejection from the bounding box."""
        lo_x, lo_y, hi_x, hi_y = self.bounding_box()
        out = np.zeros((0, 2))
        while len(out) < n:
            cand = rng.uniform((lo_x, lo_y), (hi_x, hi_y), size=(4 * n, 2))
            keep = cand[self.contains(cand)]
            out = np.vstack([out, keep])
        return out[:n]


def sample_box(n: int, rng: np.random.Generator, lo: float = -5.0,
               hi: float = 5.0) -> np.ndarray:
    return rng.uniform(lo, hi, size=(n, 2))


def label_synthetic(synth: SyntheticSet, n_plus: int, n_query: int, rho: float,
                    rng: np.random.Generator, tol: float = HULL_TOL,
                    box: Tuple[float, float] = (-5.0, 5.0), workers: int = 1):
    """Fig-style benchmark: sample pools, run the hull exclusion, return arrays.

    Returns ``(plus_pts, query_pts, removed_mask)`` where ``removed_mask``
    flags the query points excluded from the negative set.
    """
    plus = synth.sample_inside(n_plus, rng)
    query = sample_box(n_query, rng, box[0], box[1])
    removed = member_mask(plus, query, rho, tol, workers=workers)
    return plus, query, removed


def prop1_violation_count(removed_pts: np.ndarray, synth: SyntheticSet,
                          rho: float, slack: float = 1e-9) -> int:
    """How many excluded points are further than ``rho`` outside the true set.

    A correct exclusion rule never removes a point whose signed distance is
    below ``-rho``; any such point counts as a soundness violation.
    """
    removed_pts = np.atleast_2d(np.asarray(removed_pts, dtype=float))
    if len(removed_pts) == 0:
        return 0
    sdf = synth.signed_distance(removed_pts)
    return int((sdf < -rho - slack).sum())


def incorrect_removals(removed_mask: np.ndarray, query_pts: np.ndarray,
                       synth: SyntheticSet) -> int:
    """Removed points that are actually outside the set (hull bridged a concavity)."""
    if not removed_mask.any():
        return 0
    sdf = synth.signed_distance(query_pts[removed_mask])
    return int((sdf < 0.0).sum())


def train_synthetic_classifier(plus_pts: np.ndarray, minus_pts: np.ndarray,
                               hidden: Sequence[int] = (64, 64), steps: int = 1500,
                               batch: int = 256, lr: float = 1e-3, seed: int = 0):
    """Fit a small probability-head MLP on auto-labeled 2-D points.

    Balanced minibatches (half positive, half negative) remove the class
    imbalance between a dense interior pool and the surviving negatives.
    """
    from . import nn

    plus_pts = np.asarray(plus_pts, dtype=float)
    minus_pts = np.asarray(minus_pts, dtype=float)
    if len(plus_pts) == 0 or len(minus_pts) == 0:
        raise ValueError("need both positive and negative points")
    params = nn.init_mlp((2, *hidden, 1), head="sigmoid", seed=seed)
    opt = nn.init_opt(params, lr=lr)
    rng = np.random.default_rng(seed)
    half = batch // 2
    for _ in range(steps):
        ip = rng.integers(0, len(plus_pts), size=half)
        im = rng.integers(0, len(minus_pts), size=half)
        xb = np.vstack([plus_pts[ip], minus_pts[im]])
        yb = np.concatenate([np.ones(half), np.zeros(half)])
        p = nn.forward(params, xb)[:, 0]
        dp = (-(yb / p) + (1 - yb) / (1 - p)) / len(yb)
        grads, _ = nn.backward(params, xb, dp[:, None])
        params, opt = nn.adam_step(params, grads, opt)
    return params


def classifier_grid(params, bounds: Tuple[float, float], n: int = 200):
    """Probability field of a trained 2-D classifier on an ``n x n`` grid."""
    from . import nn

    lo, hi = bounds
    xs = np.linspace(lo, hi, n)
    ys = np.linspace(lo, hi, n)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    probs = nn.forward(params, pts)[:, 0].reshape(n, n)
    return xs, ys, probs
