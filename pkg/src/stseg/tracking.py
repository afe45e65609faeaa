"""Frame-to-frame association of box proposals into tracks."""
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

log = logging.getLogger(__name__)


@dataclass
class TrackingConfig:
    w_center: float = 0.5
    w_overlap: float = 0.3
    w_volume: float = 0.2
    d_norm: float = 5.0           # center-distance normalizer, m
    gate_dist: float = 8.0        # hard association gate, m
    max_misses: int = 3


def aabb_overlap(box_a, box_b):
    """Intersection volume of the axis-aligned hulls of two boxes."""
    lo_a, hi_a = box_a.aabb()
    lo_b, hi_b = box_b.aabb()
    span = np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)
    if np.any(span <= 0):
        return 0.0
    return float(np.prod(span))


def build_cost_matrix(current, previous, cfg=None):
    """Association costs, rows = current boxes, cols = previous boxes.

    cost = w_center * ||c_i - c_j|| / d_norm
         + w_overlap * (1 - overlap / min(v_i, v_j))
         + w_volume * |v_i - v_j| / max(v_i, v_j)

    Pairs whose centers sit farther apart than gate_dist get +inf. The
    overlap ratio is clipped into [0, 1] since axis-aligned hulls can
    overestimate the true intersection.
    """
    cfg = cfg or TrackingConfig()
    n, m = len(current), len(previous)
    cost = np.zeros((n, m))
    for i, a in enumerate(current):
        for j, b in enumerate(previous):
            d = float(np.linalg.norm(a.center - b.center))
            if d > cfg.gate_dist:
                cost[i, j] = np.inf
                continue
            va, vb = a.volume, b.volume
            ov = min(aabb_overlap(a, b), min(va, vb))
            term_c = cfg.w_center * d / cfg.d_norm
            term_o = cfg.w_overlap * (1.0 - ov / min(va, vb))
            term_v = cfg.w_volume * abs(va - vb) / max(va, vb)
            cost[i, j] = term_c + term_o + term_v
    return cost


def solve_assignment(cost):
    """Minimum-cost matching over the finite entries of a rectangular cost
    matrix, maximizing match count first.

    Returns (pairs, unmatched_rows, unmatched_cols) with pairs as (row, col)
    tuples sorted by row. Infinite entries can never pair.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        return [], list(range(n)), list(range(m))
    finite = np.isfinite(cost)
    if not finite.any():
        return [], list(range(n)), list(range(m))
    # big-M keeps the solver total ordering: any extra real match beats any
    # use of a forbidden pair, and real costs tie-break among equal counts
    big = cost[finite].sum() + cost[finite].max() * (min(n, m) + 1) + 1.0
    work = np.where(finite, cost, big)
    rows, cols = linear_sum_assignment(work)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if finite[r, c]]
    matched_r = {r for r, _ in pairs}
    matched_c = {c for _, c in pairs}
    unmatched_rows = [r for r in range(n) if r not in matched_r]
    unmatched_cols = [c for c in range(m) if c not in matched_c]
    return sorted(pairs), unmatched_rows, unmatched_cols


def assignment_reference(cost):
    """Exact matching oracle by exhaustive search over column subsets
    (bitmask dynamic program): maximal cardinality over finite pairs first,
    minimal total cost second. Independent of the production solver."""
    from functools import lru_cache

    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape

    @lru_cache(maxsize=None)
    def solve(i, used):
        if i == n:
            return (0, 0.0, ())
        best = solve(i + 1, used)  # leave row i unmatched
        for j in range(m):
            if used & (1 << j) or not math.isfinite(cost[i, j]):
                continue
            cnt, tot, pairs = solve(i + 1, used | (1 << j))
            cand = (cnt + 1, tot + cost[i, j], pairs + ((i, j),))
            if cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
                best = cand
        return best

    cnt, total, pairs = solve(0, 0)
    solve.cache_clear()
    return sorted(pairs), (total if cnt else 0.0)


@dataclass
class Track:
    track_id: int
    boxes: dict = field(default_factory=dict)   # frame -> BoxInstance
    last_frame: int = -1
    misses: int = 0
    retired: bool = False

    @property
    def last_box(self):
        return self.boxes[self.last_frame]

    def frames(self):
        return sorted(self.boxes)


class Tracker:
    """Greedy-lifecycle tracker over per-frame box proposals.

    Matched boxes extend their track, unmatched tracks accumulate misses
    and retire after cfg.max_misses, unmatched boxes open new tracks. Track
    ids increase monotonically and are never reused.
    """

    def __init__(self, cfg=None):
        self.cfg = cfg or TrackingConfig()
        self.tracks = []
        self._next_id = 0

    @property
    def active(self):
        return [t for t in self.tracks if not t.retired]

    def step(self, detections, frame):
        act = self.active
        if act and detections:
            cost = build_cost_matrix(detections, [t.last_box for t in act],
                                     self.cfg)
            pairs, un_rows, un_cols = solve_assignment(cost)
        else:
            pairs = []
            un_rows = list(range(len(detections)))
            un_cols = list(range(len(act)))
        for r, c in pairs:
            t = act[c]
            t.boxes[frame] = detections[r]
            t.last_frame = frame
            t.misses = 0
        for c in un_cols:
            t = act[c]
            t.misses += 1
            if t.misses >= self.cfg.max_misses:
                t.retired = True
        for r in un_rows:
            t = Track(self._next_id)
            t.boxes[frame] = detections[r]
            t.last_frame = frame
            self.tracks.append(t)
            self._next_id += 1
        return self.tracks


def track_boxes(boxes_per_frame, cfg=None):
    """Run the tracker over a whole sequence -> list of Tracks."""
    tracker = Tracker(cfg)
    for frame in sorted(boxes_per_frame):
        tracker.step(boxes_per_frame[frame], frame)
    return tracker.tracks


def write_tracks_csv(path, tracks):
    """One row per (frame, track) pair: frame, track_id, center, heading
    and box extents."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "track_id", "cx", "cy", "cz",
                         "heading", "length", "width", "height"])
        rows = []
        for t in tracks:
            for frame, box in t.boxes.items():
                rows.append([frame, t.track_id, box.center[0], box.center[1],
                             box.center[2], box.heading, box.length,
                             box.width, box.height])
        for row in sorted(rows, key=lambda r: (r[0], r[1])):
            writer.writerow([row[0], row[1]] + [f"{v:.6f}" for v in row[2:]])


def write_boxes_csv(path, boxes_per_frame):
    """Per-frame box proposals before tracking."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "box", "cx", "cy", "cz", "heading",
                         "length", "width", "height", "n_points"])
        for frame in sorted(boxes_per_frame):
            for k, box in enumerate(boxes_per_frame[frame]):
                writer.writerow(
                    [frame, k] + [f"{v:.6f}" for v in
                                  (box.center[0], box.center[1], box.center[2],
                                   box.heading, box.length, box.width,
                                   box.height)] + [len(box.point_ids)])
