"""Alternating cluster/train loop for per-pixel range-view embeddings.

Each epoch first clusters the current embeddings of two augmented views of
the whole sequence, then takes gradient steps on a prototype
cross-entropy objective against those pseudo-labels. The baseline
objective ties two augmented views of the same frame together; the
spatiotemporal modes replace the second view with an earlier frame and
transport pseudo-labels through point correspondences, optionally adding a
push-pull regularizer over instance groups.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .cloud import PointCloud, point_pixels, project_to_range_image
from .cluster import MiniBatchKMeans
from .correspond import (STATIC, CorrespondConfig, CorrespondenceSet,
                         build_correspondences, sample_pair)
from .dynamics import (DynamicsConfig, assign_groups, cluster_dynamic,
                       dynamic_scores, filter_boxes, static_cluster_labels)
from .embed import Adam, EmbeddingNet
from .losses import (discriminative_loss, proto_ce_loss, spatiotemporal_loss,
                     within_cross_losses)
from .preprocess import AlignConfig, align_sequence
from .tracking import TrackingConfig, track_boxes

log = logging.getLogger(__name__)

MODES = ("baseline", "ego", "st", "st+dloss")


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries a state snapshot."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class GeomTransform:
    """Cloud augmentation: optional subsampling, then y-flip, 180 degree
    rotation about z, and an xy translation, in that order.

    flip and rot180 applied twice are exact identities; keep_idx None (or
    all points) makes the subsample the identity.
    """

    translation: np.ndarray
    flip: bool = False
    rot180: bool = False
    keep_idx: np.ndarray = None

    def apply_xyz(self, xyz):
        out = np.array(xyz, dtype=np.float64, copy=True)
        if self.flip:
            out[:, 1] = -out[:, 1]
        if self.rot180:
            out[:, 0] = -out[:, 0]
            out[:, 1] = -out[:, 1]
        out[:, 0] += self.translation[0]
        out[:, 1] += self.translation[1]
        return out

    def apply(self, cloud):
        """Transform a cloud -> (new cloud, original indexes of its rows)."""
        if self.keep_idx is None:
            idx = np.arange(len(cloud))
        else:
            idx = np.asarray(self.keep_idx, dtype=np.int64)
        xyz = self.apply_xyz(cloud.xyz[idx])
        return PointCloud(xyz, cloud.intensity[idx],
                          frame_index=cloud.frame_index), idx

    @staticmethod
    def identity():
        return GeomTransform(np.zeros(2))

    @staticmethod
    def draw(rng, n_points, translate_max=2.0, keep_ratio=0.9,
             flip_prob=0.5, rot_prob=0.5):
        keep = None
        if keep_ratio < 1.0:
            m = max(1, int(round(keep_ratio * n_points)))
            keep = np.sort(rng.choice(n_points, size=m, replace=False))
        return GeomTransform(
            translation=rng.uniform(-translate_max, translate_max, size=2),
            flip=bool(rng.uniform() < flip_prob),
            rot180=bool(rng.uniform() < rot_prob),
            keep_idx=keep)


@dataclass
class TrainConfig:
    mode: str = "st"
    epochs: int = 15
    steps_per_epoch: int = 40
    n_clusters: int = 4
    lr: float = 0.05
    lr_drop: float = 0.1            # multiplier applied once
    lr_drop_at: float = 0.4         # fraction of epochs before the drop
    temperature: float = 1.0
    alpha: float = 1.0              # within-view weight
    beta: float = 1.0               # cross-frame weight
    gamma_w: float = 1.0            # push-pull weight (st+dloss only)
    delta_v: float = 0.5
    delta_d: float = 1.5
    intervals: tuple = (5, 10, 15, 20, 25, 30)
    translate_max: float = 2.0
    keep_ratio: float = 0.9
    flip_prob: float = 0.5
    rot_prob: float = 0.5
    kmeans_iters: int = 25
    cluster_sample: int = 50000     # row budget per clustering pass
    seed: int = 0
    log_path: str = None            # JSON-lines epoch log


@dataclass
class TrainingData:
    """Sequence bundle the trainer consumes.

    clouds are the raw sensor-frame sweeps; images their unaugmented
    projections. groups carry per-point instance-group ids over each
    original cloud. csets memoizes correspondence sets by (a, b).
    point_masks, when set, restrict training and clustering to a per-point
    subset of each frame; dynamic_pairs_only strips nearest-neighbor pairs
    from every correspondence set (the cascade's second stage wants both).
    """

    clouds: list
    images: list
    h: int
    w: int
    fov: object
    aligned: object = None
    tracks: list = None
    boxes_per_frame: list = None
    groups: list = None
    csets: dict = field(default_factory=dict)
    correspond_cfg: CorrespondConfig = None
    score_fields: list = None
    point_masks: list = None
    dynamic_pairs_only: bool = False

    def correspondences(self, a, b):
        key = (a, b)
        if key not in self.csets:
            cset = build_correspondences(
                self.aligned, self.tracks, a, b, self.correspond_cfg)
            if self.dynamic_pairs_only:
                keep = cset.kinds != STATIC
                cset = CorrespondenceSet(
                    cset.frame_a, cset.frame_b, cset.ids_a[keep],
                    cset.ids_b[keep], cset.kinds[keep], cset.coverage,
                    cset.low_quality)
            self.csets[key] = cset
        return self.csets[key]


def tracked_boxes_by_frame(tracks, n_frames):
    out = [[] for _ in range(n_frames)]
    for tr in tracks:
        for t, box in tr.boxes.items():
            out[t].append(box)
    return out


def autolabel_sequence(clouds, h, w, fov, align_cfg=None, dyn_cfg=None,
                       track_cfg=None, corr_cfg=None, aligned=None):
    """Run the full labeling pipeline over raw sweeps.

    Aligns the sequence, scores motion, clusters dynamic points into boxes,
    tracks them, and assigns instance groups, returning a TrainingData
    bundle (correspondence sets are built lazily on first use). Passing a
    precomputed aligned bundle skips the alignment step.
    """
    align_cfg = align_cfg or AlignConfig()
    dyn_cfg = dyn_cfg or DynamicsConfig()
    track_cfg = track_cfg or TrackingConfig()
    if aligned is None:
        aligned = align_sequence(clouds, align_cfg)
    n = len(clouds)
    ref_indexes = {}
    score_fields = []
    proposals = []
    for t in range(n):
        if aligned.excluded[t]:
            score_fields.append(None)
            proposals.append([])
            continue
        fld = dynamic_scores(aligned, t, dyn_cfg, ref_indexes)
        score_fields.append(fld)
        proposals.append(filter_boxes(cluster_dynamic(aligned, fld, dyn_cfg),
                                      dyn_cfg))
    tracks = track_boxes({t: proposals[t] for t in range(n)}, track_cfg)
    boxes_per_frame = tracked_boxes_by_frame(tracks, n)
    groups = []
    for t in range(n):
        if score_fields[t] is None:
            g = np.full(len(clouds[t]), 255, dtype=np.uint8)
            g[aligned.ground_masks[t]] = 0
            groups.append(g)
            continue
        statics = static_cluster_labels(aligned, t, score_fields[t], dyn_cfg)
        groups.append(assign_groups(aligned, t, boxes_per_frame[t], statics,
                                    dyn_cfg))
    images = [project_to_range_image(c, h, w, fov) for c in clouds]
    return TrainingData(list(clouds), images, h, w, fov, aligned, tracks,
                        boxes_per_frame, groups,
                        correspond_cfg=corr_cfg or CorrespondConfig(),
                        score_fields=score_fields)


@dataclass
class _View:
    """One augmented projection: valid-pixel feature rows, the original
    point id of each row, and the inverse map (-1 where absent)."""

    field: object
    cache: tuple
    rows: np.ndarray
    ids: np.ndarray
    row_of: np.ndarray
    labels: np.ndarray = None


def _forward_view(net, cloud, tf, h, w, fov, n_points, want_grad=True,
                  point_mask=None):
    aug, orig = tf.apply(cloud)
    image = project_to_range_image(aug, h, w, fov)
    valid = image.valid
    if point_mask is not None:
        # keep only pixels owned by masked-in points
        valid = valid.copy()
        valid[valid] = point_mask[orig[image.point_index[valid]]]
    fld = net.forward_field(image.channels, valid)
    cache = net.take_cache() if want_grad else None
    rows = fld.features[fld.valid]
    row_ids = orig[image.point_index[fld.valid]]
    row_of = np.full(n_points, -1, dtype=np.int64)
    row_of[row_ids] = np.arange(len(row_ids))
    return _View(fld, cache, rows, row_ids, row_of)


def _assign_labels(rows, centroids):
    # unit rows and centroids: nearest in L2 = highest cosine, ties to
    # the lowest cluster id
    return np.argmax(rows @ centroids.T, axis=1)


def _scatter_rows(view, grad_rows):
    g = np.zeros_like(view.field.features)
    g[view.field.valid] = grad_rows
    return g


def _fit_view_centroids(net, data, transforms, cfg, seed):
    """Forward every frame under this view's transforms and cluster a row
    subsample. Returns (centroids, kmeans diagnostics). Subsampling draws
    from its own generator so identical inputs give identical output."""
    n = len(data.clouds)
    rng = np.random.default_rng(seed)
    per_cap = max(cfg.n_clusters, cfg.cluster_sample // max(n, 1))
    masks = data.point_masks or [None] * n
    chunks = []
    for t in range(n):
        view = _forward_view(net, data.clouds[t], transforms[t], data.h,
                             data.w, data.fov, len(data.clouds[t]),
                             want_grad=False, point_mask=masks[t])
        rows = view.rows
        if len(rows) > per_cap:
            rows = rows[rng.choice(len(rows), size=per_cap, replace=False)]
        chunks.append(rows)
    sample = np.concatenate(chunks, axis=0)
    km = MiniBatchKMeans(n_clusters=cfg.n_clusters, n_iter=cfg.kmeans_iters,
                         batch_size=None, normalize=True, seed=seed)
    km.fit(sample)
    diag = {"objective": km.inertia_,
            "objective_history": [float(v) for v in km.objective_history_],
            "n_reseeds": int(km.n_reseeds_),
            "n_rows": int(len(sample))}
    return km.cluster_centers_, diag


def _st_row_pairs(cset, view_t, view_s, static_only):
    ids_a, ids_b, kinds = cset.ids_a, cset.ids_b, cset.kinds
    if static_only:
        keep = kinds == STATIC
        ids_a, ids_b = ids_a[keep], ids_b[keep]
    ra = view_t.row_of[ids_a]
    rb = view_s.row_of[ids_b]
    ok = (ra >= 0) & (rb >= 0)
    return ra[ok], rb[ok]


def _dump_divergence(cfg, state):
    if not cfg.log_path:
        return None
    path = cfg.log_path + ".diverged.json"
    with open(path, "w") as f:
        json.dump(state, f, indent=2, default=str)
    return path


@dataclass
class TrainResult:
    net: EmbeddingNet
    centroids: np.ndarray
    records: list


def train_model(data, cfg, net=None):
    """Fit an embedding net on one sequence.

    The two augmented views of every frame and the step schedule are drawn
    once up front, so epochs differ only through the evolving parameters:
    each epoch re-clusters both views' current embeddings, then runs
    gradient steps whose objective depends on cfg.mode:

    - baseline: two views of one frame, within + cross terms;
    - ego: within terms plus label transport across a sampled frame pair,
      static correspondences only;
    - st: same with dynamic correspondences included;
    - st+dloss: st plus the push-pull group regularizer on the newer frame.

    With a zero learning rate the parameters stay put and every epoch
    replays the same losses. Returns TrainResult with centroids fit on the
    final unaugmented embeddings, which is what prediction uses.
    """
    if cfg.mode not in MODES:
        raise ValueError(f"unknown mode {cfg.mode!r}, expected one of {MODES}")
    n_frames = len(data.clouds)
    if n_frames < 2:
        raise ValueError("need at least two frames")
    temporal = cfg.mode != "baseline"
    if temporal and not any(1 <= k <= n_frames - 1 for k in cfg.intervals):
        raise ValueError("no usable frame interval for this sequence length")

    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = EmbeddingNet(c_in=5, head="unit", seed=cfg.seed)
    net.fit_standardizer(data.images)
    opt = Adam(net.params, lr=cfg.lr)
    drop_epoch = int(round(cfg.lr_drop_at * cfg.epochs))
    tf1 = [GeomTransform.draw(rng, len(c), cfg.translate_max,
                              cfg.keep_ratio, cfg.flip_prob,
                              cfg.rot_prob) for c in data.clouds]
    tf2 = [GeomTransform.draw(rng, len(c), cfg.translate_max,
                              cfg.keep_ratio, cfg.flip_prob,
                              cfg.rot_prob) for c in data.clouds]
    if temporal:
        plan = [sample_pair(n_frames, rng, cfg.intervals)
                for _ in range(cfg.steps_per_epoch)]
    else:
        plan = [(int(f), int(f))
                for f in rng.integers(n_frames, size=cfg.steps_per_epoch)]
    records = []
    log_file = open(cfg.log_path, "w") if cfg.log_path else None
    try:
        for epoch in range(cfg.epochs):
            if epoch == drop_epoch and epoch > 0:
                opt.lr *= cfg.lr_drop
            mu1, diag1 = _fit_view_centroids(
                net, data, tf1, cfg, seed=cfg.seed * 1000003 + 1)
            mu2, diag2 = _fit_view_centroids(
                net, data, tf2, cfg, seed=cfg.seed * 1000003 + 2)

            sums = {"within": 0.0, "cross": 0.0, "st": 0.0, "dloss": 0.0,
                    "total": 0.0}
            masks = data.point_masks or [None] * n_frames
            n_steps = 0
            for step, (t, s) in enumerate(plan):
                view_t = _forward_view(net, data.clouds[t], tf1[t], data.h,
                                       data.w, data.fov, len(data.clouds[t]),
                                       point_mask=masks[t])
                view_s = _forward_view(net, data.clouds[s], tf2[s], data.h,
                                       data.w, data.fov, len(data.clouds[s]),
                                       point_mask=masks[s])
                if len(view_t.rows) == 0 or len(view_s.rows) == 0:
                    log.debug("step %d: empty view, skipped", step)
                    continue
                view_t.labels = _assign_labels(view_t.rows, mu1)
                view_s.labels = _assign_labels(view_s.rows, mu2)

                grad_t = np.zeros_like(view_t.rows)
                grad_s = np.zeros_like(view_s.rows)
                terms = dict.fromkeys(("within", "cross", "st", "dloss"), 0.0)
                if temporal:
                    w1, g1 = proto_ce_loss(view_t.rows, view_t.labels, mu1,
                                           cfg.temperature)
                    w2, g2 = proto_ce_loss(view_s.rows, view_s.labels, mu2,
                                           cfg.temperature)
                    terms["within"] = w1 + w2
                    grad_t += cfg.alpha * g1
                    grad_s += cfg.alpha * g2
                    cset = data.correspondences(t, s)
                    rt, rs = _st_row_pairs(cset, view_t, view_s,
                                           static_only=cfg.mode == "ego")
                    st_val, gst_t, gst_s = spatiotemporal_loss(
                        view_t.rows, view_t.labels, mu1,
                        view_s.rows, view_s.labels, mu2,
                        rt, rs, cfg.temperature)
                    terms["st"] = st_val
                    grad_t += cfg.beta * gst_t
                    grad_s += cfg.beta * gst_s
                    if cfg.mode == "st+dloss":
                        row_groups = data.groups[t][view_t.ids]
                        try:
                            dv, gd = discriminative_loss(
                                view_t.rows, row_groups,
                                cfg.delta_v, cfg.delta_d)
                            terms["dloss"] = dv
                            grad_t += cfg.gamma_w * gd
                        except ValueError:
                            log.debug("frame %d has no grouped rows", t)
                    total = (cfg.alpha * terms["within"]
                             + cfg.beta * terms["st"]
                             + cfg.gamma_w * terms["dloss"])
                else:
                    common = (view_t.row_of >= 0) & (view_s.row_of >= 0)
                    out = within_cross_losses(
                        view_t.rows, view_t.labels, mu1,
                        view_s.rows, view_s.labels, mu2,
                        view_t.row_of[common], view_s.row_of[common],
                        cfg.temperature)
                    terms["within"] = out["within"][0]
                    terms["cross"] = out["cross"][0]
                    grad_t += out["within"][1] + out["cross"][1]
                    grad_s += out["within"][2] + out["cross"][2]
                    total = terms["within"] + terms["cross"]

                if not np.isfinite(total):
                    state = {"epoch": epoch, "step": step, "mode": cfg.mode,
                             "frames": [int(t), int(s)], "terms": terms,
                             "lr": opt.lr,
                             "param_norms": [float(np.linalg.norm(p))
                                             for p in net.params]}
                    path = _dump_divergence(cfg, state)
                    raise TrainingDiverged(
                        f"loss became non-finite at epoch {epoch} step "
                        f"{step}" + (f", state dumped to {path}" if path
                                     else ""), state)

                pg_t = net.backward(_scatter_rows(view_t, grad_t),
                                    cache=view_t.cache)
                pg_s = net.backward(_scatter_rows(view_s, grad_s),
                                    cache=view_s.cache)
                opt.step(net.params, [a + b for a, b in zip(pg_t, pg_s)])
                for k in terms:
                    sums[k] += terms[k]
                sums["total"] += total
                n_steps += 1

            record = {"epoch": epoch, "lr": opt.lr,
                      "kmeans": [diag1, diag2]}
            for k, v in sums.items():
                record[k] = v / max(n_steps, 1)
            records.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            log.info("epoch %d: total %.4f within %.4f st %.4f", epoch,
                     record["total"], record["within"], record["st"])
    finally:
        if log_file:
            log_file.close()

    centroids = final_centroids(net, data, cfg)
    return TrainResult(net, centroids, records)


def final_centroids(net, data, cfg):
    """Cluster the unaugmented embeddings of every frame; prediction
    assigns against these."""
    identity = [GeomTransform.identity() for _ in data.clouds]
    mu, _ = _fit_view_centroids(net, data, identity, cfg,
                                seed=cfg.seed * 1000003 + 3)
    return mu


def predict_image_labels(net, centroids, image):
    """Per-pixel cluster labels of one projected frame, -1 where empty."""
    fld = net.forward(image)
    out = np.full((image.h, image.w), -1, dtype=np.int64)
    out[fld.valid] = _assign_labels(fld.features[fld.valid], centroids)
    return out


def predict_point_labels(net, centroids, cloud, h, w, fov):
    """Per-point cluster labels: each point reads the label of the pixel
    it projects to, so points hidden behind a nearer pixel owner inherit
    that owner's label. Zero-range points get cluster 0."""
    image = project_to_range_image(cloud, h, w, fov)
    grid = predict_image_labels(net, centroids, image)
    u, v, r = point_pixels(cloud.xyz, h, w, fov)
    labels = np.zeros(len(cloud), dtype=np.int64)
    ok = r > 1e-12
    labels[ok] = grid[v[ok], u[ok]]
    return labels


class SpatioTemporalSegmenter(BaseEstimator):
    """Unsupervised per-point segmenter, estimator style.

    fit consumes a TrainingData bundle (see autolabel_sequence), trains the
    embedding net under the configured objective and freezes the final
    cluster centroids; predict labels raw clouds against them.
    """

    def __init__(self, mode="st+dloss", n_clusters=4, epochs=15,
                 steps_per_epoch=40, lr=0.05, hidden=16, n_features=32,
                 temperature=1.0, alpha=1.0, beta=1.0, gamma_w=1.0,
                 keep_ratio=0.9, kmeans_iters=25, intervals=(5, 10, 15, 20,
                                                             25, 30),
                 seed=0, log_path=None):
        self.mode = mode
        self.n_clusters = n_clusters
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.lr = lr
        self.hidden = hidden
        self.n_features = n_features
        self.temperature = temperature
        self.alpha = alpha
        self.beta = beta
        self.gamma_w = gamma_w
        self.keep_ratio = keep_ratio
        self.kmeans_iters = kmeans_iters
        self.intervals = intervals
        self.seed = seed
        self.log_path = log_path

    def _config(self):
        return TrainConfig(mode=self.mode, epochs=self.epochs,
                           steps_per_epoch=self.steps_per_epoch,
                           n_clusters=self.n_clusters, lr=self.lr,
                           temperature=self.temperature, alpha=self.alpha,
                           beta=self.beta, gamma_w=self.gamma_w,
                           intervals=tuple(self.intervals),
                           keep_ratio=self.keep_ratio,
                           kmeans_iters=self.kmeans_iters, seed=self.seed,
                           log_path=self.log_path)

    def fit(self, X, y=None):
        net = EmbeddingNet(c_in=5, hidden=self.hidden,
                           c_out=self.n_features, head="unit",
                           seed=self.seed)
        result = train_model(X, self._config(), net=net)
        self.net_ = result.net
        self.centroids_ = result.centroids
        self.records_ = result.records
        self.h_, self.w_, self.fov_ = X.h, X.w, X.fov
        return self

    def predict(self, X):
        """Cluster labels for one PointCloud, aligned with its points."""
        return predict_point_labels(self.net_, self.centroids_, X,
                                    self.h_, self.w_, self.fov_)

    def predict_image(self, image):
        return predict_image_labels(self.net_, self.centroids_, image)

    def config_dict(self):
        return asdict(self._config())
