"""Pipeline configuration: one INI file covering every tunable.

Sections group keys by pipeline stage. Unknown sections or keys are
rejected, values are parsed against the type of their default, and
``section.key=value`` override strings give the command line the last
word. The canonical text rendering doubles as the cache key: stages stamp
their outputs with its hash and skip work when it still matches.
"""

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace

from .cascade import CascadeConfig
from .cloud import SensorFov
from .correspond import CorrespondConfig
from .dynamics import DynamicsConfig
from .preprocess import AlignConfig, GroundConfig, IcpConfig, SorConfig
from .tracking import TrackingConfig
from .train import MODES, TrainConfig
from .synth import SensorModel

SCENES = ("demo", "intersection")
PSEUDO_SCHEMES = ("simple", "heuristic")


@dataclass
class DataSection:
    root: str = ""                 # dataset directory; CLI argument wins
    h: int = 32                    # range-image rows
    w: int = 384                   # range-image columns
    fov_up_deg: float = 12.0
    fov_down_deg: float = 22.0     # magnitude below the horizon


@dataclass
class SynthSection:
    scene: str = "demo"            # or "intersection"
    frames: int = 12
    n_cars: int = 2
    n_pedestrians: int = 1
    n_buildings: int = 5
    range_noise: float = 0.01      # sigma along the ray, m
    max_range: float = 75.0


@dataclass
class AlignSection:
    min_points: int = 10


@dataclass
class CorrespondSection:
    static_max_dist: float = 0.3
    dynamic_max_dist: float = 0.5
    min_coverage: float = 0.2


@dataclass
class TrainSection:
    mode: str = "st+dloss"
    epochs: int = 15
    steps_per_epoch: int = 40
    n_clusters: int = 4
    lr: float = 0.05
    lr_drop: float = 0.1
    lr_drop_at: float = 0.4
    temperature: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma_w: float = 1.0
    delta_v: float = 0.5
    delta_d: float = 1.5
    intervals: tuple = (5, 10, 15, 20, 25, 30)
    translate_max: float = 2.0
    keep_ratio: float = 0.9
    flip_prob: float = 0.5
    rot_prob: float = 0.5
    kmeans_iters: int = 25
    cluster_sample: int = 50000
    hidden: int = 16               # network width
    features: int = 32             # embedding dimensions


@dataclass
class CascadeSection:
    pseudo: str = "heuristic"
    epsilon: float = 0.5
    cluster_eps: float = 0.8
    cluster_min_pts: int = 10
    car_length: tuple = (2.5, 6.0)
    car_width: tuple = (1.2, 2.5)
    car_height: tuple = (1.0, 2.2)
    ground_gap: float = 0.3
    threshold: float = 0.5
    hidden: int = 16
    epochs: int = 10
    lr: float = 0.05
    seg_epochs: int = 16
    seg_steps: int = 20
    seg_intervals: tuple = (1, 2, 3)
    seg_lr: float = 0.05
    seg_hidden: int = 16
    seg_features: int = 32
    seg_beta: float = 3.0
    seg_gamma_w: float = 3.0
    seg_delta_d: float = 1.9


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    ground: GroundConfig = field(default_factory=GroundConfig)
    outliers: SorConfig = field(default_factory=SorConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    align: AlignSection = field(default_factory=AlignSection)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    correspond: CorrespondSection = field(default_factory=CorrespondSection)
    train: TrainSection = field(default_factory=TrainSection)
    cascade: CascadeSection = field(default_factory=CascadeSection)
    run: RunSection = field(default_factory=RunSection)

    # stage-facing views of the flat sections

    def fov(self):
        return SensorFov.from_degrees(self.data.fov_up_deg,
                                      self.data.fov_down_deg)

    def sensor(self):
        return SensorModel(h=self.data.h, w=self.data.w, fov=self.fov(),
                           max_range=self.synth.max_range,
                           range_noise=self.synth.range_noise)

    def align_config(self):
        return AlignConfig(ground=replace(self.ground),
                           sor=replace(self.outliers),
                           icp=replace(self.icp),
                           min_points=self.align.min_points)

    def dynamics_config(self):
        return replace(self.dynamics)

    def tracking_config(self):
        return replace(self.tracking)

    def correspond_config(self):
        c = self.correspond
        return CorrespondConfig(static_max_dist=c.static_max_dist,
                                dynamic_max_dist=c.dynamic_max_dist,
                                min_coverage=c.min_coverage)

    def train_config(self, mode=None, log_path=None):
        t = self.train
        return TrainConfig(
            mode=mode or t.mode, epochs=t.epochs,
            steps_per_epoch=t.steps_per_epoch, n_clusters=t.n_clusters,
            lr=t.lr, lr_drop=t.lr_drop, lr_drop_at=t.lr_drop_at,
            temperature=t.temperature, alpha=t.alpha, beta=t.beta,
            gamma_w=t.gamma_w, delta_v=t.delta_v, delta_d=t.delta_d,
            intervals=t.intervals, translate_max=t.translate_max,
            keep_ratio=t.keep_ratio, flip_prob=t.flip_prob,
            rot_prob=t.rot_prob, kmeans_iters=t.kmeans_iters,
            cluster_sample=t.cluster_sample, seed=self.run.seed,
            log_path=log_path)

    def cascade_config(self):
        c = self.cascade
        return CascadeConfig(
            pseudo=c.pseudo, epsilon=c.epsilon, cluster_eps=c.cluster_eps,
            cluster_min_pts=c.cluster_min_pts, car_length=c.car_length,
            car_width=c.car_width, car_height=c.car_height,
            ground_gap=c.ground_gap, threshold=c.threshold, hidden=c.hidden,
            epochs=c.epochs, lr=c.lr, seed=self.run.seed,
            seg_epochs=c.seg_epochs, seg_steps=c.seg_steps,
            seg_intervals=c.seg_intervals, seg_lr=c.seg_lr,
            seg_hidden=c.seg_hidden, seg_features=c.seg_features,
            seg_beta=c.seg_beta, seg_gamma_w=c.seg_gamma_w,
            seg_delta_d=c.seg_delta_d)


SECTIONS = ("data", "synth", "ground", "outliers", "icp", "align",
            "dynamics", "tracking", "correspond", "train", "cascade", "run")

DOCS = {
    "data.root": "dataset directory consumed when no directory argument is given",
    "data.h": "range-image rows used by every projection",
    "data.w": "range-image columns used by every projection",
    "data.fov_up_deg": "vertical field of view above the horizon, degrees",
    "data.fov_down_deg": "vertical field of view below the horizon, degrees (positive)",
    "synth.scene": "scene preset rendered by the synth stage: demo or intersection",
    "synth.frames": "frames to render",
    "synth.n_cars": "moving cars in the demo scene",
    "synth.n_pedestrians": "pedestrians in the demo scene",
    "synth.n_buildings": "buildings in the demo scene",
    "synth.range_noise": "range noise sigma along each ray, meters",
    "synth.max_range": "sensor maximum range, meters",
    "ground.dist_thresh": "plane inlier distance, meters",
    "ground.gate_width": "candidate band above the lowest point, meters",
    "ground.max_angle_deg": "plane normal tilt limit from vertical, degrees",
    "ground.iterations": "RANSAC iterations",
    "ground.seed": "RANSAC sampling seed (independent of run.seed)",
    "outliers.k": "neighbors for the statistical outlier filter",
    "outliers.stddev_mult": "outlier cut in standard deviations of mean kNN distance",
    "icp.max_corr_dist": "reject correspondences beyond this distance, meters",
    "icp.max_iterations": "ICP iteration cap",
    "icp.tolerance": "stop when the residual improves less than this",
    "icp.min_corr": "minimum correspondences per iteration",
    "align.min_points": "exclude frames with fewer surviving points",
    "dynamics.lam": "motion-score decay rate",
    "dynamics.epsilon": "dynamic threshold on motion scores",
    "dynamics.m_window": "reference frames on each side of the scored frame",
    "dynamics.cluster_eps": "DBSCAN radius over dynamic points, meters",
    "dynamics.cluster_min_pts": "DBSCAN core-point minimum",
    "dynamics.score_scale": "score units per meter of displacement evidence",
    "dynamics.n_min": "minimum points per dynamic box proposal",
    "dynamics.max_side": "side length cap on box proposals, meters",
    "dynamics.volume_min": "volume floor on box proposals, cubic meters",
    "dynamics.volume_max": "volume cap on box proposals, cubic meters",
    "dynamics.v_split": "instance-group volume split between small and large, cubic meters",
    "tracking.w_center": "association cost weight on center distance",
    "tracking.w_overlap": "association cost weight on footprint overlap",
    "tracking.w_volume": "association cost weight on volume ratio",
    "tracking.d_norm": "center-distance normalizer, meters",
    "tracking.gate_dist": "hard association gate on center distance, meters",
    "tracking.max_misses": "frames a track may go unseen before it closes",
    "correspond.static_max_dist": "static pair nearest-neighbor gate, meters",
    "correspond.dynamic_max_dist": "dynamic pair gate after track alignment, meters",
    "correspond.min_coverage": "below this matched fraction a pair set is flagged low quality",
    "train.mode": "training objective: baseline, ego, st, or st+dloss",
    "train.epochs": "training epochs",
    "train.steps_per_epoch": "gradient steps per epoch",
    "train.n_clusters": "pseudo-label clusters",
    "train.lr": "Adam learning rate",
    "train.lr_drop": "learning-rate multiplier applied once",
    "train.lr_drop_at": "fraction of epochs before the drop",
    "train.temperature": "softmax temperature of the prototype losses",
    "train.alpha": "within-view loss weight",
    "train.beta": "cross-frame loss weight",
    "train.gamma_w": "push-pull regularizer weight (st+dloss)",
    "train.delta_v": "pull margin inside an instance group",
    "train.delta_d": "push margin between group means",
    "train.intervals": "frame gaps sampled for cross-frame pairs",
    "train.translate_max": "augmentation translation range, meters",
    "train.keep_ratio": "augmentation point keep fraction",
    "train.flip_prob": "augmentation y-flip probability",
    "train.rot_prob": "augmentation half-turn probability",
    "train.kmeans_iters": "mini-batch k-means iterations per clustering pass",
    "train.cluster_sample": "row budget per clustering pass",
    "train.hidden": "embedding network width",
    "train.features": "embedding dimensions",
    "cascade.pseudo": "pseudo-labeling scheme: simple or heuristic",
    "cascade.epsilon": "motion-score cut for the dynamic branch",
    "cascade.cluster_eps": "static DBSCAN radius, meters",
    "cascade.cluster_min_pts": "static DBSCAN core-point minimum",
    "cascade.car_length": "car-footprint length bounds, meters",
    "cascade.car_width": "car-footprint width bounds, meters",
    "cascade.car_height": "car-footprint height bounds, meters",
    "cascade.ground_gap": "maximum distance from box bottom to ground plane, meters",
    "cascade.threshold": "foreground decision point on the sigmoid output",
    "cascade.hidden": "binary network width",
    "cascade.epochs": "binary training epochs",
    "cascade.lr": "binary Adam learning rate",
    "cascade.seg_epochs": "second-stage epochs",
    "cascade.seg_steps": "second-stage steps per epoch",
    "cascade.seg_intervals": "second-stage frame gaps",
    "cascade.seg_lr": "second-stage learning rate",
    "cascade.seg_hidden": "second-stage network width",
    "cascade.seg_features": "second-stage embedding dimensions",
    "cascade.seg_beta": "second-stage cross-frame weight",
    "cascade.seg_gamma_w": "second-stage push-pull weight",
    "cascade.seg_delta_d": "second-stage push margin",
    "run.seed": "master seed for rendering, training, and the cascade",
    "run.threads": "worker threads for per-frame prediction",
}


def _parse_value(raw, default, where):
    raw = raw.strip()
    t = type(default)
    if t is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{where}: expected a boolean, got {raw!r}")
    if t is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{where}: expected an integer, got {raw!r}")
    if t is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{where}: expected a number, got {raw!r}")
    if t is str:
        return raw
    if t is tuple:
        elem = type(default[0])
        toks = [tok.strip() for tok in raw.split(",") if tok.strip()]
        if not toks:
            raise ValueError(f"{where}: expected a comma-separated list")
        try:
            return tuple(elem(tok) for tok in toks)
        except ValueError:
            raise ValueError(f"{where}: expected {elem.__name__} values, "
                             f"got {raw!r}")
    raise TypeError(f"{where}: unsupported config type {t.__name__}")


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _section_keys(cfg, name):
    return [f.name for f in fields(getattr(cfg, name))]


def load_config(path=None, overrides=()):
    """Build a PipelineConfig from defaults, an optional INI file, and
    ``section.key=value`` override strings, rejecting anything unknown."""
    cfg = PipelineConfig()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        with open(path) as fh:
            cp.read_file(fh, source=str(path))
        if cp.defaults():
            raise ValueError(f"{path}: [DEFAULT] section is not supported")
        unknown = [s for s in cp.sections() if s not in SECTIONS]
        if unknown:
            raise ValueError(f"{path}: unknown config section(s): "
                             + ", ".join(sorted(unknown)))
        for name in cp.sections():
            section = getattr(cfg, name)
            known = _section_keys(cfg, name)
            bad = [k for k in cp[name] if k not in known]
            if bad:
                raise ValueError(f"{path}: unknown key(s) in [{name}]: "
                                 + ", ".join(sorted(bad)))
            for key, raw in cp[name].items():
                setattr(section, key, _parse_value(
                    raw, getattr(section, key), f"[{name}] {key}"))
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ValueError(f"override {ov!r} is not section.key=value")
        dotted, raw = ov.split("=", 1)
        name, key = dotted.strip().split(".", 1)
        if name not in SECTIONS:
            raise ValueError(f"override {ov!r}: unknown section {name!r}")
        section = getattr(cfg, name)
        if key not in _section_keys(cfg, name):
            raise ValueError(f"override {ov!r}: unknown key {key!r} "
                             f"in [{name}]")
        setattr(section, key, _parse_value(
            raw, getattr(section, key), f"override {dotted}"))
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg.train.mode not in MODES:
        raise ValueError(f"train.mode must be one of {MODES}, "
                         f"got {cfg.train.mode!r}")
    if cfg.cascade.pseudo not in PSEUDO_SCHEMES:
        raise ValueError(f"cascade.pseudo must be one of {PSEUDO_SCHEMES}, "
                         f"got {cfg.cascade.pseudo!r}")
    if cfg.synth.scene not in SCENES:
        raise ValueError(f"synth.scene must be one of {SCENES}, "
                         f"got {cfg.synth.scene!r}")
    if cfg.synth.frames < 2:
        raise ValueError("synth.frames must be at least 2")
    if cfg.data.h < 1 or cfg.data.w < 1:
        raise ValueError("data.h and data.w must be positive")
    if cfg.run.threads < 1:
        raise ValueError("run.threads must be at least 1")


def config_text(cfg):
    """Canonical INI rendering: fixed section and key order."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for key in _section_keys(cfg, name):
            lines.append(f"{key} = {_format_value(getattr(section, key))}")
        lines.append("")
    return "\n".join(lines)


def save_config(path, cfg):
    with open(path, "w") as fh:
        fh.write(config_text(cfg))


def config_hash(cfg):
    """Short content hash of the canonical rendering, the stage cache key."""
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:12]


def reference_doc():
    """Markdown reference over every key: default value and meaning."""
    cfg = PipelineConfig()
    out = ["# Configuration reference", "",
           "Settings live in one INI file (see `stseg config --write`); any "
           "key can also be set per run with `--set section.key=value`.", ""]
    for name in SECTIONS:
        out.append(f"## [{name}]")
        out.append("")
        out.append("| key | default | description |")
        out.append("| --- | --- | --- |")
        section = getattr(cfg, name)
        for key in _section_keys(cfg, name):
            doc = DOCS[f"{name}.{key}"]
            out.append(f"| {key} | `{_format_value(getattr(section, key))}`"
                       f" | {doc} |")
        out.append("")
    return "\n".join(out)
