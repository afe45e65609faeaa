"""Synthetic LiDAR sequence simulator.

Ray-casts an H x W spherical beam grid against parametric scenes (ground
plane, boxes, vertical cylinders, rigid movers) and keeps full ground truth
per point: class, instance, motion flag, ego pose and a provenance id that
is stable for every rigid surface cell across frames. Same seed, same
scene: bit-identical output.
"""
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .cloud import (PointCloud, RigidTransform, SensorFov, write_kitti_bin,
                    write_labels, write_poses)

# class ids shared by the synthetic scenes
UNLABELED = 0
GROUND_CLASS = 1
STRUCTURE_CLASS = 2
VEHICLE_CLASS = 3
PEDESTRIAN_CLASS = 4

CLASS_NAMES = {UNLABELED: "unlabeled", GROUND_CLASS: "ground",
               STRUCTURE_CLASS: "structure", VEHICLE_CLASS: "vehicle",
               PEDESTRIAN_CLASS: "pedestrian"}

_PROVENANCE_CELL = 0.01  # m, quantization of stable surface coordinates


@dataclass
class SensorModel:
    h: int = 32
    w: int = 512
    fov: SensorFov = field(default_factory=lambda: SensorFov.from_degrees(12.0, 22.0))
    max_range: float = 75.0
    range_noise: float = 0.01     # sigma along the ray, m
    height: float = 1.8           # sensor z above ground, m

    def ray_directions(self):
        """Unit ray directions for every pixel, row-major (H*W, 3).

        Built so that projecting a hit back through the spherical pixel
        formula lands on the emitting pixel.
        """
        v = np.arange(self.h)
        u = np.arange(self.w)
        elev = self.fov.up - (v + 0.5) * self.fov.span / self.h
        azim = math.pi * (1.0 - 2.0 * (u + 0.5) / self.w)
        el = np.repeat(elev, self.w)
        az = np.tile(azim, self.h)
        ce = np.cos(el)
        return np.column_stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)])


@dataclass
class Body:
    """One rigid object: an upright box or a vertical cylinder.

    Boxes: size = (length, width, height), anchored at the bottom center.
    Cylinders: size = (radius, height). velocity is meters per frame in the
    world xy plane; zero velocity makes the body a static prop.
    """

    kind: str                     # "box" | "cylinder"
    position: tuple               # bottom-center world xy(z=0 implied) at t=0
    size: tuple
    class_id: int
    heading: float = 0.0
    velocity: tuple = (0.0, 0.0)
    intensity: float = 0.5
    intensity_std: float = 0.1

    @property
    def moving(self):
        return abs(self.velocity[0]) > 0 or abs(self.velocity[1]) > 0

    def pose_at(self, t):
        """World pose of the body frame at frame t."""
        x = self.position[0] + self.velocity[0] * t
        y = self.position[1] + self.velocity[1] * t
        return RigidTransform.rot_z(self.heading, (x, y, 0.0))


@dataclass
class SceneSpec:
    ground_half: float = 40.0
    ground_intensity: float = 0.25
    ground_intensity_std: float = 0.08
    bodies: list = field(default_factory=list)
    sensor: SensorModel = field(default_factory=SensorModel)
    ego_start: tuple = (0.0, 0.0)
    ego_velocity: tuple = (0.0, 0.0)  # m per frame
    ego_yaw0: float = 0.0
    ego_yaw_rate: float = 0.0         # rad per frame
    ego_poses: list = None            # explicit sensor-to-world poses override

    def ego_pose(self, t):
        """Sensor-to-world pose at frame t."""
        if self.ego_poses is not None:
            return self.ego_poses[t]
        x = self.ego_start[0] + self.ego_velocity[0] * t
        y = self.ego_start[1] + self.ego_velocity[1] * t
        yaw = self.ego_yaw0 + self.ego_yaw_rate * t
        return RigidTransform.rot_z(yaw, (x, y, self.sensor.height))


def _ray_ground(origin, dirs, half):
    """Ray-plane (z=0) hits clipped to the square extent -> t array."""
    t = np.full(len(dirs), np.inf)
    dz = dirs[:, 2]
    going_down = dz < -1e-12
    tt = -origin[2] / dz[going_down]
    px = origin[0] + tt * dirs[going_down, 0]
    py = origin[1] + tt * dirs[going_down, 1]
    ok = (tt > 0) & (np.abs(px) <= half) & (np.abs(py) <= half)
    idx = np.flatnonzero(going_down)
    t[idx[ok]] = tt[ok]
    return t


def _ray_box(origin, dirs, pose, size):
    """Slab-test the rays against an upright box in its local frame."""
    l, w, h = size
    inv = pose.inverse()
    o = inv.apply(origin[None, :])[0]
    d = dirs @ inv.rotation.T
    lo = np.array([-l / 2.0, -w / 2.0, 0.0])
    hi = np.array([l / 2.0, w / 2.0, h])
    t_near = np.full(len(dirs), -np.inf)
    t_far = np.full(len(dirs), np.inf)
    for k in range(3):
        dk = d[:, k]
        parallel = np.abs(dk) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[k] - o[k]) / dk
            t2 = (hi[k] - o[k]) / dk
        swap = t1 > t2
        t1s = np.where(swap, t2, t1)
        t2s = np.where(swap, t1, t2)
        inside = (o[k] >= lo[k]) & (o[k] <= hi[k])
        t1s = np.where(parallel, np.where(inside, -np.inf, np.inf), t1s)
        t2s = np.where(parallel, np.where(inside, np.inf, -np.inf), t2s)
        t_near = np.maximum(t_near, t1s)
        t_far = np.minimum(t_far, t2s)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


def _ray_cylinder(origin, dirs, pose, size):
    """Side-surface hits of a vertical cylinder (no caps)."""
    radius, h = size
    cx, cy = pose.translation[0], pose.translation[1]
    ox, oy, oz = origin[0] - cx, origin[1] - cy, origin[2]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4.0 * a * c
    t = np.full(len(dirs), np.inf)
    ok = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for sign in (-1.0, 1.0):
            tt = np.where(ok, (-b + sign * sq) / np.where(ok, 2.0 * a, 1.0),
                          np.inf)
            z = np.where(ok, oz + tt * dz, np.inf)
            good = ok & (tt > 1e-9) & (z >= 0.0) & (z <= h)
            t = np.where(good & (tt < t), tt, t)
    return t


@dataclass
class GroundTruthFrame:
    cloud: PointCloud            # sensor-frame points
    class_ids: np.ndarray
    instance_ids: np.ndarray     # 0 = static world, k >= 1 = bodies[k-1]
    dynamic: np.ndarray          # bool, True for points on moving bodies
    provenance: np.ndarray       # uint32 stable surface-cell ids
    local_xyz: np.ndarray        # surface coords: world for static points,
                                 # body-frame for mover points
    world_xyz: np.ndarray
    ego_pose: RigidTransform
    pixel: np.ndarray            # emitting ray, row-major pixel id


class GroundTruthSequence:
    """Rendered frames plus the provenance registry and motion model."""

    def __init__(self, spec, frames, registry):
        self.spec = spec
        self.frames = frames
        self.registry = registry

    def __len__(self):
        return len(self.frames)

    def clouds(self):
        return [f.cloud for f in self.frames]

    def expected_world_position(self, frame_a, index, frame_b):
        """Where the surface point under point `index` of frame_a sits in
        the world at frame_b (rigid-motion ground truth)."""
        fa = self.frames[frame_a]
        inst = int(fa.instance_ids[index])
        if inst == 0:
            return fa.world_xyz[index]
        body = self.spec.bodies[inst - 1]
        return body.pose_at(frame_b).apply(fa.local_xyz[index][None, :])[0]

    def save(self, out_dir):
        """Persist the KITTI-style sequence layout.

        clouds/*.bin, labels/*.label (class | instance << 16),
        provenance/*.prov (uint32 per point) and gt_poses.txt.
        """
        os.makedirs(os.path.join(out_dir, "clouds"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "provenance"), exist_ok=True)
        for t, f in enumerate(self.frames):
            stem = f"{t:06d}"
            write_kitti_bin(os.path.join(out_dir, "clouds", stem + ".bin"), f.cloud)
            write_labels(os.path.join(out_dir, "labels", stem + ".label"),
                         f.class_ids, f.instance_ids)
            f.provenance.astype("<u4").tofile(
                os.path.join(out_dir, "provenance", stem + ".prov"))
        write_poses(os.path.join(out_dir, "gt_poses.txt"),
                    [f.ego_pose for f in self.frames])
        meta = {"n_frames": len(self.frames),
                "classes": {str(k): v for k, v in CLASS_NAMES.items()},
                "sensor": {"h": self.spec.sensor.h, "w": self.spec.sensor.w,
                           "fov_up_deg": math.degrees(self.spec.sensor.fov.up),
                           "fov_down_deg": math.degrees(self.spec.sensor.fov.down)}}
        with open(os.path.join(out_dir, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def render_frame(spec, t, rng, registry=None):
    """Ray-cast one frame. registry maps (instance, cell) -> provenance id
    and is grown in place so ids stay stable across frames."""
    sensor = spec.sensor
    pose = spec.ego_pose(t)
    dirs_local = sensor.ray_directions()
    dirs = dirs_local @ pose.rotation.T
    origin = pose.translation
    n_rays = len(dirs)

    t_hit = np.full((len(spec.bodies) + 1, n_rays), np.inf)
    t_hit[0] = _ray_ground(origin, dirs, spec.ground_half)
    for k, body in enumerate(spec.bodies):
        bp = body.pose_at(t)
        if body.kind == "box":
            t_hit[k + 1] = _ray_box(origin, dirs, bp, body.size)
        elif body.kind == "cylinder":
            t_hit[k + 1] = _ray_cylinder(origin, dirs, bp, body.size)
        else:
            raise ValueError(f"unknown body kind {body.kind!r}")

    winner = np.argmin(t_hit, axis=0)
    best_t = t_hit[winner, np.arange(n_rays)]
    hit = np.isfinite(best_t) & (best_t <= sensor.max_range)

    noise = rng.normal(0.0, sensor.range_noise, size=n_rays)
    ray_ids = np.flatnonzero(hit)
    tt = np.maximum(best_t[hit] + noise[hit], 1e-6)
    world = origin + tt[:, None] * dirs[hit]
    sensor_xyz = pose.inverse().apply(world)
    who = winner[hit]

    n = len(ray_ids)
    class_ids = np.empty(n, dtype=np.int64)
    instance_ids = np.zeros(n, dtype=np.int64)
    dynamic = np.zeros(n, dtype=bool)
    local = np.empty((n, 3))
    inten_mu = np.empty(n)
    inten_sd = np.empty(n)

    ground_pts = who == 0
    class_ids[ground_pts] = GROUND_CLASS
    local[ground_pts] = world[ground_pts]
    inten_mu[ground_pts] = spec.ground_intensity
    inten_sd[ground_pts] = spec.ground_intensity_std
    for k, body in enumerate(spec.bodies):
        sel = who == k + 1
        if not sel.any():
            continue
        class_ids[sel] = body.class_id
        inten_mu[sel] = body.intensity
        inten_sd[sel] = body.intensity_std
        if body.moving:
            instance_ids[sel] = k + 1
            dynamic[sel] = True
            local[sel] = body.pose_at(t).inverse().apply(world[sel])
        else:
            local[sel] = world[sel]

    intensity = np.clip(inten_mu + rng.normal(0.0, 1.0, size=n) * inten_sd,
                        0.0, 1.0)

    if registry is None:
        registry = {}
    provenance = np.empty(n, dtype=np.uint32)
    cells = np.round(local / _PROVENANCE_CELL).astype(np.int64)
    for i in range(n):
        key = (int(instance_ids[i]), cells[i, 0], cells[i, 1], cells[i, 2])
        pid = registry.get(key)
        if pid is None:
            pid = len(registry)
            registry[key] = pid
        provenance[i] = pid

    cloud = PointCloud(sensor_xyz, intensity, frame_index=t)
    return GroundTruthFrame(cloud, class_ids, instance_ids, dynamic,
                            provenance, local, world, pose, ray_ids)


def render_sequence(spec, n_frames, seed=0):
    """Render n_frames deterministically; per-frame RNG children make the
    result independent of evaluation order."""
    if n_frames < 2:
        raise ValueError("a sequence needs at least 2 frames")
    if spec.ground_half <= 0 and not spec.bodies:
        raise ValueError("scene has no geometry to render")
    if spec.ego_poses is not None and len(spec.ego_poses) < n_frames:
        raise ValueError("ego_poses must cover every frame")
    children = np.random.SeedSequence(seed).spawn(n_frames)
    registry = {}
    frames = [render_frame(spec, t, np.random.default_rng(children[t]), registry)
              for t in range(n_frames)]
    return GroundTruthSequence(spec, frames, registry)


# ---------------------------------------------------------------------------
# scene presets


def _ring_walls(rng, half, n, class_id=STRUCTURE_CLASS):
    """Buildings scattered around the map edge, facing roughly inward."""
    bodies = []
    for _ in range(n):
        ang = rng.uniform(0, 2 * math.pi)
        rad = rng.uniform(half * 0.45, half * 0.8)
        pos = (rad * math.cos(ang), rad * math.sin(ang))
        size = (rng.uniform(8.0, 16.0), rng.uniform(4.0, 8.0), rng.uniform(3.0, 7.0))
        heading = ang + math.pi / 2 + rng.normal(0, 0.2)
        bodies.append(Body("box", pos, size, class_id, heading=heading,
                           intensity=float(rng.uniform(0.45, 0.6)),
                           intensity_std=0.12))
    return bodies


def _car(rng, pos, direction, speed):
    vx = math.cos(direction) * speed
    vy = math.sin(direction) * speed
    size = (rng.uniform(3.8, 4.6), rng.uniform(1.6, 1.9), rng.uniform(1.4, 1.7))
    return Body("box", pos, size, VEHICLE_CLASS, heading=direction,
                velocity=(vx, vy), intensity=float(rng.uniform(0.62, 0.75)),
                intensity_std=0.12)


def _pedestrian(rng, pos, direction, speed):
    vx = math.cos(direction) * speed
    vy = math.sin(direction) * speed
    size = (rng.uniform(0.25, 0.35), rng.uniform(1.6, 1.85))
    return Body("cylinder", pos, size, PEDESTRIAN_CLASS, heading=direction,
                velocity=(vx, vy), intensity=float(rng.uniform(0.5, 0.62)),
                intensity_std=0.12)


def demo_scene(seed=0, n_cars=2, n_pedestrians=1, n_buildings=5,
               sensor=None):
    """Compact moving-ego scene used by the demo pipeline and smoke tests."""
    rng = np.random.default_rng(seed)
    spec = SceneSpec(ground_half=35.0,
                     sensor=sensor or SensorModel(),
                     ego_start=(-6.0, 0.0),
                     ego_velocity=(0.2, 0.0))
    spec.bodies.extend(_ring_walls(rng, spec.ground_half, n_buildings))
    for k in range(n_cars):
        lane = rng.uniform(-8.0, 8.0)
        direction = 0.0 if k % 2 == 0 else math.pi
        x0 = -25.0 if direction == 0.0 else 25.0
        spec.bodies.append(_car(rng, (x0, lane), direction,
                                speed=float(rng.uniform(1.0, 1.4))))
    for k in range(n_pedestrians):
        spec.bodies.append(_pedestrian(rng, (rng.uniform(-10, 10),
                                             rng.uniform(-12, 12)),
                                       rng.uniform(0, 2 * math.pi),
                                       speed=float(rng.uniform(0.5, 0.7))))
    return spec


def benchmark_scenes(seed=0, n_scenes=5, sensor=None):
    """Varied scene specs for the multi-mode comparison benchmark.

    Movers are deliberately prominent: enough vehicle and pedestrian
    points near the sensor that cross-frame correspondences on them move
    the final score, not only the ground/structure split."""
    rng = np.random.default_rng(seed)
    specs = []
    for s in range(n_scenes):
        sub = np.random.default_rng(seed * 1000 + s)
        spec = SceneSpec(ground_half=float(sub.uniform(32.0, 42.0)),
                         sensor=sensor or SensorModel(),
                         ego_start=(float(sub.uniform(-8, -4)),
                                    float(sub.uniform(-3, 3))),
                         ego_velocity=(0.2, 0.0),
                         ego_yaw_rate=float(sub.uniform(-0.002, 0.002)))
        spec.bodies.extend(_ring_walls(sub, spec.ground_half,
                                       int(sub.integers(3, 6))))
        n_cars = int(sub.integers(5, 8))
        for k in range(n_cars):
            lane = float(sub.uniform(-8.0, 8.0))
            direction = 0.0 if k % 2 == 0 else math.pi
            x0 = -26.0 if direction == 0.0 else 26.0
            x0 += float(sub.uniform(-8.0, 8.0))   # stagger the entries
            spec.bodies.append(_car(sub, (x0, lane), direction,
                                    speed=float(sub.uniform(0.7, 1.1))))
        for k in range(int(sub.integers(2, 4))):
            spec.bodies.append(_pedestrian(
                sub, (float(sub.uniform(-10, 10)), float(sub.uniform(-10, 10))),
                float(sub.uniform(0, 2 * math.pi)),
                speed=float(sub.uniform(0.4, 0.6))))
        specs.append(spec)
    return specs


def intersection_scene(seed=0, sensor=None):
    """Stationary sensor watching an intersection with parked vehicles.

    The parked cars are vehicle-class props: motion cues alone cannot find
    them, which is exactly the case appearance-based foreground labeling is
    supposed to recover.
    """
    rng = np.random.default_rng(seed)
    spec = SceneSpec(ground_half=30.0,
                     sensor=sensor or SensorModel(),
                     ego_start=(0.0, 0.0),
                     ego_velocity=(0.0, 0.0))
    spec.bodies.extend(_ring_walls(rng, spec.ground_half, 4))
    # parked cars near the sensor: static, vehicle class
    for pos, heading in (((6.0, 4.5), 0.1), ((-5.0, -6.0), 1.4)):
        car = _car(rng, pos, heading, speed=0.0)
        car = Body("box", pos, car.size, VEHICLE_CLASS, heading=heading,
                   velocity=(0.0, 0.0), intensity=car.intensity,
                   intensity_std=car.intensity_std)
        spec.bodies.append(car)
    # through traffic
    spec.bodies.append(_car(rng, (-24.0, -1.8), 0.0, speed=1.2))
    spec.bodies.append(_car(rng, (24.0, 1.8), math.pi, speed=1.1))
    for k in range(2):
        spec.bodies.append(_pedestrian(rng, (rng.uniform(-8, 8),
                                             rng.uniform(-10, 10)),
                                       rng.uniform(0, 2 * math.pi),
                                       speed=0.55))
    return spec
