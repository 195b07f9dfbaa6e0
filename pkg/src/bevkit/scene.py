"""Seeded synthetic scene bundles: point clouds, rigs, features, boxes.

A scene bundle on disk stands in for one annotated driving sample:

    scene.json          rigs, ego trajectory, densities, file references
    radar.pc4d          radar returns, (x, y, z, reflectivity) f32 rows
    lidar.pc4d          lidar returns, same format
    features_cam<i>.tnsr  synthetic backbone features per camera
    gt_boxes.json       ground-truth boxes keyed by sample token

Everything is a pure function of the SceneSpec, so one seed always yields
byte-identical bundles. Point counts are Poisson draws whose means scale
linearly with the emission densities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fusion import DetectionBox
from .geometry import CameraRig, EgoPose
from .metrics import ATTRIBUTES, DETECTION_CLASSES, save_boxes
from .nnprims import write_tensor
from .pillars import write_pc4d

SAMPLE_TOKEN = "sample-0"

# Nominal per-class (w, l, h) box sizes and default attribute, meters.
CLASS_SIZES = {
    "car": (1.9, 4.6, 1.7), "truck": (2.5, 7.0, 2.8), "bus": (2.9, 11.0, 3.4),
    "trailer": (2.9, 12.0, 3.8), "construction_vehicle": (2.8, 6.5, 3.2),
    "pedestrian": (0.7, 0.7, 1.8), "motorcycle": (0.8, 2.1, 1.4),
    "bicycle": (0.6, 1.7, 1.3), "traffic_cone": (0.4, 0.4, 1.1),
    "barrier": (2.5, 0.5, 1.0),
}
CLASS_ATTRIBUTES = {
    "car": "vehicle.moving", "truck": "vehicle.moving", "bus": "vehicle.moving",
    "trailer": "vehicle.parked", "construction_vehicle": "vehicle.stopped",
    "pedestrian": "pedestrian.moving", "motorcycle": "cycle.with_rider",
    "bicycle": "cycle.without_rider", "traffic_cone": "", "barrier": "",
}

# Forward-looking camera: x right = -ego y, y down = -ego z, z forward = ego x.
FORWARD_CAM_ROTATION = np.array([[0.0, -1.0, 0.0],
                                 [0.0, 0.0, -1.0],
                                 [1.0, 0.0, 0.0]])


@dataclass
class SceneObject:
    class_name: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)
    attribute: str = ""

    def to_box(self) -> DetectionBox:
        return DetectionBox(
            center=self.center, size=self.size, yaw=self.yaw,
            velocity=self.velocity,
            class_id=DETECTION_CLASSES.index(self.class_name),
            score=0.0, attribute_id=ATTRIBUTES.index(self.attribute),
        )


@dataclass
class SceneSpec:
    """Everything needed to synthesize one deterministic scene bundle."""

    seed: int
    cameras: list[CameraRig]
    ego_trajectory: list[EgoPose]
    objects: list[SceneObject]
    radar_density: float = 2000.0  # expected emitted points per sensor
    lidar_density: float = 8000.0
    radar_max_range: float = 55.0
    lidar_max_range: float = 25.0
    feature_shape: tuple[int, int, int] = (64, 16, 44)

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("a scene needs at least one camera")
        if len(self.cameras) > 6:
            raise ValueError("at most 6 cameras supported")
        if not self.ego_trajectory:
            raise ValueError("a scene needs at least one ego pose")


def forward_camera(focal: float = 380.0, image_size: tuple[int, int] = (256, 704),
                   height: float = 1.6) -> CameraRig:
    h, w = image_size
    k = np.array([[focal, 0.0, w / 2.0], [0.0, focal, h / 2.0], [0.0, 0.0, 1.0]])
    mount = np.array([1.5, 0.0, height])
    return CameraRig(k, FORWARD_CAM_ROTATION, -FORWARD_CAM_ROTATION @ mount, image_size)


def default_scene_spec(seed: int, n_objects: int = 8, n_cameras: int = 1,
                       radar_density: float = 2000.0, lidar_density: float = 8000.0,
                       feature_shape: tuple[int, int, int] = (64, 16, 44)) -> SceneSpec:
    """Randomized but fully seed-determined scene in front of the ego."""
    rng = np.random.default_rng([seed, 0])
    objects = []
    for i in range(n_objects):
        name = DETECTION_CLASSES[int(rng.integers(len(DETECTION_CLASSES)))]
        w, length, h = CLASS_SIZES[name]
        x = float(rng.uniform(8.0, 50.0))
        y = float(rng.uniform(-18.0, 18.0))
        speed = float(rng.uniform(0.0, 8.0)) if name not in ("traffic_cone", "barrier") else 0.0
        heading = float(rng.uniform(-np.pi, np.pi))
        objects.append(SceneObject(
            class_name=name, center=(x, y, h / 2.0), size=(w, length, h),
            yaw=heading, velocity=(speed * np.cos(heading), speed * np.sin(heading)),
            attribute=CLASS_ATTRIBUTES[name],
        ))
    poses = [EgoPose(np.eye(3), np.array([2.0 * t, 0.0, 0.0]), float(t))
             for t in range(3)]
    cams = [forward_camera()] * max(1, n_cameras)
    return SceneSpec(seed=seed, cameras=cams, ego_trajectory=poses, objects=objects,
                     radar_density=radar_density, lidar_density=lidar_density,
                     feature_shape=feature_shape)


def _box_surface_points(rng: np.random.Generator, obj: SceneObject, n: int) -> np.ndarray:
    """Uniform samples on the four vertical faces of a yawed box."""
    if n <= 0:
        return np.zeros((0, 3))
    w, length, h = obj.size
    areas = np.array([length * h, length * h, w * h, w * h])
    face = rng.choice(4, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(0.0, 1.0, n)
    local = np.zeros((n, 3))
    side_x = face < 2  # faces at x = +-w/2 span the length axis
    local[side_x, 0] = np.where(face[side_x] == 0, w / 2, -w / 2)
    local[side_x, 1] = u[side_x] * length
    local[~side_x, 1] = np.where(face[~side_x] == 2, length / 2, -length / 2)
    local[~side_x, 0] = u[~side_x] * w
    local[:, 2] = v * h
    c, s = np.cos(obj.yaw), np.sin(obj.yaw)
    rot = np.array([[c, -s], [s, c]])
    out = np.empty((n, 3))
    out[:, :2] = local[:, :2] @ rot.T + np.array(obj.center[:2])
    out[:, 2] = local[:, 2] + obj.center[2] - h / 2.0
    return out


def _sensor_cloud(spec: SceneSpec, density: float, max_range: float,
                  stream: int) -> np.ndarray:
    """Clutter plus object returns, thinned to the sensor's range."""
    rng = np.random.default_rng([spec.seed, stream])
    n_clutter = rng.poisson(density * 0.5)
    clutter = np.empty((n_clutter, 4))
    r = np.sqrt(rng.uniform(0.0, 1.0, n_clutter)) * max_range
    theta = rng.uniform(-np.pi / 2, np.pi / 2, n_clutter)  # forward half-plane
    clutter[:, 0] = r * np.cos(theta)
    clutter[:, 1] = r * np.sin(theta)
    clutter[:, 2] = rng.normal(0.0, 0.05, n_clutter)
    clutter[:, 3] = rng.uniform(0.0, 1.0, n_clutter)

    parts = [clutter]
    if spec.objects:
        per_obj = density * 0.5 / len(spec.objects)
        for obj in spec.objects:
            pts = _box_surface_points(rng, obj, int(rng.poisson(per_obj)))
            refl = rng.uniform(0.3, 1.0, (pts.shape[0], 1))
            parts.append(np.hstack([pts, refl]))
    cloud = np.vstack(parts)
    dist = np.linalg.norm(cloud[:, :2], axis=1)
    return cloud[dist <= max_range]


def rig_to_json(rig: CameraRig) -> dict:
    return {
        "intrinsics": rig.intrinsics.tolist(),
        "rotation": rig.rotation.tolist(),
        "translation": rig.translation.tolist(),
        "image_size": list(rig.image_size),
    }


def rig_from_json(d: dict) -> CameraRig:
    return CameraRig(np.array(d["intrinsics"]), np.array(d["rotation"]),
                     np.array(d["translation"]), tuple(d["image_size"]))


def pose_to_json(pose: EgoPose) -> dict:
    return {"rotation": pose.rotation.tolist(),
            "translation": pose.translation.tolist(),
            "timestamp": pose.timestamp}


def pose_from_json(d: dict) -> EgoPose:
    return EgoPose(np.array(d["rotation"]), np.array(d["translation"]),
                   float(d["timestamp"]))


def generate_scene(spec: SceneSpec, out_dir) -> Path:
    """Write the bundle; returns the scene directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    radar = _sensor_cloud(spec, spec.radar_density, spec.radar_max_range, stream=1)
    lidar = _sensor_cloud(spec, spec.lidar_density, spec.lidar_max_range, stream=2)
    write_pc4d(out / "radar.pc4d", radar)
    write_pc4d(out / "lidar.pc4d", lidar)

    feature_files = []
    for i in range(len(spec.cameras)):
        rng = np.random.default_rng([spec.seed, 3, i])
        write_tensor(out / f"features_cam{i}.tnsr", rng.normal(0.0, 1.0, spec.feature_shape))
        feature_files.append(f"features_cam{i}.tnsr")

    save_boxes(out / "gt_boxes.json",
               {SAMPLE_TOKEN: [obj.to_box() for obj in spec.objects]},
               with_score=False)

    manifest = {
        "seed": spec.seed,
        "sample_token": SAMPLE_TOKEN,
        "cameras": [rig_to_json(r) for r in spec.cameras],
        "ego_trajectory": [pose_to_json(p) for p in spec.ego_trajectory],
        "densities": {"radar": spec.radar_density, "lidar": spec.lidar_density},
        "max_range": {"radar": spec.radar_max_range, "lidar": spec.lidar_max_range},
        "feature_shape": list(spec.feature_shape),
        "files": {
            "radar": "radar.pc4d",
            "lidar": "lidar.pc4d",
            "features": feature_files,
            "gt_boxes": "gt_boxes.json",
        },
    }
    with open(out / "scene.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


@dataclass
class SceneBundle:
    """In-memory view of a scene directory."""

    manifest: dict
    cameras: list[CameraRig]
    ego_trajectory: list[EgoPose]
    radar: np.ndarray
    lidar: np.ndarray
    features: list[np.ndarray]
    gt_boxes: dict[str, list[DetectionBox]]
    path: Path


def load_scene(scene_dir) -> SceneBundle:
    from .metrics import load_boxes
    from .nnprims import read_tensor
    from .pillars import read_pc4d

    path = Path(scene_dir)
    manifest_path = path / "scene.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no scene.json in {path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    files = manifest["files"]
    return SceneBundle(
        manifest=manifest,
        cameras=[rig_from_json(d) for d in manifest["cameras"]],
        ego_trajectory=[pose_from_json(d) for d in manifest["ego_trajectory"]],
        radar=read_pc4d(path / files["radar"]).points,
        lidar=read_pc4d(path / files["lidar"]).points,
        features=[read_tensor(path / f) for f in files["features"]],
        gt_boxes=load_boxes(path / files["gt_boxes"]),
        path=path,
    )
