"""Scene ingestion, frame preprocessing, and a synthetic scene generator.

Scene file format (UTF-8 JSON, "scenes-lite"):

    {
      "schema_version": 1,
      "records": [
        {
          "sample_id": "str",
          "ego_to_global":  {"translation": [x,y,z], "rotation": [w,x,y,z]},
          "lidar_to_ego":   {"translation": [x,y,z], "rotation": [w,x,y,z]},
          "cameras": [
            {
              "name": "front",          # one of the six ring cameras
              "intrinsics": {"fx","fy","cx","cy","width","height"},
              "sensor_to_ego": {"translation": ..., "rotation": ...}
            }, ...
          ],
          "annotations": [
            {"category": "car", "box": [x,y,z,l,w,h,yaw]}   # global frame
          ]
        }, ...
      ]
    }

Quaternions are [w,x,y,z] and must be unit within 1e-9; lengths are meters,
angles radians. Annotation boxes live in the global frame and are brought
into the LiDAR frame by inverting the ego and LiDAR calibration poses.
Corner visibility follows the camera rule: a corner counts as visible when
its camera-frame depth is positive and its projection lands inside the
image; an annotation is retained when at least one corner is visible in at
least one camera, and dropped otherwise.

The synthetic generator produces scene records plus paired feature vectors
whose visual part is a fixed smooth, invertible function of the LiDAR-frame
box parameters (plus optional noise) and whose text part indexes the
category, so a learnable mapping from features to boxes exists by
construction. Encoder constants are derived from a fixed internal seed so
that datasets generated with different user seeds share one feature space.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaVersionMismatch
from .geom import (
    Box7,
    CameraIntrinsics,
    Pose,
    ProjectedCorner,
    box_corners,
    project_corners,
    quat_from_matrix,
    quat_from_yaw,
    transform_box,
)

SCHEMA_VERSION = 1
CAMERA_NAMES = ("front", "front-right", "front-left", "back", "back-left", "back-right")


@dataclass(frozen=True)
class Annotation:
    category: str
    box: Box7

    def __post_init__(self):
        if not self.category:
            raise ValueError("category must be non-empty")


@dataclass(frozen=True)
class CameraBlock:
    name: str
    intrinsics: CameraIntrinsics
    sensor_to_ego: Pose

    def __post_init__(self):
        if self.name not in CAMERA_NAMES:
            raise ValueError(f"unknown camera name {self.name!r}")


@dataclass(frozen=True)
class SceneRecord:
    sample_id: str
    ego_to_global: Pose
    lidar_to_ego: Pose
    cameras: tuple[CameraBlock, ...]
    annotations: tuple[Annotation, ...]

    def __post_init__(self):
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate camera names: {names}")
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "annotations", tuple(self.annotations))


@dataclass(frozen=True)
class ProcessedAnnotation:
    category: str
    box: Box7  # LiDAR frame
    projections: dict[str, list[ProjectedCorner]]
    retained: bool


@dataclass(frozen=True)
class ProcessedSample:
    sample_id: str
    annotations: tuple[ProcessedAnnotation, ...]


# ---- parsing ---------------------------------------------------------------


def _parse_pose(obj, where: str) -> Pose:
    if not isinstance(obj, dict):
        raise ParseError(where, "pose must be an object")
    for key in ("translation", "rotation"):
        if key not in obj:
            raise ParseError(f"{where}.{key}", "missing")
    extra = set(obj) - {"translation", "rotation"}
    if extra:
        raise ParseError(where, f"unknown keys {sorted(extra)}")
    t, q = obj["translation"], obj["rotation"]
    if not (isinstance(t, list) and len(t) == 3):
        raise ParseError(f"{where}.translation", "must be a 3-list")
    if not (isinstance(q, list) and len(q) == 4):
        raise ParseError(f"{where}.rotation", "must be a 4-list [w,x,y,z]")
    try:
        return Pose(tuple(float(v) for v in t), tuple(float(v) for v in q))
    except (TypeError, ValueError) as e:
        raise ParseError(f"{where}.rotation", str(e)) from e


def _parse_intrinsics(obj, where: str) -> CameraIntrinsics:
    fields = ("fx", "fy", "cx", "cy", "width", "height")
    if not isinstance(obj, dict) or set(obj) != set(fields):
        raise ParseError(where, f"intrinsics must have exactly the fields {fields}")
    try:
        return CameraIntrinsics(
            fx=float(obj["fx"]),
            fy=float(obj["fy"]),
            cx=float(obj["cx"]),
            cy=float(obj["cy"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
        )
    except (TypeError, ValueError) as e:
        raise ParseError(where, str(e)) from e


def _parse_record(obj, where: str) -> SceneRecord:
    if not isinstance(obj, dict):
        raise ParseError(where, "record must be an object")
    required = {"sample_id", "ego_to_global", "lidar_to_ego", "cameras", "annotations"}
    missing = required - set(obj)
    if missing:
        raise ParseError(where, f"missing keys {sorted(missing)}")
    extra = set(obj) - required
    if extra:
        raise ParseError(where, f"unknown keys {sorted(extra)}")
    sample_id = obj["sample_id"]
    if not isinstance(sample_id, str) or not sample_id:
        raise ParseError(f"{where}.sample_id", "must be a non-empty string")

    ego = _parse_pose(obj["ego_to_global"], f"{where}.ego_to_global")
    lidar = _parse_pose(obj["lidar_to_ego"], f"{where}.lidar_to_ego")

    cameras = []
    seen = set()
    for j, cam in enumerate(obj["cameras"]):
        cw = f"{where}.cameras[{j}]"
        if not isinstance(cam, dict) or set(cam) != {"name", "intrinsics", "sensor_to_ego"}:
            raise ParseError(cw, "camera must have name, intrinsics, sensor_to_ego")
        name = cam["name"]
        if name not in CAMERA_NAMES:
            raise ParseError(f"{cw}.name", f"unknown camera {name!r}")
        if name in seen:
            raise ParseError(f"{cw}.name", f"duplicate camera {name!r}")
        seen.add(name)
        cameras.append(
            CameraBlock(
                name=name,
                intrinsics=_parse_intrinsics(cam["intrinsics"], f"{cw}.intrinsics"),
                sensor_to_ego=_parse_pose(cam["sensor_to_ego"], f"{cw}.sensor_to_ego"),
            )
        )

    annotations = []
    for j, ann in enumerate(obj["annotations"]):
        aw = f"{where}.annotations[{j}]"
        if not isinstance(ann, dict) or set(ann) != {"category", "box"}:
            raise ParseError(aw, "annotation must have category and box")
        if not isinstance(ann["category"], str) or not ann["category"]:
            raise ParseError(f"{aw}.category", "must be a non-empty string")
        box = ann["box"]
        if not (isinstance(box, list) and len(box) == 7):
            raise ParseError(f"{aw}.box", "must be a 7-list [x,y,z,l,w,h,yaw]")
        try:
            annotations.append(Annotation(ann["category"], Box7(*(float(v) for v in box))))
        except (TypeError, ValueError) as e:
            raise ParseError(f"{aw}.box", str(e)) from e

    return SceneRecord(sample_id, ego, lidar, tuple(cameras), tuple(annotations))


def ingest(path: str | Path) -> list[SceneRecord]:
    """Parse and validate a scene file; raises on the first malformed record."""
    records, diagnostics = ingest_lenient(path)
    if diagnostics:
        raise diagnostics[0]
    return records


def ingest_lenient(path: str | Path) -> tuple[list[SceneRecord], list[ParseError]]:
    """Parse a scene file, collecting per-record diagnostics instead of failing.

    Every input record ends up either in the accepted list or as exactly one
    diagnostic naming the offending field.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError("<file>", f"invalid JSON: {e}") from e
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise ParseError("<file>", "top level must be an object with schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"schema_version {doc['schema_version']!r}, expected {SCHEMA_VERSION}"
        )
    if "records" not in doc or not isinstance(doc["records"], list):
        raise ParseError("<file>", "missing records list")

    records, diagnostics = [], []
    for i, obj in enumerate(doc["records"]):
        try:
            records.append(_parse_record(obj, f"records[{i}]"))
        except ParseError as e:
            diagnostics.append(e)
    return records, diagnostics


def _pose_to_json(p: Pose) -> dict:
    return {"translation": list(p.translation), "rotation": list(p.rotation)}


def _record_to_json(rec: SceneRecord) -> dict:
    return {
        "sample_id": rec.sample_id,
        "ego_to_global": _pose_to_json(rec.ego_to_global),
        "lidar_to_ego": _pose_to_json(rec.lidar_to_ego),
        "cameras": [
            {
                "name": c.name,
                "intrinsics": {
                    "fx": c.intrinsics.fx,
                    "fy": c.intrinsics.fy,
                    "cx": c.intrinsics.cx,
                    "cy": c.intrinsics.cy,
                    "width": c.intrinsics.width,
                    "height": c.intrinsics.height,
                },
                "sensor_to_ego": _pose_to_json(c.sensor_to_ego),
            }
            for c in rec.cameras
        ],
        "annotations": [
            {"category": a.category, "box": list(a.box.params())} for a in rec.annotations
        ],
    }


def emit(records, path: str | Path) -> None:
    """Serialize records to the scene file format; ingest(emit(r)) == r."""
    doc = {"schema_version": SCHEMA_VERSION, "records": [_record_to_json(r) for r in records]}
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


# ---- preprocessing ----------------------------------------------------------


def global_to_lidar_pose(rec: SceneRecord) -> Pose:
    """Composite transform taking global-frame points to the LiDAR frame."""
    return rec.lidar_to_ego.inverse().compose(rec.ego_to_global.inverse())


def to_lidar_frame(rec: SceneRecord) -> list[Annotation]:
    """Annotations re-expressed in the LiDAR frame; sizes are untouched."""
    onto_lidar = global_to_lidar_pose(rec)
    return [Annotation(a.category, transform_box(a.box, onto_lidar)) for a in rec.annotations]


def filter_visible(annotations: list[Annotation], rec: SceneRecord) -> ProcessedSample:
    """Project LiDAR-frame boxes into every camera and tag corner visibility.

    Geometry is never modified; each annotation is retained iff at least one
    corner is visible in at least one camera.
    """
    processed = []
    ego_from_lidar = rec.lidar_to_ego
    for ann in annotations:
        corners_lidar = box_corners(ann.box)
        corners_ego = ego_from_lidar.apply(corners_lidar)
        projections: dict[str, list[ProjectedCorner]] = {}
        retained = False
        for cam in rec.cameras:
            corners_cam = cam.sensor_to_ego.inverse().apply(corners_ego)
            proj = project_corners(corners_cam, cam.intrinsics)
            projections[cam.name] = proj
            if any(c.visible for c in proj):
                retained = True
        processed.append(ProcessedAnnotation(ann.category, ann.box, projections, retained))
    return ProcessedSample(rec.sample_id, tuple(processed))


def process_record(rec: SceneRecord) -> ProcessedSample:
    """Full per-record pipeline: global -> LiDAR -> projection/visibility."""
    return filter_visible(to_lidar_frame(rec), rec)


def processed_to_json(sample: ProcessedSample) -> dict:
    return {
        "sample_id": sample.sample_id,
        "annotations": [
            {
                "category": a.category,
                "box": list(a.box.params()),
                "retained": a.retained,
                "projections": {
                    name: [[c.u, c.v, c.visible] for c in corners]
                    for name, corners in sorted(a.projections.items())
                },
            }
            for a in sample.annotations
        ],
    }


# ---- synthetic scenes --------------------------------------------------------

# Feature-encoder constants come from this fixed seed, never the dataset seed,
# so train and validation sets generated with different seeds share a feature
# space.
_ENCODER_SEED = 0x3D5CE11E

_CATEGORY_SIZES = {
    "adult": (0.6, 0.6, 1.75),
    "child": (0.5, 0.5, 1.2),
    "car": (4.5, 1.9, 1.6),
    "truck": (8.0, 2.5, 3.0),
    "trafficcone": (0.4, 0.4, 0.8),
    "barrier": (2.0, 0.5, 1.0),
    "motorcycle": (2.0, 0.8, 1.4),
    "bicycle": (1.7, 0.6, 1.3),
}
_DEFAULT_SIZE = (1.5, 1.0, 1.5)

# Normalization constants for the box-parameter feature block.
_PARAM_SHIFT = np.array([0.0, 0.0, 0.0, 2.0, 1.0, 1.5, 0.0])
_PARAM_SCALE = np.array([20.0, 20.0, 2.0, 4.0, 2.0, 1.5, math.pi])


@dataclass(frozen=True)
class FeaturePair:
    sample_id: str
    visual: np.ndarray
    text: np.ndarray


@dataclass(frozen=True)
class SynthConfig:
    d_v: int = 32
    d_t: int = 32
    noise_std: float = 0.0
    range_radius: tuple[float, float] = (4.0, 18.0)
    size_jitter: float = 0.15


def _normalize_params(params: np.ndarray) -> np.ndarray:
    return (np.asarray(params, dtype=np.float64) - _PARAM_SHIFT) / _PARAM_SCALE


def denormalize_params(p_norm: np.ndarray) -> np.ndarray:
    return np.asarray(p_norm, dtype=np.float64) * _PARAM_SCALE + _PARAM_SHIFT


def _encoder_matrix(d_v: int) -> np.ndarray:
    rng = np.random.default_rng(_ENCODER_SEED)
    return rng.normal(0.0, 1.0, size=(max(d_v - 7, 0), 7))


def category_embedding(category: str, d_t: int) -> np.ndarray:
    """Deterministic per-category text embedding, independent of dataset seed."""
    digest = hashlib.sha256(category.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.normal(0.0, 1.0, size=d_t)


def encode_visual(box_params_lidar: np.ndarray, d_v: int) -> np.ndarray:
    """Fixed smooth encoding of LiDAR-frame box parameters.

    The first 7 channels are the normalized parameters themselves (so the map
    is invertible by construction); the rest are a fixed tanh mixing for
    texture. Requires d_v >= 7.
    """
    if d_v < 7:
        raise ValueError(f"d_v must be >= 7 to keep the encoding invertible, got {d_v}")
    p = _normalize_params(box_params_lidar)
    mix = np.tanh(_encoder_matrix(d_v) @ p)
    return np.concatenate([p, mix])


def decode_visual(visual: np.ndarray) -> np.ndarray:
    """Recover box parameters from a zero-noise visual feature."""
    return denormalize_params(np.asarray(visual, dtype=np.float64)[:7])


def _ring_cameras() -> tuple[CameraBlock, ...]:
    # Camera axes: x right, y down, z forward; mounted on the ego ring.
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    intr = CameraIntrinsics(fx=1000.0, fy=1000.0, cx=800.0, cy=450.0, width=1600, height=900)
    mounts = {
        "front": 0.0,
        "front-left": math.radians(55.0),
        "front-right": math.radians(-55.0),
        "back-left": math.radians(110.0),
        "back-right": math.radians(-110.0),
        "back": math.pi,
    }
    cams = []
    for name in CAMERA_NAMES:
        yaw = mounts[name]
        c, s = math.cos(yaw), math.sin(yaw)
        Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        q = quat_from_matrix(Rz @ base)
        t = (1.5 * math.cos(yaw), 1.5 * math.sin(yaw), 1.6)
        cams.append(CameraBlock(name, intr, Pose(t, q)))
    return tuple(cams)


def synth_scenes(
    count: int,
    category_mix: dict[str, float],
    seed: int,
    config: SynthConfig = SynthConfig(),
) -> tuple[list[SceneRecord], list[FeaturePair]]:
    """Deterministic synthetic scenes with paired feature vectors.

    Boxes are sampled in the LiDAR frame, pushed out to the global frame for
    the scene record, and encoded into features from their LiDAR-frame
    parameters. With noise_std = 0 the features determine the box exactly.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not category_mix:
        raise ValueError("category_mix must name at least one category")
    names = sorted(category_mix)
    weights = np.array([category_mix[n] for n in names], dtype=np.float64)
    if (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("category weights must be non-negative and sum to > 0")
    weights = weights / weights.sum()

    rng = np.random.default_rng(seed)
    cameras = _ring_cameras()
    lidar_to_ego = Pose((0.9, 0.0, 1.8))

    records, features = [], []
    for i in range(count):
        category = names[int(rng.choice(len(names), p=weights))]
        nominal = _CATEGORY_SIZES.get(category, _DEFAULT_SIZE)
        jitter = 1.0 + rng.uniform(-config.size_jitter, config.size_jitter, size=3)
        l, w, h = (max(0.1, n * j) for n, j in zip(nominal, jitter))

        radius = rng.uniform(*config.range_radius)
        bearing = rng.uniform(-math.pi, math.pi)
        box_lidar = Box7(
            x=radius * math.cos(bearing),
            y=radius * math.sin(bearing),
            z=float(rng.uniform(-0.5, 0.5)),
            l=l,
            w=w,
            h=h,
            yaw=float(rng.uniform(-math.pi, math.pi)),
        )

        ego_to_global = Pose(
            (float(rng.uniform(-500, 500)), float(rng.uniform(-500, 500)), 0.0),
            quat_from_yaw(float(rng.uniform(-math.pi, math.pi))),
        )
        lidar_to_global = ego_to_global.compose(lidar_to_ego)
        box_global = transform_box(box_lidar, lidar_to_global)

        sample_id = f"synth-{seed}-{i:06d}"
        records.append(
            SceneRecord(
                sample_id=sample_id,
                ego_to_global=ego_to_global,
                lidar_to_ego=lidar_to_ego,
                cameras=cameras,
                annotations=(Annotation(category, box_global),),
            )
        )
        visual = encode_visual(box_lidar.params(), config.d_v)
        if config.noise_std > 0:
            visual = visual + rng.normal(0.0, config.noise_std, size=visual.shape)
        features.append(
            FeaturePair(sample_id, visual, category_embedding(category, config.d_t))
        )
    return records, features


def save_features(features: list[FeaturePair], path: str | Path) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "features": {
            f.sample_id: {"visual": f.visual.tolist(), "text": f.text.tolist()}
            for f in features
        },
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_features(path: str | Path) -> dict[str, FeaturePair]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"features file schema {doc.get('schema_version')!r}")
    out = {}
    for sid, payload in doc["features"].items():
        out[sid] = FeaturePair(
            sid,
            np.array(payload["visual"], dtype=np.float64),
            np.array(payload["text"], dtype=np.float64),
        )
    return out
