"""Synthetic ground-truth scenes, camera rigs, and rendered datasets.

Everything needed to evaluate the pipeline end to end is manufactured here: a
4D Gaussian scene with known motion, an arc of training cameras with held-out
test cameras between them, and frames rendered at evenly spaced times, written
as PPM files next to a JSON manifest and a checkpoint of the exact scene.

Motion is encoded through the space-time covariance coupling: a Gaussian whose
joint covariance has the block form [[S + v v^T s, v s], [v^T s, s]] slices to
a center moving at exactly velocity v with spatial covariance S. Curved paths
are piecewise linear, one short-lived Gaussian per segment.

Frames are rendered with the production tile renderer (policy "none") rather
than the brute-force reference: evaluation renders through the same code path,
so a model holding the exact scene parameters reproduces every frame byte for
byte after quantization.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, fov_to_focal, look_at
from .core4d import GaussianCloud, _logit, quaternion_pair_from_rotation4, slice_mean
from .decaynet import DecayNet
from .errors import DataError, InvalidParameterError
from .io import Checkpoint, load_checkpoint, read_ppm, save_checkpoint, write_ppm
from .appearance import ShConfig
from .raster import RasterConfig, render_forward

MANIFEST_NAME = "manifest.json"
GT_SCENE_NAME = "gt_scene.ckpt"
DATASET_FORMAT = "splat4d-dataset"
DATASET_VERSION = 1

PRESET_TAGS = ("orbit", "pulse", "linear")


@dataclass(frozen=True)
class RigSpec:
    n_train_cameras: int = 4
    n_test_cameras: int = 4
    span_deg: float = 110.0
    radius: float = 3.5
    target: tuple = (0.0, 0.0, 0.0)
    elevation: float = 0.25  # camera height as a fraction of radius
    width: int = 96
    height: int = 96
    fov_deg: float = 50.0
    near: float = 0.5
    far: float = 12.0

    def __post_init__(self):
        if not 0.0 < self.span_deg <= 360.0:
            raise InvalidParameterError("span_deg must lie in (0, 360]")
        if self.n_train_cameras < 2:
            raise InvalidParameterError("need at least 2 training cameras")
        if self.n_test_cameras < 0:
            raise InvalidParameterError("n_test_cameras must be >= 0")
        if self.radius <= 0.0:
            raise InvalidParameterError("radius must be positive")
        if not 0.0 < self.fov_deg < 180.0:
            raise InvalidParameterError("fov_deg must lie in (0, 180)")


@dataclass(frozen=True)
class ScenePreset:
    tag: str = "orbit"
    n_objects: int = 3
    gaussians_per_object: int = 5
    segments: int = 8
    frames: int = 30
    n_static: int = 24
    orbit_radius: float = 0.8
    cluster_radius: float = 0.18
    arc_deg: float = 120.0  # orbital sweep over the whole sequence

    def __post_init__(self):
        if self.tag not in PRESET_TAGS:
            raise InvalidParameterError(f"preset tag must be one of {PRESET_TAGS}")
        if self.n_objects <= 0 or self.gaussians_per_object <= 0:
            raise InvalidParameterError("object counts must be positive")
        if self.segments <= 0:
            raise InvalidParameterError("segments must be positive")
        if self.frames <= 0:
            raise InvalidParameterError("frames must be positive")
        if self.n_static < 0:
            raise InvalidParameterError("n_static must be >= 0")


def rig_angles(spec: RigSpec):
    """Arc angles in degrees for train and test cameras.

    Train cameras sit at even spacing over the span; test cameras sit at the
    gap midpoints, continuing past the last camera onto a span extended by one
    gap when more midpoints are needed than gaps exist.
    """
    n = spec.n_train_cameras
    gap = spec.span_deg / (n - 1)
    train = [-0.5 * spec.span_deg + k * gap for k in range(n)]
    test = [-0.5 * spec.span_deg + (j + 0.5) * gap for j in range(spec.n_test_cameras)]
    return train, test


def _arc_camera(spec: RigSpec, angle_deg: float, cam_id: int) -> Camera:
    target = np.asarray(spec.target, dtype=np.float64)
    a = np.radians(angle_deg)
    position = target + spec.radius * np.array(
        [np.cos(a), np.sin(a), spec.elevation]
    ) / np.sqrt(1.0 + spec.elevation**2)
    f = fov_to_focal(spec.fov_deg, spec.width)
    return look_at(
        position, target, up=(0.0, 0.0, 1.0),
        fx=f, fy=f, cx=spec.width / 2.0, cy=spec.height / 2.0,
        width=spec.width, height=spec.height,
        near=spec.near, far=spec.far, cam_id=cam_id,
    )


def make_rig(spec: RigSpec):
    """Cameras on the arc. Returns (train_cameras, test_cameras)."""
    train_angles, test_angles = rig_angles(spec)
    train = [_arc_camera(spec, a, cam_id=i) for i, a in enumerate(train_angles)]
    test = [
        _arc_camera(spec, a, cam_id=len(train) + j)
        for j, a in enumerate(test_angles)
    ]
    return train, test


def coupled_gaussian_params(spatial_cov: np.ndarray, velocity: np.ndarray,
                            sigma_t: float):
    """Quaternion pair and log scales whose 4D covariance slices to
    `spatial_cov` while the center moves at exactly `velocity`.

    Builds the joint covariance [[S + v v^T s, v s], [v^T s, s]] with
    s = sigma_t^2 and factors it by eigendecomposition.
    """
    spatial_cov = np.asarray(spatial_cov, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    s = float(sigma_t) ** 2
    cov4 = np.empty((4, 4))
    cov4[:3, :3] = spatial_cov + np.outer(velocity, velocity) * s
    cov4[:3, 3] = velocity * s
    cov4[3, :3] = velocity * s
    cov4[3, 3] = s
    vals, vecs = np.linalg.eigh(cov4)
    if np.any(vals <= 0.0):
        raise InvalidParameterError("joint covariance is not positive definite")
    if np.linalg.det(vecs) < 0.0:
        vecs = vecs.copy()
        vecs[:, 0] = -vecs[:, 0]
    rot_left, rot_right = quaternion_pair_from_rotation4(vecs, atol=1e-7)
    log_scales = 0.5 * np.log(vals)
    return rot_left, rot_right, log_scales


def _color_coeffs(rng, sh: ShConfig, n: int, pulse_amp: float = 0.0):
    """Random base colors; optional cosine pulse on the first Fourier band."""
    coeffs = np.zeros((n,) + sh.coeff_shape())
    coeffs[:, :, 0, 0] = rng.uniform(-0.45, 0.45, size=(n, 3))
    if sh.max_degree >= 1:
        coeffs[:, :, 0, 1:4] = rng.uniform(-0.08, 0.08, size=(n, 3, 3))
    if pulse_amp > 0.0 and sh.n_fourier >= 1:
        coeffs[:, :, 1, 0] = rng.uniform(-pulse_amp, pulse_amp, size=(n, 3))
    return coeffs


@dataclass
class _SceneParts:
    positions: list = field(default_factory=list)
    temporal_centers: list = field(default_factory=list)
    rot_left: list = field(default_factory=list)
    rot_right: list = field(default_factory=list)
    log_scales: list = field(default_factory=list)
    opacity_logits: list = field(default_factory=list)
    sh_coeffs: list = field(default_factory=list)

    def add(self, position, mu_t, rl, rr, ls, logit, sh):
        self.positions.append(np.asarray(position, dtype=np.float64))
        self.temporal_centers.append(float(mu_t))
        self.rot_left.append(rl)
        self.rot_right.append(rr)
        self.log_scales.append(ls)
        self.opacity_logits.append(float(logit))
        self.sh_coeffs.append(sh)

    def cloud(self, sh_config: ShConfig) -> GaussianCloud:
        return GaussianCloud(
            positions=np.array(self.positions),
            temporal_centers=np.array(self.temporal_centers),
            rot_left=np.array(self.rot_left),
            rot_right=np.array(self.rot_right),
            log_scales=np.array(self.log_scales),
            opacity_logits=np.array(self.opacity_logits),
            sh_coeffs=np.array(self.sh_coeffs),
            sh_config=sh_config,
        )


STATIC_SIGMA_T = 10.0  # wide enough that the weight stays ~1 over t in [0, 1]


def _add_static(parts: _SceneParts, rng, sh: ShConfig, n: int, box: float,
                scale_range=(0.05, 0.14), opacity=0.92, pulse_amp=0.0):
    coeffs = _color_coeffs(rng, sh, n, pulse_amp=pulse_amp)
    centers = rng.uniform(-box, box, size=(n, 3))
    for k in range(n):
        sizes = rng.uniform(*scale_range, size=3)
        rl, rr, ls = coupled_gaussian_params(
            np.diag(sizes**2), np.zeros(3), STATIC_SIGMA_T
        )
        parts.add(centers[k], 0.5, rl, rr, ls, _logit(opacity), coeffs[k])


def make_scene(preset: ScenePreset, rng: np.random.Generator):
    """Ground-truth cloud for a preset. Returns (cloud, info dict)."""
    sh = ShConfig(max_degree=1, n_fourier=1, period=1.0)
    parts = _SceneParts()
    info = {"tag": preset.tag}

    if preset.tag == "linear":
        for _ in range(preset.n_objects):
            center = rng.uniform(-0.55, 0.55, size=3)
            velocity = rng.uniform(-0.6, 0.6, size=3)
            coeffs = _color_coeffs(rng, sh, preset.gaussians_per_object)
            for k in range(preset.gaussians_per_object):
                offset = rng.uniform(-preset.cluster_radius,
                                     preset.cluster_radius, size=3)
                sizes = rng.uniform(0.05, 0.12, size=3)
                rl, rr, ls = coupled_gaussian_params(
                    np.diag(sizes**2), velocity, STATIC_SIGMA_T
                )
                # The center position is pinned at mu_t = 0.5 so the motion
                # stays centered over the unit time interval.
                parts.add(center + offset, 0.5, rl, rr, ls,
                          _logit(0.92), coeffs[k])
        _add_static(parts, rng, sh, preset.n_static, box=1.0)

    elif preset.tag == "pulse":
        for _ in range(preset.n_objects):
            center = rng.uniform(-0.7, 0.7, size=3)
            coeffs = _color_coeffs(rng, sh, preset.gaussians_per_object,
                                   pulse_amp=0.35)
            for k in range(preset.gaussians_per_object):
                offset = rng.uniform(-preset.cluster_radius,
                                     preset.cluster_radius, size=3)
                sizes = rng.uniform(0.05, 0.12, size=3)
                rl, rr, ls = coupled_gaussian_params(
                    np.diag(sizes**2), np.zeros(3), STATIC_SIGMA_T
                )
                parts.add(center + offset, 0.5, rl, rr, ls,
                          _logit(0.92), coeffs[k])
        _add_static(parts, rng, sh, preset.n_static, box=1.0)

    elif preset.tag == "orbit":
        arc = np.radians(preset.arc_deg)
        seg_dt = 1.0 / preset.segments
        sigma_t = 0.5 * seg_dt
        omega_ang = arc  # radians per unit time
        orbit_info = []
        for obj in range(preset.n_objects):
            r = preset.orbit_radius * rng.uniform(0.75, 1.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            z0 = rng.uniform(-0.25, 0.25)
            direction = 1.0 if rng.uniform() < 0.5 else -1.0
            orbit_info.append({"radius": r, "phase": phase, "z": z0,
                               "direction": direction})
            offsets = rng.uniform(-preset.cluster_radius, preset.cluster_radius,
                                  size=(preset.gaussians_per_object, 3))
            coeffs = _color_coeffs(rng, sh, preset.gaussians_per_object)
            sizes = rng.uniform(0.05, 0.12, size=(preset.gaussians_per_object, 3))
            for s in range(preset.segments):
                mu_t = (s + 0.5) * seg_dt
                ang = phase + direction * omega_ang * mu_t
                ring = np.array([r * np.cos(ang), r * np.sin(ang), z0])
                tangent = direction * omega_ang * r * np.array(
                    [-np.sin(ang), np.cos(ang), 0.0]
                )
                for k in range(preset.gaussians_per_object):
                    rl, rr, ls = coupled_gaussian_params(
                        np.diag(sizes[k] ** 2), tangent, sigma_t
                    )
                    parts.add(ring + offsets[k], mu_t, rl, rr, ls,
                              _logit(0.92), coeffs[k])
        info["orbits"] = orbit_info
        info["sigma_t"] = sigma_t
        _add_static(parts, rng, sh, preset.n_static, box=1.0)

    cloud = parts.cloud(sh)
    return cloud, info


def scene_aabb(cloud: GaussianCloud, times, pad_frac: float = 0.15) -> np.ndarray:
    """Bounding box of sliced centers over the given times, padded."""
    cov4 = cloud.cov4()
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for t in times:
        means = slice_mean(cov4, cloud.positions, cloud.temporal_centers, float(t))
        lo = np.minimum(lo, means.min(axis=0))
        hi = np.maximum(hi, means.max(axis=0))
    pad = pad_frac * np.maximum(hi - lo, 1e-6)
    return np.stack([lo - pad, hi + pad])


@dataclass(frozen=True)
class FrameRecord:
    path: str
    camera_id: int
    time: float
    split: str


class Dataset:
    """In-memory view of a dataset directory; frames load lazily with a cache."""

    def __init__(self, root, manifest: dict, gt_scene: Checkpoint | None):
        self.root = Path(root)
        self.manifest = manifest
        self.cameras = {}
        self.camera_splits = {}
        for entry in manifest["cameras"]:
            cam = Camera.from_json(entry)
            self.cameras[cam.cam_id] = cam
            self.camera_splits[cam.cam_id] = entry["split"]
        self.frames = [
            FrameRecord(path=f["path"], camera_id=int(f["camera_id"]),
                        time=float(f["time"]), split=f["split"])
            for f in manifest["frames"]
        ]
        self.aabb = np.asarray(manifest["aabb"], dtype=np.float64)
        self.background = np.asarray(manifest["background"], dtype=np.float64)
        self.time_range = tuple(manifest["time_range"])
        self.seed = manifest.get("seed")
        self.gt_scene = gt_scene
        self._cache = {}

    def split_frames(self, split: str):
        return [f for f in self.frames if f.split == split]

    def load_frame(self, rec: FrameRecord) -> np.ndarray:
        img = self._cache.get(rec.path)
        if img is None:
            img = read_ppm(self.root / rec.path)
            self._cache[rec.path] = img
        return img


def frame_times(n_frames: int):
    if n_frames == 1:
        return [0.0]
    return [f / (n_frames - 1) for f in range(n_frames)]


def build_dataset(preset: ScenePreset, rig: RigSpec, out_dir, seed: int = 0,
                  background=(0.0, 0.0, 0.0),
                  raster: RasterConfig | None = None) -> Dataset:
    """Generate a scene, render all (camera, time) frames, and write the
    directory: frames/, manifest.json, gt_scene.ckpt."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cloud, info = make_scene(preset, rng)
    # Checkpoints hold 32-bit floats; snapping first makes the stored scene
    # and the rendered frames agree exactly.
    cloud.round_to_float32()
    train_cams, test_cams = make_rig(rig)
    train_angles, test_angles = rig_angles(rig)
    times = frame_times(preset.frames)
    aabb = scene_aabb(cloud, times)
    if raster is None:
        raster = RasterConfig()
    background = np.asarray(background, dtype=np.float64)

    cameras_json = []
    for cam, ang in zip(train_cams, train_angles):
        cameras_json.append({**cam.to_json(), "split": "train", "angle_deg": ang})
    for cam, ang in zip(test_cams, test_angles):
        cameras_json.append({**cam.to_json(), "split": "test", "angle_deg": ang})

    frames_json = []
    for cam, split in [(c, "train") for c in train_cams] + [
        (c, "test") for c in test_cams
    ]:
        for fi, t in enumerate(times):
            rel = f"frames/cam{cam.cam_id:02d}_f{fi:03d}.ppm"
            out_img, _ = render_forward(cloud, cam, t, background, config=raster)
            write_ppm(out / rel, out_img.image)
            frames_json.append({
                "path": rel,
                "camera_id": cam.cam_id,
                "time": t,
                "split": split,
            })

    gt_ckpt = Checkpoint.from_state(
        cloud, DecayNet(np.random.default_rng(seed)), aabb,
        config_echo={
            "source": "scenegen",
            "decay_variant": "none",
            "iterations_trained": 0,
            "preset": _preset_json(preset),
            "seed": seed,
        },
        rng_state=json.loads(json.dumps(rng.bit_generator.state)),
    )
    save_checkpoint(gt_ckpt, out / GT_SCENE_NAME)

    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": seed,
        "preset": _preset_json(preset),
        "rig": _rig_json(rig),
        "scene_info": _jsonable(info),
        "background": background.tolist(),
        "aabb": aabb.tolist(),
        "time_range": [float(min(times)), float(max(times))],
        "cameras": cameras_json,
        "frames": frames_json,
        "gt_scene": GT_SCENE_NAME,
    }
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return Dataset(out, manifest, gt_ckpt)


def _preset_json(preset: ScenePreset) -> dict:
    return dataclasses.asdict(preset)


def _rig_json(rig: RigSpec) -> dict:
    d = dataclasses.asdict(rig)
    d["target"] = list(d["target"])
    return d


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=float))


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"unreadable manifest {manifest_path}: {e}") from e
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{manifest_path} is not a {DATASET_FORMAT} manifest")
    if manifest.get("version") != DATASET_VERSION:
        raise DataError(
            f"unsupported dataset version {manifest.get('version')}"
        )
    gt_name = manifest.get("gt_scene")
    gt_scene = None
    if gt_name and (root / gt_name).exists():
        gt_scene = load_checkpoint(root / gt_name)
    return Dataset(root, manifest, gt_scene)
