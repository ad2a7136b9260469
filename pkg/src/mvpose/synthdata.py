"""Synthetic multi-view motion-capture generator: an articulated 17-joint
skeleton animated by smooth sinusoidal joint rotations, a ring of calibrated
pinhole cameras, normalized 2D projections, and Gaussian-blob renderings.

Everything is a pure function of (seed, config). The on-disk layout is
manifest.json plus per-sample directories holding pose3d.bin / pose2d.bin /
images.bin (little-endian float32, row-major, each with a *.shape.json
sidecar) and cameras.json in full double precision.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    """A point to project has non-positive camera-frame depth."""


class DatasetError(ValueError):
    """Dataset directory is missing files or fails schema validation."""


SCHEMA_VERSION = 1
DEFAULT_FRAME_RATE = 50.0

# pelvis-rooted kinematic tree, parents listed before children
JOINT_NAMES = (
    "pelvis", "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
PARENTS = (-1, 0, 1, 2, 3, 2, 5, 6, 2, 8, 9, 0, 11, 12, 0, 14, 15)
# rest offsets in meters, child position in the parent frame (z up)
REST_OFFSETS = np.array([
    [0.00, 0.00, 0.00],
    [0.00, 0.00, 0.22],
    [0.00, 0.00, 0.22],
    [0.00, 0.00, 0.10],
    [0.00, 0.00, 0.16],
    [0.19, 0.00, -0.02],
    [0.27, 0.00, 0.00],
    [0.25, 0.00, 0.00],
    [-0.19, 0.00, -0.02],
    [-0.27, 0.00, 0.00],
    [-0.25, 0.00, 0.00],
    [0.10, 0.00, -0.04],
    [0.00, 0.00, -0.42],
    [0.00, 0.00, -0.40],
    [-0.10, 0.00, -0.04],
    [0.00, 0.00, -0.42],
    [0.00, 0.00, -0.40],
])
# render channel per joint: 0 torso/head, 1 left limbs, 2 right limbs
JOINT_CHANNELS = (0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 1, 1, 1, 2, 2, 2)

ACTION_NAMES = (
    "walk", "jog", "squat", "wave", "reach", "twist", "bend", "kick",
    "balance", "stretch", "turn", "sway", "step", "lean", "march",
)


@dataclass(frozen=True)
class MotionParams:
    amplitude: float = 0.45      # joint-angle amplitude scale, radians
    root_amplitude: float = 0.15  # root translation orbit, meters
    freq_lo: float = 0.3          # Hz
    freq_hi: float = 1.2


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray   # 3x3 world-to-camera
    translation: np.ndarray  # 3-vector, x_cam = R x_world + t
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        r = self.rotation
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix K [R|t] mapping homogeneous world points to pixels."""
        k = np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])
        rt = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return k @ rt

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   rotation=np.array(d["rotation"]), translation=np.array(d["translation"]),
                   width=d["width"], height=d["height"])


def project(point3d: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Pinhole projection of (..., 3) world points to (..., 2) pixels."""
    pts = np.asarray(point3d, dtype=np.float64)
    cam_pts = pts @ cam.rotation.T + cam.translation
    z = cam_pts[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError(f"point at camera-frame z={z.min():.4f} <= 0")
    u = cam.fx * cam_pts[..., 0] / z + cam.cx
    v = cam.fy * cam_pts[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def look_at_camera(position, target, fx, fy, cx, cy, width, height,
                   up=(0.0, 0.0, 1.0)) -> CameraModel:
    """Camera at `position` with optical axis through `target` (z-up world)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # rows: camera x, y, z in world
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, rotation=rot,
                       translation=-rot @ position, width=width, height=height)


def ring_rig(num_views: int = 4, radius: float = 3.2, cam_height: float = 1.4,
             target=(0.0, 0.0, 0.9), focal: float = 1100.0,
             sensor: int = 1024) -> list[CameraModel]:
    """Evenly spaced cameras on a horizontal ring, all aimed at the target."""
    cams = []
    for k in range(num_views):
        ang = 2.0 * np.pi * k / num_views
        pos = (radius * np.cos(ang), radius * np.sin(ang), cam_height)
        cams.append(look_at_camera(pos, target, fx=focal, fy=focal,
                                   cx=sensor / 2.0, cy=sensor / 2.0,
                                   width=sensor, height=sensor))
    return cams


@dataclass
class SkeletonSequence:
    joint_positions: np.ndarray  # (f, J, 3) meters
    parents: tuple[int, ...]
    frame_rate: float = DEFAULT_FRAME_RATE

    @property
    def num_frames(self) -> int:
        return self.joint_positions.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_positions.shape[1]

    def bone_lengths(self) -> np.ndarray:
        """(f, J-1) distances from each non-root joint to its parent."""
        pos = self.joint_positions
        out = []
        for j in range(1, self.num_joints):
            out.append(np.linalg.norm(pos[:, j] - pos[:, self.parents[j]], axis=-1))
        return np.stack(out, axis=1)


def _axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cc = 1.0 - c
    return np.array([
        [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
        [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
        [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
    ])


def make_sequence(seed: int, num_frames: int, num_joints: int = 17,
                  motion: MotionParams = MotionParams(),
                  frame_rate: float = DEFAULT_FRAME_RATE,
                  base_height: float = 0.95) -> SkeletonSequence:
    """Animate the kinematic tree with per-joint sinusoidal rotations.

    Deterministic per seed; bone lengths are exactly constant by forward
    kinematics. num_joints <= 17 truncates the tree (parents precede children).
    """
    if num_frames < 1:
        raise ValueError(f"need at least one frame, got {num_frames}")
    if num_joints < 2:
        raise ValueError(f"need at least two joints, got {num_joints}")
    if num_joints > len(PARENTS):
        raise ValueError(f"at most {len(PARENTS)} joints supported, got {num_joints}")
    rng = np.random.default_rng(seed)
    j = num_joints
    axes = rng.normal(size=(j, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    amps = rng.uniform(0.3, 1.0, size=j) * motion.amplitude
    freqs = rng.uniform(motion.freq_lo, motion.freq_hi, size=j)
    phases = rng.uniform(0, 2 * np.pi, size=j)
    root_freq = rng.uniform(motion.freq_lo, motion.freq_hi)
    root_phase = rng.uniform(0, 2 * np.pi)

    positions = np.zeros((num_frames, j, 3))
    for fi in range(num_frames):
        t = fi / frame_rate
        angles = amps * np.sin(2 * np.pi * freqs * t + phases)
        root_xy = motion.root_amplitude * np.array([
            np.sin(2 * np.pi * root_freq * t + root_phase),
            np.cos(2 * np.pi * root_freq * t + root_phase),
        ])
        rot = [None] * j
        pos = [None] * j
        for jj in range(j):
            local = _axis_angle_matrix(axes[jj], angles[jj])
            p = PARENTS[jj]
            if p < 0:
                rot[jj] = local
                pos[jj] = np.array([root_xy[0], root_xy[1], base_height])
            else:
                pos[jj] = pos[p] + rot[p] @ REST_OFFSETS[jj]
                rot[jj] = rot[p] @ local
        positions[fi] = np.stack(pos)
    return SkeletonSequence(joint_positions=positions, parents=PARENTS[:j],
                            frame_rate=frame_rate)


def render_image(pose2d: np.ndarray, image_size: int, blob_sigma: float = 2.0,
                 channels: tuple[int, ...] | None = None,
                 drop: np.ndarray | None = None) -> np.ndarray:
    """Sum of unit-peak Gaussian blobs, one per joint, channel-coded by joint
    group; clipped to [0, 1]. pose2d: (J, 2) normalized coordinates."""
    pose2d = np.asarray(pose2d, dtype=np.float64)
    img = np.zeros((image_size, image_size, 3), dtype=np.float64)
    if pose2d.size == 0:
        return img.astype(np.float32)
    if channels is None:
        channels = JOINT_CHANNELS[:pose2d.shape[0]]
    ys = np.arange(image_size)[:, None]
    xs = np.arange(image_size)[None, :]
    inv = 1.0 / (2.0 * blob_sigma * blob_sigma)
    for j, (u, v) in enumerate(pose2d):
        if drop is not None and drop[j]:
            continue
        px, py = u * image_size, v * image_size
        blob = np.exp(-((xs - px) ** 2 + (ys - py) ** 2) * inv)
        img[:, :, channels[j]] += blob
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class PoseSequenceSample:
    skeleton: SkeletonSequence
    cameras: list[CameraModel]
    gt_2d: np.ndarray     # (f, V, J, 2) normalized by camera sensor size
    images: np.ndarray    # (f, V, H, W, 3) float32
    action: str
    subject: str
    seed: int = 0

    @property
    def num_views(self) -> int:
        return len(self.cameras)


def project_normalized(skeleton: SkeletonSequence,
                       cameras: list[CameraModel]) -> np.ndarray:
    """(f, V, J, 2) projections normalized to [0, 1] by each sensor size."""
    f, j = skeleton.num_frames, skeleton.num_joints
    out = np.zeros((f, len(cameras), j, 2))
    for vi, cam in enumerate(cameras):
        px = project(skeleton.joint_positions, cam)  # (f, J, 2)
        out[:, vi, :, 0] = px[..., 0] / cam.width
        out[:, vi, :, 1] = px[..., 1] / cam.height
    return out


def action_motion(action: str, base: MotionParams = MotionParams()) -> MotionParams:
    """Deterministic per-action variation of the base motion style."""
    idx = ACTION_NAMES.index(action) if action in ACTION_NAMES else len(ACTION_NAMES)
    amp = base.amplitude * (0.7 + 0.05 * (idx % 7))
    freq_hi = base.freq_lo + (base.freq_hi - base.freq_lo) * (0.6 + 0.05 * (idx % 9))
    return MotionParams(amplitude=amp, root_amplitude=base.root_amplitude,
                        freq_lo=base.freq_lo, freq_hi=freq_hi)


def make_sample(seed: int, num_frames: int, num_joints: int = 17,
                cameras: list[CameraModel] | None = None, image_size: int = 64,
                blob_sigma: float = 2.0, occlusion_q: float = 0.0,
                action: str = "walk", subject: str = "s01") -> PoseSequenceSample:
    """One deterministic sequence: skeleton, projections, rendered images."""
    cams = cameras if cameras is not None else ring_rig()
    skel = make_sequence(seed, num_frames, num_joints,
                         motion=action_motion(action))
    gt2d = project_normalized(skel, cams)
    f, v, j = gt2d.shape[:3]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    drop = rng.uniform(size=(f, v, j)) < occlusion_q if occlusion_q > 0 else None
    images = np.zeros((f, v, image_size, image_size, 3), dtype=np.float32)
    for fi in range(f):
        for vi in range(v):
            d = drop[fi, vi] if drop is not None else None
            images[fi, vi] = render_image(gt2d[fi, vi], image_size, blob_sigma,
                                          drop=d)
    return PoseSequenceSample(skeleton=skel, cameras=cams, gt_2d=gt2d,
                              images=images, action=action, subject=subject,
                              seed=seed)


def make_dataset(seed: int, num_samples: int, num_frames: int,
                 num_joints: int = 17, num_views: int = 4, image_size: int = 64,
                 blob_sigma: float = 2.0, occlusion_q: float = 0.0,
                 actions: tuple[str, ...] = ACTION_NAMES,
                 num_subjects: int = 5) -> list[PoseSequenceSample]:
    """num_samples sequences cycling through actions and subject labels."""
    cams = ring_rig(num_views)
    out = []
    for i in range(num_samples):
        action = actions[i % len(actions)]
        subject = f"s{(i % num_subjects) + 1:02d}"
        sample_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        out.append(make_sample(sample_seed, num_frames, num_joints, cams,
                               image_size, blob_sigma, occlusion_q, action,
                               subject))
    return out


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------

def _write_tensor(path: str, arr: np.ndarray):
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    arr32.tofile(path)
    with open(path.replace(".bin", ".shape.json"), "w") as fh:
        json.dump({"shape": list(arr.shape), "dtype": "float32"}, fh)


def _read_tensor(path: str) -> np.ndarray:
    shape_path = path.replace(".bin", ".shape.json")
    if not os.path.exists(path):
        raise DatasetError(f"missing tensor file: {path}")
    if not os.path.exists(shape_path):
        raise DatasetError(f"missing shape sidecar: {shape_path}")
    with open(shape_path) as fh:
        meta = json.load(fh)
    if "shape" not in meta:
        raise DatasetError(f"{shape_path}: missing field 'shape'")
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(meta["shape"]))
    if data.size != expected:
        raise DatasetError(
            f"{path}: payload has {data.size} floats, shape says {expected}")
    return data.reshape(meta["shape"])


def write_dataset(samples: list[PoseSequenceSample], root: str):
    """Serialize samples under root; see module docstring for the layout."""
    if not samples:
        raise DatasetError("refusing to write an empty dataset")
    os.makedirs(root, exist_ok=True)
    first = samples[0]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "num_joints": first.skeleton.num_joints,
        "num_views": first.num_views,
        "num_frames": first.skeleton.num_frames,
        "image_size": int(first.images.shape[2]),
        "frame_rate": first.skeleton.frame_rate,
        "parents": list(first.skeleton.parents),
        "samples": [],
    }
    for i, s in enumerate(samples):
        name = f"sample_{i:04d}"
        sdir = os.path.join(root, name)
        os.makedirs(sdir, exist_ok=True)
        _write_tensor(os.path.join(sdir, "pose3d.bin"), s.skeleton.joint_positions)
        _write_tensor(os.path.join(sdir, "pose2d.bin"), s.gt_2d)
        _write_tensor(os.path.join(sdir, "images.bin"), s.images)
        with open(os.path.join(sdir, "cameras.json"), "w") as fh:
            json.dump([c.to_dict() for c in s.cameras], fh)
        manifest["samples"].append({
            "dir": name, "action": s.action, "subject": s.subject,
            "seed": int(s.seed),
        })
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def read_dataset(root: str) -> list[PoseSequenceSample]:
    """Load a dataset written by write_dataset, validating the schema."""
    man_path = os.path.join(root, "manifest.json")
    if not os.path.exists(man_path):
        raise DatasetError(f"missing manifest: {man_path}")
    with open(man_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{man_path}: invalid JSON ({e})") from None
    for key in ("schema_version", "num_joints", "num_views", "num_frames",
                "image_size", "frame_rate", "parents", "samples"):
        if key not in manifest:
            raise DatasetError(f"{man_path}: missing field '{key}'")
    j, v, f = manifest["num_joints"], manifest["num_views"], manifest["num_frames"]
    samples = []
    for entry in manifest["samples"]:
        sdir = os.path.join(root, entry["dir"])
        pose3d = _read_tensor(os.path.join(sdir, "pose3d.bin"))
        if pose3d.shape != (f, j, 3):
            raise DatasetError(
                f"{sdir}/pose3d.bin: field num_joints/num_frames mismatch: "
                f"tensor {pose3d.shape}, manifest says ({f}, {j}, 3)")
        pose2d = _read_tensor(os.path.join(sdir, "pose2d.bin"))
        if pose2d.shape != (f, v, j, 2):
            raise DatasetError(
                f"{sdir}/pose2d.bin: shape {pose2d.shape} vs manifest ({f}, {v}, {j}, 2)")
        images = _read_tensor(os.path.join(sdir, "images.bin"))
        cam_path = os.path.join(sdir, "cameras.json")
        if not os.path.exists(cam_path):
            raise DatasetError(f"missing camera file: {cam_path}")
        with open(cam_path) as fh:
            cams = [CameraModel.from_dict(d) for d in json.load(fh)]
        if len(cams) != v:
            raise DatasetError(f"{cam_path}: field num_views mismatch: "
                               f"{len(cams)} cameras, manifest says {v}")
        skel = SkeletonSequence(
            joint_positions=pose3d.astype(np.float64),
            parents=tuple(manifest["parents"]),
            frame_rate=manifest["frame_rate"])
        samples.append(PoseSequenceSample(
            skeleton=skel, cameras=cams, gt_2d=pose2d.astype(np.float64),
            images=images.astype(np.float32), action=entry["action"],
            subject=entry["subject"], seed=entry.get("seed", 0)))
    return samples
