"""Skeletons, pose sequences, synthetic motion, camera projection, noise and windowing."""

import json
import math
from dataclasses import dataclass, field

import numpy as np


class PoseFormatError(ValueError):
    """Malformed pose document; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class Skeleton:
    names: list
    parents: list
    pairs: list
    bone_lengths_mm: list
    rest_dirs: object = None
    joint_ranges: object = None
    joint_offsets: object = None

    @property
    def num_joints(self):
        return len(self.names)

    def validate(self):
        J = self.num_joints
        if len(self.parents) != J or len(self.bone_lengths_mm) != J:
            raise PoseFormatError("skeleton", "names, parents and bone_lengths_mm must have equal length")
        roots = [j for j, p in enumerate(self.parents) if p == j]
        if roots != [0]:
            raise PoseFormatError("skeleton.parents", "joint 0 must be the single root (its own parent)")
        for j in range(1, J):
            if not 0 <= self.parents[j] < j:
                raise PoseFormatError("skeleton.parents", f"parent of joint {j} must precede it")
            if not self.bone_lengths_mm[j] > 0:
                raise PoseFormatError("skeleton.bone_lengths_mm", f"bone {j} must have positive length")
        seen = set()
        for pair in self.pairs:
            if len(pair) != 2:
                raise PoseFormatError("skeleton.pairs", f"bad pair {pair}")
            l, r = pair
            if l == r or l in seen or r in seen or not (0 <= l < J and 0 <= r < J):
                raise PoseFormatError("skeleton.pairs", f"pair table is not an involution: {self.pairs}")
            seen.update((l, r))
        return self

    def to_json(self):
        return {
            "names": list(self.names),
            "parents": [int(p) for p in self.parents],
            "pairs": [[int(l), int(r)] for l, r in self.pairs],
            "bone_lengths_mm": [float(b) for b in self.bone_lengths_mm],
        }

    @classmethod
    def from_json(cls, d):
        for k in ("names", "parents", "pairs", "bone_lengths_mm"):
            if k not in d:
                raise PoseFormatError(f"skeleton.{k}", "missing field")
        sk = cls(list(d["names"]), [int(p) for p in d["parents"]], [tuple(p) for p in d["pairs"]],
                 [float(b) for b in d["bone_lengths_mm"]])
        return sk.validate()

    def same_as(self, other):
        return self.to_json() == other.to_json()


# world frame: x right, y forward, z up. Each row: name, parent, bone length (mm),
# rest direction of the bone, per-axis rotation range (rad) and rest offset (rad)
# of the joint's local rotation. Hinges (shins, forearms) bend one way only.
_H36M = [
    ("hip", 0, 0.0, (0, 0, 0), (0.10, 0.10, 0.0), (0, 0, 0)),
    ("r_hip", 0, 130.0, (-1, 0, 0), (0.0, 0.0, 0.0), (0, 0, 0)),
    ("r_knee", 1, 450.0, (0, 0, -1), (0.6, 0.2, 0.1), (0.1, 0, 0)),
    ("r_ankle", 2, 440.0, (0, 0, -1), (0.5, 0.0, 0.0), (-0.5, 0, 0)),
    ("l_hip", 0, 130.0, (1, 0, 0), (0.0, 0.0, 0.0), (0, 0, 0)),
    ("l_knee", 4, 450.0, (0, 0, -1), (0.6, 0.2, 0.1), (0.1, 0, 0)),
    ("l_ankle", 5, 440.0, (0, 0, -1), (0.5, 0.0, 0.0), (-0.5, 0, 0)),
    ("spine", 0, 230.0, (0, 0, 1), (0.2, 0.15, 0.2), (0.05, 0, 0)),
    ("thorax", 7, 250.0, (0, 0, 1), (0.15, 0.1, 0.15), (0, 0, 0)),
    ("neck", 8, 110.0, (0, 0.2, 1), (0.2, 0.1, 0.2), (0, 0, 0)),
    ("head", 9, 115.0, (0, 0, 1), (0.2, 0.1, 0.3), (0, 0, 0)),
    ("l_shoulder", 8, 150.0, (1, 0, 0), (0.1, 0.0, 0.1), (0, 0, 0)),
    ("l_elbow", 11, 280.0, (0, 0, -1), (0.9, 0.5, 0.3), (0.2, -0.3, 0)),
    ("l_wrist", 12, 250.0, (0, 0, -1), (0.6, 0.0, 0.0), (0.7, 0, 0)),
    ("r_shoulder", 8, 150.0, (-1, 0, 0), (0.1, 0.0, 0.1), (0, 0, 0)),
    ("r_elbow", 14, 280.0, (0, 0, -1), (0.9, 0.5, 0.3), (0.2, 0.3, 0)),
    ("r_wrist", 15, 250.0, (0, 0, -1), (0.6, 0.0, 0.0), (0.7, 0, 0)),
]

_TOY5 = [
    ("pelvis", 0, 0.0, (0, 0, 0), (0.1, 0.1, 0.0), (0, 0, 0)),
    ("l_hip", 0, 120.0, (1, 0, -0.3), (0.0, 0.0, 0.0), (0, 0, 0)),
    ("r_hip", 0, 120.0, (-1, 0, -0.3), (0.0, 0.0, 0.0), (0, 0, 0)),
    ("spine", 0, 400.0, (0, 0, 1), (0.4, 0.3, 0.3), (0.1, 0, 0)),
    ("head", 3, 200.0, (0, 0.1, 1), (0.4, 0.2, 0.4), (0, 0, 0)),
]


def _build(table, pairs):
    dirs = np.array([row[3] for row in table], dtype=np.float64)
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.divide(dirs, norms, out=np.zeros_like(dirs), where=norms > 0)
    lengths = [row[2] if row[2] > 0 else 1.0 for row in table]  # root entry is a placeholder
    sk = Skeleton([row[0] for row in table], [row[1] for row in table], pairs, lengths, dirs)
    sk.joint_ranges = np.array([row[4] for row in table], dtype=np.float64)
    sk.joint_offsets = np.array([row[5] for row in table], dtype=np.float64)
    return sk.validate()


def h36m_skeleton():
    """17-joint Human3.6M-style skeleton; pairs are (left, right)."""
    return _build(_H36M, [(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)])


def toy_skeleton():
    return _build(_TOY5, [(1, 2)])


SKELETONS = {"h36m17": h36m_skeleton, "toy5": toy_skeleton}


def get_skeleton(name):
    try:
        return SKELETONS[name]()
    except KeyError:
        raise ValueError(f"unknown skeleton {name!r}; choose from {sorted(SKELETONS)}") from None


@dataclass
class PoseSequence:
    """Time-major joint coordinates [F, J, D] (D = 2 or 3) with skeleton metadata."""

    frames: np.ndarray
    skeleton: Skeleton
    fps: float = 50.0
    provenance: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] not in (2, 3) or self.frames.shape[0] < 1:
            raise PoseFormatError("frames", f"expected [F>=1, J, 2|3], got {self.frames.shape}")
        if self.frames.shape[1] != self.skeleton.num_joints:
            raise PoseFormatError("frames", f"{self.frames.shape[1]} joints but skeleton has {self.skeleton.num_joints}")
        if not np.isfinite(self.frames).all():
            raise PoseFormatError("frames", "non-finite coordinate")

    @property
    def dims(self):
        return self.frames.shape[2]

    @property
    def num_frames(self):
        return self.frames.shape[0]


# --------------------------------------------------------------------------
# synthetic motion
# --------------------------------------------------------------------------

@dataclass
class MotionParams:
    amplitude: float = 1.0
    components: int = 3
    min_freq_hz: float = 0.2
    max_freq_hz: float = 1.2
    joint_angle_rad: float = 1.0
    root_yaw_rad: float = 1.2
    turn_rate_hz: float = 0.05
    root_sway_mm: float = 250.0


def _rodrigues(v):
    """Rotation matrices from axis-angle vectors [..., 3]."""
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    safe = np.where(theta > 0, theta, 1.0)
    k = v / safe[..., 0]
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def _sinusoids(rng, t, shape, amp, mp):
    """Sum of ``mp.components`` random low-frequency sinusoids per channel, times ``amp``."""
    out = np.zeros((len(t),) + shape)
    for _ in range(mp.components):
        f = rng.uniform(mp.min_freq_hz, mp.max_freq_hz, size=shape)
        ph = rng.uniform(0, 2 * math.pi, size=shape)
        a = rng.uniform(0.3, 1.0, size=shape) / mp.components
        out += a * np.sin(2 * math.pi * f * t.reshape((-1,) + (1,) * len(shape)) + ph)
    return out * amp


def synth_generate(skeleton, frames, seed, motion=None, fps=50.0):
    """World-frame 3D motion (mm) by forward kinematics of sinusoid-driven joint rotations.

    Bone lengths are preserved exactly in every frame; the root translates and
    turns about the vertical axis.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    mp = motion or MotionParams()
    rng = np.random.default_rng(seed)
    J = skeleton.num_joints
    t = np.arange(frames) / fps
    ranges = skeleton.joint_ranges if skeleton.joint_ranges is not None else np.full((J, 3), 0.5)
    offsets = skeleton.joint_offsets if skeleton.joint_offsets is not None else np.zeros((J, 3))
    local = _sinusoids(rng, t, (J, 3), mp.amplitude * mp.joint_angle_rad, mp) * ranges + offsets
    # slow steady turn on top of the sway so every heading shows up
    heading = rng.uniform(0, 2 * math.pi) + rng.choice([-1.0, 1.0]) * 2 * math.pi * mp.turn_rate_hz * t
    yaw = heading + _sinusoids(rng, t, (), mp.amplitude * mp.root_yaw_rad, mp)
    sway = _sinusoids(rng, t, (2,), mp.amplitude * mp.root_sway_mm, mp)
    local_rot = _rodrigues(local)
    root_rot = _rodrigues(np.stack([np.zeros_like(yaw), np.zeros_like(yaw), yaw], axis=-1))
    glob = np.empty((frames, J, 3, 3))
    pos = np.empty((frames, J, 3))
    glob[:, 0] = root_rot @ local_rot[:, 0]
    pos[:, 0, :2] = sway
    pos[:, 0, 2] = 1000.0
    lengths = np.asarray(skeleton.bone_lengths_mm)
    for j in range(1, J):
        p = skeleton.parents[j]
        glob[:, j] = glob[:, p] @ local_rot[:, j]
        offset = skeleton.rest_dirs[j] * lengths[j]
        pos[:, j] = pos[:, p] + glob[:, j] @ offset
    return PoseSequence(pos, skeleton, fps, "synthetic", {"frame": "world_mm"})


def bone_lengths(frames, skeleton):
    frames = np.asarray(frames)
    par = np.asarray(skeleton.parents)
    return np.linalg.norm(frames[:, 1:] - frames[:, par[1:]], axis=-1)


# --------------------------------------------------------------------------
# camera
# --------------------------------------------------------------------------

@dataclass
class CameraModel:
    fx: float = 1145.0
    fy: float = 1145.0
    cx: float = 500.0
    cy: float = 500.0
    rotation: np.ndarray = None
    translation: np.ndarray = None
    width: int = 1000
    height: int = 1000

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.rotation is None:
            self.rotation = np.eye(3)
        if self.translation is None:
            self.translation = np.zeros(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    def to_camera(self, points):
        return points @ self.rotation.T + self.translation

    def to_json(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def default_camera(distance_mm=4500.0, height_mm=1000.0, yaw_rad=0.0):
    """Camera at ``distance_mm`` from the origin looking horizontally at it (x right, y down, z forward)."""
    base = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
    c, s = math.cos(yaw_rad), math.sin(yaw_rad)
    yaw = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    rot = base @ yaw.T
    centre = yaw @ np.array([0.0, -distance_mm, height_mm])
    return CameraModel(rotation=rot, translation=-rot @ centre)


def project(seq3d, cam):
    """Pinhole projection of a world-frame sequence to pixel coordinates."""
    pc = cam.to_camera(seq3d.frames)
    z = pc[..., 2]
    if np.any(z <= 0):
        raise ValueError("a joint lies at or behind the camera plane")
    uv = np.stack([cam.fx * pc[..., 0] / z + cam.cx, cam.fy * pc[..., 1] / z + cam.cy], axis=-1)
    meta = {"camera": cam.to_json(), "units": "pixels"}
    return PoseSequence(uv, seq3d.skeleton, seq3d.fps, seq3d.provenance, meta)


def to_camera_sequence(seq3d, cam):
    meta = dict(seq3d.meta, frame="camera_mm")
    return PoseSequence(cam.to_camera(seq3d.frames), seq3d.skeleton, seq3d.fps, seq3d.provenance, meta)


def back_project(uv, depth, cam):
    """Camera-frame points from pixels and their true depths."""
    x = (uv[..., 0] - cam.cx) / cam.fx * depth
    y = (uv[..., 1] - cam.cy) / cam.fy * depth
    return np.stack([x, y, depth], axis=-1)


def add_noise(seq2d, sigma_px, seed):
    """I.i.d. zero-mean Gaussian noise of std ``sigma_px`` on every coordinate."""
    if sigma_px < 0:
        raise ValueError("sigma must be >= 0")
    if sigma_px == 0:
        return PoseSequence(seq2d.frames.copy(), seq2d.skeleton, seq2d.fps, seq2d.provenance, dict(seq2d.meta))
    rng = np.random.default_rng(seed)
    noisy = seq2d.frames + rng.normal(0.0, sigma_px, size=seq2d.frames.shape)
    meta = dict(seq2d.meta)
    meta["noise_sigma_px"] = float(np.hypot(meta.get("noise_sigma_px", 0.0), sigma_px))
    return PoseSequence(noisy, seq2d.skeleton, seq2d.fps, seq2d.provenance, meta)


# --------------------------------------------------------------------------
# model-side normalization
# --------------------------------------------------------------------------

def normalize_screen(uv, width, height):
    """Map pixels to [-1, 1] along x keeping the aspect ratio: ``uv / w * 2 - [1, h / w]``."""
    uv = np.asarray(uv, dtype=np.float64)
    return uv / width * 2.0 - np.array([1.0, height / width])


def model_inputs(seq2d):
    """Normalized 2D inputs; pixel sequences need camera width/height in their metadata."""
    if seq2d.meta.get("units") == "normalized":
        return seq2d.frames.copy()
    cam = seq2d.meta.get("camera")
    if cam is None:
        raise PoseFormatError("meta.camera", "pixel sequence lacks image size for normalization")
    return normalize_screen(seq2d.frames, cam["width"], cam["height"])


def model_targets(seq3d_cam, root=0):
    """Root-relative camera-frame targets in metres."""
    f = seq3d_cam.frames
    return (f - f[:, root:root + 1]) / 1000.0


# --------------------------------------------------------------------------
# windows
# --------------------------------------------------------------------------

def window_indices(num_frames, N, stride=1):
    if N % 2 == 0 or N < 1:
        raise ValueError(f"window length must be odd, got {N}")
    half = N // 2
    for k in range(0, num_frames, stride):
        yield np.clip(np.arange(k - half, k + half + 1), 0, num_frames - 1)


def windows(x2d, y3d, N, stride=1):
    """Yield ``(x [N, J, 2], y [N, J, 3])`` centred on every ``stride``-th frame, edge-replicated."""
    x2d = np.asarray(x2d)
    y3d = None if y3d is None else np.asarray(y3d)
    for idx in window_indices(len(x2d), N, stride):
        yield x2d[idx], (None if y3d is None else y3d[idx])


def window_arrays(x2d, y3d, N, stride=1):
    idx = np.stack(list(window_indices(len(x2d), N, stride)))
    return np.asarray(x2d)[idx], (None if y3d is None else np.asarray(y3d)[idx])


# --------------------------------------------------------------------------
# pose JSON
# --------------------------------------------------------------------------

def _reject_constant(c):
    raise PoseFormatError("frames", f"non-finite value {c}")


def pose_to_json(seq):
    doc = {
        "version": 1,
        "fps": float(seq.fps),
        "skeleton": seq.skeleton.to_json(),
        "dims": int(seq.dims),
        "frames": seq.frames.tolist(),
        "provenance": seq.provenance,
    }
    if seq.meta:
        doc["meta"] = seq.meta
    return doc


def save_pose_json(seq, path):
    text = json.dumps(pose_to_json(seq), allow_nan=False, separators=(",", ":"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def pose_from_json(doc):
    if not isinstance(doc, dict):
        raise PoseFormatError("document", "top level must be an object")
    for k in ("version", "fps", "skeleton", "dims", "frames", "provenance"):
        if k not in doc:
            raise PoseFormatError(k, "missing field")
    if doc["version"] != 1:
        raise PoseFormatError("version", f"unsupported version {doc['version']}")
    sk = Skeleton.from_json(doc["skeleton"])
    try:
        frames = np.array(doc["frames"], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise PoseFormatError("frames", f"not a rectangular numeric array ({e})") from None
    if frames.ndim != 3:
        raise PoseFormatError("frames", f"expected [F][J][dims], got shape {frames.shape}")
    if frames.shape[2] != doc["dims"]:
        raise PoseFormatError("dims", f"declared {doc['dims']} but coordinates have {frames.shape[2]}")
    if frames.shape[1] != sk.num_joints:
        raise PoseFormatError("frames", f"{frames.shape[1]} joints but skeleton has {sk.num_joints}")
    default_dirs = {"h36m17": h36m_skeleton, "toy5": toy_skeleton}
    for make in default_dirs.values():
        ref = make()
        if ref.same_as(sk):
            sk.rest_dirs, sk.joint_ranges, sk.joint_offsets = ref.rest_dirs, ref.joint_ranges, ref.joint_offsets
    return PoseSequence(frames, sk, float(doc["fps"]), str(doc["provenance"]), dict(doc.get("meta", {})))


def load_pose_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.loads(fh.read(), parse_constant=_reject_constant)
        except json.JSONDecodeError as e:
            raise PoseFormatError("document", f"invalid JSON ({e})") from None
    return pose_from_json(doc)
