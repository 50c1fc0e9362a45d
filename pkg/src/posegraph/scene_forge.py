"""Synthetic multi-camera skeleton data and detection file I/O.

Bodies are articulated stick figures with bilaterally symmetric limbs. A
track follows one person walking inside the rig; a scene frame places several
people at once. Detections are the projected joints, with pixel noise,
random keypoint drops, whole-view occlusion and image-bound clipping.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .geometry import Rig, look_at, project_many


class InvalidConfig(ValueError):
    pass


class SchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str = ""):
        self.line = line
        self.path = path
        where = f"line {line}" if line is not None else "input"
        if path:
            where += f", {path}"
        super().__init__(f"{where}: {message}")


# ---------------------------------------------------------------- data types


class SkeletonDetection:
    """One person's 2D keypoints in one camera.

    ``keypoints`` is an (N_k, 4) array of ``[visible, u, v, confidence]``.
    """

    __slots__ = ("camera_id", "keypoints", "person_id")

    def __init__(self, camera_id: str, keypoints, person_id=None):
        kps = np.array(keypoints, dtype=np.float64)
        if kps.ndim != 2 or kps.shape[1] != 4:
            raise ValueError(f"keypoints must be (N_k, 4), got {kps.shape}")
        self.camera_id = camera_id
        self.keypoints = kps
        self.person_id = person_id

    @property
    def visible(self) -> np.ndarray:
        return self.keypoints[:, 0] > 0

    @property
    def pixels(self) -> np.ndarray:
        return self.keypoints[:, 1:3]

    @property
    def confidence(self) -> np.ndarray:
        return self.keypoints[:, 3]

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[0]

    def is_empty(self) -> bool:
        return not self.visible.any()

    def check(self) -> None:
        vis = self.keypoints[:, 0]
        if not np.all(np.isfinite(self.keypoints)):
            raise ValueError("keypoints must be finite")
        if not np.all((vis == 0) | (vis == 1)):
            raise ValueError("visibility flags must be 0 or 1")
        hidden = vis == 0
        if np.any(self.keypoints[hidden, 1:] != 0):
            raise ValueError("invisible keypoints must carry u = v = confidence = 0")
        conf = self.keypoints[~hidden, 3]
        if np.any((conf <= 0) | (conf > 1)):
            raise ValueError("visible keypoint confidence must lie in (0, 1]")

    def masked(self, keep: np.ndarray) -> "SkeletonDetection":
        kps = self.keypoints.copy()
        kps[~np.asarray(keep, dtype=bool)] = 0.0
        return SkeletonDetection(self.camera_id, kps, self.person_id)

    def __eq__(self, other):
        if not isinstance(other, SkeletonDetection):
            return NotImplemented
        return (
            self.camera_id == other.camera_id
            and self.person_id == other.person_id
            and np.array_equal(self.keypoints, other.keypoints)
        )

    __hash__ = None

    def __repr__(self):
        return f"SkeletonDetection({self.camera_id!r}, visible={int(self.visible.sum())}/{self.n_keypoints}, person_id={self.person_id!r})"


@dataclass(eq=False)
class FrameSample:
    """All detections of one instant, keyed by camera id in file order."""

    frame_id: object
    views: dict[str, list[SkeletonDetection]] = field(default_factory=dict)
    gt: list[tuple[object, np.ndarray]] | None = None

    def detections(self) -> Iterator[tuple[str, int, SkeletonDetection]]:
        for cam, dets in self.views.items():
            for i, det in enumerate(dets):
                yield cam, i, det

    @property
    def n_detections(self) -> int:
        return sum(len(d) for d in self.views.values())

    def __eq__(self, other):
        if not isinstance(other, FrameSample):
            return NotImplemented
        if self.frame_id != other.frame_id or list(self.views) != list(other.views):
            return False
        if any(self.views[c] != other.views[c] for c in self.views):
            return False
        if (self.gt is None) != (other.gt is None):
            return False
        if self.gt is not None:
            if len(self.gt) != len(other.gt):
                return False
            for (pa, ja), (pb, jb) in zip(self.gt, other.gt):
                if pa != pb or not np.array_equal(ja, jb):
                    return False
        return True

    __hash__ = None


@dataclass(eq=False)
class PersonTrack:
    person_id: object
    frames: list[FrameSample]

    def check(self) -> None:
        for f in self.frames:
            for cam, dets in f.views.items():
                if len(dets) > 1:
                    raise ValueError(f"frame {f.frame_id}: camera {cam} has {len(dets)} detections")
                for d in dets:
                    if d.person_id not in (None, self.person_id):
                        raise ValueError(f"frame {f.frame_id}: foreign person id {d.person_id!r}")


# ---------------------------------------------------------------- config

DEFAULT_LIMBS = {
    "torso": (440.0, 560.0),
    "neck": (170.0, 230.0),
    "shoulder": (150.0, 210.0),
    "upper_arm": (250.0, 330.0),
    "forearm": (220.0, 300.0),
    "hip": (80.0, 120.0),
    "thigh": (380.0, 480.0),
    "shin": (370.0, 470.0),
    "foot": (130.0, 170.0),
    "face": (60.0, 100.0),
}


@dataclass
class SynthConfig:
    n_cameras: int = 5
    rig_radius: tuple[float, float] = (3000.0, 4000.0)
    rig_height: tuple[float, float] = (1800.0, 2600.0)
    focal: tuple[float, float] = (750.0, 900.0)
    image_size: tuple[int, int] = (1920, 1080)
    n_keypoints: int = 15
    limb_lengths: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_LIMBS))
    walk_radius: float = 1500.0
    pixel_noise: float = 1.0
    drop_prob: float = 0.05
    occlusion_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise InvalidConfig(f"{name}: {why}")

        if not isinstance(self.n_cameras, int) or self.n_cameras < 1:
            bad("n_cameras", "must be a positive integer")
        for name in ("rig_radius", "rig_height", "focal"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                bad(name, "must be a range 0 < lo <= hi")
            setattr(self, name, (float(lo), float(hi)))
        w, h = self.image_size
        if w < 2 or h < 2:
            bad("image_size", "must be at least 2x2")
        self.image_size = (int(w), int(h))
        if self.n_keypoints not in SKELETONS:
            bad("n_keypoints", f"supported layouts are {sorted(SKELETONS)}")
        limbs = dict(DEFAULT_LIMBS)
        for k, v in dict(self.limb_lengths).items():
            if k not in DEFAULT_LIMBS:
                bad(f"limb_lengths.{k}", "unknown limb")
            lo, hi = v
            if not (0 < lo <= hi):
                bad(f"limb_lengths.{k}", "must be a range 0 < lo <= hi")
            limbs[k] = (float(lo), float(hi))
        self.limb_lengths = limbs
        if not self.walk_radius > 0:
            bad("walk_radius", "must be positive")
        if self.walk_radius >= self.rig_radius[0]:
            bad("walk_radius", "must stay inside the camera ring")
        if not self.pixel_noise >= 0:
            bad("pixel_noise", "must be >= 0")
        for name in ("drop_prob", "occlusion_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                bad(name, "must lie in [0, 1]")
        if not isinstance(self.seed, int):
            bad("seed", "must be an integer")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"{sorted(unknown)[0]}: unknown synth field")
        kwargs = {}
        for k, v in data.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidConfig):
                raise
            raise InvalidConfig(str(exc)) from None

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, dict):
                v = {k: list(x) for k, x in v.items()}
            out[f.name] = v
        return out


# ---------------------------------------------------------------- rig


def make_rig(config: SynthConfig) -> Rig:
    """Cameras evenly spread on a ring, aimed at the walking area's centre."""
    rng = np.random.default_rng([config.seed, 0x51A])
    w, h = config.image_size
    cams = []
    offset = rng.uniform(0, 2 * math.pi)
    for i in range(config.n_cameras):
        ang = offset + 2 * math.pi * i / config.n_cameras + rng.uniform(-0.15, 0.15)
        r = rng.uniform(*config.rig_radius)
        z = rng.uniform(*config.rig_height)
        f = rng.uniform(*config.focal)
        center = (r * math.cos(ang), r * math.sin(ang), z)
        target = (rng.uniform(-200, 200), rng.uniform(-200, 200), 900.0)
        cams.append(look_at(f"cam{i}", center, target, f, w, h))
    return Rig(cams)


# ---------------------------------------------------------------- bodies

JOINTS_15 = (
    "pelvis", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
JOINTS_25 = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
    "l_big_toe", "l_small_toe", "l_heel", "r_big_toe", "r_small_toe", "r_heel",
)
SKELETONS = {15: JOINTS_15, 25: JOINTS_25}

BONES_15 = (
    (0, 1), (1, 2), (1, 3), (3, 4), (4, 5), (1, 6), (6, 7), (7, 8),
    (0, 9), (9, 10), (10, 11), (0, 12), (12, 13), (13, 14),
)
BONES_25 = (
    (8, 1), (1, 0), (1, 5), (5, 6), (6, 7), (1, 2), (2, 3), (3, 4),
    (8, 12), (12, 13), (13, 14), (8, 9), (9, 10), (10, 11),
    (0, 15), (0, 16), (15, 17), (16, 18),
    (14, 19), (19, 20), (14, 21), (11, 22), (22, 23), (11, 24),
)
BONES = {15: BONES_15, 25: BONES_25}

# (low, high) in radians
ANGLE_LIMITS = {
    "pitch": (-0.15, 0.45),
    "roll": (-0.15, 0.15),
    "shoulder_flex": (-0.8, 2.0),
    "shoulder_abd": (0.05, 1.5),
    "elbow": (0.0, 2.4),
    "hip_flex": (-0.5, 1.5),
    "hip_abd": (0.0, 0.5),
    "knee": (0.0, 2.0),
}
SIDES = ("l", "r")
ANKLE_HEIGHT = 80.0


def sample_body(config: SynthConfig, rng: np.random.Generator) -> dict[str, float]:
    """Limb lengths in mm; one value per left/right pair."""
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in config.limb_lengths.items()}


def sample_angles(rng: np.random.Generator) -> dict[str, float]:
    out = {}
    for name, (lo, hi) in ANGLE_LIMITS.items():
        mid, span = 0.5 * (lo + hi), 0.25 * (hi - lo)
        if name in ("pitch", "roll"):
            out[name] = float(np.clip(rng.normal(mid, span), lo, hi))
            continue
        for side in SIDES:
            out[f"{side}_{name}"] = float(np.clip(rng.normal(mid, span), lo, hi))
    return out


def _limb_dir(angle, abd, side, fwd, left, up):
    return -math.cos(angle) * math.cos(abd) * up + math.sin(angle) * math.cos(abd) * fwd + side * math.sin(abd) * left


def pose_body(body: dict[str, float], angles: dict[str, float], root_xy, heading: float, n_keypoints: int = 15) -> np.ndarray:
    """Forward kinematics. Returns (n_keypoints, 3) joints in mm, feet on the floor."""
    fwd = np.array([math.cos(heading), math.sin(heading), 0.0])
    left = np.array([-math.sin(heading), math.cos(heading), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    p = {}
    p["pelvis"] = np.zeros(3)
    pitch, roll = angles["pitch"], angles["roll"]
    spine = math.cos(pitch) * math.cos(roll) * up + math.sin(pitch) * fwd + math.cos(pitch) * math.sin(roll) * left
    p["neck"] = p["pelvis"] + body["torso"] * spine
    p["head"] = p["neck"] + body["neck"] * spine
    for s, side in ((1.0, "l"), (-1.0, "r")):
        p[f"{side}_shoulder"] = p["neck"] + s * body["shoulder"] * left
        flex, abd = angles[f"{side}_shoulder_flex"], angles[f"{side}_shoulder_abd"]
        p[f"{side}_elbow"] = p[f"{side}_shoulder"] + body["upper_arm"] * _limb_dir(flex, abd, s, fwd, left, up)
        p[f"{side}_wrist"] = p[f"{side}_elbow"] + body["forearm"] * _limb_dir(
            flex + angles[f"{side}_elbow"], abd, s, fwd, left, up
        )
        p[f"{side}_hip"] = p["pelvis"] + s * body["hip"] * left
        hflex, habd = angles[f"{side}_hip_flex"], angles[f"{side}_hip_abd"]
        p[f"{side}_knee"] = p[f"{side}_hip"] + body["thigh"] * _limb_dir(hflex, habd, s, fwd, left, up)
        p[f"{side}_ankle"] = p[f"{side}_knee"] + body["shin"] * _limb_dir(
            hflex - angles[f"{side}_knee"], habd, s, fwd, left, up
        )
    if n_keypoints == 25:
        face = body["face"]
        p["nose"] = p["head"] + 0.6 * face * fwd
        for s, side in ((1.0, "l"), (-1.0, "r")):
            p[f"{side}_eye"] = p["head"] + 0.5 * face * fwd + 0.35 * s * face * left + 0.25 * face * up
            p[f"{side}_ear"] = p["head"] + 0.8 * s * face * left
            ankle = p[f"{side}_ankle"]
            p[f"{side}_heel"] = ankle - 0.3 * body["foot"] * fwd - 0.5 * ANKLE_HEIGHT * up
            p[f"{side}_big_toe"] = ankle + body["foot"] * fwd + 0.15 * s * body["foot"] * left - 0.8 * ANKLE_HEIGHT * up
            p[f"{side}_small_toe"] = ankle + 0.85 * body["foot"] * fwd + 0.4 * s * body["foot"] * left - 0.8 * ANKLE_HEIGHT * up
    joints = np.stack([p[name] for name in SKELETONS[n_keypoints]])
    lowest = min(p["l_ankle"][2], p["r_ankle"][2])
    joints[:, 2] += ANKLE_HEIGHT - lowest
    joints[:, 0] += root_xy[0]
    joints[:, 1] += root_xy[1]
    return joints


def bone_lengths(joints: np.ndarray, n_keypoints: int = 15) -> np.ndarray:
    bones = np.asarray(BONES[n_keypoints])
    return np.linalg.norm(joints[bones[:, 0]] - joints[bones[:, 1]], axis=1)


SYMMETRIC_BONES_15 = (((3, 4), (6, 7)), ((4, 5), (7, 8)), ((9, 10), (12, 13)), ((10, 11), (13, 14)), ((1, 3), (1, 6)), ((0, 9), (0, 12)))


# ---------------------------------------------------------------- detections


def observe(
    joints: np.ndarray,
    rig: Rig,
    config: SynthConfig,
    rng: np.random.Generator,
    person_id=None,
) -> dict[str, SkeletonDetection]:
    """Project one body into every camera and apply the corruption model."""
    w, h = config.image_size
    out = {}
    for cam in rig:
        uv, depth = project_many(cam, joints)
        occluded = rng.random() < config.occlusion_prob
        dropped = rng.random(len(joints)) < config.drop_prob
        noise = rng.normal(0.0, 1.0, size=uv.shape) * config.pixel_noise
        conf = rng.uniform(0.5, 1.0, size=len(joints))
        with np.errstate(invalid="ignore"):
            inside = (depth > 1.0) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        visible = inside & ~dropped & (not occluded)
        kps = np.zeros((len(joints), 4))
        kps[visible, 0] = 1.0
        if config.pixel_noise > 0:
            kps[visible, 1:3] = uv[visible] + noise[visible]
        else:
            kps[visible, 1:3] = uv[visible]
        kps[visible, 3] = conf[visible]
        out[cam.id] = SkeletonDetection(cam.id, kps, person_id)
    return out


class _Walker:
    """Random walk of the root on the floor plus mean-reverting joint angles."""

    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        r = config.walk_radius * math.sqrt(rng.uniform(0, 1))
        a = rng.uniform(0, 2 * math.pi)
        self.xy = np.array([r * math.cos(a), r * math.sin(a)])
        self.heading = rng.uniform(-math.pi, math.pi)
        self.speed = rng.uniform(0, 40.0)
        self.angles = sample_angles(rng)

    def step(self) -> None:
        rng, cfg = self.rng, self.config
        self.heading += rng.normal(0, 0.15)
        self.speed = float(np.clip(self.speed + rng.normal(0, 8.0), 0.0, 60.0))
        nxt = self.xy + self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])
        if np.linalg.norm(nxt) > cfg.walk_radius:
            # turn back towards the centre
            self.heading = math.atan2(-self.xy[1], -self.xy[0]) + rng.normal(0, 0.3)
            nxt = self.xy + self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])
            if np.linalg.norm(nxt) > cfg.walk_radius:
                nxt = self.xy
        self.xy = nxt
        for name in self.angles:
            key = name[2:] if name[:2] in ("l_", "r_") else name
            lo, hi = ANGLE_LIMITS[key]
            mid, span = 0.5 * (lo + hi), hi - lo
            val = self.angles[name]
            val += 0.1 * (mid - val) + rng.normal(0, 0.08 * span)
            self.angles[name] = float(np.clip(val, lo, hi))


def generate_track(config: SynthConfig, length: int, rig: Rig, track_index: int = 0, frame_offset: int = 0):
    """One synthetic person walking through the rig.

    Returns ``(PersonTrack, poses)`` where ``poses`` is the list of exact
    ground-truth (N_k, 3) joint arrays, one per frame.
    """
    config.validate()
    if length < 1:
        raise InvalidConfig("length: must be >= 1")
    rng = np.random.default_rng([config.seed, 0x7AC, track_index])
    body = sample_body(config, rng)
    walker = _Walker(config, rng)
    frames, poses = [], []
    for t in range(length):
        if t:
            walker.step()
        joints = pose_body(body, walker.angles, walker.xy, walker.heading, config.n_keypoints)
        dets = observe(joints, rig, config, rng, person_id=track_index)
        frames.append(
            FrameSample(
                frame_id=frame_offset + t,
                views={cid: [d] for cid, d in dets.items()},
                gt=[(track_index, joints)],
            )
        )
        poses.append(joints)
    return PersonTrack(track_index, frames), poses


def generate_scene_frames(
    config: SynthConfig,
    rig: Rig,
    n_frames: int,
    persons: tuple[int, int] = (1, 10),
    min_separation: float = 600.0,
    stream: int = 1,
) -> list[FrameSample]:
    """Independent multi-person frames with ground truth.

    Person count per frame is uniform in ``persons``; roots are kept at least
    ``min_separation`` mm apart. Detections carry person ids, shuffled within
    each camera, and empty skeletons are dropped.
    """
    config.validate()
    rng = np.random.default_rng([config.seed, 0x5CE, stream])
    out = []
    for f in range(n_frames):
        n = int(rng.integers(persons[0], persons[1] + 1))
        roots: list[np.ndarray] = []
        for _ in range(1000 * n):
            if len(roots) == n:
                break
            r = config.walk_radius * math.sqrt(rng.uniform(0, 1))
            a = rng.uniform(0, 2 * math.pi)
            xy = np.array([r * math.cos(a), r * math.sin(a)])
            if all(np.linalg.norm(xy - q) >= min_separation for q in roots):
                roots.append(xy)
        views: dict[str, list[SkeletonDetection]] = {cam.id: [] for cam in rig}
        gt = []
        for pid, xy in enumerate(roots):
            body = sample_body(config, rng)
            joints = pose_body(body, sample_angles(rng), xy, rng.uniform(-math.pi, math.pi), config.n_keypoints)
            gt.append((pid, joints))
            for cid, det in observe(joints, rig, config, rng, person_id=pid).items():
                if not det.is_empty():
                    views[cid].append(det)
        for cid in views:
            order = rng.permutation(len(views[cid]))
            views[cid] = [views[cid][i] for i in order]
        out.append(FrameSample(frame_id=f, views=views, gt=gt))
    return out


# ---------------------------------------------------------------- augmentation


def view_ids(sample: FrameSample) -> list[str]:
    """Cameras holding at least one visible keypoint."""
    return [c for c, dets in sample.views.items() if any(not d.is_empty() for d in dets)]


def view_subsets(cams: Sequence[str], policy: str = "auto", rng: np.random.Generator | None = None) -> list[tuple[str, ...]]:
    """Retained-view subsets for augmentation; the full set always comes first.

    ``policy`` is ``"all"`` (every non-empty subset, largest first),
    ``"random"`` (the full set plus 2V random proper subsets) or ``"auto"``
    (``all`` up to five views, ``random`` above).
    """
    V = len(cams)
    if V == 0:
        raise ValueError("no views to subset")
    if policy == "auto":
        policy = "all" if V <= 5 else "random"
    if policy == "all":
        return [s for r in range(V, 0, -1) for s in itertools.combinations(cams, r)]
    if policy == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        subsets = [tuple(cams)]
        for _ in range(2 * V):
            r = int(rng.integers(1, V)) if V > 1 else 1
            pick = sorted(rng.choice(V, size=r, replace=False))
            subsets.append(tuple(cams[i] for i in pick))
        return subsets
    raise ValueError(f"unknown subset policy {policy!r}")


def augment_views(sample: FrameSample, policy: str = "auto", rng: np.random.Generator | None = None):
    """View-removal augmentation of a single-person sample.

    Returns ``(augmented, seed)`` pairs, one per subset from
    :func:`view_subsets`; removed views keep their skeleton slot with every
    keypoint zeroed. The first pair is always ``(sample, sample)``.
    """
    cams = view_ids(sample)
    if not cams:
        raise ValueError("sample has no visible view")
    subsets = view_subsets(cams, policy, rng)
    pairs = [(sample, sample)]
    for subset in subsets[1:]:
        keep = set(subset)
        views = {
            c: [d if c in keep else d.masked(np.zeros(d.n_keypoints, dtype=bool)) for d in dets]
            for c, dets in sample.views.items()
        }
        pairs.append((FrameSample(sample.frame_id, views, sample.gt), sample))
    return pairs


# ---------------------------------------------------------------- JSON lines


def sample_to_dict(sample: FrameSample) -> dict:
    views = []
    for cam, dets in sample.views.items():
        skels = []
        for d in dets:
            entry = {}
            if d.person_id is not None:
                entry["person_id"] = d.person_id
            entry["kps"] = [[int(k[0]), float(k[1]), float(k[2]), float(k[3])] for k in d.keypoints]
            skels.append(entry)
        views.append({"camera_id": cam, "skeletons": skels})
    doc = {"frame_id": sample.frame_id, "views": views}
    if sample.gt is not None:
        doc["gt"] = [{"person_id": pid, "joints": np.asarray(j, dtype=np.float64).tolist()} for pid, j in sample.gt]
    return doc


def _expect(cond, msg, line, path):
    if not cond:
        raise SchemaError(msg, line, path)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def sample_from_dict(doc, line: int | None = None, n_keypoints: int | None = None) -> FrameSample:
    _expect(isinstance(doc, dict), "frame must be a JSON object", line, "")
    allowed = {"frame_id", "views", "gt"}
    extra = sorted(set(doc) - allowed)
    if extra:
        raise SchemaError(f"unknown field {extra[0]!r}", line, "")
    _expect("frame_id" in doc, "missing field", line, "frame_id")
    _expect("views" in doc and isinstance(doc["views"], list), "missing or non-list field", line, "views")
    views: dict[str, list[SkeletonDetection]] = {}
    nk = n_keypoints
    for vi, view in enumerate(doc["views"]):
        vp = f"views[{vi}]"
        _expect(isinstance(view, dict), "must be an object", line, vp)
        _expect(set(view) <= {"camera_id", "skeletons"}, "unknown field", line, vp)
        cam = view.get("camera_id")
        _expect(isinstance(cam, str), "missing or non-string camera_id", line, f"{vp}.camera_id")
        _expect(cam not in views, "duplicate camera_id", line, f"{vp}.camera_id")
        skels = view.get("skeletons")
        _expect(isinstance(skels, list), "missing or non-list field", line, f"{vp}.skeletons")
        dets = []
        for si, sk in enumerate(skels):
            sp = f"{vp}.skeletons[{si}]"
            _expect(isinstance(sk, dict), "must be an object", line, sp)
            _expect(set(sk) <= {"person_id", "kps"}, "unknown field", line, sp)
            kps = sk.get("kps")
            _expect(isinstance(kps, list) and kps, "missing or empty kps", line, f"{sp}.kps")
            if nk is None:
                nk = len(kps)
            _expect(len(kps) == nk, f"expected {nk} keypoints, got {len(kps)}", line, f"{sp}.kps")
            rows = []
            for ki, k in enumerate(kps):
                kp = f"{sp}.kps[{ki}]"
                _expect(isinstance(k, list) and len(k) == 4, "keypoint must be [visible, u, v, conf]", line, kp)
                _expect(all(_is_number(x) for x in k), "keypoint entries must be finite numbers", line, kp)
                vis, u, v, c = k
                _expect(vis in (0, 1), "visible must be 0 or 1", line, f"{kp}[0]")
                if vis:
                    _expect(0 < c <= 1, f"confidence {c} outside (0, 1]", line, f"{kp}[3]")
                else:
                    _expect(u == 0 and v == 0 and c == 0, "invisible keypoint must be all zero", line, kp)
                rows.append([float(vis), float(u), float(v), float(c)])
            pid = sk.get("person_id")
            _expect(pid is None or isinstance(pid, (int, str)) and not isinstance(pid, bool), "bad person_id", line, f"{sp}.person_id")
            dets.append(SkeletonDetection(cam, rows, pid))
        views[cam] = dets
    gt = None
    if "gt" in doc:
        _expect(isinstance(doc["gt"], list), "must be a list", line, "gt")
        gt = []
        for gi, g in enumerate(doc["gt"]):
            gp = f"gt[{gi}]"
            _expect(isinstance(g, dict) and set(g) == {"person_id", "joints"}, "needs person_id and joints", line, gp)
            joints = g["joints"]
            _expect(isinstance(joints, list) and joints, "joints must be a non-empty list", line, f"{gp}.joints")
            if nk is None:
                nk = len(joints)
            _expect(len(joints) == nk, f"expected {nk} joints, got {len(joints)}", line, f"{gp}.joints")
            for ji, j in enumerate(joints):
                _expect(isinstance(j, list) and len(j) == 3 and all(_is_number(x) for x in j), "joint must be [x, y, z]", line, f"{gp}.joints[{ji}]")
            gt.append((g["person_id"], np.asarray(joints, dtype=np.float64)))
    return FrameSample(doc["frame_id"], views, gt)


def dumps_sample(sample: FrameSample) -> str:
    return json.dumps(sample_to_dict(sample), separators=(",", ":"))


def save_detections(samples: Iterable[FrameSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(dumps_sample(s) + "\n")


def iter_detections(path, n_keypoints: int | None = None) -> Iterator[FrameSample]:
    nk = n_keypoints
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", lineno) from None
            sample = sample_from_dict(doc, lineno, nk)
            if nk is None:
                for _, _, d in sample.detections():
                    nk = d.n_keypoints
                    break
                else:
                    if sample.gt:
                        nk = len(sample.gt[0][1])
            yield sample


def load_detections(path, n_keypoints: int | None = None) -> list[FrameSample]:
    return list(iter_detections(path, n_keypoints))


def save_track(track: PersonTrack, path) -> None:
    save_detections(track.frames, path)


def load_track(path) -> PersonTrack:
    frames = load_detections(path)
    pid = None
    for f in frames:
        for _, _, d in f.detections():
            if d.person_id is not None:
                pid = d.person_id
                break
        if pid is not None:
            break
    track = PersonTrack(pid, frames)
    track.check()
    return track


def check_against_rig(samples: Sequence[FrameSample], rig: Rig) -> None:
    for s in samples:
        for cam in s.views:
            if cam not in rig:
                raise SchemaError(f"camera {cam!r} not in calibration", None, f"frame {s.frame_id}")
