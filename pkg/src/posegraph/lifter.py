"""Self-supervised 3D lifting of grouped multi-view skeletons.

An MLP reads, per camera and keypoint, the ten view features plus the
triangulated centroid and an availability flag, and regresses every joint in
world coordinates. Training needs no 3D labels: predictions are projected
into each camera and compared with the detections of the *seed* sample using
the Manhattan pixel distance, summed per sample and squared in the batch
loss.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import kernels
from .diffcore import ops
from .geometry import PARALLEL_SIN, Rig, backproject_many
from .matcher import SLOTS, NonFiniteLoss, view_block
from .scene_forge import FrameSample, PersonTrack, SkeletonDetection, view_ids, view_subsets

log = logging.getLogger(__name__)

LIFT_SLOTS = 14
PAPER_LAYERS = (3072, 3072, 2048, 2048, 1024, 1024, 1024)
SMALL_LAYERS = (512, 512, 256, 256, 128, 128, 128)
PROFILES = {"paper": PAPER_LAYERS, "small": SMALL_LAYERS}
MIN_DEPTH = 1.0
DEPTH_MARGIN = 100.0


class EmptyGroup(ValueError):
    pass


# ---------------------------------------------------------------- input


def input_length(n_keypoints: int, n_cameras: int) -> int:
    return LIFT_SLOTS * n_cameras * n_keypoints


def _stack_views(views: Sequence[SkeletonDetection], rig: Rig):
    """Per-camera view blocks (C, K, 10), ray directions (C, K, 3), masks (C, K)."""
    if not views:
        raise EmptyGroup("no views to lift")
    nk = views[0].n_keypoints
    C = len(rig)
    blocks = np.zeros((C, nk, SLOTS))
    dirs = np.zeros((C, nk, 3))
    mask = np.zeros((C, nk), dtype=bool)
    seen = set()
    for det in views:
        c = rig.index(det.camera_id)
        if c in seen:
            raise ValueError(f"two views from camera {det.camera_id!r}")
        seen.add(c)
        blocks[c] = view_block(det, rig)
        mask[c] = det.visible
        if det.visible.any():
            _, d = backproject_many(rig.cameras[c], det.pixels[det.visible])
            dirs[c, det.visible] = d
    return blocks, dirs, mask


def _camera_centers(rig: Rig) -> np.ndarray:
    return np.stack([cam.center for cam in rig])


def assemble_input(blocks: np.ndarray, dirs: np.ndarray, mask: np.ndarray, centers: np.ndarray) -> np.ndarray:
    C, K, _ = blocks.shape
    tri, count = kernels.pairwise_centroids(centers, dirs, mask, PARALLEL_SIN)
    out = np.zeros((C, K, LIFT_SLOTS))
    out[:, :, :SLOTS] = blocks
    avail = count > 0
    out[:, avail, SLOTS:SLOTS + 3] = tri[avail] / 1000.0
    out[:, avail, SLOTS + 3] = 1.0
    return out.ravel()


def build_lift_input(views: Sequence[SkeletonDetection], rig: Rig) -> np.ndarray:
    """Flat 14*N_c*N_k vector, camera-major then keypoint.

    Slots 10..12 hold the triangulated centroid in metres and slot 13 its
    availability, repeated in every camera block of the keypoint.
    """
    blocks, dirs, mask = _stack_views(views, rig)
    return assemble_input(blocks, dirs, mask, _camera_centers(rig))


def triangulation_baseline(views: Sequence[SkeletonDetection], rig: Rig) -> np.ndarray:
    """Per-joint multi-view centroid in mm; joints seen by fewer than two views are NaN."""
    _, dirs, mask = _stack_views(views, rig)
    tri, count = kernels.pairwise_centroids(_camera_centers(rig), dirs, mask, PARALLEL_SIN)
    tri[count == 0] = np.nan
    return tri


# ---------------------------------------------------------------- loss


@dataclass
class Supervision:
    """Seed-sample targets: pixels (B, C, K, 2) and detection mask (B, C, K)."""

    pixels: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_views(cls, batch: Sequence[Sequence[SkeletonDetection]], rig: Rig, n_keypoints: int) -> "Supervision":
        B, C = len(batch), len(rig)
        px = np.zeros((B, C, n_keypoints, 2))
        m = np.zeros((B, C, n_keypoints))
        for b, views in enumerate(batch):
            for det in views:
                c = rig.index(det.camera_id)
                px[b, c] = det.pixels
                m[b, c] = det.visible
        return cls(px, m)


@dataclass
class LossReport:
    errors: np.ndarray
    loss: float
    per_camera: np.ndarray
    barrier: np.ndarray
    tensor: dc.Tensor | None = field(default=None, repr=False)


def reprojection_loss(poses, target: Supervision, rig: Rig) -> LossReport:
    """Batch loss ``sum_b e_b**2 / B`` plus the behind-camera barrier.

    ``poses`` is a (B, K, 3) array or Tensor in mm. ``e_b`` is the Manhattan
    pixel distance summed over cameras and over the keypoints detected in
    the seed sample. ``report.tensor`` carries the differentiable loss.
    """
    poses = ops.as_tensor(poses)
    B = poses.shape[0]
    if poses.value.ndim != 3 or poses.shape[2] != 3:
        raise dc.ShapeMismatch(f"poses must be (B, K, 3), got {poses.shape}")
    if target.pixels.shape[:3] != (B, len(rig), poses.shape[1]):
        raise dc.ShapeMismatch(f"targets {target.pixels.shape} do not fit poses {poses.shape}")
    err, per_cam, derr, barrier, dbarrier = kernels.reprojection(
        rig.projections, poses.value, target.pixels, target.mask, MIN_DEPTH, DEPTH_MARGIN
    )
    total = float((err**2).sum() / B + barrier.sum() / B)

    def back(g):
        return (g * (2.0 * err[:, None, None] * derr + dbarrier) / B,)

    t = dc.Tensor.from_op(np.asarray(total), (poses,), back)
    return LossReport(err, total, per_cam, barrier, t)


# ---------------------------------------------------------------- network


@dataclass
class LifterArch:
    n_keypoints: int
    n_cameras: int
    hidden: tuple[int, ...] = SMALL_LAYERS

    def to_dict(self) -> dict:
        return {"kind": "lifter", "n_keypoints": self.n_keypoints, "n_cameras": self.n_cameras, "hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, d: dict) -> "LifterArch":
        return cls(d["n_keypoints"], d["n_cameras"], tuple(d["hidden"]))


class LifterNet:
    """LeakyReLU MLP with a linear output of 3*N_k coordinates in metres."""

    def __init__(self, arch: LifterArch, seed: int = 0):
        self.arch = arch
        rng = np.random.default_rng(seed)
        width = input_length(arch.n_keypoints, arch.n_cameras)
        self.layers = []
        for units in arch.hidden:
            self.layers.append(dc.DenseLayer(width, units, "leaky_relu", rng=rng))
            width = units
        self.layers.append(dc.DenseLayer(width, 3 * arch.n_keypoints, "linear", rng=rng, gain=0.1))

    def parameters(self) -> dict[str, dc.Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                out[f"fc{i}.{name}"] = p
        return out

    def forward(self, inputs) -> dc.Tensor:
        """(B, input_length) -> (B, N_k, 3) joints in mm."""
        x = ops.as_tensor(inputs)
        n_in = input_length(self.arch.n_keypoints, self.arch.n_cameras)
        if x.value.ndim != 2 or x.shape[1] != n_in:
            raise dc.ShapeMismatch(f"lifter expects (batch, {n_in}), got {x.shape}")
        for layer in self.layers:
            x = layer(x)
        return ops.mul(ops.reshape(x, (x.shape[0], self.arch.n_keypoints, 3)), 1000.0)

    def save(self, path) -> None:
        dc.save_checkpoint(path, self.arch.to_dict(), self.parameters())

    @classmethod
    def load(cls, path, arch: LifterArch | None = None) -> "LifterNet":
        saved, _ = dc.read_checkpoint(path)
        if saved.get("kind") != "lifter":
            raise dc.CheckpointError(f"{path}: not a lifter checkpoint")
        want = arch if arch is not None else LifterArch.from_dict(saved)
        net = cls(want)
        dc.load_into(path, want.to_dict(), net.parameters())
        return net


def lift(model: LifterNet, lift_input: np.ndarray) -> np.ndarray:
    """One person's (N_k, 3) pose in mm; every joint is always returned."""
    x = np.asarray(lift_input, dtype=np.float64)
    n_in = input_length(model.arch.n_keypoints, model.arch.n_cameras)
    if x.shape != (n_in,):
        raise dc.ShapeMismatch(f"lift input must have length {n_in}, got {x.shape}")
    return model.forward(x[None]).value[0]


def lift_many(model: LifterNet, inputs: np.ndarray) -> np.ndarray:
    return model.forward(np.asarray(inputs, dtype=np.float64)).value


# ---------------------------------------------------------------- training


class PairBank:
    """(augmented input, seed target) pairs drawn from single-person frames.

    View blocks and ray directions are computed once per frame; an augmented
    input is the same data with the removed cameras masked out and the
    triangulation recomputed.
    """

    def __init__(self, frames: Sequence[FrameSample], rig: Rig, policy: str = "auto", seed: int = 0):
        self.rig = rig
        self.centers = _camera_centers(rig)
        rng = np.random.default_rng([seed, 0xBA4])
        self.blocks, self.dirs, self.masks, self.pixels, self.subsets, self.gt = [], [], [], [], [], []
        for f in frames:
            cams = view_ids(f)
            if not cams:
                continue
            views = [d for _, _, d in f.detections()]
            blocks, dirs, mask = _stack_views(views, rig)
            px = np.zeros(mask.shape + (2,))
            for d in views:
                px[rig.index(d.camera_id)] = d.pixels
            self.blocks.append(blocks)
            self.dirs.append(dirs)
            self.masks.append(mask)
            self.pixels.append(px)
            idx = [tuple(rig.index(c) for c in s) for s in view_subsets(cams, policy, rng)]
            self.subsets.append(idx)
            self.gt.append(np.asarray(f.gt[0][1]) if f.gt else None)
        if not self.blocks:
            raise EmptyGroup("no frame with a visible view")
        self.n_keypoints = self.blocks[0].shape[1]
        self.n_pairs = sum(len(s) for s in self.subsets)

    def __len__(self):
        return len(self.blocks)

    def make(self, items: Sequence[tuple[int, int]]):
        """Inputs (B, L), Supervision, retained-camera masks (B, C, K), gt (B, K, 3) or None."""
        X, px, m, kept, gts = [], [], [], [], []
        for fi, si in items:
            keep = np.zeros(len(self.rig), dtype=bool)
            keep[list(self.subsets[fi][si])] = True
            mask = self.masks[fi] & keep[:, None]
            blocks = self.blocks[fi] * keep[:, None, None]
            X.append(assemble_input(blocks, self.dirs[fi], mask, self.centers))
            px.append(self.pixels[fi])
            m.append(self.masks[fi].astype(np.float64))
            kept.append(mask)
            gts.append(self.gt[fi])
        gt = np.stack(gts) if all(g is not None for g in gts) else None
        return np.stack(X), Supervision(np.stack(px), np.stack(m)), np.stack(kept), gt

    def sample(self, rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
        frames = rng.integers(0, len(self.blocks), size=n)
        return [(int(f), int(rng.integers(len(self.subsets[f])))) for f in frames]


@dataclass
class LifterTrainConfig:
    lr: float = 1e-3
    lr_final: float | None = None
    batch_size: int = 64
    max_steps: int = 20000
    eval_every: int = 100
    patience: int = 20
    val_fraction: float = 0.2
    val_pairs: int = 512
    policy: str = "auto"
    time_limit: float = 1800.0
    seed: int = 0


@dataclass
class LifterResult:
    history: list[tuple[int, float, float]] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_val_loss: float = float("nan")
    steps: int = 0
    seconds: float = 0.0


def evaluate_pairs(net: LifterNet, bank: PairBank, items, rig: Rig, chunk: int = 256):
    """Validation loss (mean e^2 + barrier) and MPJPE (mm, if ground truth exists)."""
    losses, errs = [], []
    for i in range(0, len(items), chunk):
        X, sup, _, gt = bank.make(items[i:i + chunk])
        pred = net.forward(X).value
        rep = reprojection_loss(pred, sup, rig)
        losses.append(rep.loss * len(X))
        if gt is not None:
            errs.append(np.linalg.norm(pred - gt, axis=-1).ravel())
    loss = float(np.sum(losses) / len(items))
    mpjpe = float(np.concatenate(errs).mean()) if errs else float("nan")
    return loss, mpjpe


def split_tracks(tracks: Sequence[PersonTrack], fraction: float, rng: np.random.Generator):
    if len(tracks) < 2:
        return list(tracks), list(tracks)
    order = rng.permutation(len(tracks))
    n_val = min(max(1, int(round(fraction * len(tracks)))), len(tracks) - 1)
    val = [tracks[i] for i in sorted(order[:n_val])]
    train = [tracks[i] for i in sorted(order[n_val:])]
    return train, val


def train_lifter(
    tracks: Sequence[PersonTrack],
    rig: Rig,
    arch: LifterArch | None = None,
    config: LifterTrainConfig | None = None,
    net: LifterNet | None = None,
) -> tuple[LifterNet, LifterResult]:
    """Train on view-removed samples supervised by their seed detections.

    Ground truth, if present in the tracks, is only used for the reported
    validation MPJPE. Early stopping watches the validation loss.
    """
    config = config or LifterTrainConfig()
    rng = np.random.default_rng([config.seed, 0x11F])
    train_tracks, val_tracks = split_tracks(tracks, config.val_fraction, rng)
    train = PairBank([f for t in train_tracks for f in t.frames], rig, config.policy, config.seed)
    val = PairBank([f for t in val_tracks for f in t.frames], rig, config.policy, config.seed + 1)
    arch = arch or LifterArch(train.n_keypoints, len(rig))
    net = net or LifterNet(arch, seed=config.seed)
    val_items = val.sample(np.random.default_rng([config.seed, 0x7A1]), config.val_pairs)
    params = net.parameters()
    state = dc.AdamState(lr=config.lr)
    result = LifterResult()
    v0, m0 = evaluate_pairs(net, val, val_items, rig)
    result.initial_val_loss = v0
    result.history.append((0, float("nan"), v0))
    log.info("lifter start val_loss %.4g mpjpe %.1f", v0, m0)
    best, best_values, stale = v0, {k: p.value.copy() for k, p in params.items()}, 0
    t0 = time.monotonic()
    running = []
    step = 0
    for step in range(1, config.max_steps + 1):
        items = train.sample(rng, config.batch_size)
        X, sup, _, _ = train.make(items)
        rep = reprojection_loss(net.forward(X), sup, rig)
        if not math.isfinite(rep.loss):
            bad = items[int(np.argmax(~np.isfinite(rep.errors)))] if not np.all(np.isfinite(rep.errors)) else items[0]
            raise NonFiniteLoss(f"lifter loss became {rep.loss} at step {step} (frame {bad[0]}, subset {bad[1]})")
        rep.tensor.backward()
        state.lr = dc.cosine_lr(config.lr, config.lr_final, step, config.max_steps)
        dc.adam_step(params, state)
        running.append(rep.loss)
        if step % config.eval_every == 0 or step == config.max_steps:
            vl, mp = evaluate_pairs(net, val, val_items, rig)
            result.history.append((step, float(np.mean(running)), vl))
            running = []
            log.info("lifter step %d val_loss %.4g mpjpe %.1f", step, vl, mp)
            if vl < best:
                best, stale = vl, 0
                best_values = {k: p.value.copy() for k, p in params.items()}
            else:
                stale += 1
            if stale >= config.patience or time.monotonic() - t0 > config.time_limit:
                break
    for k, p in params.items():
        p.value = best_values[k]
    result.best_val_loss = best
    result.steps = step
    result.seconds = time.monotonic() - t0
    return net, result
