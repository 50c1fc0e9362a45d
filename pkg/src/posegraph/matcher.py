"""Cross-view skeleton matching with a graph attention network.

Each detection becomes a *head* node; every pair of detections from different
cameras gets an *edge* node wired to both heads. The network scores edge
nodes in [0, 1], and :func:`group_views` greedily merges high-scoring pairs
into per-person view groups.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ops
from .geometry import Rig, backproject_many, line_anchor
from .scene_forge import FrameSample, PersonTrack, SkeletonDetection

log = logging.getLogger(__name__)

SLOTS = 10
HEAD, EDGE = 0, 1
PAPER_HIDDEN = (40, 40, 40, 30)
PAPER_HEADS = (10, 10, 8, 5)


class EmptyFrame(ValueError):
    pass


class InsufficientTracks(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class DataImbalance(UserWarning):
    pass


# ---------------------------------------------------------------- features


def feature_length(n_keypoints: int, n_cameras: int) -> int:
    return n_keypoints * n_cameras * SLOTS + 2


def view_block(det: SkeletonDetection, rig: Rig) -> np.ndarray:
    """(N_k, 10) block: detected flag, normalised pixel, confidence, ray in metres.

    The ray point is the line's closest approach to the world origin rather
    than the camera centre, which would be identical for every keypoint.
    """
    cam = rig[det.camera_id]
    nk = det.n_keypoints
    block = np.zeros((nk, SLOTS))
    vis = det.visible
    if not vis.any():
        return block
    origin, dirs = backproject_many(cam, det.pixels[vis])
    block[vis, 0] = 1.0
    block[vis, 1] = det.pixels[vis, 0] / cam.width
    block[vis, 2] = det.pixels[vis, 1] / cam.height
    block[vis, 3] = det.confidence[vis]
    block[vis, 4:7] = line_anchor(origin, dirs) / 1000.0
    block[vis, 7:10] = dirs
    return block


def view_feature(det: SkeletonDetection, rig: Rig) -> np.ndarray:
    """Flat N_k*N_c*10 vector with only this detection's camera block filled."""
    nk = det.n_keypoints
    out = np.zeros((len(rig), nk, SLOTS))
    out[rig.index(det.camera_id)] = view_block(det, rig)
    return out.ravel()


@dataclass(eq=False)
class MatchGraph:
    features: np.ndarray
    heads: list[tuple[str, int]]
    edges: list[tuple[int, int]]
    adjacency: dc.Adjacency
    head_cameras: np.ndarray
    labels: np.ndarray | None = None
    scores: np.ndarray | None = None
    n_keypoints: int = 0
    n_cameras: int = 0

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_nodes(self) -> int:
        return self.n_heads + self.n_edges

    @property
    def kinds(self) -> np.ndarray:
        return np.r_[np.full(self.n_heads, HEAD), np.full(self.n_edges, EDGE)]

    def edge_node(self, i: int) -> int:
        return self.n_heads + i


def _adjacency(n_heads: int, edges: Sequence[tuple[int, int]]) -> dc.Adjacency:
    n = n_heads + len(edges)
    loops = np.arange(n)
    if edges:
        pairs = np.asarray(edges, dtype=np.int64)
        enode = n_heads + np.arange(len(edges))
        src = np.concatenate([loops, pairs[:, 0], pairs[:, 1], enode, enode])
        dst = np.concatenate([loops, enode, enode, pairs[:, 0], pairs[:, 1]])
    else:
        src = dst = loops
    return dc.Adjacency(src.astype(np.int64), dst.astype(np.int64), n)


def build_graph(sample: FrameSample, rig: Rig) -> MatchGraph:
    dets = list(sample.detections())
    if not dets:
        raise EmptyFrame(f"frame {sample.frame_id} has no detections")
    nk = dets[0][2].n_keypoints
    nc = len(rig)
    width = feature_length(nk, nc)
    heads = [(cam, i) for cam, i, _ in dets]
    cams = np.array([rig.index(cam) for cam, _, _ in dets], dtype=np.int64)
    edges = [
        (a, b)
        for a in range(len(dets))
        for b in range(a + 1, len(dets))
        if cams[a] != cams[b]
    ]
    feats = np.zeros((len(heads) + len(edges), width))
    for h, (_, _, det) in enumerate(dets):
        feats[h, :-2] = view_feature(det, rig)
        feats[h, -2 + HEAD] = 1.0
    feats[len(heads):, -2 + EDGE] = 1.0
    return MatchGraph(feats, heads, edges, _adjacency(len(heads), edges), cams, n_keypoints=nk, n_cameras=nc)


def check_graph(graph: MatchGraph) -> None:
    """Assert the structural invariants of a match graph."""
    nk, nc = graph.n_keypoints, graph.n_cameras
    assert graph.features.shape == (graph.n_nodes, feature_length(nk, nc))
    blocks = graph.features[:, :-2].reshape(graph.n_nodes, nc, nk, SLOTS)
    for h in range(graph.n_heads):
        assert graph.features[h, -2 + HEAD] == 1 and graph.features[h, -2 + EDGE] == 0
        other = np.delete(blocks[h], graph.head_cameras[h], axis=0)
        assert not other.any()
        own = blocks[h, graph.head_cameras[h]]
        undetected = own[:, 0] == 0
        assert not own[undetected].any()
        if (~undetected).any():
            assert np.allclose(np.linalg.norm(own[~undetected, 7:10], axis=1), 1.0)
    for i, (a, b) in enumerate(graph.edges):
        row = graph.features[graph.edge_node(i)]
        assert row[-2 + EDGE] == 1 and row[-2 + HEAD] == 0 and not row[:-2].any()
        assert a != b and graph.head_cameras[a] != graph.head_cameras[b]
    adj = graph.adjacency
    for i in range(graph.n_edges):
        e = graph.edge_node(i)
        senders = set(adj.src[adj.dst == e].tolist()) - {e}
        assert senders == set(graph.edges[i])


def batch_graphs(graphs: Sequence[MatchGraph]) -> tuple[np.ndarray, dc.Adjacency, np.ndarray, np.ndarray]:
    """Disjoint union. Returns features, adjacency, edge-node indices, labels."""
    feats, src, dst, enodes, labels = [], [], [], [], []
    offset = 0
    for g in graphs:
        feats.append(g.features)
        src.append(g.adjacency.src + offset)
        dst.append(g.adjacency.dst + offset)
        enodes.append(offset + g.n_heads + np.arange(g.n_edges))
        if g.labels is not None:
            labels.append(g.labels)
        offset += g.n_nodes
    adj = dc.Adjacency(np.concatenate(src), np.concatenate(dst), offset)
    lab = np.concatenate(labels) if len(labels) == len(graphs) else None
    return np.vstack(feats), adj, np.concatenate(enodes).astype(np.int64), lab


# ---------------------------------------------------------------- training data


def _usable_frames(track: PersonTrack) -> list[int]:
    return [i for i, f in enumerate(track.frames) if any(not d.is_empty() for _, _, d in f.detections())]


def usable_index(tracks: Sequence[PersonTrack]) -> list[tuple[int, list[int]]]:
    """(track index, usable frame indices) for every track with a visible detection."""
    return [(i, fr) for i, t in enumerate(tracks) if (fr := _usable_frames(t))]


def _root(frame: FrameSample):
    if frame.gt:
        return np.asarray(frame.gt[0][1])[:, :2].mean(axis=0)
    return None


def synthesize_training_graph(
    tracks: Sequence[PersonTrack],
    rng: np.random.Generator,
    rig: Rig,
    max_persons: int = 10,
    min_separation: float = 0.0,
    persons: int | None = None,
    usable: list[tuple[int, list[int]]] | None = None,
) -> MatchGraph:
    """Combine single-person frames from distinct tracks into one labelled graph.

    Edge labels are 1 for pairs from the same source track and 0 otherwise.
    With ``min_separation`` > 0 and ground truth available, frames whose root
    lies closer than that to an already chosen person are resampled a few
    times before being accepted anyway. ``usable`` is ``usable_index(tracks)``,
    precomputed by callers that draw many graphs from the same tracks.
    """
    if usable is None:
        usable = usable_index(tracks)
    if not usable:
        raise InsufficientTracks("no track has a frame with a visible detection")
    want = persons if persons is not None else int(rng.integers(1, max_persons + 1))
    want = max(1, min(want, len(usable)))
    picks = rng.choice(len(usable), size=want, replace=False)
    views: dict[str, list[SkeletonDetection]] = {cam.id: [] for cam in rig}
    roots: list[np.ndarray] = []
    for p in picks:
        ti, frames = usable[p]
        frame = tracks[ti].frames[frames[int(rng.integers(len(frames)))]]
        if min_separation > 0:
            for _ in range(10):
                root = _root(frame)
                if root is None or all(np.linalg.norm(root - q) >= min_separation for q in roots):
                    break
                frame = tracks[ti].frames[frames[int(rng.integers(len(frames)))]]
            root = _root(frame)
            if root is not None:
                roots.append(root)
        for cam, _, det in frame.detections():
            if not det.is_empty():
                views[cam].append(SkeletonDetection(cam, det.keypoints, ti))
    for cam in views:
        order = rng.permutation(len(views[cam]))
        views[cam] = [views[cam][i] for i in order]
    sample = FrameSample("synth", views)
    graph = build_graph(sample, rig)
    owner = [sample.views[cam][i].person_id for cam, i in graph.heads]
    graph.labels = np.array([1.0 if owner[a] == owner[b] else 0.0 for a, b in graph.edges])
    return graph


# ---------------------------------------------------------------- network


@dataclass
class MatcherArch:
    n_keypoints: int
    n_cameras: int
    hidden: tuple[int, ...] = PAPER_HIDDEN
    heads: tuple[int, ...] = PAPER_HEADS

    def to_dict(self) -> dict:
        return {
            "kind": "matcher",
            "n_keypoints": self.n_keypoints,
            "n_cameras": self.n_cameras,
            "hidden": list(self.hidden),
            "heads": list(self.heads),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatcherArch":
        return cls(d["n_keypoints"], d["n_cameras"], tuple(d["hidden"]), tuple(d["heads"]))


MATCHER_PROFILES = {
    "paper": (PAPER_HIDDEN, PAPER_HEADS),
    "small": ((64,), (4,)),
}


def matcher_profile(name: str, n_keypoints: int, n_cameras: int) -> MatcherArch:
    if name not in MATCHER_PROFILES:
        raise ValueError(f"unknown matcher profile {name!r}; choose from {sorted(MATCHER_PROFILES)}")
    hidden, heads = MATCHER_PROFILES[name]
    return MatcherArch(n_keypoints, n_cameras, hidden, heads)


class MatcherNet:
    """Stack of concatenating GAT layers and a single-head sigmoid output layer."""

    def __init__(self, arch: MatcherArch, seed: int = 0):
        if len(arch.hidden) != len(arch.heads):
            raise ValueError("hidden and heads must have equal length")
        self.arch = arch
        rng = np.random.default_rng(seed)
        width = feature_length(arch.n_keypoints, arch.n_cameras)
        self.layers = []
        for units, heads in zip(arch.hidden, arch.heads):
            layer = dc.GraphAttentionLayer(width, units, heads, "concat", "leaky_relu", rng=rng)
            self.layers.append(layer)
            width = layer.n_out
        self.layers.append(dc.GraphAttentionLayer(width, 1, 1, "mean", "sigmoid", rng=rng, gain=0.1))

    def parameters(self) -> dict[str, dc.Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                out[f"gat{i}.{name}"] = p
        return out

    def forward(self, features, adjacency: dc.Adjacency) -> dc.Tensor:
        x = dc.Tensor(features) if not isinstance(features, dc.Tensor) else features
        for layer in self.layers:
            x = layer(x, adjacency)
        return x

    def score(self, graph: MatchGraph) -> np.ndarray:
        """Edge-node scores; also stored on ``graph.scores``."""
        if graph.n_edges == 0:
            graph.scores = np.zeros(0)
            return graph.scores
        out = self.forward(graph.features, graph.adjacency).value[:, 0]
        graph.scores = out[graph.n_heads:].copy()
        return graph.scores

    def save(self, path) -> None:
        dc.save_checkpoint(path, self.arch.to_dict(), self.parameters())

    @classmethod
    def load(cls, path, arch: MatcherArch | None = None) -> "MatcherNet":
        saved, _ = dc.read_checkpoint(path)
        if saved.get("kind") != "matcher":
            raise dc.CheckpointError(f"{path}: not a matcher checkpoint")
        want = arch if arch is not None else MatcherArch.from_dict(saved)
        net = cls(want)
        dc.load_into(path, want.to_dict(), net.parameters())
        return net


def matcher_loss(net: MatcherNet, graphs: Sequence[MatchGraph]) -> tuple[dc.Tensor, np.ndarray, np.ndarray]:
    feats, adj, enodes, labels = batch_graphs(graphs)
    out = net.forward(feats, adj)
    probs = ops.reshape(ops.gather(out, enodes), (len(enodes),))
    return ops.binary_cross_entropy(probs, labels), probs.value, labels


def edge_accuracy(net: MatcherNet, graphs: Sequence[MatchGraph], threshold: float = 0.5) -> float:
    hits = total = 0
    for g in graphs:
        if g.n_edges == 0:
            continue
        s = net.score(g)
        hits += int(((s >= threshold) == (g.labels > 0.5)).sum())
        total += g.n_edges
    return hits / total if total else 1.0


@dataclass
class MatcherTrainConfig:
    lr: float = 1e-3
    lr_final: float | None = None
    batch_graphs: int = 4
    max_steps: int = 4000
    eval_every: int = 50
    patience: int = 20
    val_fraction: float = 0.2
    val_graphs: int = 60
    max_persons: int = 10
    min_separation: float = 400.0
    time_limit: float = 1800.0
    seed: int = 0


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_metric: float = float("nan")
    steps: int = 0
    seconds: float = 0.0


def train_matcher(
    tracks: Sequence[PersonTrack],
    rig: Rig,
    arch: MatcherArch | None = None,
    config: MatcherTrainConfig | None = None,
    net: MatcherNet | None = None,
) -> tuple[MatcherNet, TrainResult]:
    """Supervised BCE training on synthesized multi-person graphs.

    Tracks are split into train/validation sets; validation graphs are drawn
    once from the held-out tracks. Returns the best network (by validation
    edge accuracy) and the curve ``(step, loss, val_edge_acc)``.
    """
    config = config or MatcherTrainConfig()
    if not tracks:
        raise InsufficientTracks("no tracks")
    nk = next(d.n_keypoints for t in tracks for f in t.frames for _, _, d in f.detections())
    arch = arch or MatcherArch(nk, len(rig))
    net = net or MatcherNet(arch, seed=config.seed)
    rng = np.random.default_rng([config.seed, 0xA7])
    if len(tracks) < 2:
        warnings.warn("only one track: every edge label is 1", DataImbalance, stacklevel=2)
        train_tracks, val_tracks = list(tracks), list(tracks)
    else:
        order = rng.permutation(len(tracks))
        n_val = max(1, int(round(config.val_fraction * len(tracks))))
        if len(tracks) - n_val < 1:
            n_val = len(tracks) - 1
        val_tracks = [tracks[i] for i in sorted(order[:n_val])]
        train_tracks = [tracks[i] for i in sorted(order[n_val:])]
        if len(train_tracks) < 2:
            warnings.warn("fewer than two training tracks: every edge label is 1", DataImbalance, stacklevel=2)
    val_rng = np.random.default_rng([config.seed, 0xB1])
    val_usable, train_usable = usable_index(val_tracks), usable_index(train_tracks)
    val = [
        synthesize_training_graph(val_tracks, val_rng, rig, config.max_persons, config.min_separation, usable=val_usable)
        for _ in range(config.val_graphs)
    ]
    params = net.parameters()
    state = dc.AdamState(lr=config.lr)
    result = TrainResult()
    best, best_values, stale = -1.0, None, 0
    t0 = time.monotonic()
    running = []
    for step in range(1, config.max_steps + 1):
        graphs = [
            synthesize_training_graph(
                train_tracks, rng, rig, config.max_persons, config.min_separation, usable=train_usable
            )
            for _ in range(config.batch_graphs)
        ]
        graphs = [g for g in graphs if g.n_edges] or graphs
        if not any(g.n_edges for g in graphs):
            continue
        loss, _, _ = matcher_loss(net, graphs)
        if not math.isfinite(float(loss.value)):
            raise NonFiniteLoss(f"matcher loss became {float(loss.value)} at step {step}")
        loss.backward()
        state.lr = dc.cosine_lr(config.lr, config.lr_final, step, config.max_steps)
        dc.adam_step(params, state)
        running.append(float(loss.value))
        if step % config.eval_every == 0 or step == config.max_steps:
            acc = edge_accuracy(net, val)
            mean_loss = float(np.mean(running))
            running = []
            result.history.append((step, mean_loss, acc))
            log.info("matcher step %d loss %.4f val_edge_acc %.4f", step, mean_loss, acc)
            if acc > best:
                best, stale = acc, 0
                best_values = {k: p.value.copy() for k, p in params.items()}
            else:
                stale += 1
            if stale >= config.patience or time.monotonic() - t0 > config.time_limit:
                break
    if best_values is not None:
        for k, p in params.items():
            p.value = best_values[k]
    result.best_metric = best
    result.steps = step
    result.seconds = time.monotonic() - t0
    return net, result


# ---------------------------------------------------------------- grouping


@dataclass
class PersonGroup:
    members: list[tuple[str, int]]
    confidence: float

    def cameras(self) -> list[str]:
        return [c for c, _ in self.members]


def group_views(graph: MatchGraph, threshold: float = 0.5) -> list[PersonGroup]:
    """Greedy merge of edge nodes in descending score order.

    A merge is skipped if it would put two detections of one camera in the
    same group. Group confidence is the mean score over all edge nodes whose
    two heads ended up in the group (0 for singletons). Groups are ordered by
    their smallest head index.
    """
    if graph.scores is None:
        raise ValueError("graph has no scores")
    n = graph.n_heads
    parent = list(range(n))
    cams = [{int(graph.head_cameras[i])} for i in range(n)]

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    order = sorted(
        (i for i in range(graph.n_edges) if graph.scores[i] >= threshold),
        key=lambda i: (-graph.scores[i], graph.edges[i]),
    )
    for i in order:
        a, b = graph.edges[i]
        ra, rb = find(a), find(b)
        if ra == rb or cams[ra] & cams[rb]:
            continue
        if rb < ra:
            ra, rb = rb, ra
        parent[rb] = ra
        cams[ra] |= cams[rb]
    roots = [find(h) for h in range(n)]
    internal: dict[int, list[float]] = {}
    for i, (a, b) in enumerate(graph.edges):
        if roots[a] == roots[b]:
            internal.setdefault(roots[a], []).append(float(graph.scores[i]))
    groups: dict[int, list[int]] = {}
    for h in range(n):
        groups.setdefault(roots[h], []).append(h)
    out = []
    for root in sorted(groups):
        members = [graph.heads[h] for h in groups[root]]
        scores = internal.get(root)
        out.append(PersonGroup(members, float(np.mean(scores)) if scores else 0.0))
    return out


def partition_of(groups: Sequence[PersonGroup]) -> frozenset:
    return frozenset(frozenset(g.members) for g in groups)
