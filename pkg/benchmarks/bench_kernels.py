"""Compare the compiled kernels with the NumPy fallback.

Sizes mirror a training step: a batch of four 10-person matcher graphs on
five cameras and a 64-sample lifter batch. Run from the repository root:

    python3 benchmarks/bench_kernels.py --repeat 50
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from posegraph import _kernels_py as pure
from posegraph.matcher import synthesize_training_graph, batch_graphs
from posegraph.scene_forge import SynthConfig, generate_track, make_rig

try:
    from posegraph import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng: np.random.Generator):
    cfg = SynthConfig()
    rig = make_rig(cfg)
    tracks = [generate_track(cfg, 5, rig, i)[0] for i in range(10)]
    graphs = [synthesize_training_graph(tracks, rng, rig, persons=10) for _ in range(4)]
    _, adj, _, _ = batch_graphs(graphs)
    n, src, dst = adj.n, adj.src, adj.dst
    E, H, F = len(src), 10, 4
    wh = rng.normal(size=(n, H, F))
    scores = rng.normal(size=(E, H))
    alpha = pure.segment_softmax(scores, dst, n)
    grad = rng.normal(size=(n, H, F))
    centres = np.stack([c.center for c in rig])
    dirs = rng.normal(size=(5, 15, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    mask = rng.random((5, 15)) < 0.8
    poses = rng.uniform([-1000, -1000, 0], [1000, 1000, 1800], size=(64, 15, 3))
    pix = rng.uniform(0, 1000, size=(64, 5, 15, 2))
    pmask = (rng.random((64, 5, 15)) < 0.8).astype(float)
    proj = np.ascontiguousarray(rig.projections)
    return {
        f"scatter_add E={E}": ("scatter_add", (scores, dst, n)),
        f"segment_softmax E={E} H={H}": ("segment_softmax", (scores, dst, n)),
        f"segment_softmax_grad E={E}": ("segment_softmax_grad", (alpha, scores, dst, n)),
        f"gat_aggregate N={n} H={H}": ("gat_aggregate", (wh, alpha, src, dst, n)),
        f"gat_aggregate_grad N={n}": ("gat_aggregate_grad", (grad, wh, alpha, src, dst)),
        "pairwise_centroids C=5 K=15": ("pairwise_centroids", (centres, dirs, mask, 1e-6)),
        "reprojection B=64 C=5 K=15": ("reprojection", (proj, poses, pix, pmask, 1.0, 100.0)),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30, help="calls per timing")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; only the NumPy fallback is timed")
    print(f"{'kernel':36s} {'numpy ms':>10s} {'compiled ms':>12s} {'speed-up':>9s}")
    for label, (name, call_args) in cases(np.random.default_rng(args.seed)).items():
        t_pure = min(timeit.repeat(lambda: getattr(pure, name)(*call_args), number=args.repeat, repeat=3)) / args.repeat
        if compiled is not None:
            t_fast = min(timeit.repeat(lambda: getattr(compiled, name)(*call_args), number=args.repeat, repeat=3)) / args.repeat
            print(f"{label:36s} {1e3 * t_pure:10.3f} {1e3 * t_fast:12.3f} {t_pure / t_fast:8.1f}x")
        else:
            print(f"{label:36s} {1e3 * t_pure:10.3f} {'-':>12s} {'-':>9s}")


if __name__ == "__main__":
    main()
