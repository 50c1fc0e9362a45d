"""Hot-kernel dispatch.

The compiled ``_kernels`` extension is used when it imports; otherwise the
NumPy versions in ``_kernels_py``. Set ``POSEGRAPH_PURE=1`` to force the
fallback.
"""

import os

from . import _kernels_py as pure

if os.environ.get("POSEGRAPH_PURE", "") not in ("", "0"):
    _impl = pure
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = pure

BACKEND = "compiled" if _impl is not pure else "numpy"

scatter_add = _impl.scatter_add
segment_softmax = _impl.segment_softmax
segment_softmax_grad = _impl.segment_softmax_grad
pairwise_centroids = _impl.pairwise_centroids
reprojection = _impl.reprojection
gat_aggregate = _impl.gat_aggregate
gat_aggregate_grad = _impl.gat_aggregate_grad

__all__ = [
    "BACKEND",
    "pure",
    "scatter_add",
    "segment_softmax",
    "segment_softmax_grad",
    "pairwise_centroids",
    "reprojection",
    "gat_aggregate",
    "gat_aggregate_grad",
]
