"""Kernel lane selection.

Imports the compiled extension when available and falls back to the
numpy reference lane otherwise. The TSGEN_KERNELS environment variable
forces a lane: "compiled" raises if the extension is missing, "numpy"
skips it. Both lanes expose the same functions with the same
signatures, so everything above this module is lane-agnostic.
"""

from __future__ import annotations

import os

from . import kernels_numpy

_FORCED = os.environ.get("TSGEN_KERNELS", "").strip().lower()
if _FORCED not in ("", "compiled", "numpy"):
    raise ImportError(f"TSGEN_KERNELS must be 'compiled' or 'numpy', got {_FORCED!r}")

backend = "numpy"
_impl = kernels_numpy
if _FORCED != "numpy":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        if _FORCED == "compiled":
            raise
    else:
        backend = "compiled"
        _impl = _compiled

gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
causal_softmax_forward = _impl.causal_softmax_forward
causal_softmax_backward = _impl.causal_softmax_backward
adamw_update = _impl.adamw_update
