"""Timing comparison of the numpy and compiled kernel lanes.

Run as a script; it imports both lanes directly, so TSGEN_KERNELS has
no effect here. Shapes mirror one desk-scale training step (batch 256,
15 tokens of dim 256, 8 heads).
"""

from __future__ import annotations

import time

import numpy as np

from tsgen.nn import kernels_numpy as lane_np

try:
    from tsgen.nn import _ckernels as lane_c
except ImportError:
    lane_c = None

BATCH, TOKENS, DIM, HEADS = 256, 15, 256, 8
REPEAT = 20


def timeit(fn) -> float:
    fn()  # warm-up
    best = float("inf")
    for _ in range(REPEAT):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(lane, dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(BATCH, TOKENS, DIM)).astype(dtype)
    g = rng.normal(size=x.shape).astype(dtype)
    gain = np.ones(DIM, dtype=dtype)
    bias = np.zeros(DIM, dtype=dtype)
    _, mean, rstd = lane.layer_norm_forward(x, gain, bias, 1e-5)
    scores = rng.normal(size=(BATCH * HEADS, TOKENS, TOKENS)).astype(dtype)
    probs = lane.causal_softmax_forward(scores)
    param = x.copy()
    m = np.zeros_like(param)
    v = np.zeros_like(param)
    return {
        "gelu_forward": lambda: lane.gelu_forward(x),
        "gelu_backward": lambda: lane.gelu_backward(x, g),
        "layer_norm_forward": lambda: lane.layer_norm_forward(x, gain, bias, 1e-5),
        "layer_norm_backward": lambda: lane.layer_norm_backward(x, gain, mean, rstd, g),
        "causal_softmax_forward": lambda: lane.causal_softmax_forward(scores),
        "causal_softmax_backward": lambda: lane.causal_softmax_backward(probs, probs),
        "adamw_update": lambda: lane.adamw_update(
            param, g, m, v, 1e-4, 0.9, 0.999, 1e-8, 0.01, 0.5, 0.1
        ),
    }


def main() -> None:
    if lane_c is None:
        print("compiled lane not built; showing numpy lane only")
    for dtype in (np.float32, np.float64):
        print(f"\n{dtype.__name__}, batch {BATCH} x {TOKENS} tokens x dim {DIM}, best of {REPEAT}")
        print(f"{'kernel':<26} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
        np_cases = cases(lane_np, dtype)
        c_cases = cases(lane_c, dtype) if lane_c is not None else {}
        for name, np_fn in np_cases.items():
            t_np = timeit(np_fn)
            if name in c_cases:
                t_c = timeit(c_cases[name])
                print(f"{name:<26} {t_np * 1e3:>8.3f}ms {t_c * 1e3:>8.3f}ms {t_np / t_c:>7.2f}x")
            else:
                print(f"{name:<26} {t_np * 1e3:>8.3f}ms {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
