"""Kernel backend selection.

The compiled extension is preferred when it imports cleanly; otherwise the
numpy reference kernels are used. ``CONDSIM_BACKEND=python`` forces the
fallback (useful for benchmarking and parity tests), ``=compiled`` makes a
missing extension an error instead of a silent downgrade.

Both backends are numerically interchangeable but not guaranteed bit-identical
to each other; a given backend is bit-deterministic run to run, which is what
the reproducibility guarantees are stated against.
"""

import os

from condsim import kernels_np

KERNEL_NAMES = [
    "affine_fwd",
    "affine_bwd",
    "relu_fwd",
    "relu_bwd",
    "residual_fwd",
    "residual_bwd",
    "sqdist_diff_fwd",
    "sqdist_diff_bwd",
    "maxpool_fwd",
    "maxpool_bwd",
    "cosine_fwd",
    "cosine_bwd",
    "softmax_fwd",
    "softmax_bwd",
]


def available_backends():
    names = ["python"]
    try:
        import condsim._speedups  # noqa: F401
    except ImportError:
        pass
    else:
        names.append("compiled")
    return names


def load_backend(name):
    """Return (module, resolved_name) for ``name`` in {auto, python, compiled}."""
    if name == "python":
        return kernels_np, "python"
    try:
        from condsim import _speedups
    except ImportError:
        if name == "compiled":
            raise ImportError(
                "compiled kernels requested but condsim._speedups is not built"
            )
        return kernels_np, "python"
    return _speedups, "compiled"


_requested = os.environ.get("CONDSIM_BACKEND", "auto")
kernels, BACKEND = load_backend(_requested)
