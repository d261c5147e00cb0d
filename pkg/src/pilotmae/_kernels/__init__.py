"""Kernel backend selection.

The compiled extension is preferred; the NumPy implementation is the fallback
when the extension was not built. Set PILOTMAE_KERNELS=py or =cy to force a
backend (cy raises if the extension is unavailable).
"""
import os

_requested = os.environ.get("PILOTMAE_KERNELS", "auto")

if _requested == "py":
    from . import _npk as _impl

    BACKEND = "numpy"
elif _requested == "cy":
    from . import _cyk as _impl  # type: ignore[no-redef]

    BACKEND = "cython"
elif _requested == "auto":
    try:
        from . import _cyk as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        from . import _npk as _impl  # type: ignore[no-redef]

        BACKEND = "numpy"
else:
    raise RuntimeError(f"PILOTMAE_KERNELS must be auto|py|cy, got {_requested!r}")

bmm_nt = _impl.bmm_nt
softmax_rows = _impl.softmax_rows
softmax_rows_bwd = _impl.softmax_rows_bwd
layernorm_rows = _impl.layernorm_rows
gelu = _impl.gelu
gelu_bwd = _impl.gelu_bwd
adamw_update = _impl.adamw_update
