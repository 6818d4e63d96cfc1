"""Kernel backend selection: compiled extension if available, numpy otherwise.

Set SPLATGROW_FORCE_FALLBACK=1 to force the pure-Python kernels (used by the
parity tests and the benchmark). Both backends expose the same functions with
identical semantics; the compiled one is just fast and thread-parallel.
"""

from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("SPLATGROW_FORCE_FALLBACK", "") == "1":
    _impl = _pykernels
else:
    try:
        from . import _cykernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pykernels

build_fragments = _impl.build_fragments
composite = _impl.composite
masked_loss = _impl.masked_loss
masked_loss_grad = _impl.masked_loss_grad
weight_mass = _impl.weight_mass
occlusion_pair_sum = _impl.occlusion_pair_sum


def backend_name() -> str:
    return _impl.BACKEND


def get_backends() -> dict:
    """All importable backends, keyed by name (for parity tests and benchmarks)."""
    out = {"python": _pykernels}
    try:
        from . import _cykernels

        out["compiled"] = _cykernels
    except ImportError:
        pass
    return out
