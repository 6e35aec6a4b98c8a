"""Backend selection for the hot loops.

The compiled ``_kernels`` extension is used when it was built; otherwise the
numpy implementation in ``_fallback`` is used.  Setting ``RULEKG_PURE_PYTHON=1``
forces the fallback.
"""

from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("RULEKG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback

kge_forward = _impl.kge_forward
kge_backward = _impl.kge_backward
rule_forward = _impl.rule_forward
rule_backward = _impl.rule_backward
walk_counts = _impl.walk_counts
adam_step = _impl.adam_step

__all__ = ["BACKEND", "kge_forward", "kge_backward", "rule_forward", "rule_backward", "walk_counts", "adam_step"]
