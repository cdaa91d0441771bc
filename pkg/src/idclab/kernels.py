"""Hot-kernel dispatch: the compiled extension when it imports, else numpy.

Set ``IDC_PURE_PYTHON=1`` before import to force the fallback.
"""

from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("IDC_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback

resize_bilinear = _impl.resize_bilinear
blur_separable = _impl.blur_separable
lcs_length = _impl.lcs_length
lcs_pairwise = _impl.lcs_pairwise
gelu_forward = _impl.gelu_forward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
