"""Rasterization kernels: compiled core with a pure-numpy fallback.

Both backends implement the same two entry points:

``forward(width, height, tile, mu, conic, color, alpha, vel, tile_idx,
tile_start, e_offsets, t_ro)`` returns the exposure-averaged linear image.

``backward(..., d_image)`` returns per-splat gradients (d_mu, d_conic,
d_color, d_alpha, d_vel) for the same inputs.

Splat arrays arrive depth-sorted; ``tile_idx``/``tile_start`` give each
tile's splat list in that order. Set ``SPLATMO_KERNEL=python`` or
``=cython`` to force a backend.
"""

import importlib
import os

# Blending thresholds shared by every implementation (the compiled core
# hardcodes the same values; parity tests compare the backends).
ALPHA_CLIP = 0.999  # per-sample opacity ceiling
ALPHA_SKIP = 1.0 / 255.0  # contributions below this are dropped
TRANSMITTANCE_EXIT = 1e-4  # stop blending once this opaque

from . import numpy_backend

_forced = os.environ.get("SPLATMO_KERNEL", "").strip().lower()
if _forced not in ("", "cython", "python"):
    raise ValueError(
        f"SPLATMO_KERNEL must be 'cython' or 'python', got {_forced!r}"
    )

_core = None
if _forced != "python":
    # importlib avoids the ``from . import`` attribute-cache shortcut,
    # which would bind the placeholder above instead of the submodule
    try:
        _core = importlib.import_module("._core", __name__)
    except ImportError:
        _core = None
    if _forced == "cython" and _core is None:
        raise ImportError(
            "SPLATMO_KERNEL=cython but the compiled core is not built"
        )

if _core is not None:
    backend_name = "cython"
    forward = _core.forward
    backward = _core.backward
else:
    backend_name = "python"
    forward = numpy_backend.forward
    backward = numpy_backend.backward
