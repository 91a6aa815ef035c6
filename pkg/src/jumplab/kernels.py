"""Backend selection for the hot loops.

The compiled ``_core`` extension is used when it imports; otherwise, or when the
environment variable ``JUMPLAB_PURE=1`` is set, the numpy fallback in ``_pure``
is used. ``BACKEND`` names the active one.
"""

import os

from . import _pure

if os.environ.get("JUMPLAB_PURE") == "1":
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _pure
        BACKEND = "pure"

bipower_sigma = _impl.bipower_sigma
ema_carry = _impl.ema_carry
hawkes_thinning = _impl.hawkes_thinning

__all__ = ["BACKEND", "bipower_sigma", "ema_carry", "hawkes_thinning"]
