"""Select the forest kernel backend at import time.

The compiled extension is used when it imports; ``MERFAGG_PURE_PYTHON=1``
forces the numpy fallback.
"""

import logging
import os

from . import _forest_py

logger = logging.getLogger(__name__)

if os.environ.get("MERFAGG_PURE_PYTHON", "") not in ("", "0"):
    kernels = _forest_py
else:
    try:
        from . import _forest_cy as kernels
    except ImportError:
        logger.warning("compiled forest kernel unavailable; using numpy fallback")
        kernels = _forest_py

BACKEND = "cython" if kernels is not _forest_py else "python"
