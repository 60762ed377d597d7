"""Reasoning-QAT workbench: Python surface over the C++ core.

The native module ``rqat._core`` carries all functionality; this package
re-exports it and adds nothing else.
"""

import os
import sys

try:
    from rqat._core import *  # noqa: F401,F403
    from rqat._core import __doc__ as _core_doc
except ImportError:  # pragma: no cover - dev-tree fallback
    # In-tree test runs set RQAT_CORE_DIR to the CMake build directory that
    # holds the extension; fall back to importing it from there.
    _core_dir = os.environ.get("RQAT_CORE_DIR")
    if not _core_dir:
        raise
    sys.path.insert(0, _core_dir)
    from _core import *  # noqa: F401,F403
    from _core import __doc__ as _core_doc

__doc__ = (__doc__ or "") + "\n\n" + (_core_doc or "")
