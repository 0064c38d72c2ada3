"""Deterministic moment-matching inference and training for graph deep
state-space models: multimodal Gaussian-mixture forecasts over multi-agent
trajectories, computed without sampling."""

import os
import sys

_ext_dir = os.environ.get("GDSSM_EXT_DIR")
if _ext_dir and _ext_dir not in sys.path:
    sys.path.insert(0, _ext_dir)

try:
    from _core import *  # type: ignore  # build-tree layout (GDSSM_EXT_DIR)
    from _core import __version__  # type: ignore
except ImportError:
    from gdssm._core import *  # type: ignore  # installed wheel layout
    from gdssm._core import __version__  # type: ignore
