"""Desk-scale multi-view boosting: synthetic multi-view generation, diffusion
refinement, a feed-forward Gaussian reconstructor with LoRA boosting, and
input-view optimization, all on a small numpy autodiff engine."""

import os as _os

# BLAS pools size themselves when numpy loads, so the cap must be set first
if _os.environ.get("MVB_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["MVB_THREADS"])

from .core import CameraPose, GaussianScene, MultiViewSet, ParameterError, Rng, make_canonical_rig

__all__ = ["CameraPose", "GaussianScene", "MultiViewSet", "ParameterError", "Rng", "make_canonical_rig"]
__version__ = "0.1.0"
