"""Rotationally symmetric self-expanders of mean curvature flow.

Profile-curve solvers, stability spectra, weighted-entropy machinery, and a
discrete mountain-pass search that finds an unstable expander trapped
between two strictly stable ones, together with a certified lower bound on
the min-max gap.
"""

from .geometry import (AmbientConfig, Cone, ProfileCurve, TestFunction,
                       compute_frames, make_cutoff, relative_entropy,
                       weighted_functional, weighted_volume)
from .ode import ExpanderSolution, ShootingConfig, shoot_annulus, shoot_disk

__version__ = "0.1.0"

__all__ = [
    "AmbientConfig", "Cone", "ProfileCurve", "TestFunction",
    "compute_frames", "make_cutoff", "relative_entropy",
    "weighted_functional", "weighted_volume",
    "ExpanderSolution", "ShootingConfig", "shoot_annulus", "shoot_disk",
    "__version__",
]
