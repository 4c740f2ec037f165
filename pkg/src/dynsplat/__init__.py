"""Dynamic 3D Gaussian splatting with depth supervision, CPU scale."""

__version__ = "0.1.0"

from .core import (CameraModel, Gaussian, GaussianCloud, build_covariance,
                   evaluate_gaussian, project_covariance)
from .deform import DeformBank, basis_eval, deform_gaussians, deform_offset
from .render import (RenderOutput, SplatPrimitives, cull_and_project,
                     rasterize, rasterize_backward, reference_render)

__all__ = [
    "CameraModel", "Gaussian", "GaussianCloud", "DeformBank",
    "RenderOutput", "SplatPrimitives",
    "build_covariance", "evaluate_gaussian", "project_covariance",
    "basis_eval", "deform_offset", "deform_gaussians",
    "cull_and_project", "rasterize", "rasterize_backward", "reference_render",
]
