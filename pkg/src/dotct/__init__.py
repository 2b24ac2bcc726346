"""Spatiotemporal CT: joint template and mass-preserving flow reconstruction from gated projections."""

from .fields import Grid, ScalarField, TimeGrid, VectorField, make_grid
from .flow import VelocityField, back_transport, eta, jac_det_sequence, push_forward
from .projector import Geometry, Sinogram, add_noise, adjoint, forward
from .rkhs import make_kernel_op
from .solver import Problem, Solution, SolverConfig, WarmStart, alternate

__all__ = ["Grid", "ScalarField", "TimeGrid", "VectorField", "make_grid", "VelocityField",
           "back_transport", "eta", "jac_det_sequence", "push_forward", "Geometry", "Sinogram",
           "add_noise", "adjoint", "forward", "make_kernel_op", "Problem", "Solution",
           "SolverConfig", "WarmStart", "alternate"]
