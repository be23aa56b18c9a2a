"""Numerical laboratory for long-time wavefront transport on a compact
hyperbolic surface and the random plane-wave statistics it produces.

Geometry lives on the Poincare disk with the Bolza (genus 2) deck group;
wave states are transported along geodesic characteristics with closed-form
Riccati/Jacobian laws, decomposed into arrival branches at observation
points, and compared against isotropic Gaussian field targets.
"""

__version__ = "0.1.0"

from hypwave.disk import (
    DiskPoint,
    MobiusMap,
    TangentVector,
    Frame,
    DeckGroup,
    GeometryError,
    hyperbolic_distance,
    exp_map,
    widetilde_exp,
)
from hypwave.flow import PhasePoint, WavefrontShape, geodesic_flow, riccati_evolve, jacobian_along

__all__ = [
    "DiskPoint",
    "MobiusMap",
    "TangentVector",
    "Frame",
    "DeckGroup",
    "GeometryError",
    "PhasePoint",
    "WavefrontShape",
    "hyperbolic_distance",
    "exp_map",
    "widetilde_exp",
    "geodesic_flow",
    "riccati_evolve",
    "jacobian_along",
    "__version__",
]
