"""Norm-inflation laboratory for the 3D inhomogeneous Navier-Stokes equations."""

__version__ = "0.1.0"
