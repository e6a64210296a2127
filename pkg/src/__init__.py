"""
Rigid body with vorticity in an ideal fluid.

Boundary-element Kirchhoff potentials and added mass, the controlled
potential-flow dynamics, Lagrangian vorticity markers coupled to the body
through a fixed-point solve, pressure and loads, residual checks, and
steering by boundary controls with time scaling.
"""

__version__ = "0.1.0"
