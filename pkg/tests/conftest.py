"""Shared meshes and potential solves for the test suite."""

from dataclasses import dataclass

import pytest

from src.geometry import (
    ControlBasis, SurfaceMesh, axis_control_regions, body_inertia, build_ellipsoid_mesh, build_sphere_mesh,
    make_control_basis,
)
from src.potential import AddedMassSet, ExteriorNeumannSolver, PotentialTables, assemble_matrices, kirchhoff_tables


@dataclass
class Model:
    mesh: SurfaceMesh
    controls: ControlBasis
    tables: PotentialTables
    mats: AddedMassSet


def build_model(mesh: SurfaceMesh, regions=None) -> Model:
    controls = make_control_basis(mesh, regions) if regions else None
    solver = ExteriorNeumannSolver(mesh)
    tables = kirchhoff_tables(mesh, controls, solver=solver)
    mats = assemble_matrices(tables, controls, body_inertia(mesh))
    return Model(mesh=mesh, controls=controls, tables=tables, mats=mats)


@pytest.fixture(scope='session')
def sphere_coarse() -> Model:
    """80-panel unit sphere with three axis patches."""
    return build_model(build_sphere_mesh(1.0, 1), axis_control_regions(0.6))


@pytest.fixture(scope='session')
def sphere_medium() -> Model:
    """320-panel unit sphere with six patches."""
    return build_model(build_sphere_mesh(1.0, 2), axis_control_regions(0.35, diagonals=True))


@pytest.fixture(scope='session')
def sphere_fine() -> Model:
    """1280-panel unit sphere without controls."""
    return build_model(build_sphere_mesh(1.0, 3))


@pytest.fixture(scope='session')
def ellipsoid_six() -> Model:
    """320-panel (1.2, 1, 0.8) ellipsoid with six patches; every rigid mode is linearly controllable."""
    return build_model(build_ellipsoid_mesh([1.2, 1.0, 0.8], 2), axis_control_regions(0.35, diagonals=True))
