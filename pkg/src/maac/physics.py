"""Particle integrator with a compiled kernel and a numpy fallback.

``BACKEND`` reports which one is active. Setting ``MAAC_PURE_PYTHON=1``
forces the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from maac import _physics_fallback

try:
    if os.environ.get("MAAC_PURE_PYTHON"):
        raise ImportError("pure-python mode requested")
    from maac import _physics_ext as _kernel

    BACKEND = "cython"
except ImportError:
    _kernel = _physics_fallback
    BACKEND = "python"


@dataclass(frozen=True)
class PhysicsParams:
    dt: float = 0.1
    damping: float = 0.25
    mass: float = 1.0
    force_gain: float = 5.0
    max_speed: float = 1.0
    contact_stiffness: float = 100.0
    arena: float = 1.0
    boundary_stiffness: float = 10.0
    wall: float = 1.5


def physics_step(
    pos: np.ndarray,
    vel: np.ndarray,
    force: np.ndarray,
    radius: np.ndarray,
    movable: np.ndarray,
    collide: np.ndarray,
    params: PhysicsParams,
    kernel=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance one world by one step; returns new (positions, velocities).

    ``force`` holds the action forces only. Contact and boundary forces are
    added inside the kernel.
    """
    k = _kernel if kernel is None else kernel
    return k.integrate(
        np.ascontiguousarray(pos, dtype=np.float64),
        np.ascontiguousarray(vel, dtype=np.float64),
        np.ascontiguousarray(force, dtype=np.float64),
        np.ascontiguousarray(radius, dtype=np.float64),
        np.asarray(movable, dtype=np.uint8),
        np.asarray(collide, dtype=np.uint8),
        params.dt,
        params.damping,
        params.mass,
        params.max_speed,
        params.contact_stiffness,
        params.arena,
        params.boundary_stiffness,
        params.wall,
    )
