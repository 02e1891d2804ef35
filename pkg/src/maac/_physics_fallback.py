"""Pure-numpy particle integrator, used when the compiled kernel is absent."""
from __future__ import annotations

import numpy as np


def integrate(
    pos: np.ndarray,
    vel: np.ndarray,
    force: np.ndarray,
    radius: np.ndarray,
    movable: np.ndarray,
    collide: np.ndarray,
    dt: float,
    damping: float,
    mass: float,
    max_speed: float,
    contact_stiffness: float,
    arena: float,
    boundary_stiffness: float,
    wall: float,
) -> tuple[np.ndarray, np.ndarray]:
    movable = np.asarray(movable, dtype=bool)
    collide = np.asarray(collide, dtype=bool)
    total = np.array(force, dtype=np.float64, copy=True)

    # pairwise soft contact between overlapping colliding entities
    delta = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(delta * delta, axis=-1))
    reach = radius[:, None] + radius[None, :]
    active = collide[:, None] & collide[None, :] & (dist < reach) & (dist > 0.0)
    np.fill_diagonal(active, False)
    if active.any():
        scale = np.zeros_like(dist)
        scale[active] = contact_stiffness * (reach[active] - dist[active]) / dist[active]
        total += np.sum(scale[:, :, None] * delta, axis=1)

    # soft inward push beyond the arena edge
    over = np.clip(pos - arena, 0.0, None) + np.clip(pos + arena, None, 0.0)
    total -= boundary_stiffness * over

    new_vel = (1.0 - damping) * vel + (total / mass) * dt
    speed = np.sqrt(np.sum(new_vel * new_vel, axis=-1))
    fast = speed > max_speed
    if fast.any():
        new_vel[fast] *= (max_speed / speed[fast])[:, None]
    new_pos = pos + new_vel * dt

    hit = np.abs(new_pos) > wall
    if hit.any():
        new_pos = np.clip(new_pos, -wall, wall)
        new_vel[hit] = 0.0

    new_pos[~movable] = pos[~movable]
    new_vel[~movable] = 0.0
    return new_pos, new_vel
