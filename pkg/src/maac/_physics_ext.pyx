# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled particle integrator; same contract as ``_physics_fallback.integrate``."""
import numpy as np
from libc.math cimport sqrt, fabs


def integrate(
    double[:, ::1] pos,
    double[:, ::1] vel,
    double[:, ::1] force,
    double[::1] radius,
    movable,
    collide,
    double dt,
    double damping,
    double mass,
    double max_speed,
    double contact_stiffness,
    double arena,
    double boundary_stiffness,
    double wall,
):
    cdef Py_ssize_t n = pos.shape[0]
    cdef unsigned char[::1] mov = np.ascontiguousarray(movable, dtype=np.uint8)
    cdef unsigned char[::1] col = np.ascontiguousarray(collide, dtype=np.uint8)
    out_pos_arr = np.empty((n, 2), dtype=np.float64)
    out_vel_arr = np.empty((n, 2), dtype=np.float64)
    total_arr = np.array(force, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] out_pos = out_pos_arr
    cdef double[:, ::1] out_vel = out_vel_arr
    cdef double[:, ::1] total = total_arr
    cdef Py_ssize_t i, j, k
    cdef double dx, dy, dist, reach, s, speed, p, v

    with nogil:
        for i in range(n):
            if not col[i]:
                continue
            for j in range(i + 1, n):
                if not col[j]:
                    continue
                dx = pos[i, 0] - pos[j, 0]
                dy = pos[i, 1] - pos[j, 1]
                dist = sqrt(dx * dx + dy * dy)
                reach = radius[i] + radius[j]
                if dist < reach and dist > 0.0:
                    s = contact_stiffness * (reach - dist) / dist
                    total[i, 0] += s * dx
                    total[i, 1] += s * dy
                    total[j, 0] -= s * dx
                    total[j, 1] -= s * dy

        for i in range(n):
            if not mov[i]:
                out_pos[i, 0] = pos[i, 0]
                out_pos[i, 1] = pos[i, 1]
                out_vel[i, 0] = 0.0
                out_vel[i, 1] = 0.0
                continue
            for k in range(2):
                p = pos[i, k]
                if p > arena:
                    total[i, k] -= boundary_stiffness * (p - arena)
                elif p < -arena:
                    total[i, k] -= boundary_stiffness * (p + arena)
                out_vel[i, k] = (1.0 - damping) * vel[i, k] + (total[i, k] / mass) * dt
            speed = sqrt(out_vel[i, 0] * out_vel[i, 0] + out_vel[i, 1] * out_vel[i, 1])
            if speed > max_speed:
                out_vel[i, 0] *= max_speed / speed
                out_vel[i, 1] *= max_speed / speed
            for k in range(2):
                p = pos[i, k] + out_vel[i, k] * dt
                if fabs(p) > wall:
                    p = wall if p > 0 else -wall
                    out_vel[i, k] = 0.0
                out_pos[i, k] = p
    return out_pos_arr, out_vel_arr
