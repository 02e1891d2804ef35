"""Time one physics step with the compiled kernel and the numpy fallback.

Usage: python benchmarks/bench_physics.py [--steps 20000] [--sizes 4,8,16,32,64]

Both kernels first run on identical inputs and must agree to 1e-12; then
each is timed on the same random worlds.  Timings are microseconds per step.
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from maac import _physics_fallback, physics
from maac.physics import PhysicsParams


def world(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1.2, 1.2, size=(n, 2))
    vel = rng.uniform(-0.5, 0.5, size=(n, 2))
    force = rng.uniform(-5, 5, size=(n, 2))
    radius = np.full(n, 0.08)
    movable = np.ones(n, dtype=np.uint8)
    collide = np.ones(n, dtype=np.uint8)
    return pos, vel, force, radius, movable, collide


def per_step_us(kernel, args, prm: PhysicsParams, steps: int) -> float:
    p = (prm.dt, prm.damping, prm.mass, prm.max_speed, prm.contact_stiffness,
         prm.arena, prm.boundary_stiffness, prm.wall)
    timer = timeit.Timer(lambda: kernel.integrate(*args, *p))
    best = min(timer.repeat(repeat=3, number=steps))
    return 1e6 * best / steps


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--sizes", default="4,8,16,32,64")
    args = ap.parse_args(argv)
    if physics.BACKEND != "cython":
        print("compiled kernel not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    from maac import _physics_ext

    prm = PhysicsParams()
    print(f"{'entities':>8} {'cython us':>10} {'numpy us':>10} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        w = world(n)
        a = _physics_ext.integrate(*w, prm.dt, prm.damping, prm.mass, prm.max_speed,
                                   prm.contact_stiffness, prm.arena, prm.boundary_stiffness, prm.wall)
        b = _physics_fallback.integrate(*w, prm.dt, prm.damping, prm.mass, prm.max_speed,
                                        prm.contact_stiffness, prm.arena, prm.boundary_stiffness, prm.wall)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, atol=1e-12, rtol=0)
        fast = per_step_us(_physics_ext, w, prm, args.steps)
        slow = per_step_us(_physics_fallback, w, prm, args.steps)
        print(f"{n:>8} {fast:>10.2f} {slow:>10.2f} {slow / fast:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
