"""Independent reference implementations used by unit and acceptance tests.

Both are written with plain Python loops and floats so they share no code
path with the vectorised package implementations they check.
"""
import math

import numpy as np

from maac.physics import PhysicsParams


def straight_line_q(critic, i, obs, acts):
    """Values of agent i's actions for ONE sample, evaluated term by term.

    Written without the package's numeric helpers: embeddings, bilinear
    query-key scores, softmax and weighted values are spelled out per agent.
    """
    def lrelu(v):
        return np.array([x if x > 0 else 0.01 * x for x in v])

    n = critic.n_agents
    emb = {}
    for j in range(n):
        onehot = np.zeros(critic.action_dims[j])
        onehot[acts[j]] = 1.0
        inp = np.concatenate([obs[j], onehot])
        layer = critic.enc_sa[j]
        emb[j] = lrelu(inp @ layer.W.value + layer.b.value[0])
    layer = critic.enc_obs[i]
    e_i = lrelu(obs[i] @ layer.W.value + layer.b.value[0])
    pieces = [e_i]
    for h in range(critic.heads):
        Wq, Wk, Wv = critic.W_q[h].value, critic.W_k[h].value, critic.W_v[h].value
        others = [j for j in range(n) if j != i]
        scores = []
        for j in others:
            scores.append(float(emb[j] @ Wk @ (Wq.T @ e_i)) / math.sqrt(Wq.shape[1]))
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        tot = sum(ex)
        x = np.zeros(Wv.shape[1])
        for j, w in zip(others, ex):
            x = x + (w / tot) * lrelu(emb[j] @ Wv)
        pieces.append(x)
    h_in = np.concatenate(pieces)
    hid = lrelu(h_in @ critic.f1[i].W.value + critic.f1[i].b.value[0])
    return hid @ critic.f2[i].W.value + critic.f2[i].b.value[0]


def scalar_integrate(pos, vel, force, radius, movable, collide, prm: PhysicsParams):
    """Reference integrator written with plain floats, one entity at a time."""
    n = len(pos)
    fx = [float(force[i][0]) for i in range(n)]
    fy = [float(force[i][1]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if not (collide[i] and collide[j]):
                continue
            dx = pos[i][0] - pos[j][0]
            dy = pos[i][1] - pos[j][1]
            dist = math.sqrt(dx * dx + dy * dy)
            reach = radius[i] + radius[j]
            if 0.0 < dist < reach:
                s = prm.contact_stiffness * (reach - dist) / dist
                fx[i] += s * dx
                fy[i] += s * dy
                fx[j] -= s * dx
                fy[j] -= s * dy
    new_pos, new_vel = [], []
    for i in range(n):
        if not movable[i]:
            new_pos.append((pos[i][0], pos[i][1]))
            new_vel.append((0.0, 0.0))
            continue
        f = [fx[i], fy[i]]
        v = []
        for k in range(2):
            p = pos[i][k]
            if p > prm.arena:
                f[k] -= prm.boundary_stiffness * (p - prm.arena)
            elif p < -prm.arena:
                f[k] -= prm.boundary_stiffness * (p + prm.arena)
            v.append((1 - prm.damping) * vel[i][k] + f[k] / prm.mass * prm.dt)
        speed = math.hypot(v[0], v[1])
        if speed > prm.max_speed:
            v = [c * prm.max_speed / speed for c in v]
        p_new = []
        for k in range(2):
            p = pos[i][k] + v[k] * prm.dt
            if abs(p) > prm.wall:
                p = math.copysign(prm.wall, p)
                v[k] = 0.0
            p_new.append(p)
        new_pos.append(tuple(p_new))
        new_vel.append(tuple(v))
    return np.array(new_pos), np.array(new_vel)
