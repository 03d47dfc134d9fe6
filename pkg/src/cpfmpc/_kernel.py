"""Compiled horizon cost used inside the optimizer loop.

Mirrors ``mpc._Rollout.run`` step for step (same RK4 update, same Simpson
weights) but loops over scalars, which is much faster than numpy on 3x3
blocks. The numpy rollout remains the reference; tests compare the two.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

PATH_CODES = {"line": 0, "circular-helix": 1, "sinusoid-offset-line": 2}


def path_params(spec) -> tuple:
    return (PATH_CODES[spec.kind], spec.origin, spec.direction, spec.offset, spec.normal,
            np.array([spec.radius, spec.pitch, spec.angular_rate, spec.amplitude, spec.frequency]))


@njit(cache=True)
def _path(code, origin, direction, poff, normal, sc, g, c, dc):
    if code == 0:
        for i in range(3):
            c[i] = origin[i] + g * direction[i]
            dc[i] = direction[i]
    elif code == 1:
        r, pitch, w = sc[0], sc[1], sc[2]
        th = w * g
        ct, st = math.cos(th), math.sin(th)
        c[0] = origin[0] + r * ct
        c[1] = origin[1] + r * st
        c[2] = origin[2] + pitch * th
        dc[0] = -r * w * st
        dc[1] = r * w * ct
        dc[2] = pitch * w
    else:
        a, f = sc[3], sc[4]
        s = a * math.sin(f * g)
        d = a * f * math.cos(f * g)
        for i in range(3):
            c[i] = origin[i] + poff[i] + g * direction[i] + s * normal[i]
            dc[i] = direction[i] + d * normal[i]


@njit(cache=True)
def _reortho(R, out, G):
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += R[k, i] * R[k, j]
            G[i, j] = -acc
        G[i, i] += 3.0
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += R[i, k] * G[k, j]
            out[i, j] = 0.5 * acc


@njit(cache=True)
def batch_cost(U, V, p0, R0, gamma_drift, gamma0, eta0, h, ns, aux_nodes, speed_nodes,
               simpson, Q, Uw, Qc, Uc, m_eta, terminal_coef, K, Dinv, y_switch, offset,
               code, origin, direction, poff, normal, sc, r_eta, envelope, use_envelope,
               y_box, use_ybox, rho):
    B, nseg = V.shape
    f = np.empty(B)
    J = np.empty(B)
    vmax = np.empty(B)
    p = np.empty(3)
    R = np.empty((3, 3))
    Rn = np.empty((3, 3))
    G = np.empty((3, 3))
    M = np.empty((3, 3))
    W = np.zeros((3, 3))
    W2 = np.empty((3, 3))
    W3 = np.empty((3, 3))
    cvec = np.empty(3)
    cd = np.empty(3)
    dcd = np.empty(3)
    y = np.empty(3)
    ff = np.empty(3)
    kv = np.empty(3)
    du = np.empty(3)
    for b in range(B):
        for i in range(3):
            p[i] = p0[i]
            for j in range(3):
                R[i, j] = R0[i, j]
        eta = eta0
        eta_int = 0.0
        max_eta = abs(eta0)
        ybox_v = -1e300
        stage = 0.0
        cons = 0.0
        node = 0
        for s in range(nseg):
            v1 = U[b, s, 0]
            vg = V[b, s]
            W[0, 2] = h * U[b, s, 1]
            W[1, 0] = h * U[b, s, 2]
            W[0, 1] = -h * U[b, s, 2]
            W[2, 0] = -h * U[b, s, 1]
            for i in range(3):
                for j in range(3):
                    a2 = 0.0
                    for k in range(3):
                        a2 += W[i, k] * W[k, j]
                    W2[i, j] = a2
            for i in range(3):
                for j in range(3):
                    a3 = 0.0
                    for k in range(3):
                        a3 += W2[i, k] * W[k, j]
                    W3[i, j] = a3
            for i in range(3):
                for j in range(3):
                    a4 = 0.0
                    for k in range(3):
                        a4 += W3[i, k] * W[k, j]
                    M[i, j] = W[i, j] + W2[i, j] / 2.0 + W3[i, j] / 6.0 + a4 / 24.0
                M[i, i] += 1.0
                cvec[i] = (W[i, 0] / 2.0 + W2[i, 0] / 6.0 + W3[i, 0] / 24.0) * h * v1
            cvec[0] += h * v1
            for j in range(ns + 1):
                if j > 0:
                    # RK4 step
                    eta_new = eta + h * vg
                    eta_int += 0.5 * h * (eta + eta_new)
                    eta = eta_new
                    if abs(eta) > max_eta:
                        max_eta = abs(eta)
                    node += 1
                    for i in range(3):
                        acc = 0.0
                        for k in range(3):
                            acc += R[i, k] * cvec[k]
                        p[i] += acc
                    for i in range(3):
                        for jj in range(3):
                            acc = 0.0
                            for k in range(3):
                                acc += R[i, k] * M[k, jj]
                            Rn[i, jj] = acc
                    _reortho(Rn, R, G)
                gamma = gamma0 + gamma_drift[node] + eta_int
                _path(code, origin, direction, poff, normal, sc, gamma, cd, dcd)
                ug = aux_nodes[s, j] + eta
                speed = speed_nodes[s, j] + ug
                ny2 = 0.0
                for i in range(3):
                    acc = 0.0
                    acc2 = 0.0
                    for k in range(3):
                        acc += R[k, i] * (p[k] - cd[k])
                        acc2 += R[k, i] * dcd[k]
                    y[i] = acc + offset[i]
                    ff[i] = acc2 * speed
                    ny2 += y[i] * y[i]
                ny = math.sqrt(ny2)
                den = ny if ny > y_switch else y_switch
                for i in range(3):
                    acc = 0.0
                    for k in range(3):
                        acc += K[i, k] * y[k]
                    kv[i] = ff[i] - acc / den
                for i in range(3):
                    acc = 0.0
                    for k in range(3):
                        acc += Dinv[i, k] * kv[k]
                    du[i] = U[b, s, i] - acc
                l = 0.0
                for i in range(3):
                    for k in range(3):
                        l += y[i] * Q[i, k] * y[k] + du[i] * Uw[i, k] * du[k]
                stage += simpson[j] * l
                cons += simpson[j] * (Qc * eta * eta + Uc * vg * vg)
                if use_ybox:
                    for i in range(3):
                        v = abs(y[i]) - y_box[i]
                        if v > ybox_v:
                            ybox_v = v
        terminal = terminal_coef * ny ** 3
        cterm = 0.5 * m_eta * eta * eta
        Jb = stage + terminal + cons + cterm
        pen = 0.0
        worst = abs(eta) - r_eta
        if worst > 0:
            pen += worst * worst
        if use_envelope:
            ve = max_eta - envelope
            if ve > 0:
                pen += ve * ve
            if ve > worst:
                worst = ve
        if use_ybox:
            if ybox_v > 0:
                pen += ybox_v * ybox_v
            if ybox_v > worst:
                worst = ybox_v
        J[b] = Jb
        f[b] = Jb + rho * pen
        vmax[b] = worst
    return f, J, vmax


def stacked_path_params(specs) -> tuple:
    """Per-agent path parameters stacked along a leading axis."""
    parts = [path_params(s) for s in specs]
    return (np.array([q[0] for q in parts], dtype=np.int64),
            *(np.stack([q[k] for q in parts]) for k in range(1, 6)))


@njit(cache=True)
def aux_law_batch(p, R, gamma, speed, codes, origins, directions, poffs, normals, scs, Ks,
                  Dinvs, y_switch, offsets):
    """Auxiliary law for ``A`` agents that each follow their own path."""
    A = p.shape[0]
    u = np.empty((A, 3))
    cd = np.empty(3)
    dcd = np.empty(3)
    y = np.empty(3)
    kv = np.empty(3)
    for a in range(A):
        _path(codes[a], origins[a], directions[a], poffs[a], normals[a], scs[a], gamma[a], cd, dcd)
        ny2 = 0.0
        for i in range(3):
            acc = 0.0
            for k in range(3):
                acc += R[a, k, i] * (p[a, k] - cd[k])
            y[i] = acc + offsets[a, i]
            ny2 += y[i] * y[i]
        ny = math.sqrt(ny2)
        den = ny if ny > y_switch[a] else y_switch[a]
        for i in range(3):
            ff = 0.0
            fb = 0.0
            for k in range(3):
                ff += R[a, k, i] * dcd[k]
                fb += Ks[a, i, k] * y[k]
            kv[i] = ff * speed[a] - fb / den
        for i in range(3):
            acc = 0.0
            for k in range(3):
                acc += Dinvs[a, i, k] * kv[k]
            u[a, i] = acc
    return u
