"""Pure numpy rollout kernel, vectorized over candidates, members, particles.

Reference semantics for the compiled core; see the package docstring for the
contract. Rows follow the layout (B, M*Q) with particle index r = m*Q + q.
"""

from __future__ import annotations

import numpy as np


def _layer_views(theta: np.ndarray, dims: np.ndarray):
    """Split packed member parameters into per-layer weight and bias views."""
    views = []
    off = 0
    b_count = theta.shape[0]
    for l in range(len(dims) - 1):
        n_in, n_out = int(dims[l]), int(dims[l + 1])
        w = theta[:, off:off + n_in * n_out].reshape(b_count, n_in, n_out)
        off += n_in * n_out
        bias = theta[:, off:off + n_out]
        off += n_out
        views.append((w, bias))
    return views


def _rewards(env_id: int, pole_length: float, obs: np.ndarray, u: np.ndarray) -> np.ndarray:
    if env_id == 0:
        theta = np.arctan2(obs[..., 1], obs[..., 0])
        return -(theta ** 2 + 0.1 * obs[..., 2] ** 2 + 0.001 * u ** 2)
    tip_x = obs[..., 0] + pole_length * obs[..., 3]
    tip_y = pole_length * obs[..., 2]
    dist_sq = tip_x ** 2 + (tip_y - pole_length) ** 2
    return np.exp(-dist_sq / (0.5 * pole_length) ** 2) - 0.01 * u ** 2


def rollout_returns(theta, dims, input_mean, input_std, target_mean, target_std,
                    log_target_var, start_obs, seqs, normals, gamma, env_id,
                    angle_pair, pole_length, min_rew, logvar_min, logvar_max,
                    with_scores, threads=1):
    """Propagate all particles for all candidates; return per-candidate,
    per-member mean discounted returns ``j (M, B)`` and score-weighted
    reward-to-go gradient accumulations ``g (M, B, 2*D)``."""
    del threads  # numpy path delegates threading to BLAS
    theta = np.asarray(theta)
    seqs = np.asarray(seqs)
    normals = np.asarray(normals)
    b_count = theta.shape[0]
    m_count, horizon = seqs.shape
    q_count = normals.shape[2]
    d = start_obs.size
    rows = m_count * q_count
    layers = _layer_views(theta, dims)

    obs = np.broadcast_to(start_obs, (b_count, rows, d)).copy()
    alive = np.ones((b_count, rows), dtype=bool)
    rbuf = np.empty((horizon, b_count, rows))
    sbuf = np.zeros((horizon, b_count, rows, 2 * d)) if with_scores else None

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(horizon):
            u = np.repeat(seqs[:, k], q_count)
            r = _rewards(env_id, pole_length, obs, u)
            ok_r = np.isfinite(r)
            if with_scores and k >= 1:
                # a reward overflow kills the particle; the score that led
                # into the dead state is dropped with it
                sbuf[k][alive & ~ok_r] = 0.0
            rbuf[k] = np.where(alive & ok_r, r, min_rew)
            alive &= ok_r
            if k == horizon - 1:
                break
            x = np.concatenate(
                [obs, np.broadcast_to(u, (b_count, rows))[..., None]], axis=-1)
            h = (x - input_mean) / input_std
            for l, (w, bias) in enumerate(layers):
                z = np.matmul(h, w) + bias[:, None, :]
                if l < len(layers) - 1:
                    h = z / (1.0 + np.exp(-z))
                else:
                    h = z
            mean = target_mean + target_std * h[..., :d]
            logvar = np.clip(h[..., d:] + log_target_var, logvar_min, logvar_max)
            sig = np.exp(0.5 * logvar)
            z_draw = normals[:, :, :, k, :].transpose(1, 0, 2, 3).reshape(b_count, rows, d)
            nxt = obs + mean + sig * z_draw
            if angle_pair >= 0:
                c = nxt[..., angle_pair]
                s = nxt[..., angle_pair + 1]
                scale = np.hypot(c, s)
                nxt[..., angle_pair] = c / scale
                nxt[..., angle_pair + 1] = s / scale
            ok = np.all(np.isfinite(nxt), axis=-1)
            if with_scores:
                valid = (alive & ok)[..., None]
                sbuf[k + 1, ..., :d] = np.where(valid, z_draw / sig, 0.0)
                sbuf[k + 1, ..., d:] = np.where(valid, 0.5 * (z_draw ** 2 - 1.0), 0.0)
            alive &= ok
            obs = np.where(alive[..., None], nxt, obs)

    disc = gamma ** np.arange(horizon)
    totals = np.tensordot(disc, rbuf, axes=(0, 0))  # (B, rows)
    j = totals.reshape(b_count, m_count, q_count).mean(axis=2).T

    g = np.zeros((m_count, b_count, 2 * d))
    if with_scores and horizon >= 2:
        acc = np.zeros((b_count, rows, 2 * d))
        togo = np.zeros((b_count, rows))
        for k in range(horizon - 1, 0, -1):
            togo = rbuf[k] + gamma * togo
            acc += disc[k] * sbuf[k] * togo[..., None]
        g = acc.reshape(b_count, m_count, q_count, 2 * d).mean(axis=2).transpose(1, 0, 2)
    return j, g
