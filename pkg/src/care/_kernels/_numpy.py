"""Vectorized numpy versions of the hot loops.

Every function here has a loop twin in ``_jit.py`` with the same
signature; both consume the same pre-drawn uniforms so they return the
same samples.
"""

import numpy as np


def zscore_rows(R, eps):
    mu = R.mean(axis=1, keepdims=True)
    sd = np.sqrt(((R - mu) ** 2).mean(axis=1, keepdims=True)) + eps
    return (R - mu) / sd


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _log_softmax_rows(Z):
    m = Z.max(axis=-1, keepdims=True)
    return Z - m - np.log(np.exp(Z - m).sum(axis=-1, keepdims=True))


def apply_op(op, c, v, V):
    return np.where(op == 0, (v + c) % V, np.where(op == 1, (v * c) % V, (v - c) % V))


def sample_chains(Z, gates, inv_temp, x0, opc, opr, u_gate, u_val, max_fill):
    """Sample N chains of L steps.

    Returns ``values`` (N, L; -1 marks an abstained answer), ``fills``
    (N, L-1), ``states`` (N, L), ``lp_fill`` (L-1,) log-prob of one filler
    per think step, and ``lp_val`` (N, L) log-prob of the value/abstain
    action at each step (gate term included).
    """
    N, L = opc.shape
    V = Z.shape[1]
    values = np.empty((N, L), np.int64)
    fills = np.zeros((N, max(L - 1, 0)), np.int64)
    states = np.empty((N, L), np.int64)
    lp_val = np.empty((N, L))
    lp_fill = np.empty(max(L - 1, 0))
    prev = x0.astype(np.int64).copy()
    rows = np.arange(N)
    for k in range(L):
        s = (opc[:, k] * V + opr[:, k]) * V + prev
        states[:, k] = s
        z = Z[s] * inv_temp
        logp = _log_softmax_rows(z)
        cdf = np.cumsum(np.exp(logp), axis=1)
        pick = (u_val[:, k, None] >= cdf).sum(axis=1)
        pick = np.minimum(pick, V - 1)
        lv = logp[rows, pick]
        g = gates[k] * inv_temp
        if k < L - 1:
            lp_fill[k] = _log_sigmoid(g)
            pf = 1.0 / (1.0 + np.exp(-g))
            fire = u_gate[:, k, :max_fill] < pf
            # fillers = length of the leading run of gate firings
            run = np.cumprod(fire, axis=1).sum(axis=1) if max_fill > 0 else np.zeros(N, np.int64)
            fills[:, k] = run
            lv = lv + np.where(run < max_fill, _log_sigmoid(-g), 0.0)
            values[:, k] = pick
            prev = pick
        else:
            pa = 1.0 / (1.0 + np.exp(-g))
            abstain = u_gate[:, k, 0] < pa
            values[:, k] = np.where(abstain, -1, pick)
            lv = np.where(abstain, _log_sigmoid(g), lv + _log_sigmoid(-g))
        lp_val[:, k] = lv
    return values, fills, states, lp_fill, lp_val


def token_logprob(Z, gates, inv_temp, ctx_state, ctx_gate, action):
    """Log-probability of each generated token under the table.

    ``action == -1`` marks a gate firing (filler or abstain); ``ctx_gate
    == -1`` marks a value emitted after the filler cap, where the gate
    plays no part.
    """
    z = Z[ctx_state] * inv_temp
    lsm = _log_softmax_rows(z)
    g = np.where(ctx_gate >= 0, gates[np.maximum(ctx_gate, 0)] * inv_temp, 0.0)
    fired = action < 0
    val = lsm[np.arange(len(action)), np.maximum(action, 0)]
    lp_proceed = np.where(ctx_gate >= 0, _log_sigmoid(-g), 0.0)
    return np.where(fired, _log_sigmoid(g), lp_proceed + val)


def surrogate_loss_grad(Z, gates, Zr, gates_r, inv_temp, ctx_state, ctx_gate, action,
                        adv, old_lp, n_credit, clip_low, clip_high, beta):
    """Clipped surrogate plus beta * mean position KL, with analytic gradients.

    Returns ``(loss_pg, kl, gZ, gG, clipped)`` where ``clipped`` flags
    tokens whose clipped branch is strictly smaller than the unclipped one.
    """
    n = len(action)
    gZ = np.zeros_like(Z)
    gG = np.zeros_like(gates)
    if n == 0:
        return 0.0, 0.0, gZ, gG, np.zeros(0, np.bool_)
    rows = np.arange(n)
    z = Z[ctx_state] * inv_temp
    lsm = _log_softmax_rows(z)
    p = np.exp(lsm)
    has_gate = ctx_gate >= 0
    gidx = np.maximum(ctx_gate, 0)
    g = np.where(has_gate, gates[gidx] * inv_temp, 0.0)
    sg = np.where(has_gate, 1.0 / (1.0 + np.exp(-g)), 0.0)
    fired = action < 0
    act = np.maximum(action, 0)
    logp = np.where(fired, _log_sigmoid(g), np.where(has_gate, _log_sigmoid(-g), 0.0) + lsm[rows, act])

    ratio = np.exp(logp - old_lp)
    clipped_ratio = np.clip(ratio, 1.0 - clip_low, 1.0 + clip_high)
    un = ratio * adv
    cl = clipped_ratio * adv
    clipped = cl < un
    obj = np.where(clipped, cl, un)
    inv_n = 1.0 / n_credit if n_credit > 0 else 0.0
    loss_pg = -inv_n * obj.sum()
    dlogp = np.where(clipped, 0.0, -inv_n * un)

    # d logp / d params
    onehot = np.zeros_like(p)
    onehot[rows, act] = 1.0
    dz = np.where(fired[:, None], 0.0, (onehot - p)) * (dlogp * inv_temp)[:, None]
    np.add.at(gZ, ctx_state, dz)
    dg = np.where(fired, 1.0 - sg, -sg) * inv_temp * dlogp
    np.add.at(gG, gidx[has_gate], dg[has_gate])

    # exact categorical KL at every position, gate included
    zr = Zr[ctx_state] * inv_temp
    lsr = _log_softmax_rows(zr)
    gr = np.where(has_gate, gates_r[gidx] * inv_temp, 0.0)
    C = (p * (lsm - lsr)).sum(axis=1)
    bern = np.where(
        has_gate,
        sg * (_log_sigmoid(g) - _log_sigmoid(gr)) + (1 - sg) * (_log_sigmoid(-g) - _log_sigmoid(-gr)),
        0.0,
    )
    kl_pos = bern + (1.0 - sg) * C
    kl = kl_pos.mean()
    w = beta / n
    dC = p * (lsm - lsr - C[:, None])
    np.add.at(gZ, ctx_state, w * inv_temp * (1.0 - sg)[:, None] * dC)
    dgate = sg * (1.0 - sg) * ((g - gr) - C)
    np.add.at(gG, gidx[has_gate], (w * inv_temp * dgate)[has_gate])
    return loss_pg, kl, gZ, gG, clipped


def position_kl(Z, gates, Zr, gates_r, inv_temp, ctx_state, ctx_gate):
    """Mean exact KL(current || reference) over the given positions."""
    if len(ctx_state) == 0:
        return 0.0
    lsm = _log_softmax_rows(Z[ctx_state] * inv_temp)
    lsr = _log_softmax_rows(Zr[ctx_state] * inv_temp)
    p = np.exp(lsm)
    C = (p * (lsm - lsr)).sum(axis=1)
    has_gate = ctx_gate >= 0
    gidx = np.maximum(ctx_gate, 0)
    g = gates[gidx] * inv_temp
    gr = gates_r[gidx] * inv_temp
    sg = 1.0 / (1.0 + np.exp(-g))
    bern = sg * (_log_sigmoid(g) - _log_sigmoid(gr)) + (1 - sg) * (_log_sigmoid(-g) - _log_sigmoid(-gr))
    kl = np.where(has_gate, bern + (1.0 - sg) * C, C)
    return float(kl.mean())
