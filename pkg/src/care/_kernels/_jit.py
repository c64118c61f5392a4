"""Loop versions of the kernels in ``_numpy.py``, compiled with numba."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def zscore_rows(R, eps):
    n, m = R.shape
    out = np.empty_like(R)
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += R[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = R[i, j] - mu
            var += d * d
        sd = math.sqrt(var / m) + eps
        for j in range(m):
            out[i, j] = (R[i, j] - mu) / sd
    return out


@njit(cache=True, inline="always")
def _log_sigmoid(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True)
def _log_softmax(z, out):
    m = z[0]
    for j in range(1, z.shape[0]):
        if z[j] > m:
            m = z[j]
    s = 0.0
    for j in range(z.shape[0]):
        s += math.exp(z[j] - m)
    ls = math.log(s)
    for j in range(z.shape[0]):
        out[j] = z[j] - m - ls


@njit(cache=True)
def sample_chains(Z, gates, inv_temp, x0, opc, opr, u_gate, u_val, max_fill):
    N, L = opc.shape
    V = Z.shape[1]
    nt = max(L - 1, 0)
    values = np.empty((N, L), np.int64)
    fills = np.zeros((N, nt), np.int64)
    states = np.empty((N, L), np.int64)
    lp_val = np.empty((N, L))
    lp_fill = np.empty(nt)
    for k in range(nt):
        lp_fill[k] = _log_sigmoid(gates[k] * inv_temp)
    z = np.empty(V)
    lsm = np.empty(V)
    for n in range(N):
        prev = x0[n]
        for k in range(L):
            s = (opc[n, k] * V + opr[n, k]) * V + prev
            states[n, k] = s
            for j in range(V):
                z[j] = Z[s, j] * inv_temp
            _log_softmax(z, lsm)
            c = 0.0
            pick = V - 1
            for j in range(V):
                c += math.exp(lsm[j])
                if u_val[n, k] < c:
                    pick = j
                    break
            lv = lsm[pick]
            g = gates[k] * inv_temp
            pf = 1.0 / (1.0 + math.exp(-g))
            if k < L - 1:
                run = 0
                while run < max_fill and u_gate[n, k, run] < pf:
                    run += 1
                fills[n, k] = run
                if run < max_fill:
                    lv += _log_sigmoid(-g)
                values[n, k] = pick
                prev = pick
            else:
                if u_gate[n, k, 0] < pf:
                    values[n, k] = -1
                    lv = _log_sigmoid(g)
                else:
                    values[n, k] = pick
                    lv += _log_sigmoid(-g)
            lp_val[n, k] = lv
    return values, fills, states, lp_fill, lp_val


@njit(cache=True)
def token_logprob(Z, gates, inv_temp, ctx_state, ctx_gate, action):
    n = action.shape[0]
    V = Z.shape[1]
    out = np.empty(n)
    z = np.empty(V)
    lsm = np.empty(V)
    for t in range(n):
        gi = ctx_gate[t]
        g = gates[gi] * inv_temp if gi >= 0 else 0.0
        if action[t] < 0:
            out[t] = _log_sigmoid(g)
            continue
        s = ctx_state[t]
        for j in range(V):
            z[j] = Z[s, j] * inv_temp
        _log_softmax(z, lsm)
        lp = lsm[action[t]]
        if gi >= 0:
            lp += _log_sigmoid(-g)
        out[t] = lp
    return out


@njit(cache=True)
def surrogate_loss_grad(Z, gates, Zr, gates_r, inv_temp, ctx_state, ctx_gate, action,
                        adv, old_lp, n_credit, clip_low, clip_high, beta):
    n = action.shape[0]
    V = Z.shape[1]
    gZ = np.zeros_like(Z)
    gG = np.zeros_like(gates)
    clipped = np.zeros(n, np.bool_)
    if n == 0:
        return 0.0, 0.0, gZ, gG, clipped
    inv_n = 1.0 / n_credit if n_credit > 0 else 0.0
    w = beta / n
    z = np.empty(V)
    lsm = np.empty(V)
    lsr = np.empty(V)
    loss = 0.0
    kl_sum = 0.0
    for t in range(n):
        s = ctx_state[t]
        gi = ctx_gate[t]
        for j in range(V):
            z[j] = Z[s, j] * inv_temp
        _log_softmax(z, lsm)
        for j in range(V):
            z[j] = Zr[s, j] * inv_temp
        _log_softmax(z, lsr)
        if gi >= 0:
            g = gates[gi] * inv_temp
            gr = gates_r[gi] * inv_temp
            sg = 1.0 / (1.0 + math.exp(-g))
        else:
            g = 0.0
            gr = 0.0
            sg = 0.0
        a = action[t]
        if a < 0:
            logp = _log_sigmoid(g)
        else:
            logp = lsm[a]
            if gi >= 0:
                logp += _log_sigmoid(-g)
        ratio = math.exp(logp - old_lp[t])
        cr = min(max(ratio, 1.0 - clip_low), 1.0 + clip_high)
        un = ratio * adv[t]
        cl = cr * adv[t]
        if cl < un:
            clipped[t] = True
            loss -= inv_n * cl
            dlogp = 0.0
        else:
            loss -= inv_n * un
            dlogp = -inv_n * un
        if dlogp != 0.0:
            if a < 0:
                gG[gi] += (1.0 - sg) * inv_temp * dlogp
            else:
                for j in range(V):
                    pj = math.exp(lsm[j])
                    gZ[s, j] += ((1.0 if j == a else 0.0) - pj) * inv_temp * dlogp
                if gi >= 0:
                    gG[gi] += -sg * inv_temp * dlogp
        C = 0.0
        for j in range(V):
            C += math.exp(lsm[j]) * (lsm[j] - lsr[j])
        if gi >= 0:
            bern = sg * (_log_sigmoid(g) - _log_sigmoid(gr)) + (1.0 - sg) * (_log_sigmoid(-g) - _log_sigmoid(-gr))
        else:
            bern = 0.0
        kl_sum += bern + (1.0 - sg) * C
        for j in range(V):
            pj = math.exp(lsm[j])
            gZ[s, j] += w * inv_temp * (1.0 - sg) * pj * (lsm[j] - lsr[j] - C)
        if gi >= 0:
            gG[gi] += w * inv_temp * sg * (1.0 - sg) * ((g - gr) - C)
    return loss, kl_sum / n, gZ, gG, clipped


@njit(cache=True)
def position_kl(Z, gates, Zr, gates_r, inv_temp, ctx_state, ctx_gate):
    n = ctx_state.shape[0]
    if n == 0:
        return 0.0
    V = Z.shape[1]
    z = np.empty(V)
    lsm = np.empty(V)
    lsr = np.empty(V)
    total = 0.0
    for t in range(n):
        s = ctx_state[t]
        for j in range(V):
            z[j] = Z[s, j] * inv_temp
        _log_softmax(z, lsm)
        for j in range(V):
            z[j] = Zr[s, j] * inv_temp
        _log_softmax(z, lsr)
        C = 0.0
        for j in range(V):
            C += math.exp(lsm[j]) * (lsm[j] - lsr[j])
        gi = ctx_gate[t]
        if gi >= 0:
            g = gates[gi] * inv_temp
            gr = gates_r[gi] * inv_temp
            sg = 1.0 / (1.0 + math.exp(-g))
            total += sg * (_log_sigmoid(g) - _log_sigmoid(gr)) + (1.0 - sg) * (_log_sigmoid(-g) - _log_sigmoid(-gr))
            total += (1.0 - sg) * C
        else:
            total += C
    return total / n
