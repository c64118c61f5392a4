"""Random loss instances for the toy policy and a central-difference checker."""

import numpy as np

CLIP_LOW, CLIP_HIGH = 0.20, 0.28


def random_instance(rng, n_states=6, V=5, n_gates=3, n_tokens=24, beta=0.02, margin=1e-3):
    Z = rng.normal(0, 1, (n_states, V))
    gates = rng.normal(0, 1, n_gates)
    Zr = Z + rng.normal(0, 0.3, Z.shape)
    gates_r = gates + rng.normal(0, 0.3, n_gates)
    cs = rng.integers(0, n_states, n_tokens)
    cg = rng.integers(-1, n_gates, n_tokens)
    act = rng.integers(0, V, n_tokens)
    fire = (cg >= 0) & (rng.random(n_tokens) < 0.3)
    act[fire] = -1
    adv = rng.normal(0, 1, n_tokens)
    inv_temp = float(rng.uniform(0.5, 1.5))
    from care._kernels import numpy_impl

    lp = numpy_impl.token_logprob(Z, gates, inv_temp, cs, cg, act)
    # ratios spread inside and outside the clip band, but never on its edge
    log_ratio = rng.normal(0, 0.3, n_tokens)
    for _ in range(100):
        r = np.exp(log_ratio)
        near = (np.abs(r - (1 - CLIP_LOW)) < margin) | (np.abs(r - (1 + CLIP_HIGH)) < margin)
        if not near.any():
            break
        log_ratio[near] = rng.normal(0, 0.3, near.sum())
    old_lp = lp - log_ratio
    n_credit = int(rng.integers(1, 5))
    return dict(Z=Z, gates=gates, Zr=Zr, gates_r=gates_r, inv_temp=inv_temp, ctx_state=cs, ctx_gate=cg,
                action=act, adv=adv, old_lp=old_lp, n_credit=n_credit, clip_low=CLIP_LOW,
                clip_high=CLIP_HIGH, beta=beta)


def total_loss(impl, inst, Z, gates):
    args = dict(inst, Z=Z, gates=gates)
    loss_pg, kl, _, _, _ = impl.surrogate_loss_grad(**args)
    return loss_pg + inst["beta"] * kl


def relative_gradient_error(impl, inst, h=1e-5) -> float:
    _, _, gZ, gG, _ = impl.surrogate_loss_grad(**inst)
    analytic = np.concatenate([gZ.ravel(), gG])
    theta = np.concatenate([inst["Z"].ravel(), inst["gates"]])
    nz = inst["Z"].size
    fd = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        f_up = total_loss(impl, inst, up[:nz].reshape(inst["Z"].shape), up[nz:])
        f_dn = total_loss(impl, inst, dn[:nz].reshape(inst["Z"].shape), dn[nz:])
        fd[i] = (f_up - f_dn) / (2 * h)
    denom = max(np.linalg.norm(fd), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(fd - analytic) / denom)
