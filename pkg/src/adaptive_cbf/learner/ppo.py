"""Clipped PPO with separate reward and cost surrogates.

Everything here is differentiated by hand: the loss function returns the
flat gradient of the total loss with respect to ``model.params``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..numkit import Adam, clip_grad_norm, mlp_backward
from .model import ActorCritic

log = logging.getLogger(__name__)

ADV_EPS = 1e-8


@dataclass
class PPOConfig:
    clip: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    update_epochs: int = 10
    n_minibatches: int = 32
    norm_adv: bool = True
    norm_cost: bool = True
    clip_value: bool = True
    # divide the actor surrogate by (1 + lambda); off keeps the literal form
    lambda_scaling: bool = False


def normalize(adv, center: bool = True):
    adv = np.asarray(adv, dtype=np.float64)
    if center:
        return (adv - adv.mean()) / (adv.std() + ADV_EPS)
    return adv / (adv.std() + ADV_EPS)


def clipped_surrogate(ratio, adv, eps: float):
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)`` and its derivative in r."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    value = np.minimum(unclipped, clipped)
    inside = (ratio > 1.0 - eps) & (ratio < 1.0 + eps)
    d_ratio = np.where((unclipped <= clipped) | inside, adv, 0.0)
    return value, d_ratio


def clipped_value_loss(v, v_old, target, eps: float, clip: bool = True):
    """Per-sample squared error with PPO value clipping, and its derivative in v."""
    err = v - target
    if not clip:
        return err * err, 2.0 * err
    dv = np.clip(v - v_old, -eps, eps)
    err_c = v_old + dv - target
    l1, l2 = err * err, err_c * err_c
    inside = (v - v_old > -eps) & (v - v_old < eps)
    grad = np.where(l1 >= l2, 2.0 * err, 2.0 * err_c * inside)
    return np.maximum(l1, l2), grad


@dataclass
class LossInfo:
    total: float
    loss_pi: float
    loss_v: float
    L_R: float
    L_C: float
    entropy: float
    mse_r: float
    mse_c: float
    approx_kl: float
    clip_frac: float


def ppo_loss(model: ActorCritic, mb: dict, lam: float, cfg: PPOConfig, use_cost: bool = True,
             need_grad: bool = True):
    """Loss of one minibatch; returns ``(LossInfo, flat_grad or None)``.

    Actor objective ``L_R - lam * L_C + ent_coef * H`` (maximised), critic loss
    ``0.5 * (MSE_R + MSE_C)`` weighted by ``vf_coef``. With ``use_cost=False``
    the cost surrogate is skipped entirely, which is the plain PPO loss.
    """
    h = model.heads(mb["obs"])
    mu, mg = h["mu"], h["mg"]
    B = mg.shape[0]
    logp = model.log_prob(mb["action"], mb["g"], mu, mg, mb["shift_a"], mb["shift_g"])
    log_ratio = logp - mb["log_prob"]
    ratio = np.exp(log_ratio)
    adv_r = normalize(mb["adv_r"]) if cfg.norm_adv else np.asarray(mb["adv_r"], dtype=np.float64)
    s_r, d_r = clipped_surrogate(ratio, adv_r, cfg.clip)
    L_R = float(np.mean(s_r))
    w = 1.0 / (1.0 + lam) if cfg.lambda_scaling else 1.0
    g_ratio = ratio * d_r
    L_C = 0.0
    if use_cost:
        adv_c = normalize(mb["adv_c"], center=False) if cfg.norm_cost else np.asarray(mb["adv_c"], dtype=np.float64)
        s_c, d_c = clipped_surrogate(ratio, adv_c, cfg.clip)
        L_C = float(np.mean(s_c))
        objective = w * (L_R - lam * L_C)
        g_ratio = g_ratio - lam * (ratio * d_c)
    else:
        objective = w * L_R
    entropy = model.entropy()
    loss_pi = -(objective + cfg.ent_coef * entropy)

    l_r, dl_r = clipped_value_loss(h["v_r"], mb["v_r"], mb["ret_r"], cfg.clip, cfg.clip_value)
    l_c, dl_c = clipped_value_loss(h["v_c"], mb["v_c"], mb["ret_c"], cfg.clip, cfg.clip_value)
    mse_r, mse_c = float(np.mean(l_r)), float(np.mean(l_c))
    loss_v = 0.5 * (mse_r + mse_c)
    total = loss_pi + cfg.vf_coef * loss_v

    info = LossInfo(
        total=float(total), loss_pi=float(loss_pi), loss_v=float(loss_v), L_R=L_R, L_C=L_C,
        entropy=float(entropy), mse_r=mse_r, mse_c=mse_c,
        approx_kl=float(np.mean((ratio - 1.0) - log_ratio)),
        clip_frac=float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    )
    if not need_grad:
        return info, None

    grad = np.zeros_like(model.params)
    d_logp = -w * g_ratio / B  # d loss / d logp per sample
    dz = np.zeros_like(h["z"])
    if model.pi_head is not None:
        dm, dls = model.pi_dist.log_prob_grads(mb["action"], mu + mb["shift_a"])
        gp, dzp = mlp_backward(model.pi_head, h["tapes"]["pi"], d_logp[:, None] * dm)
        grad[model.slices["pi"]] = gp
        dz += dzp
        grad[model.slices["log_std_pi"]] = d_logp @ dls - cfg.ent_coef * model.pi_dist.entropy_grad()
    dm, dls = model.gamma_dist.log_prob_grads(mb["g"], mg + mb["shift_g"])
    gg, dzg = mlp_backward(model.gamma_head, h["tapes"]["gamma"], d_logp[:, None] * dm)
    grad[model.slices["gamma"]] = gg
    dz += dzg
    grad[model.slices["log_std_gamma"]] = d_logp @ dls - cfg.ent_coef * model.gamma_dist.entropy_grad()

    scale = cfg.vf_coef * 0.5 / B
    gv, dzv = mlp_backward(model.v_r_head, h["tapes"]["v_r"], (scale * dl_r)[:, None])
    grad[model.slices["v_r"]] = gv
    dz += dzv
    gv, dzv = mlp_backward(model.v_c_head, h["tapes"]["v_c"], (scale * dl_c)[:, None])
    grad[model.slices["v_c"]] = gv
    dz += dzv
    gt, _ = mlp_backward(model.trunk, h["tapes"]["trunk"], dz)
    grad[model.slices["trunk"]] = gt
    return info, grad


@dataclass
class UpdateStats:
    loss_pi: float = 0.0
    loss_v: float = 0.0
    L_R: float = 0.0
    L_C: float = 0.0
    entropy: float = 0.0
    grad_norm: float = 0.0
    approx_kl: float = 0.0
    clip_frac: float = 0.0
    first_total: float = float("nan")
    aborted: bool = False
    n_minibatches: int = 0


def ppo_update(model: ActorCritic, opt: Adam, batch: dict, lam: float, cfg: PPOConfig,
               rng: np.random.Generator, lr_scale: float = 1.0, use_cost: bool = True) -> UpdateStats:
    """Run the epochs of minibatch updates in place.

    A non-finite loss or gradient rolls the parameters and optimizer back to
    their state before the update and marks the stats as aborted.
    """
    n = batch["obs"].shape[0]
    mb_size = n // cfg.n_minibatches
    if mb_size < 1:
        raise ValueError("fewer samples than minibatches")
    saved = (model.params.copy(), opt.m.copy(), opt.v.copy(), opt.step_count)
    stats = UpdateStats()
    acc = np.zeros(8)
    for _ in range(cfg.update_epochs):
        perm = rng.permutation(n)
        for k in range(cfg.n_minibatches):
            idx = perm[k * mb_size : (k + 1) * mb_size]
            mb = {key: val[idx] for key, val in batch.items()}
            info, grad = ppo_loss(model, mb, lam, cfg, use_cost=use_cost)
            if not (np.isfinite(info.total) and np.all(np.isfinite(grad))):
                model.params[...] = saved[0]
                opt.m[...], opt.v[...] = saved[1], saved[2]
                opt.step_count = saved[3]
                log.warning("non-finite PPO loss; update aborted and parameters restored")
                return UpdateStats(aborted=True, first_total=stats.first_total)
            if stats.n_minibatches == 0:
                stats.first_total = info.total
            norm = clip_grad_norm(grad, cfg.max_grad_norm)
            opt.step(model.params, grad, lr_scale)
            acc += [info.loss_pi, info.loss_v, info.L_R, info.L_C, info.entropy, norm, info.approx_kl, info.clip_frac]
            stats.n_minibatches += 1
    acc /= max(stats.n_minibatches, 1)
    (stats.loss_pi, stats.loss_v, stats.L_R, stats.L_C, stats.entropy, stats.grad_norm,
     stats.approx_kl, stats.clip_frac) = (float(a) for a in acc)
    return stats
