"""Policy networks trained by backpropagation through the frozen forward model.

One stochastic policy class serves every training method; the methods
differ only in the objective assembled around the unrolled model:

  mpur  rollout cost + lambda * hinge-normalized uncertainty, prior latents
  svg   mpur machinery with lambda = 0 (stochastic model, prior latents)
  vg    mpur machinery with lambda = 0, zero latents, single branch
  mper  L2 distance between predicted and recorded states, posterior latents
  il1   single-step negative log-likelihood of the logged action
  noop  no training; constant zero action (keep speed and heading)
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import FiniteError, Tensor
from .checkpoint import load_tensors, save_tensors
from .data import Normalizer, TransitionDataset
from .dynamics import (ForwardModel, TrainingDiverged, TrainLog, _ConvEncoder,
                       branch_masks, unrolled_branches)
from .environment import RoadGeometry, policy_cost
from .nn import Adam, Linear, Module
from .seeding import substream
from .uncertainty import UncertaintyCalibration, branch_variance_sum, normalized_U

METHODS = ("mpur", "mper", "vg", "svg", "il1", "noop")


@dataclass(frozen=True)
class PolicyTrainConfig:
    method: str = "mpur"
    T: int = 10
    lam: float = 0.5              # weight of the uncertainty cost
    latent_source: str = "prior"  # prior | posterior | zero
    K: int = 4                    # dropout branches for the uncertainty cost
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 300
    clip_norm: float = 10.0
    channels: Tuple[int, ...] = (8, 16, 32)
    strides: Tuple[int, ...] = (2, 2, 2)
    hidden: int = 128

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.lam < 0:
            raise ValueError("uncertainty weight must be nonnegative")
        if self.latent_source not in ("prior", "posterior", "zero"):
            raise ValueError(f"unknown latent source {self.latent_source!r}")
        if self.lam > 0 and self.K < 2:
            raise ValueError("uncertainty cost needs at least 2 branches")


def method_config(method: str, **overrides) -> PolicyTrainConfig:
    """Per-method objective wiring with shared optimizer defaults."""
    base = {
        "mpur": dict(lam=0.5, latent_source="prior", K=4),
        "svg": dict(lam=0.0, latent_source="prior", K=1),
        "vg": dict(lam=0.0, latent_source="zero", K=1),
        "mper": dict(lam=0.0, latent_source="posterior", K=1),
        "il1": dict(lam=0.0, latent_source="zero", K=1, T=1),
        "noop": dict(lam=0.0, latent_source="zero", K=1, T=1),
    }[method]
    base.update(overrides)
    return PolicyTrainConfig(method=method, **base)


# ------------------------------------------------------------------ network


class PolicyNetwork(Module):
    """Conv window encoder + MLP emitting a 2-D Gaussian over actions."""

    def __init__(self, geom: RoadGeometry, history: int, seed: int,
                 channels=(8, 16, 32), strides=(2, 2, 2), hidden: int = 128,
                 sigma_floor: float = 1e-3):
        self.geom = geom
        self.m = history
        self.sigma_floor = sigma_floor
        self.enc = _ConvEncoder(3 * history, channels, strides, geom, seed, "pi")
        self.fc = [Linear(self.enc.n_out + history, hidden, substream(seed, "init", "pi0")),
                   Linear(hidden, hidden, substream(seed, "init", "pi1")),
                   Linear(hidden, 4, substream(seed, "init", "pi2"))]
        # small initial actions: a fresh policy should drive gently
        self.fc[-1].w.data *= 0.1

    def __call__(self, grids_norm: Tensor, speeds_norm: Tensor) -> Tuple[Tensor, Tensor]:
        B = grids_norm.shape[0]
        x = grids_norm.reshape(B, 3 * self.m, self.geom.grid_h, self.geom.grid_w)
        h = ad.concat([self.enc(x), speeds_norm.reshape(B, self.m)], axis=1)
        h = self.fc[0](h).relu()
        h = self.fc[1](h).relu()
        out = self.fc[2](h)
        mu = out.slice(1, 0, 2)
        sigma = ad.add(ad.softplus(out.slice(1, 2, 4)), Tensor(self.sigma_floor))
        return mu, sigma


class NoopPolicy:
    """Zero action: hold current speed and heading."""

    def act(self, obs) -> np.ndarray:
        return np.zeros(2)


class ActingPolicy:
    """Environment-facing wrapper: raw observations in, raw actions out."""

    def __init__(self, policy: PolicyNetwork, norm: Normalizer,
                 mode: str = "mean", seed: int = 0):
        if mode not in ("mean", "sample"):
            raise ValueError(f"unknown action mode {mode!r}")
        self.policy = policy
        self.norm = norm
        self.mode = mode
        self.rng = substream(seed, "act")

    def act(self, obs) -> np.ndarray:
        a = act(self.policy, self.norm, obs.grids, obs.speeds, self.mode, self.rng)
        return a


def act(policy: PolicyNetwork, norm: Normalizer, grids: np.ndarray,
        speeds: np.ndarray, mode: str = "mean",
        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One raw action for one raw observation window."""
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown action mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs a random generator")
    with ad.no_grad():
        mu, sigma = policy(Tensor(norm.norm_img(grids[None])),
                           Tensor(norm.norm_speed(speeds[None])))
    a = mu.data[0]
    if mode == "sample":
        a = a + sigma.data[0] * rng.standard_normal(2)
    return norm.denorm_action(a)


# ----------------------------------------------------------------- objectives


def il1_loss(policy: PolicyNetwork, norm: Normalizer, grids: np.ndarray,
             speeds: np.ndarray, actions: np.ndarray) -> Tuple[Tensor, Dict]:
    """Mean Gaussian NLL of the logged actions (normalized space)."""
    mu, sigma = policy(Tensor(norm.norm_img(grids)), Tensor(norm.norm_speed(speeds)))
    z = ad.div(ad.sub(Tensor(norm.norm_action(actions)), mu), sigma)
    nll = ad.add(ad.reduce_sum(ad.log(sigma), axis=1),
                 ad.mul(ad.reduce_sum(ad.mul(z, z), axis=1), Tensor(0.5)))
    loss = ad.add(ad.reduce_mean(nll), Tensor(math.log(2.0 * math.pi)))
    return loss, {"nll": loss.item()}


def _posterior_draws(model: ForwardModel, norm: Normalizer, batch, T: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Latents inferred from the recorded future, one draw per step."""
    if batch.target_grids.shape[1] < T:
        raise ValueError(f"recorded future covers {batch.target_grids.shape[1]} "
                         f"steps, need {T}")
    frames = np.concatenate([batch.grids, batch.target_grids], axis=1)
    m = model.cfg.history
    draws = np.empty((T, batch.grids.shape[0], model.cfg.nz))
    with ad.no_grad():
        for t in range(T):
            ctx = Tensor(norm.norm_img(frames[:, t:t + m]))
            tgt = Tensor(norm.norm_img(frames[:, t + m]))
            mu, logvar = model.posterior(ctx, tgt)
            eps = rng.standard_normal(mu.shape)
            draws[t] = mu.data + np.exp(0.5 * logvar.data) * eps
    return draws


def _latent_draws(model, norm, batch, cfg: PolicyTrainConfig, seed: int, step: int):
    T, B, nz = cfg.T, batch.grids.shape[0], model.cfg.nz
    if cfg.latent_source == "zero":
        return np.zeros((T, B, nz))
    if cfg.latent_source == "prior":
        return substream(seed, "pi", "z", str(step)).standard_normal((T, B, nz))
    return _posterior_draws(model, norm, batch, T,
                            substream(seed, "pi", "zq", str(step)))


def _policy_rollout(policy, model, norm, batch, cfg, seed: int, step: int):
    """Unroll the frozen model under reparameterized policy actions."""
    K, T, B = cfg.K, cfg.T, batch.grids.shape[0]
    z_draws = _latent_draws(model, norm, batch, cfg, seed, step)
    eps = substream(seed, "pi", "eps", str(step)).standard_normal((T, B, 2))
    masks = None
    if cfg.K >= 2:
        mask_seed = int(substream(seed, "pi", "masks", str(step)).integers(2 ** 62))
        masks = branch_masks(model, K, mask_seed)

    def action_fn(t, hist, speeds_norm):
        mu, sigma = policy(hist, speeds_norm)
        return ad.add(mu, ad.mul(sigma, Tensor(np.repeat(eps[t], K, axis=0))))

    return unrolled_branches(model, norm, batch.grids, batch.speeds,
                             K, T, action_fn, z_draws, mask_sets=masks)


def mpur_loss(policy: PolicyNetwork, model: ForwardModel, norm: Normalizer,
              batch, cfg: PolicyTrainConfig, geom: RoadGeometry, seed: int,
              step: int = 0,
              calib: Optional[UncertaintyCalibration] = None,
              mask_speeds: Optional[list] = None) -> Tuple[Tensor, Dict]:
    """Rollout policy cost plus weighted uncertainty cost.

    With lam=0, zero latents, and K=1 this is exactly the (deterministic)
    value-gradient objective; with lam=0 and prior latents it is the
    stochastic one.

    The proximity mask's growth with predicted speed is held outside the
    graph (slowing down must not look like lowering the cost), so the
    loss differentiates a function in which mask speeds are constants.
    ``mask_speeds`` pins them explicitly, which is what a finite-difference
    probe of that function needs; training leaves it None and uses the
    rollout's own (detached) speeds.
    """
    if cfg.lam > 0:
        if calib is None:
            raise ValueError("uncertainty cost requires a calibration")
        if calib.T < cfg.T:
            raise ValueError(f"calibration covers {calib.T} steps, need {cfg.T}")
    preds, speeds, actions = _policy_rollout(policy, model, norm, batch, cfg,
                                             seed, step)
    img_mean = Tensor(norm.img_mean.reshape(1, 3, 1, 1))
    img_std = Tensor(norm.img_std.reshape(1, 3, 1, 1))
    total = Tensor(0.0)
    c_sum = u_sum = 0.0
    for t in range(cfg.T):
        g_raw = ad.add(ad.mul(preds[t], img_std), img_mean).clip(0.0, 1.0)
        sp = speeds[t].data if mask_speeds is None else mask_speeds[t]
        c = ad.reduce_mean(policy_cost(g_raw, sp, geom))
        total = ad.add(total, c)
        c_sum += c.item()
        if cfg.lam > 0:
            u = ad.reduce_mean(normalized_U(
                branch_variance_sum(preds[t], cfg.K), t, calib))
            total = ad.add(total, ad.mul(u, Tensor(cfg.lam)))
            u_sum += u.item()
    return total, {"cost": c_sum, "u": u_sum}


def mper_loss(policy: PolicyNetwork, model: ForwardModel, norm: Normalizer,
              batch, cfg: PolicyTrainConfig, seed: int,
              step: int = 0) -> Tuple[Tensor, Dict]:
    """Distance between the policy-driven rollout and the recorded future.

    Latents come from the posterior of the recorded transitions, so the
    model's stochasticity is pinned to what actually happened and the
    remaining mismatch is attributable to the actions.
    """
    if batch.target_grids.shape[1] < cfg.T:
        raise ValueError(f"recorded future covers {batch.target_grids.shape[1]} "
                         f"steps, need {cfg.T}")
    preds, speeds, actions = _policy_rollout(policy, model, norm, batch, cfg,
                                             seed, step)
    B = batch.grids.shape[0]
    total = Tensor(0.0)
    for t in range(cfg.T):
        d = ad.sub(preds[t], Tensor(norm.norm_img(batch.target_grids[:, t])))
        sq = ad.reduce_sum(ad.mul(d, d).reshape(B, -1), axis=1)
        ds = ad.mul(ad.sub(speeds[t], Tensor(batch.target_speeds[:, t])),
                    Tensor(1.0 / norm.speed_std))
        dist = ad.sqrt(ad.add(sq, ad.mul(ds, ds)))
        total = ad.add(total, ad.reduce_mean(dist))
    return total, {"mper": total.item()}


def rollout_uncertainty(policy: Optional[PolicyNetwork], model: ForwardModel,
                        norm: Normalizer, batch, T: int, K: int,
                        seed: int,
                        calib: Optional[UncertaintyCalibration] = None) -> float:
    """Mean uncertainty cost per rollout step under mean-mode actions.

    Without ``calib`` this is the raw branch variance: how far the policy
    drives the model outside the regime its dropout branches agree on.
    With ``calib`` each sample's raw value is hinge-normalized per step
    before averaging, matching the cost the MPUR objective penalizes.
    ``policy=None`` means the zero (keep-course) action.
    """
    if K < 2:
        raise ValueError("branch variance needs at least 2 branches")
    if calib is not None and calib.T < T:
        raise ValueError(f"calibration covers {calib.T} steps, need {T}")
    B = batch.grids.shape[0]
    mask_seed = int(substream(seed, "evalu", "masks").integers(2 ** 62))
    masks = branch_masks(model, K, mask_seed)
    z = substream(seed, "evalu", "z").standard_normal((T, B, model.cfg.nz))
    zero = norm.norm_action(np.zeros((1, 2)))

    def action_fn(t, hist, speeds_norm):
        if policy is None:
            return Tensor(np.tile(zero, (hist.shape[0], 1)))
        mu, sigma = policy(hist, speeds_norm)
        return mu

    with ad.no_grad():
        preds, speeds, actions = unrolled_branches(
            model, norm, batch.grids, batch.speeds, K, T, action_fn, z,
            mask_sets=masks)
        us = []
        for t in range(T):
            u_vec = branch_variance_sum(preds[t], K).data
            if calib is not None:
                u_vec = np.maximum(0.0, (u_vec - calib.mu[t]) / calib.sigma[t])
            us.append(float(u_vec.mean()))
    return float(np.mean(us))


# ------------------------------------------------------------------ training


def train_policy(method: str, ds: TransitionDataset, model: ForwardModel,
                 norm: Normalizer, geom: RoadGeometry, seed: int,
                 cfg: Optional[PolicyTrainConfig] = None,
                 calib: Optional[UncertaintyCalibration] = None,
                 log_every: int = 25):
    """Train one policy with one seed; the forward model stays frozen."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "noop":
        return NoopPolicy(), TrainLog([])
    cfg = method_config(method) if cfg is None else cfg
    if cfg.method != method:
        raise ValueError(f"config is for {cfg.method!r}, not {method!r}")
    if method in ("mper", "mpur", "vg", "svg") and ds.T < cfg.T:
        raise ValueError(f"dataset unroll {ds.T} shorter than rollout T={cfg.T}")

    policy = PolicyNetwork(geom, model.cfg.history, seed,
                           channels=cfg.channels, strides=cfg.strides,
                           hidden=cfg.hidden)
    opt = Adam(policy.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = substream(seed, "pi", "batch")
    log = TrainLog([])
    ema = None
    for step in range(cfg.steps):
        batch = ds.batch(rng.integers(0, len(ds), cfg.batch_size))
        opt.zero_grad()
        try:
            if method == "il1":
                loss, parts = il1_loss(policy, norm, batch.grids, batch.speeds,
                                       batch.actions[:, 0])
            elif method == "mper":
                loss, parts = mper_loss(policy, model, norm, batch, cfg, seed, step)
            else:
                loss, parts = mpur_loss(policy, model, norm, batch, cfg, geom,
                                        seed, step, calib=calib)
            ad.backward(loss)
        except FiniteError as e:
            raise TrainingDiverged(f"policy step {step}: {e}") from e
        val = loss.item()
        if ema is not None and abs(val) > max(100.0 * abs(ema), abs(ema) + 1e4):
            raise TrainingDiverged(
                f"policy step {step}: loss {val:.3g} exploded (ema {ema:.3g})")
        ema = val if ema is None else 0.95 * ema + 0.05 * val
        opt.step()
        if step % log_every == 0 or step == cfg.steps - 1:
            log.rows.append({"step": step, "loss": val, **parts})
    return policy, log


# ---------------------------------------------------------------- containers


def save_policy(path, policy: PolicyNetwork, norm: Normalizer) -> None:
    tensors = {f"policy.{k}": v for k, v in policy.state_dict().items()}
    tensors.update(norm.state_dict())
    tensors["pi_hp"] = np.array([policy.m, policy.fc[0].w.data.shape[1],
                                 policy.sigma_floor])
    tensors["pi_hp.channels"] = np.array(
        [l.w.data.shape[0] for l in policy.enc.layers], dtype=float)
    tensors["pi_hp.strides"] = np.array(policy.enc.strides, dtype=float)
    tensors["pi_geom"] = np.array([policy.geom.grid_h, policy.geom.grid_w])
    save_tensors(path, tensors)


def load_policy(path, geom: RoadGeometry) -> Tuple[PolicyNetwork, Normalizer]:
    state = load_tensors(path)
    g = state["pi_geom"]
    if (int(g[0]), int(g[1])) != (geom.grid_h, geom.grid_w):
        raise ValueError(f"checkpoint grid {int(g[0])}x{int(g[1])} does not match "
                         f"geometry {geom.grid_h}x{geom.grid_w}")
    hp = state["pi_hp"]
    policy = PolicyNetwork(
        geom, history=int(hp[0]), seed=0,
        channels=tuple(int(c) for c in state["pi_hp.channels"]),
        strides=tuple(int(s) for s in state["pi_hp.strides"]),
        hidden=int(hp[1]), sigma_floor=float(hp[2]))
    policy.load_state_dict({k[len("policy."):]: v for k, v in state.items()
                            if k.startswith("policy.")})
    return policy, Normalizer.from_state(state)
