"""Epistemic uncertainty from dropout-mask disagreement.

The forward model is run with K fixed dropout mask sets; the spread of
their predictions is a differentiable penalty telling the policy how far
it has pushed the model from the data it was trained on. Raw spread is
calibrated per rollout step against training data and hinge-normalized,
so only above-average uncertainty is penalized.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Normalizer, TransitionDataset
from .dynamics import (ForwardModel, _tile_masks, branch_masks,
                       tiled_action_fn, unrolled_branches)
from .seeding import substream


@dataclass(frozen=True)
class UncertaintyConfig:
    K: int = 4            # mask branches during policy training
    K_calib: int = 16     # mask branches for calibration and reporting
    n_samples: int = 64   # training windows used to calibrate each step

    def __post_init__(self):
        if self.K < 2 or self.K_calib < 2:
            raise ValueError("need at least 2 dropout branches")


def branch_variance_sum(pred: Tensor, K: int) -> Tensor:
    """Per-sample branch disagreement: variance across the K branches,
    summed over every output unit.

    ``pred`` is branch-minor, row b*K + k, in normalized units (so image
    channels and any appended modalities are commensurable). Population
    variance (1/K); the constant factor washes out in calibration.
    Returns a (B,) tensor, differentiable through all branches.
    """
    if K < 2:
        raise ValueError("need at least 2 dropout branches")
    if pred.shape[0] % K:
        raise ValueError(f"row count {pred.shape[0]} is not a multiple of K={K}")
    B = pred.shape[0] // K
    x = pred.reshape(B, K, -1)
    return ad.reduce_sum(ad.variance(x, axis=1), axis=1)


def _tile_rows(x: Tensor, K: int) -> Tensor:
    # (B, d) -> (K*B, d) with row b*K + k = x[b]; concat keeps the graph
    B, d = x.shape
    return ad.concat([x] * K, axis=1).reshape(B * K, d)


def epistemic_U(model: ForwardModel, norm: Normalizer,
                grids: np.ndarray, speeds: np.ndarray, action_norm: Tensor,
                z: np.ndarray, mask_sets: List[Dict[str, np.ndarray]]) -> Tensor:
    """One-step uncertainty of ``model`` at a state window and action.

    ``grids`` (B, m, 3, H, W) and ``speeds`` (B, m) are raw observations;
    ``action_norm`` (B, 2) is a normalized action tensor (gradients flow
    back into it through every mask branch); ``z`` (B, nz) is a single
    prior draw shared by all branches. Returns per-sample U, shape (B,).
    """
    K = len(mask_sets)
    if K < 2:
        raise ValueError("need at least 2 dropout branches")
    B = grids.shape[0]
    hist = Tensor(np.repeat(norm.norm_img(grids), K, axis=0))
    sp = Tensor(np.repeat(norm.norm_speed(speeds), K, axis=0))
    a = _tile_rows(action_norm, K)
    zz = Tensor(np.repeat(z, K, axis=0))
    preds = model.forward_one(hist, sp, a, zz, masks=_tile_masks(mask_sets, B))
    return branch_variance_sum(preds, K)


# ------------------------------------------------------------- calibration


@dataclass(frozen=True)
class UncertaintyCalibration:
    """Training-set mean and spread of raw U for each rollout step."""

    mu: np.ndarray     # (T,)
    sigma: np.ndarray  # (T,)
    K: int
    n_samples: int

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ValueError("mu and sigma must be equal-length vectors")
        if not np.all(self.sigma > 0):
            raise ValueError("calibration spread must be positive at every step")

    @property
    def T(self) -> int:
        return len(self.mu)

    def state_dict(self):
        return {"ucal.mu": self.mu, "ucal.sigma": self.sigma,
                "ucal.meta": np.array([float(self.K), float(self.n_samples)])}

    @classmethod
    def from_state(cls, state) -> "UncertaintyCalibration":
        meta = state["ucal.meta"]
        return cls(mu=state["ucal.mu"], sigma=state["ucal.sigma"],
                   K=int(meta[0]), n_samples=int(meta[1]))


def normalized_U(u, t: int, calib: UncertaintyCalibration):
    """Hinge-rectified z-score of a raw U value at rollout step ``t``.

    Zero at or below the training mean for that step; works on floats
    and on tensors (keeping the graph, subgradient 0 at the kink).
    """
    if not 0 <= t < calib.T:
        raise ValueError(f"no calibration for rollout step {t}")
    mu, sigma = calib.mu[t], calib.sigma[t]
    if isinstance(u, Tensor):
        return ad.relu(ad.mul(ad.sub(u, Tensor(mu)), Tensor(1.0 / sigma)))
    return max(0.0, (u - mu) / sigma)


def calibrate(model: ForwardModel, norm: Normalizer, ds: TransitionDataset,
              T: int, ucfg: UncertaintyConfig = UncertaintyConfig(),
              seed: int = 0, chunk: int = 8) -> UncertaintyCalibration:
    """Roll training windows with their logged actions and record raw U.

    Latents come from the prior (one draw per step, shared across the K
    branches) so the statistics describe the model on data it has seen.
    """
    if ds.T < T:
        raise ValueError(f"dataset unroll {ds.T} shorter than requested T={T}")
    n = min(ucfg.n_samples, len(ds))
    if n < 30:
        raise ValueError(f"{n} samples is too few to calibrate; need at least 30")
    rng = substream(seed, "calibrate")
    idxs = rng.choice(len(ds), size=n, replace=False)
    batch = ds.batch(idxs)
    a_norm = norm.norm_action(batch.actions)[:, :T]
    z_draws = substream(seed, "calibrate", "z").standard_normal((T, n, model.cfg.nz))
    masks = branch_masks(model, ucfg.K_calib, seed)

    u = np.empty((T, n))
    with ad.no_grad():
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            preds, _, _ = unrolled_branches(
                model, norm, batch.grids[lo:hi], batch.speeds[lo:hi],
                ucfg.K_calib, T, tiled_action_fn(a_norm[lo:hi], ucfg.K_calib),
                z_draws[:, lo:hi], mask_sets=masks)
            for t in range(T):
                u[t, lo:hi] = branch_variance_sum(preds[t], ucfg.K_calib).data
    sigma = u.std(axis=1)
    if np.any(sigma <= 0):
        raise ValueError("degenerate calibration: zero spread at some step")
    return UncertaintyCalibration(mu=u.mean(axis=1), sigma=sigma,
                                  K=ucfg.K_calib, n_samples=n)


# ------------------------------------------- epistemic/aleatoric decomposition


def decompose_covariance(predict: Callable[[Dict[str, np.ndarray], np.ndarray], np.ndarray],
                         mask_sets: List[Dict[str, np.ndarray]],
                         z_draws: np.ndarray) -> Tuple[float, float, float]:
    """Split total prediction variance into mask-driven and latent-driven parts.

    ``predict(mask_set, z_draws) -> (M, D)`` evaluates one model sample on
    every latent draw. Over the K x M grid:

        epistemic = tr Cov_k( E_m[x | k] )   (disagreement of mask means)
        aleatoric = E_k[ tr Cov_m(x | k) ]   (latent spread within a mask)
        total     = tr Cov over all K*M points

    With population (1/N) covariances the law of total variance makes
    epistemic + aleatoric = total exactly.
    """
    K, M = len(mask_sets), z_draws.shape[0]
    if K < 2 or M < 2:
        raise ValueError("need K >= 2 mask sets and M >= 2 latent draws")
    X = np.stack([np.asarray(predict(s, z_draws), dtype=float)
                  for s in mask_sets])          # (K, M, D)
    means = X.mean(axis=1)                      # (K, D)
    epistemic = float(((means - means.mean(axis=0)) ** 2).sum(axis=1).mean())
    aleatoric = float(((X - means[:, None]) ** 2).sum(axis=2).mean())
    flat = X.reshape(K * M, -1)
    total = float(((flat - flat.mean(axis=0)) ** 2).sum(axis=1).mean())
    return epistemic, aleatoric, total


def decompose_model(model: ForwardModel, norm: Normalizer,
                    grids: np.ndarray, speeds: np.ndarray, action: np.ndarray,
                    K: int, M: int, seed: int = 0) -> Tuple[float, float, float]:
    """Decomposition for one state window (m, 3, H, W) and raw action (2,)."""
    hist = norm.norm_img(grids[None])
    sp = norm.norm_speed(speeds[None])
    a = norm.norm_action(action[None])
    z_draws = substream(seed, "decompose", "z").standard_normal((M, model.cfg.nz))
    mask_sets = branch_masks(model, K, seed)

    def predict(mask_set, zs):
        out = []
        with ad.no_grad():
            for z in zs:
                pred = model.forward_one(Tensor(hist), Tensor(sp), Tensor(a),
                                         Tensor(z[None]), masks=mask_set)
                out.append(pred.data.reshape(-1))
        return np.stack(out)

    return decompose_covariance(predict, mask_sets, z_draws)
