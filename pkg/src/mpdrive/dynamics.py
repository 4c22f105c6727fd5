"""Stochastic action-conditional forward model.

The model consumes m context frames (plus their speeds), an action, and
a latent z, and predicts the next frame as a residual on the last
context frame, all in per-channel normalized image space. A posterior
network infers z from the context and the true next frame; at training
time z is drawn from a mixture that randomly swaps the posterior sample
for a prior sample, which stops the latent from smuggling in what the
action should explain.

Two training phases: first the deterministic backbone (z fixed at 0),
then the full stochastic model with the KL penalty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutMask, FiniteError, Tensor
from .checkpoint import load_tensors, save_tensors
from .data import Normalizer, TransitionDataset
from .environment import RoadGeometry, eval_cost
from .nn import Adam, Conv2d, ConvTranspose2d, Linear, Module
from .seeding import substream

__all__ = [
    "ModelConfig", "ForwardModel", "kl_diag_gaussian", "sample_latent",
    "model_loss", "train_forward_model", "TrainingDiverged", "TrainLog",
    "unrolled_branches", "branch_masks", "CostHead", "train_cost_head",
    "save_model", "load_model",
]


@dataclass(frozen=True)
class ModelConfig:
    history: int = 4
    nz: int = 8
    # stride-1 stem at full resolution, then a stride-2 pyramid; the stem
    # keeps sub-pixel motion cues that striding would decimate
    channels: Tuple[int, ...] = (8, 16, 32, 64)
    strides: Tuple[int, ...] = (1, 2, 2, 2)
    p_dropout: float = 0.1
    beta: float = 1e-3            # KL weight
    p_u: float = 0.5              # probability the posterior draw is swapped for a prior draw
    lr: float = 1e-4
    batch_size: int = 64
    phase1_steps: int = 400
    phase2_steps: int = 400
    clip_norm: float = 10.0
    logvar_clip: float = 8.0

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite or exploded; partial state is not kept."""


# ------------------------------------------------------------------ latents


def kl_diag_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-sample KL(N(mu, diag e^logvar) || N(0, I)); shape (B,)."""
    var = ad.exp(logvar)
    terms = ad.sub(ad.add(ad.mul(mu, mu), var), ad.add(logvar, Tensor(1.0)))
    return ad.mul(terms.sum(axis=1), Tensor(0.5))


def sample_latent(mu: Tensor, logvar: Tensor, eps: np.ndarray, swap: np.ndarray,
                  z_prior: np.ndarray) -> Tensor:
    """Mixture draw: posterior reparameterization, randomly swapped to prior.

    ``swap`` is a per-sample 0/1 vector (B,); where it is 1 the sample
    comes from the prior draw ``z_prior`` and no gradient reaches the
    posterior parameters for that row.
    """
    std = ad.exp(ad.mul(logvar, Tensor(0.5)))
    z_post = ad.add(mu, ad.mul(std, Tensor(eps)))
    keep = Tensor((1.0 - swap)[:, None])
    return ad.add(ad.mul(z_post, keep), Tensor(swap[:, None] * z_prior))


# -------------------------------------------------------------------- model


class _ConvEncoder(Module):
    """Conv stack with per-layer strides; remembers shapes for exact mirroring."""

    def __init__(self, c_in: int, channels, strides, geom: RoadGeometry,
                 seed: int, scope: str):
        self.layers = []
        self.strides = tuple(strides)
        shapes = [(geom.grid_h, geom.grid_w)]
        c_prev = c_in
        for i, (c, st) in enumerate(zip(channels, self.strides)):
            self.layers.append(Conv2d(c_prev, c, stride=st,
                                      rng=substream(seed, "init", scope, str(i))))
            h, w = shapes[-1]
            shapes.append(((h + 2 - 3) // st + 1, (w + 2 - 3) // st + 1))
            c_prev = c
        self.shapes = shapes  # input shape, then shape after each layer
        self.n_out = channels[-1] * shapes[-1][0] * shapes[-1][1]

    def features(self, x: Tensor):
        """Per-layer activations; the last one flattens to the code."""
        feats = []
        for layer in self.layers:
            x = layer(x).relu()
            feats.append(x)
        return feats

    def __call__(self, x: Tensor) -> Tensor:
        return self.features(x)[-1].reshape(x.shape[0], self.n_out)


class _ConvDecoder(Module):
    """Mirror of _ConvEncoder back to (3, H, W), linear final layer.

    Intermediate stages can add the matching encoder feature map (mirror
    skip connections), so the bottleneck code only needs to carry what
    changes between frames.
    """

    def __init__(self, encoder: _ConvEncoder, channels, seed: int, scope: str):
        self.shapes = encoder.shapes
        chain = list(channels[::-1]) + [3]
        self.layers = []
        for i in range(len(chain) - 1):
            st = encoder.strides[len(chain) - 2 - i]  # invert the matching stage
            tgt_h, tgt_w = self.shapes[len(chain) - 2 - i]
            src_h, src_w = self.shapes[len(chain) - 1 - i]
            op_h = tgt_h - ((src_h - 1) * st - 2 + 3)
            op_w = tgt_w - ((src_w - 1) * st - 2 + 3)
            self.layers.append(ConvTranspose2d(
                chain[i], chain[i + 1], stride=st, output_padding=(op_h, op_w),
                rng=substream(seed, "init", scope, str(i))))
        self.c_in = chain[0]

    def __call__(self, x: Tensor, skips=None) -> Tensor:
        h, w = self.shapes[-1]
        x = x.reshape(x.shape[0], self.c_in, h, w)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                if skips is not None:
                    x = ad.add(x, skips[-(i + 2)])  # encoder stage with this shape
                x = x.relu()
        return x


class ForwardModel(Module):
    """f(context frames, speeds, action, z) -> next frame (normalized)."""

    DROPOUT_SITES = ("enc", "hid")

    def __init__(self, geom: RoadGeometry, cfg: ModelConfig, seed: int):
        self.geom = geom
        self.cfg = cfg
        m = cfg.history
        self.encoder = _ConvEncoder(3 * m, cfg.channels, cfg.strides, geom, seed, "enc")
        n_h = self.encoder.n_out
        self.n_hidden = n_h
        self.act_embed = [Linear(2 + m, 64, substream(seed, "init", "act0")),
                          Linear(64, n_h, substream(seed, "init", "act1"))]
        self.z_embed = Linear(cfg.nz, n_h, substream(seed, "init", "zemb"))
        self.hidden = Linear(n_h, n_h, substream(seed, "init", "hid"))
        self.dec_fc = Linear(n_h, n_h, substream(seed, "init", "decfc"))
        self.decoder = _ConvDecoder(self.encoder, cfg.channels, seed, "dec")
        # posterior: private encoder for the target frame, then an MLP over
        # [context features, target features]
        self.q_encoder = _ConvEncoder(3, cfg.channels, cfg.strides, geom, seed, "qenc")
        self.q_mlp = [Linear(n_h + self.q_encoder.n_out, 128, substream(seed, "init", "q0")),
                      Linear(128, 2 * cfg.nz, substream(seed, "init", "q1"))]

    # -- pieces ---------------------------------------------------------

    def encode_history(self, grids_norm: Tensor):
        """Bottleneck code (B, n_H) plus per-stage feature maps for skips."""
        B, m = grids_norm.shape[0], self.cfg.history
        x = grids_norm.reshape(B, 3 * m, self.geom.grid_h, self.geom.grid_w)
        feats = self.encoder.features(x)
        return feats[-1].reshape(B, self.encoder.n_out), feats

    def posterior(self, grids_norm: Tensor, target_norm: Tensor) -> Tuple[Tensor, Tensor]:
        h, _ = self.encode_history(grids_norm)
        ht = self.q_encoder(target_norm)
        p = ad.concat([h, ht], axis=1)
        p = self.q_mlp[0](p).relu()
        p = self.q_mlp[1](p)
        nz = self.cfg.nz
        mu = p.slice(1, 0, nz)
        logvar = p.slice(1, nz, 2 * nz).clip(-self.cfg.logvar_clip, self.cfg.logvar_clip)
        return mu, logvar

    def forward_one(self, grids_norm: Tensor, speeds_norm: Tensor, action_norm: Tensor,
                    z: Tensor, masks: Optional[Dict[str, np.ndarray]] = None) -> Tensor:
        """One predicted next frame (B, 3, H, W), normalized space."""
        m = self.cfg.history
        h, feats = self.encode_history(grids_norm)
        if masks and masks.get("enc") is not None:
            h = ad.dropout(h, masks["enc"], self.cfg.p_dropout)
        a = ad.concat([action_norm, speeds_norm], axis=1)
        ha = self.act_embed[1](self.act_embed[0](a).relu())
        hz = self.z_embed(z)
        u = ad.add(ad.add(h, ha), hz).relu()
        u = self.hidden(u).relu()
        if masks and masks.get("hid") is not None:
            u = ad.dropout(u, masks["hid"], self.cfg.p_dropout)
        delta = self.decoder(self.dec_fc(u).relu(), skips=feats)
        last = grids_norm.slice(1, m - 1, m).reshape(
            grids_norm.shape[0], 3, self.geom.grid_h, self.geom.grid_w)
        return ad.add(last, delta)


def branch_masks(model: ForwardModel, K: int, seed: int) -> List[Dict[str, np.ndarray]]:
    """K independent dropout mask sets; one set is one model sample."""
    sets = []
    for k in range(K):
        s = {}
        for site in model.DROPOUT_SITES:
            mask = DropoutMask(seed=seed * 1000003 + k, rate=model.cfg.p_dropout, layer=site)
            s[site] = mask.values((1, model.n_hidden))
        sets.append(s)
    return sets


def _tile_masks(mask_sets: List[Dict[str, np.ndarray]], B: int) -> Dict[str, np.ndarray]:
    """Stack K per-unit mask sets into (K*B, n) rows, branch-minor layout."""
    out = {}
    for site in mask_sets[0]:
        per_branch = np.concatenate([s[site] for s in mask_sets], axis=0)  # (K, n)
        out[site] = np.tile(per_branch, (B, 1))  # row b*K + k gets branch k
    return out


# ------------------------------------------------------------------ training


def model_loss(model: ForwardModel, norm: Normalizer, batch, rng: np.random.Generator,
               stochastic: bool, masks=None):
    """Scalar loss over a one-step batch; also returns scalar diagnostics.

    Reconstruction is the per-sample squared error summed over units and
    averaged over the batch; the KL term is averaged over the batch and
    weighted by beta.
    """
    B = batch.grids.shape[0]
    grids = Tensor(norm.norm_img(batch.grids))
    speeds = Tensor(norm.norm_speed(batch.speeds))
    target = Tensor(norm.norm_img(batch.target_grids[:, 0]))
    action = Tensor(norm.norm_action(batch.actions[:, 0]))
    cfg = model.cfg

    if stochastic:
        mu, logvar = model.posterior(grids, target)
        eps = rng.normal(size=(B, cfg.nz))
        swap = (rng.random(B) < cfg.p_u).astype(np.float64)
        z_prior = rng.normal(size=(B, cfg.nz))
        z = sample_latent(mu, logvar, eps, swap, z_prior)
        kl = kl_diag_gaussian(mu, logvar).mean()
    else:
        z = Tensor(np.zeros((B, cfg.nz)))
        kl = Tensor(0.0)

    pred = model.forward_one(grids, speeds, action, z, masks)
    resid = ad.sub(pred, target)
    recon = ad.mul(resid, resid).reshape(B, -1).sum(axis=1).mean()
    loss = ad.add(recon, ad.mul(kl, Tensor(cfg.beta)))
    return loss, {"recon": recon.item(), "kl": kl.item()}


@dataclass
class TrainLog:
    rows: List[dict]

    def last(self, key):
        return self.rows[-1][key] if self.rows else None


def train_forward_model(dataset: TransitionDataset, geom: RoadGeometry, cfg: ModelConfig,
                        seed: int, norm: Optional[Normalizer] = None,
                        log_every: int = 50,
                        snapshots: Optional[dict] = None) -> Tuple[ForwardModel, Normalizer, TrainLog]:
    """Two-phase training; aborts rather than returning a diverged model.

    Pass a dict as ``snapshots`` to also receive the parameters as of the
    end of phase 1 (key "phase1"): that state is the deterministic
    baseline, before the posterior has been trained.
    """
    if dataset.T != 1:
        raise ValueError("model training expects a one-step dataset (unroll=1)")
    if norm is None:
        norm = dataset.fit_normalizer(seed)
    model = ForwardModel(geom, cfg, seed)
    opt = Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = substream(seed, "model-train")
    log = TrainLog([])
    ema = None

    for phase, steps in ((1, cfg.phase1_steps), (2, cfg.phase2_steps)):
        for step in range(steps):
            idx = rng.integers(0, len(dataset), cfg.batch_size)
            batch = dataset.batch(idx)
            mask_seed = int(rng.integers(0, 2 ** 62))
            masks = _tile_masks(branch_masks(model, 1, mask_seed), cfg.batch_size) \
                if cfg.p_dropout > 0 else None
            opt.zero_grad()
            try:
                loss, parts = model_loss(model, norm, batch, rng,
                                         stochastic=(phase == 2), masks=masks)
                ad.backward(loss)
            except FiniteError as e:
                raise TrainingDiverged(f"phase {phase} step {step}: {e}") from e
            val = loss.item()
            # compare against the smoothed history BEFORE folding this value in,
            # otherwise one huge loss drags the reference up with it
            if ema is not None and val > max(100.0 * ema, ema + 1e4):
                raise TrainingDiverged(
                    f"phase {phase} step {step}: loss {val:.3g} exploded (ema {ema:.3g})")
            ema = val if ema is None else 0.95 * ema + 0.05 * val
            opt.step()
            if step % log_every == 0 or step == steps - 1:
                log.rows.append({"phase": phase, "step": step, "loss": val, **parts})
        if phase == 1 and snapshots is not None:
            snapshots["phase1"] = model.state_dict()
    return model, norm, log


# ------------------------------------------------------------------ rollouts


def unrolled_branches(model: ForwardModel, norm: Normalizer,
                      init_grids: np.ndarray, init_speeds: np.ndarray,
                      K: int, T: int,
                      action_fn: Callable[[int, Tensor, Tensor], Tensor],
                      z_draws: np.ndarray,
                      mask_sets: Optional[List[Dict[str, np.ndarray]]] = None):
    """Unroll K prediction branches for T steps through one graph.

    Branches differ only in their dropout mask set: latent draws
    ``z_draws`` (T, B, nz) and the action source are shared across
    branches so that branch disagreement isolates model uncertainty.
    Rows are laid out branch-minor: row b*K + k is branch k of sample b.

    ``action_fn(t, grids_norm, speeds_norm) -> Tensor (K*B, 2)`` supplies
    normalized actions (a policy, or tiled logged actions).

    Returns (preds, speeds, actions): lists over steps of Tensors
    (K*B, 3, H, W) normalized predictions, (K*B,) raw speeds, and
    (K*B, 2) normalized actions.
    """
    B, m = init_grids.shape[0], model.cfg.history
    KB = K * B
    masks = _tile_masks(mask_sets, B) if mask_sets else None

    hist = Tensor(np.repeat(norm.norm_img(init_grids), K, axis=0))
    speeds_raw = Tensor(np.repeat(init_speeds, K, axis=0))  # (KB, m)
    preds, out_speeds, out_actions = [], [], []
    for t in range(T):
        speeds_norm = ad.mul(ad.sub(speeds_raw, Tensor(norm.speed_mean)),
                             Tensor(1.0 / norm.speed_std))
        a_norm = action_fn(t, hist, speeds_norm)
        z = Tensor(np.repeat(z_draws[t], K, axis=0))
        pred = model.forward_one(hist, speeds_norm, a_norm, z, masks)
        # speed advances exactly by the raw delta-speed component
        d_speed = ad.add(ad.mul(a_norm.slice(1, 0, 1), Tensor(norm.action_std[0])),
                         Tensor(norm.action_mean[0]))
        new_speed = ad.add(speeds_raw.slice(1, m - 1, m), d_speed).clip(0.05, 6.0)
        preds.append(pred)
        out_speeds.append(new_speed.reshape(KB))
        out_actions.append(a_norm)
        hist = ad.concat([hist.slice(1, 1, m),
                          pred.reshape(KB, 1, 3, model.geom.grid_h, model.geom.grid_w)],
                         axis=1)
        speeds_raw = ad.concat([speeds_raw.slice(1, 1, m), new_speed], axis=1)
    return preds, out_speeds, out_actions


def tiled_action_fn(actions_norm: np.ndarray, K: int):
    """Wrap logged normalized actions (B, T, 2) as an action source."""
    def fn(t, hist, speeds):
        return Tensor(np.repeat(actions_norm[:, t], K, axis=0))
    return fn


# ----------------------------------------------------------------- cost head


class CostHead(Module):
    """Sigmoid head predicting (proximity, lane) costs of a single frame.

    Either owns a fresh encoder or borrows the forward model's target
    encoder (frozen); the MLP on top is always its own.
    """

    def __init__(self, model: ForwardModel, seed: int, encoder: str = "fresh"):
        if encoder not in ("fresh", "model"):
            raise ValueError(f"encoder must be 'fresh' or 'model', got {encoder!r}")
        self.borrowed = encoder == "model"
        if self.borrowed:
            # dict storage hides the borrowed encoder from parameter discovery:
            # it stays frozen and is saved with the model, not with the head
            self._ref = {"enc": model.q_encoder}
        else:
            self.enc = _ConvEncoder(3, model.cfg.channels, model.cfg.strides,
                                    model.geom, seed, "costenc")
        n = model.q_encoder.n_out if self.borrowed else self.enc.n_out
        self.mlp = [Linear(n + 1, 64, substream(seed, "init", "cost0")),
                    Linear(64, 2, substream(seed, "init", "cost1"))]

    def __call__(self, grid_norm: Tensor, speed_norm: Tensor) -> Tensor:
        enc = self._ref["enc"] if self.borrowed else self.enc
        h = enc(grid_norm)
        if self.borrowed:
            h = ad.stop_gradient(h)
        h = ad.concat([h, speed_norm.reshape(-1, 1)], axis=1)
        return self.mlp[1](self.mlp[0](h).relu()).sigmoid()


def train_cost_head(model: ForwardModel, norm: Normalizer, dataset: TransitionDataset,
                    seed: int, steps: int = 300, batch_size: int = 32,
                    lr: float = 1e-3, encoder: str = "fresh") -> Tuple[CostHead, TrainLog]:
    """Fit the head on true frames labeled with their analytic costs."""
    head = CostHead(model, seed, encoder)
    opt = Adam(head.parameters(), lr=lr)
    rng = substream(seed, "cost-train")
    geom = model.geom
    log = TrainLog([])
    for step in range(steps):
        idx = rng.integers(0, len(dataset), batch_size)
        batch = dataset.batch(idx)
        grids = batch.target_grids[:, 0]
        speeds = batch.target_speeds[:, 0]
        labels = np.array([eval_cost(g, s, geom) for g, s in zip(grids, speeds)])
        pred = head(Tensor(norm.norm_img(grids)), Tensor(norm.norm_speed(speeds)))
        err = ad.sub(pred, Tensor(labels))
        loss = ad.mul(err, err).sum(axis=1).mean()
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        if step % 100 == 0 or step == steps - 1:
            log.rows.append({"step": step, "loss": loss.item()})
    return head, log


# ---------------------------------------------------------------- container


def save_model(path, model: ForwardModel, norm: Normalizer) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(norm.state_dict())
    cfg = model.cfg
    tensors["hp"] = np.array([cfg.history, cfg.nz,
                              cfg.p_dropout, cfg.beta, cfg.p_u, cfg.logvar_clip])
    tensors["hp.channels"] = np.array(cfg.channels, dtype=float)
    tensors["hp.strides"] = np.array(cfg.strides, dtype=float)
    tensors["geom"] = np.array([model.geom.n_lanes, model.geom.lane_width_m,
                                model.geom.road_length_m, model.geom.grid_h,
                                model.geom.grid_w, model.geom.resolution_m])
    save_tensors(path, tensors)


def load_model(path, geom: RoadGeometry) -> Tuple[ForwardModel, Normalizer]:
    state = load_tensors(path)
    hp = state["hp"]
    g = state["geom"]
    if (int(g[3]), int(g[4])) != (geom.grid_h, geom.grid_w):
        raise ValueError(f"checkpoint grid {int(g[3])}x{int(g[4])} does not match "
                         f"geometry {geom.grid_h}x{geom.grid_w}")
    cfg = ModelConfig(history=int(hp[0]), nz=int(hp[1]),
                      channels=tuple(int(c) for c in state["hp.channels"]),
                      strides=tuple(int(s) for s in state["hp.strides"]),
                      p_dropout=float(hp[2]), beta=float(hp[3]), p_u=float(hp[4]),
                      logvar_clip=float(hp[5]))
    model = ForwardModel(geom, cfg, seed=0)
    model.load_state_dict({k[len("model."):]: v for k, v in state.items()
                           if k.startswith("model.")})
    return model, Normalizer.from_state(state)
