"""Pipeline driver: gen-data -> train-model -> calibrate -> train-policy
-> evaluate -> report, each stage reading the previous one's artifacts
from the shared --out directory.

Every stage writes the fully resolved configuration next to its outputs
and appends a timestamped line to log.txt; stdout itself stays free of
timestamps so reruns are textually comparable.
"""

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .config import ConfigError, RunConfig, load_config
from .data import (TrafficConfig, TransitionDataset, generate_traffic,
                   load_traffic_csv, split_cars, write_traffic_csv)
from .dynamics import (ForwardModel, TrainingDiverged, load_model, save_model,
                       train_forward_model)
from .environment import ReplayEnv, evaluate_policy
from .policy import (METHODS, ActingPolicy, NoopPolicy, load_policy,
                     method_config, rollout_uncertainty, save_policy,
                     train_policy)
from .uncertainty import UncertaintyCalibration, calibrate


class StageError(Exception):
    """A pipeline stage cannot run; the message says what to do about it."""


# ------------------------------------------------------------------ plumbing


def _log(out: Path, msg: str) -> None:
    print(msg)
    with open(out / "log.txt", "a") as f:
        f.write(time.strftime("%Y-%m-%dT%H:%M:%S ") + msg + "\n")


def _prepare(args) -> tuple:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = args.seed if args.seed is not None else cfg.seed
    (out / "resolved_config.json").write_text(cfg.resolved_json())
    return cfg, seed, out


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path}; run `mpdrive {producer}` first")
    return path


def _write_log_csv(path: Path, rows) -> None:
    if not rows:
        return
    lead = [k for k in ("phase", "step", "loss") if k in rows[0]]
    keys = lead + sorted(set().union(*rows) - set(lead))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _policy_tag(method: str, T: int, latent_source: str, seed: int) -> str:
    tag = f"{method}_T{T}"
    if latent_source != method_config(method).latent_source:
        tag += f"_{latent_source}"
    return f"{tag}_seed{seed}"


def _load_cars(out: Path):
    cars = load_traffic_csv(_require(out / "data" / "traffic.csv", "gen-data"))
    with open(_require(out / "data" / "splits.json", "gen-data")) as f:
        splits = json.load(f)
    return cars, {k: [int(i) for i in v] for k, v in splits.items()}


def _split_dataset(cfg, cars, splits, split: str, unroll: int) -> TransitionDataset:
    subset = {i: cars[i] for i in splits[split] if i in cars}
    ds = TransitionDataset(subset, cfg.geometry(), history=cfg.data.history,
                           unroll=unroll)
    if len(ds) == 0:
        raise StageError(f"{split} split has no windows of length "
                         f"{cfg.data.history}+{unroll}; generate more data")
    return ds


# -------------------------------------------------------------------- stages


def cmd_gen_data(args) -> int:
    cfg, seed, out = _prepare(args)
    (out / "data").mkdir(exist_ok=True)
    tcfg = TrafficConfig(n_cars=cfg.data.n_cars, max_speed=cfg.data.max_speed,
                         spawn_prob=cfg.data.spawn_prob)
    cars = generate_traffic(cfg.geometry(), tcfg, seed)
    write_traffic_csv(out / "data" / "traffic.csv", cars)
    splits = split_cars(sorted(cars), seed)
    with open(out / "data" / "splits.json", "w") as f:
        json.dump(splits, f, indent=2, sort_keys=True)
        f.write("\n")
    rows = sum(len(tr) for tr in cars.values())
    _log(out, f"gen-data: {len(cars)} cars, {rows} rows -> data/traffic.csv; "
              f"splits {len(splits['train'])}/{len(splits['val'])}/"
              f"{len(splits['test'])} (train/val/test)")
    return 0


def cmd_train_model(args) -> int:
    cfg, seed, out = _prepare(args)
    cars, splits = _load_cars(out)
    ds = _split_dataset(cfg, cars, splits, "train", unroll=1)
    (out / "model").mkdir(exist_ok=True)
    snaps = {}
    model, norm, log = train_forward_model(ds, cfg.geometry(), cfg.model, seed,
                                           snapshots=snaps)
    save_model(out / "model" / "model.bin", model, norm)
    det = ForwardModel(cfg.geometry(), cfg.model, seed)
    det.load_state_dict(snaps["phase1"])
    save_model(out / "model" / "model_det.bin", det, norm)
    _write_log_csv(out / "model" / "train_log.csv", log.rows)
    _log(out, f"train-model: {len(ds)} windows, final loss "
              f"{log.last('loss'):.4f} (recon {log.last('recon'):.4f}) -> "
              f"model/model.bin + model/model_det.bin")
    return 0


def cmd_calibrate(args) -> int:
    cfg, seed, out = _prepare(args)
    cars, splits = _load_cars(out)
    model, norm = load_model(_require(out / "model" / "model.bin",
                                      "train-model"), cfg.geometry())
    ds = _split_dataset(cfg, cars, splits, "train", unroll=cfg.uncertainty.T)
    calib = calibrate(model, norm, ds, cfg.uncertainty.T,
                      cfg.uncertainty.to_uncertainty(), seed)
    save_tensors(out / "model" / "calib.bin", calib.state_dict())
    with open(out / "model" / "calibration.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "mu", "sigma"])
        for t in range(calib.T):
            w.writerow([t, repr(float(calib.mu[t])), repr(float(calib.sigma[t]))])
    _log(out, f"calibrate: {calib.n_samples} rollouts x {calib.T} steps, "
              f"mu[0]={calib.mu[0]:.4g} sigma[0]={calib.sigma[0]:.4g} -> "
              f"model/calib.bin")
    return 0


def _policy_config(cfg, args):
    pb = cfg.policy
    method = args.method
    overrides = dict(lr=pb.lr, batch_size=pb.batch_size, steps=pb.steps,
                     clip_norm=pb.clip_norm, channels=pb.channels,
                     strides=pb.strides, hidden=pb.hidden)
    if args.rollout is not None:
        overrides["T"] = args.rollout
    elif method not in ("il1", "noop"):
        overrides["T"] = pb.T
    if args.latent_source is not None:
        overrides["latent_source"] = args.latent_source
    lam = getattr(args, "lam", None)
    if lam is not None:
        overrides["lam"] = lam
        if lam > 0:
            overrides["K"] = max(method_config(method).K, cfg.uncertainty.K)
    try:
        return method_config(method, **overrides)
    except ValueError as e:
        raise StageError(str(e))


def cmd_train_policy(args) -> int:
    cfg, seed, out = _prepare(args)
    pcfg = _policy_config(cfg, args)
    method = args.method
    tag = _policy_tag(method, pcfg.T, pcfg.latent_source, seed)
    if method == "noop":
        _log(out, "train-policy: noop has no parameters; nothing to train")
        return 0
    cars, splits = _load_cars(out)
    # the value-gradient baseline trains against the deterministic model
    model_file = "model_det.bin" if method == "vg" else "model.bin"
    model, norm = load_model(_require(out / "model" / model_file,
                                      "train-model"), cfg.geometry())
    calib = None
    if pcfg.lam > 0:
        state = load_tensors(_require(out / "model" / "calib.bin", "calibrate"))
        calib = UncertaintyCalibration.from_state(state)
    ds = _split_dataset(cfg, cars, splits, "train", unroll=max(pcfg.T, 1))
    policy, log = train_policy(method, ds, model, norm, cfg.geometry(), seed,
                               cfg=pcfg, calib=calib)
    (out / "policies").mkdir(exist_ok=True)
    save_policy(out / "policies" / f"{tag}.bin", policy, norm)
    _write_log_csv(out / "policies" / f"{tag}_log.csv", log.rows)
    _log(out, f"train-policy: {method} T={pcfg.T} lam={pcfg.lam} "
              f"latents={pcfg.latent_source}, final loss "
              f"{log.last('loss'):.4f} -> policies/{tag}.bin")
    return 0


def cmd_evaluate(args) -> int:
    cfg, seed, out = _prepare(args)
    pcfg = _policy_config(cfg, args)
    method = args.method
    tag = _policy_tag(method, pcfg.T, pcfg.latent_source, seed)
    cars, splits = _load_cars(out)
    geom = cfg.geometry()
    if method == "noop":
        policy, pnorm = None, None
        driver = NoopPolicy()
    else:
        path = _require(out / "policies" / f"{tag}.bin",
                        f"train-policy --method {method}")
        policy, pnorm = load_policy(path, geom)
        driver = ActingPolicy(policy, pnorm, mode=cfg.eval.mode, seed=seed)

    env = ReplayEnv(cars, geom, history=cfg.data.history,
                    max_steps=cfg.eval.max_steps)
    ego_ids = [i for i in splits["test"]
               if i in cars and len(cars[i]) >= cfg.data.history + 1]
    ego_ids = ego_ids[:cfg.eval.n_episodes]
    if not ego_ids:
        raise StageError("test split has no usable episodes; generate more data")
    edir = out / "eval" / tag
    edir.mkdir(parents=True, exist_ok=True)
    metrics = evaluate_policy(env, driver, ego_ids, episode_dir=str(edir))

    # how far off-distribution the policy drives the (stochastic) model
    model, mnorm = load_model(_require(out / "model" / "model.bin",
                                       "train-model"), geom)
    u_T = cfg.uncertainty.T
    ds = _split_dataset(cfg, cars, splits, "test", unroll=u_T)
    idx = sorted(set(np.linspace(0, len(ds) - 1, 16).astype(int).tolist()))
    metrics["mean_rollout_U"] = rollout_uncertainty(
        policy, model, mnorm, ds.batch(idx), T=u_T, K=cfg.uncertainty.K,
        seed=seed)

    metrics.update(method=method, seed=seed, rollout_T=pcfg.T,
                   latent_source=pcfg.latent_source)
    with open(edir / "metrics.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    _log(out, f"evaluate: {tag} success {metrics['success_rate']:.3f} "
              f"distance {metrics['mean_distance_m']:.1f} m U "
              f"{metrics['mean_rollout_U']:.4g} over "
              f"{metrics['n_episodes']} episodes -> eval/{tag}/metrics.json")
    return 0


def cmd_report(args) -> int:
    cfg, seed, out = _prepare(args)
    runs = sorted((out / "eval").glob("*/metrics.json"))
    if not runs:
        raise StageError(f"no evaluation results under {out / 'eval'}; "
                         f"run `mpdrive evaluate` first")
    by_variant = {}
    for path in runs:
        with open(path) as f:
            m = json.load(f)
        key = (m["method"], m["rollout_T"], m["latent_source"])
        by_variant.setdefault(key, []).append(m)

    (out / "report").mkdir(exist_ok=True)
    rows = []
    for (method, T, latent), ms in sorted(by_variant.items()):
        succ = np.array([m["success_rate"] for m in ms])
        dist = np.array([m["mean_distance_m"] for m in ms])
        us = np.array([m["mean_rollout_U"] for m in ms])
        sd = lambda x: float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        rows.append({
            "method": method, "rollout_T": T, "latent_source": latent,
            "n_seeds": len(ms),
            "success_rate_mean": float(succ.mean()),
            "success_rate_std": sd(succ),
            "mean_distance_m_mean": float(dist.mean()),
            "mean_distance_m_std": sd(dist),
            "mean_rollout_U": float(us.mean()),
            "success_pct": f"{100 * succ.mean():.1f} ± {100 * sd(succ):.1f}",
            "distance_m": f"{dist.mean():.1f} ± {sd(dist):.1f}",
        })
    with open(out / "report" / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    with open(out / "report" / "summary.json", "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "report" / "rollout_curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "latent_source", "rollout_T", "seed",
                    "success_rate", "mean_distance_m"])
        for (method, T, latent), ms in sorted(by_variant.items()):
            for m in sorted(ms, key=lambda m: m["seed"]):
                w.writerow([method, latent, T, m["seed"],
                            m["success_rate"], m["mean_distance_m"]])
    calib_csv = out / "model" / "calibration.csv"
    if calib_csv.exists():
        (out / "report" / "calibration.csv").write_text(calib_csv.read_text())

    header = f"{'method':8} {'T':>3} {'latents':9} {'seeds':>5} " \
             f"{'success %':>14} {'distance m':>16} {'rollout U':>10}"
    lines = [header]
    for r in rows:
        lines.append(f"{r['method']:8} {r['rollout_T']:>3} "
                     f"{r['latent_source']:9} {r['n_seeds']:>5} "
                     f"{r['success_pct']:>14} {r['distance_m']:>16} "
                     f"{r['mean_rollout_U']:>10.4g}")
    _log(out, "\n".join(lines) + "\nreport: -> report/summary.csv")
    return 0


# ---------------------------------------------------------------- entrypoint


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mpdrive",
        description="Train and evaluate driving policies on logged traffic.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, metavar="PATH",
                        help="JSON run configuration (defaults when omitted)")
        sp.add_argument("--seed", type=int, default=None, metavar="N",
                        help="override the configured seed for this stage")
        sp.add_argument("--out", required=True, metavar="DIR",
                        help="artifact directory shared by all stages")
        return sp

    def policy_flags(sp, with_lambda):
        sp.add_argument("--method", required=True, choices=METHODS)
        sp.add_argument("--rollout", type=int, default=None, metavar="T",
                        help="rollout length (default: from config)")
        sp.add_argument("--latent-source", dest="latent_source", default=None,
                        choices=("prior", "posterior"),
                        help="override the method's latent source")
        if with_lambda:
            sp.add_argument("--lambda", dest="lam", type=float, default=None,
                            metavar="F", help="uncertainty cost weight")

    common("gen-data", "simulate traffic and write the log + car splits")
    common("train-model", "fit the stochastic forward model on the train split")
    common("calibrate", "record per-step uncertainty statistics of the model")
    policy_flags(common("train-policy", "train one policy with one seed"), True)
    policy_flags(common("evaluate", "drive the test cars and write metrics"),
                 False)
    common("report", "aggregate evaluation runs into summary tables")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "gen-data": cmd_gen_data,
        "train-model": cmd_train_model,
        "calibrate": cmd_calibrate,
        "train-policy": cmd_train_policy,
        "evaluate": cmd_evaluate,
        "report": cmd_report,
    }[args.command]
    try:
        return handler(args)
    except (ConfigError, StageError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
