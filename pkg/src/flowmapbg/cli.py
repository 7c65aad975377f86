"""Command-line orchestration: train | eval | sweep | verify | sample.

All commands take a JSON config document (schema-validated up front) plus
flag overrides; every output file embeds the config content hash and the
seed. Randomness flows from the root seed through named streams, so
reruns with identical inputs reproduce identical sample CSV bodies.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .boltzmann import (
    ess,
    snis_resample,
    w2_energy,
    w2_torus,
)
from .cnf_baseline import OdeConfig, TraceProbe, cnf_sample_and_likelihood, euler_sample_and_likelihood
from .flowmap_sampler import (
    flow_step,
    round_trip_error,
    sample_with_likelihood,
    write_sample_set,
)
from .losses import LossConfig
from .model import FlowMapModel, ModelConfig
from .schedules import KINDS, make_grid
from .streams import stream
from .targets import biased_training_set, make_target, read_samples_csv
from .trainer import TrainConfig, train, train_reverse_auxiliary


class ConfigError(ValueError):
    pass


REQUIRED_FIELDS = ("target.kind", "model.dim", "train.steps", "seed")

DEFAULT_SWEEP_VALUES = {
    "steps": [1, 2, 4, 8, 16],
    "lambda_r": [1.0, 10.0, 1e2, 1e3, 1e4, 1e5],
    "schedule": list(KINDS),
    "tolerance": [1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
    "samples": [1000, 2000, 5000, 10000],
}


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}")
    validate_config(cfg)
    return cfg


def _lookup(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def validate_config(cfg: dict) -> None:
    for dotted in REQUIRED_FIELDS:
        if _lookup(cfg, dotted) is None:
            raise ConfigError(f"missing required config field: {dotted}")
    if cfg["target"]["kind"] not in ("gmm", "gmm2d", "double_well", "vonmises_torus"):
        raise ConfigError(f"unknown target.kind: {cfg['target']['kind']}")
    grid = cfg.get("grid", {})
    if grid.get("kind", "edm") not in KINDS:
        raise ConfigError(f"unknown grid.kind: {grid.get('kind')}")


def config_hash(cfg: dict) -> str:
    """Content hash of the semantic configuration (output paths excluded)."""
    semantic = {k: v for k, v in cfg.items() if k != "out_dir"}
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------


def build_target(cfg: dict):
    return make_target(cfg["target"])


def build_model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        dim=int(m["dim"]),
        hidden_width=int(m.get("hidden_width", 128)),
        depth=int(m.get("depth", 4)),
        time_embed_dim=int(m.get("time_embed_dim", 16)),
        activation=m.get("activation", "silu"),
        freq_min=float(m.get("freq_min", 1.0)),
        freq_max=float(m.get("freq_max", 64.0)),
    )


def build_loss_config(cfg: dict) -> LossConfig:
    l = cfg.get("train", {}).get("loss", {})
    return LossConfig(
        lambda_avg=float(l.get("lambda_avg", 1.0)),
        lambda_r=float(l.get("lambda_r", 10.0)),
        p_same=float(l.get("p_same", 0.25)),
        variant=l.get("variant", "meanflow"),
        split_lambda=float(l.get("split_lambda", 0.5)),
    )


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        steps=int(t["steps"]),
        batch_size=int(t.get("batch_size", 256)),
        lr=float(t.get("lr", 5e-4)),
        betas=tuple(t.get("betas", (0.9, 0.999))),
        eps=float(t.get("eps", 1e-8)),
        weight_decay=float(t.get("weight_decay", 1e-4)),
        warmup_frac=float(t.get("warmup_frac", 0.05)),
        ema_decay=float(t.get("ema_decay", 0.999)),
        seed=int(cfg["seed"]),
        grad_clip=float(t.get("grad_clip", 10.0)),
        loss=build_loss_config(cfg),
        checkpoint_every=int(t.get("checkpoint_every", 0)),
    )


def build_grid(cfg: dict, steps=None, kind=None):
    g = dict(cfg.get("grid", {}))
    kind = kind or g.pop("kind", "edm")
    n = int(steps if steps is not None else g.pop("steps", 8))
    g.pop("steps", None)
    return make_grid(kind, n, **g)


def build_ode_config(cfg: dict, atol=None, rtol=None) -> OdeConfig:
    e = cfg.get("eval", {})
    return OdeConfig(
        atol=float(atol if atol is not None else e.get("atol", 1e-5)),
        rtol=float(rtol if rtol is not None else e.get("rtol", 1e-5)),
    )


# ---------------------------------------------------------------------------
# shared evaluation pipeline
# ---------------------------------------------------------------------------


def run_sampler(model, target, cfg, sampler, seed, k, grid=None, atol=None, rtol=None, trace=None, euler_steps=None, use_ema=True):
    if sampler == "flowmap":
        grid = grid if grid is not None else build_grid(cfg)
        return sample_with_likelihood(model, grid, k, seed, target=target, use_ema=use_ema)
    if sampler == "dopri5":
        probe = TraceProbe(trace or cfg.get("eval", {}).get("trace", "exact"))
        return cnf_sample_and_likelihood(
            model, k, seed, cfg=build_ode_config(cfg, atol, rtol), trace=probe, target=target, use_ema=use_ema
        )
    if sampler == "euler":
        n = int(euler_steps if euler_steps is not None else cfg.get("eval", {}).get("euler_steps", 64))
        return euler_sample_and_likelihood(model, n, k, seed, target=target, use_ema=use_ema)
    raise ConfigError(f"unknown sampler {sampler!r}; choose flowmap|dopri5|euler")


def compute_metrics(samples, target, cfg, seed) -> dict:
    """ESS plus Wasserstein metrics of the SNIS-resampled ensemble against a
    held-out exact test set (proposal-side W2 reported alongside)."""
    k_ref = int(cfg.get("eval", {}).get("reference_k", samples.x.shape[0]))
    ref = target.exact_sample(stream(seed, "eval-reference"), k_ref)
    resampled = snis_resample(stream(seed, "eval-resample"), samples)
    metrics = {
        "ess": ess(samples.logw[samples.valid]),
        "w2_energy": w2_energy(target.energy(resampled), target.energy(ref)),
        "w2_energy_proposal": w2_energy(target.energy(samples.x[samples.valid]), target.energy(ref)),
        "w2_torus": (
            w2_torus(resampled, ref) if getattr(target, "is_toroidal", False) else None
        ),
        "n_valid": samples.n_valid,
        "n_total": int(samples.x.shape[0]),
        "nfe_total": samples.nfe_total,
        "nfe_per_sample": samples.nfe_per_sample,
    }
    return metrics


def write_reference_csv(path, x, energy) -> None:
    with open(path, "w") as fh:
        cols = [f"x_{i}" for i in range(x.shape[1])] + ["energy"]
        fh.write(",".join(cols) + "\n")
        for row, e in zip(x, energy):
            fh.write(",".join(repr(float(v)) for v in row) + f",{float(e)!r}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _apply_common_overrides(cfg, args)
    out = Path(cfg.get("out_dir", "runs/train"))
    out.mkdir(parents=True, exist_ok=True)
    target = build_target(cfg)
    data = None
    bias = cfg.get("bias")
    if bias is not None:
        data = biased_training_set(
            target, bias["weights"], int(bias.get("n", 100_000)), int(cfg["seed"]), out / "train_set.csv"
        )
    elif cfg.get("train", {}).get("data_csv"):
        data = read_samples_csv(cfg["train"]["data_csv"])
    result = train(
        target,
        build_train_config(cfg),
        build_model_config(cfg),
        out_dir=out,
        data=data,
        resume_from=args.resume,
    )
    summary = {
        "config_hash": config_hash(cfg),
        "seed": int(cfg["seed"]),
        "steps": int(cfg["train"]["steps"]),
        "skipped": result.skipped,
        "healthy": result.healthy,
        "checkpoint": str(result.checkpoint_path),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary))
    return 0 if result.healthy else 3


def _eval_once(model, target, cfg, args, out: Path, tag: str = "samples"):
    seed = int(cfg["seed"])
    k = int(args.k_samples or cfg.get("eval", {}).get("k_samples", 10_000))
    grid = None
    if (args.sampler or cfg.get("eval", {}).get("sampler", "flowmap")) == "flowmap":
        grid = build_grid(cfg, steps=args.steps, kind=args.schedule)
    sampler = args.sampler or cfg.get("eval", {}).get("sampler", "flowmap")
    t0 = time.perf_counter()
    samples = run_sampler(
        model, target, cfg, sampler, seed, k,
        grid=grid, atol=args.atol, rtol=args.rtol, trace=args.trace,
        euler_steps=args.steps if sampler == "euler" else None,
        use_ema=not args.no_ema,
    )
    wall_ms = (time.perf_counter() - t0) * 1e3
    metrics = compute_metrics(samples, target, cfg, seed)
    metrics.update(
        {
            "wall_ms": wall_ms,
            "config_hash": config_hash(cfg),
            "seed": seed,
            "sampler": sampler,
        }
    )
    write_sample_set(out / tag, samples, {"config_hash": config_hash(cfg)})
    return samples, metrics


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _apply_common_overrides(cfg, args)
    out = Path(cfg.get("out_dir", "runs/eval"))
    out.mkdir(parents=True, exist_ok=True)
    target = build_target(cfg)
    model = FlowMapModel.load(args.checkpoint)
    samples, metrics = _eval_once(model, target, cfg, args, out)
    ref = target.exact_sample(stream(int(cfg["seed"]), "eval-reference"), int(cfg.get("eval", {}).get("reference_k", samples.x.shape[0])))
    write_reference_csv(out / "reference.csv", ref, target.energy(ref))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    print(json.dumps(metrics))
    return 0


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    _apply_common_overrides(cfg, args)
    out = Path(cfg.get("out_dir", "runs/sample"))
    out.mkdir(parents=True, exist_ok=True)
    target = build_target(cfg)
    model = FlowMapModel.load(args.checkpoint)
    seed = int(cfg["seed"])
    k = int(args.k_samples or cfg.get("eval", {}).get("k_samples", 10_000))
    sampler = args.sampler or "flowmap"
    grid = build_grid(cfg, steps=args.steps, kind=args.schedule) if sampler == "flowmap" else None
    samples = run_sampler(
        model, target, cfg, sampler, seed, k, grid=grid,
        atol=args.atol, rtol=args.rtol, trace=args.trace,
        euler_steps=args.steps if sampler == "euler" else None,
        use_ema=not args.no_ema,
    )
    csv_path, _ = write_sample_set(out / "samples", samples, {"config_hash": config_hash(cfg)})
    print(str(csv_path))
    return 0


SWEEP_COLUMNS = (
    "axis",
    "value",
    "seed",
    "sampler",
    "nfe_per_sample",
    "ess",
    "w2_energy",
    "w2_energy_proposal",
    "w2_torus",
    "n_valid",
    "n_total",
    "wall_ms",
    "config_hash",
)


def _sweep_cell(model, target, cfg, axis, value, seed, args):
    local = json.loads(json.dumps(cfg))
    local["seed"] = int(seed)
    sampler = "flowmap"
    kwargs = {}
    if axis == "steps":
        kwargs["grid"] = build_grid(cfg, steps=int(value))
    elif axis == "schedule":
        kwargs["grid"] = build_grid(cfg, kind=str(value))
    elif axis == "tolerance":
        sampler = "dopri5"
        kwargs["atol"] = kwargs["rtol"] = float(value)
    elif axis == "samples":
        pass
    k = int(value) if axis == "samples" else int(
        args.k_samples or cfg.get("eval", {}).get("k_samples", 10_000)
    )
    t0 = time.perf_counter()
    samples = run_sampler(model, target, local, sampler, int(seed), k, use_ema=not args.no_ema, **kwargs)
    wall_ms = (time.perf_counter() - t0) * 1e3
    metrics = compute_metrics(samples, target, local, int(seed))
    return {
        "axis": axis,
        "value": value,
        "seed": int(seed),
        "sampler": sampler if axis != "tolerance" else "dopri5-exact",
        "nfe_per_sample": metrics["nfe_per_sample"],
        "ess": metrics["ess"],
        "w2_energy": metrics["w2_energy"],
        "w2_energy_proposal": metrics["w2_energy_proposal"],
        "w2_torus": metrics["w2_torus"] if metrics["w2_torus"] is not None else "",
        "n_valid": metrics["n_valid"],
        "n_total": metrics["n_total"],
        "wall_ms": wall_ms,
        "config_hash": config_hash(cfg),
    }


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    _apply_common_overrides(cfg, args)
    out = Path(cfg.get("out_dir", "runs/sweep"))
    out.mkdir(parents=True, exist_ok=True)
    target = build_target(cfg)
    axis = args.axis
    sweep_cfg = cfg.get("sweep", {})
    values = sweep_cfg.get("values", DEFAULT_SWEEP_VALUES[axis])
    seeds = sweep_cfg.get("seeds", [int(cfg["seed"]) + i for i in range(3)])

    rows = []
    if axis == "lambda_r":
        for value in values:
            for seed in seeds:
                local = json.loads(json.dumps(cfg))
                local["seed"] = int(seed)
                local.setdefault("train", {}).setdefault("loss", {})["lambda_r"] = float(value)
                run_dir = out / f"lambda_r_{value:g}_seed{seed}"
                result = train(
                    target, build_train_config(local), build_model_config(local), out_dir=run_dir
                )
                rt = round_trip_error(result.model, build_grid(cfg), k=2000, seed=int(seed))
                row = _sweep_cell(result.model, target, cfg, axis, value, seed, args)
                row["round_trip_mean"] = rt["mean"]
                rows.append(row)
    else:
        model = FlowMapModel.load(args.checkpoint)
        for value in values:
            for seed in seeds:
                rows.append(_sweep_cell(model, target, cfg, axis, value, seed, args))

    columns = list(SWEEP_COLUMNS) + (["round_trip_mean"] if axis == "lambda_r" else [])
    csv_path = out / f"sweep_{axis}.csv"
    with open(csv_path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(row[c]) for c in columns) + "\n")
    sidecar = {
        "axis": axis,
        "values": values,
        "seeds": seeds,
        "config_hash": config_hash(cfg),
    }
    (out / f"sweep_{axis}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    print(str(csv_path))
    return 0


def _csv_cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def verify_model(model, target, cfg, seed: int, aux_steps: int | None = None) -> dict:
    """Invertibility verification: forward-backward round trip, auxiliary
    reverse flow reconstruction, and log-det versus finite differences."""
    grid = build_grid(cfg)
    vcfg = cfg.get("verify", {})
    rt_threshold = float(vcfg.get("round_trip_threshold", 5e-2))
    recon_threshold = float(vcfg.get("reconstruction_threshold", 1e-3))
    logdet_threshold = float(vcfg.get("logdet_threshold", 1e-6))

    checks = []
    rt = round_trip_error(model, grid, k=int(vcfg.get("round_trip_k", 2000)), seed=seed)
    checks.append(
        {
            "name": "round_trip",
            "measured": rt["mean"],
            "threshold": rt_threshold,
            "passed": bool(rt["mean"] < rt_threshold),
        }
    )

    rng = stream(seed, "verify-logdet")
    x = rng.standard_normal((int(vcfg.get("logdet_k", 64)), model.dim))
    times = grid.flow_ascending()
    max_err = 0.0
    n_flagged = 0
    h = 1e-6
    for s, t in zip(times[:-1], times[1:]):
        res = flow_step(model, x, float(s), float(t))
        fd = np.empty((x.shape[0], model.dim, model.dim))
        for j in range(model.dim):
            e = np.zeros((1, model.dim))
            e[0, j] = h
            fd[:, :, j] = (
                model.step(x + e, float(s), float(t)) - model.step(x - e, float(s), float(t))
            ) / (2 * h)
        sign_fd, log_fd = np.linalg.slogdet(fd)
        ok = res.valid & (sign_fd != 0)
        n_flagged += int((~res.valid).sum())
        if np.any(ok):
            max_err = max(max_err, float(np.max(np.abs(res.logdet[ok] - log_fd[ok]))))
        x = res.x_next
    checks.append(
        {
            "name": "logdet_vs_finite_difference",
            "measured": max_err,
            "threshold": logdet_threshold,
            "passed": bool(max_err < logdet_threshold and n_flagged == 0),
            "n_non_invertible_rows": n_flagged,
        }
    )

    steps = int(aux_steps if aux_steps is not None else vcfg.get("aux_steps", 4000))
    aux_cfg = TrainConfig(
        steps=steps,
        batch_size=int(vcfg.get("aux_batch", 256)),
        lr=float(vcfg.get("aux_lr", 1e-3)),
        seed=seed,
        loss=build_loss_config(cfg),
    )
    _, recon = train_reverse_auxiliary(
        model,
        n_pairs=int(vcfg.get("aux_pairs", 200_000)),
        cfg=aux_cfg,
        grid=grid,
        eval_k=int(vcfg.get("aux_eval_k", 2000)),
    )
    checks.append(
        {
            "name": "auxiliary_reverse_reconstruction",
            "measured": recon,
            "threshold": recon_threshold,
            "passed": bool(recon < recon_threshold),
        }
    )
    return {
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
        "seed": seed,
        "config_hash": config_hash(cfg),
    }


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    _apply_common_overrides(cfg, args)
    out = Path(cfg.get("out_dir", "runs/verify"))
    out.mkdir(parents=True, exist_ok=True)
    target = build_target(cfg)
    model = FlowMapModel.load(args.checkpoint)
    report = verify_model(model, target, cfg, int(cfg["seed"]))
    (out / "verification.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    for c in report["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"[{status}] {c['name']}: measured={c['measured']:.3e} threshold={c['threshold']:.3e}")
    return 0 if report["passed"] else 4


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _apply_common_overrides(cfg: dict, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
    if getattr(args, "out", None) is not None:
        cfg["out_dir"] = args.out


def _add_common(p: argparse.ArgumentParser, checkpoint: bool) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--sampler", choices=("flowmap", "dopri5", "euler"), default=None)
    p.add_argument("--steps", type=int, default=None, help="inference steps (flowmap/euler)")
    p.add_argument("--schedule", choices=KINDS, default=None)
    p.add_argument("--atol", type=float, default=None)
    p.add_argument("--rtol", type=float, default=None)
    p.add_argument("--trace", choices=("exact", "hutchinson"), default=None)
    p.add_argument("--k-samples", type=int, default=None)
    p.add_argument("--no-ema", action="store_true", help="evaluate raw weights instead of EMA")
    if checkpoint:
        p.add_argument("--checkpoint", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowmapbg")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a flow map to the configured target")
    _add_common(p_train, checkpoint=False)
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="sample with likelihoods and compute metrics")
    _add_common(p_eval, checkpoint=True)
    p_eval.set_defaults(fn=cmd_eval)

    p_sample = sub.add_parser("sample", help="write a sample CSV without metrics")
    _add_common(p_sample, checkpoint=True)
    p_sample.set_defaults(fn=cmd_sample)

    p_sweep = sub.add_parser("sweep", help="run an ablation axis, one CSV row per cell")
    _add_common(p_sweep, checkpoint=False)
    p_sweep.add_argument("--axis", required=True, choices=tuple(DEFAULT_SWEEP_VALUES))
    p_sweep.add_argument("--checkpoint", default=None, help="required for eval-only axes")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_verify = sub.add_parser("verify", help="invertibility verification report")
    _add_common(p_verify, checkpoint=True)
    p_verify.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
