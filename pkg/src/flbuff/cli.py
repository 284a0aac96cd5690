"""Experiment runner: single runs, ablation sweeps, shadow/encoder prep.

Commands:
    flbuff run    --config cfg.json [--seed N] [--out-dir DIR] [--workers N]
    flbuff sweep  --config cfg.json --axis AXIS --values v1,v2,...
    flbuff shadow --config cfg.json [--force]

Every output file starts with a comment line carrying the config hash and
master seed, so a results directory is self-identifying and re-runnable.
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import defense, orchestrator
from .nn import ConfigError
from .orchestrator import ExperimentConfig

SWEEP_AXES = ("noniid_degree", "n_attackers", "poison_rate", "gamma")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

METRICS_COLUMNS = (
    "round,acc,asr,n_malicious_selected,n_flagged,mean_score_benign,mean_score_malicious"
)


def _fmt(x: float) -> str:
    return repr(float(x))


def _comment_line(cfg: ExperimentConfig) -> str:
    return f"# config {cfg.config_hash()} seed {cfg.seed}\n"


def write_metrics_csv(path, cfg: ExperimentConfig, metrics) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_comment_line(cfg))
        fh.write(METRICS_COLUMNS + "\n")
        for m in metrics:
            fh.write(
                f"{m.round},{_fmt(m.acc)},{_fmt(m.asr)},{m.n_malicious_selected},"
                f"{m.n_flagged},{_fmt(m.mean_score_benign)},{_fmt(m.mean_score_malicious)}\n"
            )


def write_report_json(path, cfg: ExperimentConfig, result) -> None:
    report = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "final_acc": result.final_acc,
        "final_asr": result.final_asr,
        "wall_clock_seconds": result.wall_clock,
        "rounds": [
            {
                "round": m.round,
                "acc": m.acc,
                "asr": m.asr,
                "selected": list(m.selected),
                "n_malicious_selected": m.n_malicious_selected,
                "n_flagged": m.n_flagged,
                "mean_score_benign": m.mean_score_benign,
                "mean_score_malicious": m.mean_score_malicious,
            }
            for m in result.metrics
        ],
    }
    with open(path, "w") as fh:
        fh.write(_comment_line(cfg))
        json.dump(report, fh, indent=2, allow_nan=True)
        fh.write("\n")


def read_report_json(path) -> dict:
    """Load a report, skipping the leading comment line."""
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return json.loads("".join(lines))


def write_embeddings_csv(path, cfg: ExperimentConfig, rows, embed_dim: int) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_comment_line(cfg))
        fh.write(defense.embedding_csv_header(embed_dim) + "\n")
        for row in rows:
            fh.write(row + "\n")


def load_config(path, overrides: dict) -> ExperimentConfig:
    raw_path = Path(path)
    if not raw_path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(raw_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ExperimentConfig.from_dict(raw)
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    out = args.out_dir or os.environ.get("FLBUFF_OUT_DIR") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers})
    out = _out_dir(args)
    result = orchestrator.run_experiment(cfg)
    write_metrics_csv(out / "metrics.csv", cfg, result.metrics)
    write_report_json(out / "report.json", cfg, result)
    if cfg.emit_embeddings and result.encoder is not None:
        write_embeddings_csv(
            out / "embeddings.csv", cfg, result.embeddings, result.encoder.embed_dim
        )
    print(
        f"run complete: rounds={cfg.rounds} final_acc={result.final_acc:.4f} "
        f"final_asr={result.final_asr:.4f} ({result.wall_clock:.1f}s)"
    )
    return EXIT_OK


def _sweep_config(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    import dataclasses

    if axis == "noniid_degree":
        if cfg.partition == "iid":
            raise ConfigError("noniid_degree sweeps need a non-iid partition kind")
        return dataclasses.replace(cfg, noniid_degree=float(value))
    if axis == "n_attackers":
        ratio = float(value) / cfg.n_clients
        if not 0 <= ratio < 0.5:
            raise ConfigError(f"{value} attackers violates the minority constraint")
        return dataclasses.replace(cfg, malicious_ratio=ratio)
    if axis == "poison_rate":
        return dataclasses.replace(cfg, poison_rate=float(value))
    if axis == "gamma":
        return dataclasses.replace(cfg, gamma=float(value))
    raise ConfigError(f"unknown sweep axis {axis!r}")


def cmd_sweep(args) -> int:
    import dataclasses

    cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers})
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad sweep values: {exc}") from exc
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = _out_dir(args)

    # one defense model, reused for every grid cell of the sweep
    encoder = None
    pools = None
    if cfg.defense == "flbuff":
        pools = orchestrator.build_pools(cfg)
        encoder, _ = orchestrator.prepare_encoder(cfg, pools)

    rows = []
    for value in values:
        variant = _sweep_config(cfg, args.axis, value)
        variant.validate()
        res = orchestrator.run_experiment(
            variant, encoder=encoder, pools=pools if _same_pools(cfg, variant) else None
        )
        rows.append((value, variant.defense, res.final_acc, res.final_asr))
        if cfg.defense != "fedavg":
            baseline = dataclasses.replace(variant, defense="fedavg")
            res_b = orchestrator.run_experiment(
                baseline, pools=pools if _same_pools(cfg, baseline) else None
            )
            rows.append((value, "fedavg", res_b.final_acc, res_b.final_asr))
    rows.sort(key=lambda r: (r[0], r[1]))

    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        fh.write(_comment_line(cfg))
        fh.write("axis,value,defense,final_acc,final_asr,seed\n")
        for value, name, acc, asr in rows:
            fh.write(f"{args.axis},{_fmt(value)},{name},{_fmt(acc)},{_fmt(asr)},{cfg.seed}\n")
    print(f"sweep complete: {len(rows)} rows -> {path}")
    return EXIT_OK


def _same_pools(base: ExperimentConfig, variant: ExperimentConfig) -> bool:
    """Pools depend only on dataset/split/trigger fields; reuse when unchanged."""
    keys = (
        "dataset", "blob_classes", "blob_dim", "blob_per_class", "blob_spread",
        "idx_images", "idx_labels", "train_size", "test_size", "aux_pool_size",
        "trigger_coords", "trigger_value", "target_label", "aux_size",
        "aux_source", "seed",
    )
    return all(getattr(base, k) == getattr(variant, k) for k in keys)


def cmd_shadow(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers})
    out = _out_dir(args)
    enc_path = out / "encoder.ckpt"
    summary_path = out / "shadow_summary.json"
    if (enc_path.exists() or summary_path.exists()) and not args.force:
        print(f"refusing to overwrite {enc_path}; pass --force to replace", file=sys.stderr)
        return EXIT_RUNTIME

    pools = orchestrator.build_pools(cfg)
    trainset = orchestrator.collect_defense_trainset(cfg, pools)
    enc = defense.train_defense(
        trainset, cfg.defense_config(),
        seed=orchestrator.stream_seed(cfg.seed, orchestrator._T_DEFTRAIN),
    )
    defense.save_encoder(enc, cfg.gamma, cfg.aux_size, enc_path)
    n_mal = int(np.sum(trainset.labels == 1))
    summary = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "shadow_rounds": cfg.shadow_rounds,
        "sequences": len(trainset.sequences),
        "malicious_sequences": n_mal,
        "benign_sequences": len(trainset.sequences) - n_mal,
        "plr_dim": int(trainset.sequences[0].rows.shape[1]),
        "aux_size": cfg.aux_size,
        "encoder_checkpoint": str(enc_path),
    }
    with open(summary_path, "w") as fh:
        fh.write(_comment_line(cfg))
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(
        f"shadow complete: {summary['sequences']} sequences "
        f"({n_mal} malicious) -> {enc_path}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flbuff",
        description="Deterministic federated-learning backdoor-defense simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--out-dir", default=None, help="output directory (env FLBUFF_OUT_DIR)")
        p.add_argument("--workers", type=int, default=None, help="client-training threads")

    p_run = sub.add_parser("run", help="run one experiment, write metrics + report")
    common(p_run)

    p_sweep = sub.add_parser("sweep", help="run an ablation grid, write sweep.csv")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated grid values")

    p_shadow = sub.add_parser("shadow", help="collect shadow data, train + save encoder")
    common(p_shadow)
    p_shadow.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "sweep": cmd_sweep, "shadow": cmd_shadow}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to exit code 3
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
