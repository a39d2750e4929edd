"""Command line entry point: ``recipseq <command> [options] [key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import bench as bench_mod
from .config import ConfigError, TrainingConfig, dump_config, load_config
from .data import (
    DatasetSplit,
    ParseError,
    SequenceStore,
    five_core_filter,
    generate_synthetic,
    read_interactions,
    temporal_split,
    write_interactions,
)
from .evaluation import LeakageError, evaluate_model
from .training import DivergenceError, load_checkpoint, train

logger = logging.getLogger("recipseq")

CHECKPOINT_NAME = "checkpoint.reseq"

ABLATIONS = {
    "full": {},
    "w/o DSE": {"share_embeddings": False},
    "w/o MASK": {"mask_mode": "bidirectional_all"},
    "w/o TSA": {"micro_aggregation": "mean"},
    "w/o SD": {"self_distill": False},
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def run_dir(root: str | Path, seed: int) -> Path:
    root = Path(root)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = root / f"{stamp}_seed{seed}"
    i = 1
    while path.exists():
        path = root / f"{stamp}_seed{seed}_{i}"
        i += 1
    path.mkdir(parents=True)
    return path


def _snapshot(out: Path, cfg: TrainingConfig | None = None, **extra) -> None:
    if cfg is not None:
        (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    (out / "run.json").write_text(json.dumps(extra, indent=2, default=str), encoding="utf-8")


def load_split(data_dir: str | Path) -> DatasetSplit:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.json"
    if not manifest.exists():
        raise CliError("DATA_NOT_FOUND", f"prepared data not found: {manifest} (run `prepare` first)")
    meta = json.loads(manifest.read_text(encoding="utf-8"))
    parts = {name: read_interactions(data_dir / f"{name}.tsv").records for name in ("train", "valid", "test")}
    return DatasetSplit(parts["train"], parts["valid"], parts["test"], tuple(meta["boundaries"]))


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> Path:
    recs = generate_synthetic(args.seed, args.n_u, args.n_v, args.clusters, args.events, args.horizon,
                              p_in=args.p_in, concentration=args.concentration)
    out = Path(args.out) if args.out else run_dir(args.run_root, args.seed) / "interactions.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_interactions(recs, out)
    _snapshot(out.parent, seed=args.seed, command="synth", n_u=args.n_u, n_v=args.n_v, clusters=args.clusters,
              events=args.events, horizon=args.horizon, p_in=args.p_in, concentration=args.concentration,
              records=len(recs))
    print(out)
    return out


def cmd_prepare(args) -> Path:
    parsed = read_interactions(args.input)
    filtered, report = five_core_filter(parsed.records, k=args.core)
    if not filtered:
        raise CliError("EMPTY_AFTER_FILTER", "no interactions survive the k-core filter")
    split = temporal_split(filtered, tuple(args.ratios))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        write_interactions(getattr(split, name), out / f"{name}.tsv")
    manifest = {
        "source": str(args.input),
        "records_in": len(parsed.records) + parsed.duplicates,
        "duplicates_dropped": parsed.duplicates,
        "records_filtered": len(filtered),
        "removed_users": {"U": sorted(report.removed_u), "V": sorted(report.removed_v)},
        "filter_rounds": report.rounds,
        "boundaries": list(split.boundaries),
        "counts": {"train": len(split.train), "valid": len(split.valid), "test": len(split.test)},
        "ratios": list(args.ratios),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    print(json.dumps(manifest["counts"]))
    return out


def _train_one(cfg: TrainingConfig, split: DatasetSplit, out: Path):
    store = SequenceStore(split.all_records)
    result = train(cfg, split, store)
    result.checkpoint.save(out / CHECKPOINT_NAME)
    with (out / "loss_log.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "l_ma", "l_mi", "l_sd", "valid_metric", "seconds"])
        for h in result.checkpoint.history:
            w.writerow([h["epoch"], h["loss"], h["l_ma"], h["l_mi"], h["l_sd"], h["valid_metric"], h["seconds"]])
    return result, store


def cmd_train(args) -> Path:
    cfg = load_config(args.config, args.overrides)
    split = load_split(args.data)
    out = run_dir(args.run_root, cfg.seed)
    _snapshot(out, cfg, seed=cfg.seed, command="train", data=str(args.data))
    result, _ = _train_one(cfg, split, out)
    print(out / CHECKPOINT_NAME)
    logger.info("trained %d epochs; best epoch %d valid %.4f", result.epochs_run, result.checkpoint.epoch,
                result.checkpoint.best_metric)
    return out


def cmd_eval(args) -> Path:
    ckpt_path = Path(args.checkpoint) if args.checkpoint else None
    if ckpt_path is None or not ckpt_path.exists():
        raise CliError("CHECKPOINT_NOT_FOUND", f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    split = load_split(args.data)
    records = getattr(split, args.part)
    if not records:
        raise CliError("EMPTY_SPLIT", f"{args.part} split is empty")
    store = SequenceStore(split.all_records, ckpt.vocab["U"], ckpt.vocab["V"])
    report = evaluate_model(ckpt.model, store, records, args.k, args.negatives, args.seed)
    out = run_dir(args.run_root, args.seed)
    _snapshot(out, ckpt.config, seed=args.seed, command="eval", checkpoint=str(ckpt_path), part=args.part)
    report.write(out)
    sys.stdout.write(report.to_text())
    return out


def cmd_bench(args) -> Path:
    rows = []
    for scorer in ("macro", "micro"):
        rows += bench_mod.measure_latency(scorer, args.n, args.d, args.batch, args.reps, seed=args.seed)
    out = run_dir(args.run_root, args.seed)
    (out / "latency.csv").write_text(bench_mod.latency_csv(rows), encoding="utf-8")
    fits = {s: bench_mod.fit_growth_exponent([r for r in rows if r.scorer == s]) for s in ("macro", "micro")}
    summary = {f"{s}_exponent": f.exponent for s, f in fits.items()}
    _snapshot(out, seed=args.seed, command="bench", d=args.d, batch=args.batch, reps=args.reps, **summary)
    sys.stdout.write(bench_mod.latency_csv(rows))
    print(f"# growth exponent: macro {fits['macro'].exponent:.3f}, micro {fits['micro'].exponent:.3f}")
    return out


def run_ablation(cfg: TrainingConfig, split: DatasetSplit, out: Path, eval_seed: int = 0, part: str = "test"):
    rows = []
    for name, change in ABLATIONS.items():
        vcfg = cfg.replace(**change)
        sub = out / name.replace("/", "").replace(" ", "_")
        sub.mkdir(parents=True, exist_ok=True)
        (sub / "config.txt").write_text(dump_config(vcfg), encoding="utf-8")
        result, store = _train_one(vcfg, split, sub)
        report = evaluate_model(result.checkpoint.model, store, getattr(split, part), vcfg.eval_k,
                                vcfg.eval_negatives, eval_seed)
        report.write(sub)
        rows.append((name, report))
    k = cfg.eval_k
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", f"u_hr@{k}", f"u_ndcg@{k}", f"v_hr@{k}", f"v_ndcg@{k}", f"mean_ndcg@{k}"])
        for name, r in rows:
            w.writerow([name, r.metrics["u"]["hr"], r.metrics["u"]["ndcg"], r.metrics["v"]["hr"],
                        r.metrics["v"]["ndcg"], r.mean_ndcg])
    table = [f"{'variant':<10}{'mean NDCG@' + str(k):>14}"]
    table += [f"{name:<10}{r.mean_ndcg:>14.4f}" for name, r in rows]
    (out / "ablation.txt").write_text("\n".join(table) + "\n", encoding="utf-8")
    return rows


def cmd_ablate(args) -> Path:
    cfg = load_config(args.config, args.overrides)
    split = load_split(args.data)
    out = run_dir(args.run_root, cfg.seed)
    _snapshot(out, cfg, seed=cfg.seed, command="ablate", data=str(args.data))
    run_ablation(cfg, split, out, args.eval_seed)
    sys.stdout.write((out / "ablation.txt").read_text(encoding="utf-8"))
    return out


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recipseq", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--run-root", default="runs", help="parent directory for run directories")

    s = sub.add_parser("synth", help="generate a seeded synthetic interaction log")
    common(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-u", type=int, default=500)
    s.add_argument("--n-v", type=int, default=500)
    s.add_argument("--clusters", type=int, default=4)
    s.add_argument("--events", type=int, default=20, help="matches per U-side user")
    s.add_argument("--horizon", type=int, default=1_000_000)
    s.add_argument("--p-in", type=float, default=0.8)
    s.add_argument("--concentration", type=float, default=4.0)
    s.add_argument("--out", help="output file (default: <run dir>/interactions.tsv)")

    s = sub.add_parser("prepare", help="parse, 5-core filter, and split a log")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--core", type=int, default=5)
    s.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))

    for name, helptext in (("train", "train a matcher"), ("ablate", "train the full model and four ablations")):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--data", required=True, help="directory written by `prepare`")
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("overrides", nargs="*", help="key=value overrides (last wins)")
        if name == "ablate":
            s.add_argument("--eval-seed", type=int, default=0)

    s = sub.add_parser("eval", help="evaluate a checkpoint with macro scoring")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--part", choices=("train", "valid", "test"), default="test")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--negatives", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("bench", help="macro vs micro matching latency")
    common(s)
    s.add_argument("--n", type=int, nargs="+", default=[8, 16, 32, 64, 128])
    s.add_argument("--d", type=int, default=64)
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--reps", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    return p


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except CliError as e:
        code, msg = e.code, str(e)
    except ConfigError as e:
        code, msg = "CONFIG_INVALID", str(e)
    except FileNotFoundError as e:
        code, msg = "FILE_NOT_FOUND", str(e)
    except ParseError as e:
        code, msg = "PARSE_ERROR", str(e)
    except LeakageError as e:
        code, msg = "LEAKAGE", str(e)
    except DivergenceError as e:
        code, msg = "DIVERGED", str(e)
    else:
        return 0
    print(f"error code={code} message={msg}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
