"""Command-line entry point: pretrain, eval, analyze, gradcheck, compare.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint
from .corpus import build_vocab, synth_corpus, text_corpus
from .gradcheck import gradcheck_config
from .model import DataError, ModelConfig, preset
from .tensor import ConfigError, UsageError
from .training import METRIC_FIELDS, TrainConfig, evaluate, fixed_masks, train

log = logging.getLogger("realformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
VARIANTS = ("post_ln", "pre_ln", "realformer")

# flag -> (section, key); section is "model", "train" or "data"
FLAG_KEYS = {
    "variant": ("model", "variant"),
    "residual_mode": ("model", "residual_mode"),
    "dropout": ("model", "dropout_rate"),
    "seed": ("model", "seed"),
    "seq_len": ("data", "seq_len"),
    "steps": ("train", "steps"),
    "warmup": ("train", "warmup_steps"),
    "lr": ("train", "peak_lr"),
    "batch": ("train", "batch_size"),
}

DATA_DEFAULTS = {"corpus": "synth:copy", "corpus_size": 2000, "seq_len": 8, "data_seed": 0, "vocab_cap": 64,
                 "dev_fraction": 0.1}


class UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageFailure(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; CLI flags take precedence")
    p.add_argument("--preset", default=None, help="architecture preset (tiny, desk, small, base, large, xlarge)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--residual-mode", choices=("auto", "sum", "running_mean"))
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seq-len", type=int, help="content tokens per segment for synthetic corpora")
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--corpus", help="synth:copy, synth:bigram, or comma-separated text files")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="realformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("pretrain", help="train an MLM and write checkpoints + metrics.csv")
    _common(p)
    p = sub.add_parser("eval", help="MLM accuracy of a checkpoint on the dev split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("analyze", help="attention entropy / JSD records for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--examples", type=int, default=64)
    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p = sub.add_parser("compare", help="all three variants x seeds on one shared data stream")
    _common(p)
    p.add_argument("--seeds", type=int, default=3)
    return parser


def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def resolve(args) -> tuple[dict, TrainConfig, dict]:
    """Merge preset defaults < config file < CLI flags."""
    file_values = read_config_file(args.config) if args.config else {}
    name = args.preset or file_values.pop("preset", "desk")
    file_values.pop("preset", None)
    model = dict(preset(name).to_dict())
    tcfg = {f.name: f.default for f in fields(TrainConfig)}
    data = dict(DATA_DEFAULTS)
    sections = {"model": model, "train": tcfg, "data": data}

    def put(key, value, from_text):
        if key in FLAG_KEYS:
            section, key = FLAG_KEYS[key]
            target = sections[section]
        else:
            target = next((s for s in sections.values() if key in s), None)
            if target is None:
                raise ConfigError(f"unknown config key {key!r}")
        target[key] = _coerce(value, target[key]) if from_text else value

    for k, v in file_values.items():
        put(k, v, True)
    for flag in FLAG_KEYS:
        v = getattr(args, flag, None)
        if v is not None:
            put(flag, v, False)
    if args.corpus is not None:
        data["corpus"] = args.corpus
    tcfg["data_seed"] = data["data_seed"]
    return model, TrainConfig(**tcfg), {**data, "preset": name}


def load_corpus(data: dict, model: dict):
    source = data["corpus"]
    if source.startswith("synth:"):
        kind = source.split(":", 1)[1]
        corpus = synth_corpus(kind, int(data["corpus_size"]), int(data["data_seed"]), int(model["vocab_size"]),
                              seq_len=int(data["seq_len"]), dev_fraction=float(data["dev_fraction"]))
        return corpus, None
    paths = [p for p in source.split(",") if p]
    vocab = build_vocab(paths, int(data["vocab_cap"]))
    corpus = text_corpus(paths, vocab, int(model["max_seq_len"]), dev_fraction=float(data["dev_fraction"]),
                         seed=int(data["data_seed"]))
    return corpus, vocab


def prepare(args) -> tuple[ModelConfig, TrainConfig, dict, object]:
    model, tcfg, data = resolve(args)
    corpus, vocab = load_corpus(data, model)
    model["vocab_size"] = corpus.vocab_size
    model["max_seq_len"] = max(int(model["max_seq_len"]), corpus.max_len)
    if vocab is not None:
        data["vocab"] = vocab.itos
    return ModelConfig.from_dict(model), tcfg, data, corpus


def echo_config(out_dir: Path, config: ModelConfig, tcfg: TrainConfig, data: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"model": config.to_dict(), "train": asdict(tcfg), "data": data}
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> int:
    config, tcfg, data, corpus = prepare(args)
    out = Path(args.out_dir)
    echo_config(out, config, tcfg, data)
    result = train(config, corpus, tcfg, out_dir=out)
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"step {last['step']} dev_loss {last['dev_loss']:.4f} dev_mlm_acc {last['dev_mlm_acc']:.4f}")
    if result.diverged:
        print("training diverged", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _checkpoint_config(args):
    ck = load_checkpoint(args.checkpoint)
    _, tcfg, data = resolve(args)
    corpus, _ = load_corpus(data, ck.config.to_dict())
    return ck, tcfg, data, corpus


def cmd_eval(args) -> int:
    ck, tcfg, data, corpus = _checkpoint_config(args)
    seqs = corpus.split("dev") or corpus.split("train")
    batches = fixed_masks(seqs, tcfg.data_seed, ck.config.vocab_size, mask_rate=tcfg.mask_rate)
    loss, acc = evaluate(ck.store, ck.config, batches)
    print(f"dev_loss {loss:.6f} dev_mlm_acc {acc:.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    ck, tcfg, data, corpus = _checkpoint_config(args)
    seqs = (corpus.split("dev") or corpus.split("train"))[: args.examples]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = ["entropy"]
    ent = analysis.collect_entropy(ck.config, ck.store, seqs)
    analysis.export_records(ent, out / "entropy.csv")
    analysis.export_summaries(analysis.summarize(ent, "entropy"), out / "entropy_summary.csv")
    if ck.config.num_layers > 1:
        js = analysis.collect_jsd(ck.config, ck.store, seqs)
        analysis.export_records(js, out / "jsd.csv")
        analysis.export_summaries(analysis.summarize(js, "jsd"), out / "jsd_summary.csv")
        metrics.append("jsd")
    analysis.write_sidecar(out / "analysis.json", checkpoint=args.checkpoint, example_count=len(seqs),
                           metrics=metrics, seq_len=max(len(s) for s in seqs))
    print(f"wrote {len(ent)} entropy records for {len(seqs)} examples to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model, _, _ = resolve(args)
    config = ModelConfig.from_dict(model)
    report = gradcheck_config(config, seed=config.seed)
    mode = config.effective_residual_mode.value
    print(f"variant {config.variant} residual_mode {mode} params {report.checked} "
          f"max_rel_err {report.max_rel_err:.3e} at {report.worst_path}{list(report.worst_index)}")
    return EXIT_OK if report.ok(args.tolerance) else EXIT_NUMERIC


def _run_cell(job):
    variant, seed, model, tcfg, data, out_dir = job
    model = {**model, "variant": variant, "seed": seed}
    config = ModelConfig.from_dict(model)
    corpus, _ = load_corpus(data, model)
    result = train(config, corpus, tcfg, out_dir=out_dir)
    return variant, seed, result.metrics, result.diverged


def cmd_compare(args) -> int:
    model_d, tcfg, data = resolve(args)
    corpus, vocab = load_corpus(data, model_d)
    model_d["vocab_size"] = corpus.vocab_size
    model_d["max_seq_len"] = max(int(model_d["max_seq_len"]), corpus.max_len)
    if vocab is not None:
        data["vocab"] = vocab.itos
    base_seed = int(model_d["seed"])
    out = Path(args.out_dir)
    echo_config(out, ModelConfig.from_dict(model_d), tcfg, data)
    jobs = [
        (v, base_seed + s, model_d, tcfg, data, out / f"{v}-seed{base_seed + s}")
        for s in range(args.seeds) for v in VARIANTS
    ]
    workers = max(1, min(len(jobs), int(os.environ.get("RAFL_THREADS", "1"))))
    if workers == 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    write_compare(out, results)
    summary = compare_summary(results)
    for row in summary:
        print(f"{row['rank']}. {row['variant']:<11} median dev_mlm_acc {row['median_dev_mlm_acc']:.4f}")
    return EXIT_OK


def write_compare(out: Path, results) -> None:
    with open(out / "compare_metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("variant", "seed", *METRIC_FIELDS))
        for variant, seed, rows, _ in results:
            for r in rows:
                w.writerow((variant, seed, *(_cell(r[k]) for k in METRIC_FIELDS)))
    with open(out / "compare_runs.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("variant", "seed", "final_step", "final_dev_loss", "final_dev_mlm_acc", "diverged"))
        for variant, seed, rows, diverged in results:
            last = rows[-1] if rows else {"step": 0, "dev_loss": float("nan"), "dev_mlm_acc": float("nan")}
            w.writerow((variant, seed, last["step"], repr(last["dev_loss"]), repr(last["dev_mlm_acc"]), int(diverged)))
    with open(out / "compare_summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=("rank", "variant", "runs", "median_dev_mlm_acc", "mean_dev_mlm_acc",
                                           "min_dev_mlm_acc", "max_dev_mlm_acc", "diverged_runs"),
                           lineterminator="\n")
        w.writeheader()
        for row in compare_summary(results):
            w.writerow({k: _cell(v) for k, v in row.items()})


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    return repr(v) if isinstance(v, float) else v


def compare_summary(results) -> list[dict]:
    by_variant: dict[str, list] = {}
    for variant, _, rows, diverged in results:
        acc = rows[-1]["dev_mlm_acc"] if rows else float("nan")
        by_variant.setdefault(variant, []).append((acc, diverged))
    rows = []
    for variant, items in by_variant.items():
        accs = [a for a, _ in items]
        rows.append({
            "variant": variant, "runs": len(items), "median_dev_mlm_acc": statistics.median(accs),
            "mean_dev_mlm_acc": statistics.fmean(accs), "min_dev_mlm_acc": min(accs),
            "max_dev_mlm_acc": max(accs), "diverged_runs": sum(d for _, d in items),
        })
    rows.sort(key=lambda r: -r["median_dev_mlm_acc"])
    for i, r in enumerate(rows, 1):
        r["rank"] = i
    return rows


COMMANDS = {"pretrain": cmd_pretrain, "eval": cmd_eval, "analyze": cmd_analyze, "gradcheck": cmd_gradcheck,
            "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageFailure as exc:
        print(exc, file=sys.stderr)
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
