"""``lift`` command line: corpus -> build -> encode -> train -> eval -> interp -> report.

Every command writes plain files (JSONL, JSON, CSV) and exits 0 on success,
1 on a pipeline error (one JSON object on stderr) and 2 on bad arguments.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from importlib import metadata
from pathlib import Path
from typing import Sequence

from .builder import PromptExample, build_curriculum
from .config import (LiftConfig, RunLock, RunManifest, dump_config, env_overrides, file_hash, load_config,
                     parse_config_text)
from .corpus import (DATASETS, GlobalLabelSpace, Timeline, corpus_stats, iter_jsonl, load_raw, load_timelines,
                     save_timelines, write_jsonl)
from .errors import LiftError, MissingCheckpoint, MissingStageShard
from .evalharness import EvalReport, evaluate
from .fixtures import BUNDLED_SIZES, bundled_path
from .interp import ROUTING_REGIONS, activation_patch, extract_region_reps, mean_routing, probe, recency_bin_names
from .model import load_checkpoint
from .pipeline import (build_tokenizer, corpus_texts, encode_shards, eval_examples, loss_weights, new_model,
                       split_corpora, stage_schedules)
from .reference import DATASET_ORDER, DEFAULT_BACKBONE, MACRO_F1, SHOTS, reference_target
from .tokenspace import WhitespaceTokenizer, encode_with_spans, load_encoded, save_encoded
from .trainer import run_curriculum
from .validation import check_dataset, parse_layers

log = logging.getLogger("lift")

STAGES = (1, 2, 3)


class UsageError(Exception):
    """Bad command-line arguments (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _write_json(path: Path, obj) -> Path:
    return _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _bool(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def _shots(v: str) -> list[int]:
    try:
        out = [int(p) for p in v.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shot list {v!r}") from None
    if not out or min(out) < 0:
        raise argparse.ArgumentTypeError(f"bad shot list {v!r}")
    return out


# -- run directories ----------------------------------------------------------

class Run:
    """A trained run directory and the artifacts next to its checkpoints."""

    def __init__(self, root: Path):
        self.root = Path(root)
        if not (self.root / "manifest.json").is_file():
            raise MissingCheckpoint(f"{self.root} is not a run directory (no manifest.json)")
        self.manifest = RunManifest.load(self.root)
        self.config = load_config(self.root / "config.txt", environ={})
        self.tokenizer = WhitespaceTokenizer.load(self.root / "tokenizer.json")
        self.labelspace = GlobalLabelSpace.load(self.root / "labelspace.json")

    @classmethod
    def locate(cls, args) -> tuple["Run", Path]:
        """Resolve ``--run`` (final checkpoint) or ``--ckpt`` (any checkpoint inside a run)."""
        if args.ckpt:
            ckpt = Path(args.ckpt)
            if ckpt.is_dir():
                ckpt = ckpt / "checkpoint.pt"
            if not ckpt.is_file():
                raise MissingCheckpoint(f"no checkpoint at {ckpt}")
            for parent in ckpt.resolve().parents:
                if (parent / "manifest.json").is_file():
                    return cls(parent), ckpt
            raise MissingCheckpoint(f"{ckpt} is not inside a run directory")
        run = cls(Path(args.runs_dir) / args.run)
        final = run.manifest.checkpoints.get("final")
        if not final:
            raise MissingCheckpoint(f"run {args.run} has no final checkpoint")
        return run, run.root / final

    def splits(self, dataset: str) -> tuple[dict, dict]:
        d = self.root / "splits"
        train_p, test_p = d / f"{dataset}.train.jsonl", d / f"{dataset}.test.jsonl"
        if not test_p.is_file():
            raise MissingStageShard(f"run has no test split for {dataset}")
        train = {dataset: load_timelines(train_p) if train_p.is_file() else []}
        return train, {dataset: load_timelines(test_p)}

    def examples(self, dataset: str, shots: int) -> list[PromptExample]:
        train, test = self.splits(dataset)
        return eval_examples(dataset, train, test, self.tokenizer, self.config, shots)

    def record(self, *paths: Path) -> None:
        for p in paths:
            self.manifest.add_artifact(self.root, p)
        self.manifest.save(self.root)


# -- commands -----------------------------------------------------------------

def cmd_corpus_build(args) -> int:
    ls = GlobalLabelSpace.load(args.labelspace) if args.labelspace else GlobalLabelSpace.default()
    src = bundled_path(args.dataset) if args.fixture else Path(args.inp)
    timelines = load_raw(src, args.dataset, ls)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_timelines(out, timelines)
    stats = {"dataset": args.dataset, **corpus_stats(timelines)}
    if args.stats:
        _write_json(Path(args.stats), stats)
    print(json.dumps(stats, sort_keys=True))
    return 0


def _load_corpora(args, ls: GlobalLabelSpace) -> dict[str, list[Timeline]]:
    if args.fixtures:
        return {ds: load_raw(bundled_path(ds), ds, ls) for ds in BUNDLED_SIZES}
    root = Path(args.timelines)
    corpora = {ds: load_timelines(root / f"{ds}.jsonl") for ds in DATASETS if (root / f"{ds}.jsonl").is_file()}
    if not corpora:
        raise MissingStageShard(f"no <dataset>.jsonl timeline files in {root}")
    return corpora


def _build_config(args) -> LiftConfig:
    over = {"seed": args.seed, "budget": args.budget}
    if args.history_labels is not None:
        over["history_labels"] = args.history_labels
    return load_config(args.config, over)


def cmd_build(args) -> int:
    cfg = _build_config(args)
    ls = GlobalLabelSpace.load(args.labelspace) if args.labelspace else GlobalLabelSpace.default()
    corpora = _load_corpora(args, ls)
    train, test = split_corpora(corpora, cfg.test_frac, cfg.seed)
    tok = build_tokenizer(corpus_texts(corpora), max_vocab=cfg.max_vocab)
    only = STAGES if args.stage == "all" else (int(args.stage),)
    shards, stats = build_curriculum(train, tok.count, budget=cfg.budget, seed=cfg.seed,
                                     history_labels=cfg.history_labels, demo_window=cfg.demo_window,
                                     stratified=cfg.stratified_demos, only_stages=only)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, exs in shards.items():
        write_jsonl(out / f"stage{s}.jsonl", (ex.to_record() for ex in exs))
    (out / "splits").mkdir(exist_ok=True)
    for ds in corpora:
        if train[ds]:
            save_timelines(out / "splits" / f"{ds}.train.jsonl", train[ds])
        save_timelines(out / "splits" / f"{ds}.test.jsonl", test[ds])
    tok.save(out / "tokenizer.json")
    ls.save(out / "labelspace.json")
    _write(out / "config.txt", dump_config(cfg))
    summary = {**stats.to_dict(), "vocab_size": tok.vocab_size, "budget": cfg.budget, "seed": cfg.seed,
               "history_labels": cfg.history_labels,
               "timelines": {ds: {"train": len(train[ds]), "test": len(test[ds])} for ds in corpora}}
    _write_json(out / "stats.json", summary)
    print(json.dumps({"out": str(out), "examples": summary["examples"]}, sort_keys=True))
    return 0


def _read_shards(directory: Path) -> dict[int, list[PromptExample]]:
    shards = {s: [PromptExample.from_record(r) for r in iter_jsonl(directory / f"stage{s}.jsonl")]
              for s in STAGES if (directory / f"stage{s}.jsonl").is_file()}
    if not shards:
        raise MissingStageShard(f"no stage<k>.jsonl shards in {directory}")
    return shards


def cmd_encode(args) -> int:
    src = Path(args.inp)
    tok = WhitespaceTokenizer.load(args.tokenizer or src / "tokenizer.json")
    out = Path(args.out) if args.out else src / "encoded"
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for s, exs in encode_shards(_read_shards(src), tok).items():
        counts[s] = save_encoded(out / f"stage{s}.jsonl", exs)
    print(json.dumps({"out": str(out), "encoded": counts}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    shards_dir = Path(args.shards)
    # build-time config, then the run config file, then LIFT_* variables, then --seed
    built = shards_dir / "config.txt"
    cfg = load_config(built if built.is_file() else None, environ={})
    if args.config:
        cfg = cfg.with_overrides(parse_config_text(Path(args.config).read_text()))
    cfg = cfg.with_overrides(env_overrides())
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": args.seed})
    run_dir = Path(args.runs_dir) / args.run
    if (run_dir / "manifest.json").exists() and not args.force:
        raise LiftError(f"run {args.run} already exists in {args.runs_dir} (use --force to overwrite)")
    with RunLock(run_dir):
        for sub in ("stage1", "stage2", "stage3", "reports"):
            shutil.rmtree(run_dir / sub, ignore_errors=True)
        (run_dir / "metrics.jsonl").unlink(missing_ok=True)
        tok = WhitespaceTokenizer.load(shards_dir / "tokenizer.json")
        ls_path = shards_dir / "labelspace.json"
        ls = GlobalLabelSpace.load(ls_path) if ls_path.is_file() else GlobalLabelSpace.default()
        enc_dir = shards_dir / "encoded"
        if enc_dir.is_dir():
            encoded = {s: load_encoded(enc_dir / f"stage{s}.jsonl") for s in STAGES
                       if (enc_dir / f"stage{s}.jsonl").is_file()}
        else:
            encoded = encode_shards(_read_shards(shards_dir), tok)
        schedules = {s: sch for s, sch in stage_schedules(cfg).items() if encoded.get(s)}
        if not schedules:
            raise MissingStageShard(f"no non-empty stage shards in {shards_dir}")
        model = new_model(cfg, tok, ls, rank=schedules[min(schedules)].rank)
        results = run_curriculum(model, encoded, schedules, weights=loss_weights(cfg), seed=cfg.seed,
                                 run_dir=run_dir, metrics_path=run_dir / "metrics.jsonl",
                                 class_weighting=cfg.class_weighting)

        tok.save(run_dir / "tokenizer.json")
        ls.save(run_dir / "labelspace.json")
        _write(run_dir / "config.txt", dump_config(cfg))
        if (shards_dir / "splits").is_dir():
            shutil.copytree(shards_dir / "splits", run_dir / "splits", dirs_exist_ok=True)
        summary = _write_json(run_dir / "stages.json", [r.summary() for r in results])

        inputs = {p.relative_to(shards_dir).as_posix(): file_hash(p)
                  for p in sorted(shards_dir.rglob("*")) if p.is_file()}
        man = RunManifest(args.run, cfg.to_dict(), cfg.seed, ls.hash(), inputs, tool_version=tool_version())
        for r in results:
            rel = Path(r.best.path).resolve().relative_to(run_dir.resolve()).as_posix()
            man.checkpoints[f"stage{r.stage}"] = rel
        man.checkpoints["final"] = man.checkpoints[f"stage{results[-1].stage}"]
        for p in sorted(run_dir.rglob("*")):
            if p.is_file() and p.name not in ("manifest.json", ".lock"):
                man.add_artifact(run_dir, p)
        man.save(run_dir)
    print(json.dumps({"run": str(run_dir), "checkpoints": man.checkpoints, "summary": str(summary)}, sort_keys=True))
    return 0


def _datasets(arg: str) -> list[str]:
    return list(DATASETS) if arg == "all" else [check_dataset(arg)]


def cmd_eval(args) -> int:
    run, ckpt = Run.locate(args)
    model, _ = load_checkpoint(ckpt)
    cfg = run.config
    variant = "base" if args.base else "lift"
    written = []
    rows = []
    for ds in _datasets(args.dataset):
        if args.dataset == "all" and not (run.root / "splits" / f"{ds}.test.jsonl").is_file():
            continue
        for k in args.shots:
            exs = run.examples(ds, k)
            if not exs:
                continue
            if args.base:
                with model.as_base():
                    rep = evaluate(model, run.tokenizer, exs, run.labelspace, shots=k, seed=cfg.seed,
                                   decode_mode=args.mode, full_label_set=cfg.full_label_set)
            else:
                rep = evaluate(model, run.tokenizer, exs, run.labelspace, shots=k, seed=cfg.seed,
                               decode_mode=args.mode, full_label_set=cfg.full_label_set)
            rep.reference_target = reference_target(ds, k, variant=variant)
            stem = run.root / "reports" / "eval" / f"{variant}_{ds}_{k}shot"
            written += [_write(stem.with_suffix(".json"), rep.to_json() + "\n"),
                        _write(stem.with_suffix(".csv"), rep.to_csv())]
            rows.append([variant, ds, k, f"{rep.macro_f1:.6f}", rep.n, _f(rep.reference_target)])
    if not rows:
        raise MissingStageShard(f"nothing to evaluate for {args.dataset}")
    with RunLock(run.root):
        run.record(*written)
    sys.stdout.write(_csv(["variant", "dataset", "shots", "macro_f1", "n", "reference_target"], rows))
    return 0


def _interp_setup(args):
    run, ckpt = Run.locate(args)
    model, _ = load_checkpoint(ckpt)
    model.eval()
    ds = check_dataset(args.dataset)
    layers = parse_layers(args.layers, model.base.cfg.n_layers)
    exs = run.examples(ds, args.shots)
    if not exs:
        raise MissingStageShard(f"no evaluation examples for {ds}")
    return run, model, ds, layers, exs


def _key(layer: int, region: str) -> str:
    return f"{layer}:{region}"


def cmd_probe(args) -> int:
    run, model, ds, layers, exs = _interp_setup(args)
    encs = [encode_with_spans(ex, run.tokenizer) for ex in exs]
    gold = [ex.response_text for ex in exs]
    tuned = probe(extract_region_reps(model, encs, layers), gold, args.folds, args.seed)
    with model.as_base():
        base = probe(extract_region_reps(model, encs, layers), gold, args.folds, args.seed)
    keys = [k for k in tuned if k in base]
    rows = [[ds, l, r, f"{tuned[(l, r)].accuracy:.6f}", f"{base[(l, r)].accuracy:.6f}",
             f"{tuned[(l, r)].accuracy - base[(l, r)].accuracy:.6f}", f"{tuned[(l, r)].macro_f1:.6f}",
             f"{base[(l, r)].macro_f1:.6f}", tuned[(l, r)].n] for l, r in keys]
    out = run.root / "reports" / "interp"
    doc = {"dataset": ds, "layers": layers, "folds": args.folds, "seed": args.seed, "shots": args.shots,
           "n": len(exs), "scores": {_key(*k): {"lift_accuracy": tuned[k].accuracy, "base_accuracy": base[k].accuracy,
                                                "delta_accuracy": tuned[k].accuracy - base[k].accuracy,
                                                "lift_macro_f1": tuned[k].macro_f1, "base_macro_f1": base[k].macro_f1,
                                                "n": tuned[k].n} for k in keys}}
    header = ["dataset", "layer", "region", "lift_accuracy", "base_accuracy", "delta_accuracy", "lift_macro_f1",
              "base_macro_f1", "n"]
    paths = [_write_json(out / f"probe_{ds}.json", doc), _write(out / f"probe_{ds}.csv", _csv(header, rows))]
    with RunLock(run.root):
        run.record(*paths)
    sys.stdout.write(_csv(header, rows))
    return 0


def cmd_attn(args) -> int:
    run, model, ds, layers, exs = _interp_setup(args)
    if args.n and len(exs) > args.n:
        exs = exs[:args.n]
    encs = [encode_with_spans(ex, run.tokenizer) for ex in exs]
    tuned = mean_routing(model, encs)
    with model.as_base():
        base = mean_routing(model, encs)
    # attention layers are 1-based here: block i produces hidden state i
    blocks = [l for l in layers if l >= 1]
    routing = [[ds, l, r, f"{tuned['masses'][l - 1][j]:.6f}", f"{base['masses'][l - 1][j]:.6f}",
                f"{tuned['masses'][l - 1][j] - base['masses'][l - 1][j]:.6f}"]
               for l in blocks for j, r in enumerate(ROUTING_REGIONS)]
    recency = [[ds, l, b, f"{tuned['recency'][l - 1][j]:.6f}", f"{base['recency'][l - 1][j]:.6f}",
                f"{tuned['recency'][l - 1][j] - base['recency'][l - 1][j]:.6f}"]
               for l in blocks if tuned["recency"] for j, b in enumerate(recency_bin_names())]
    out = run.root / "reports" / "interp"
    paths = [
        _write_json(out / f"attn_{ds}.json", {"dataset": ds, "layers": blocks, "shots": args.shots,
                                               "lift": tuned, "base": base}),
        _write(out / f"attn_routing_{ds}.csv",
               _csv(["dataset", "layer", "region", "lift_mass", "base_mass", "delta_mass"], routing)),
        _write(out / f"attn_recency_{ds}.csv",
               _csv(["dataset", "layer", "bin", "lift_share", "base_share", "delta_share"], recency)),
    ]
    with RunLock(run.root):
        run.record(*paths)
    sys.stdout.write(paths[1].read_text())
    return 0


def cmd_patch(args) -> int:
    run, model, ds, layers, exs = _interp_setup(args)
    rep = activation_patch(model, run.tokenizer, exs, run.labelspace, layers, seed=args.seed,
                           n_examples=args.n, corruption=args.corruption)
    out = run.root / "reports" / "interp"
    doc = {"dataset": ds, "shots": args.shots, **rep.to_dict()}
    body = rep.to_csv().replace("\r\n", "\n").splitlines()
    text = "\n".join(["dataset," + body[0]] + [f"{ds}," + line for line in body[1:]]) + "\n"
    paths = [_write_json(out / f"patch_{ds}.json", doc), _write(out / f"patch_{ds}.csv", text)]
    with RunLock(run.root):
        run.record(*paths)
    sys.stdout.write(text)
    return 0


SUMMARY_HEADER = ["dataset", "shots", "variant", "macro_f1", "n", "reference_backbone", "reference_base",
                 "reference_lift"]
INTERP_PANELS = {
    "probe": ("probe_", ["dataset", "layer", "region", "lift_accuracy", "base_accuracy", "delta_accuracy",
                           "lift_macro_f1", "base_macro_f1", "n"]),
    "recency": ("attn_recency_", ["dataset", "layer", "bin", "lift_share", "base_share", "delta_share"]),
    "patch": ("patch_", ["dataset", "layer", "delta_macro_f1", "delta_gold", "delta_margin", "flip_rate", "n"]),
    "routing": ("attn_routing_", ["dataset", "layer", "region", "lift_mass", "base_mass", "delta_mass"]),
}


def _reference(ds: str, k: int, variant: str) -> float | None:
    row = MACRO_F1.get((DEFAULT_BACKBONE, variant), {})
    return row[ds][SHOTS.index(k)] if ds in row and k in SHOTS else None


def cmd_report(args) -> int:
    run = Run(Path(args.runs_dir) / args.run)
    reports = run.root / "reports"
    evals = []
    for p in sorted((reports / "eval").glob("*.json")):
        d = json.loads(p.read_text())
        evals.append((p.stem.split("_", 1)[0], d))
    order = {ds: i for i, ds in enumerate(DATASET_ORDER)}
    evals.sort(key=lambda e: (order.get(e[1]["dataset"], 99), e[1]["shots"], e[0]))
    rows = [[d["dataset"], d["shots"], variant, f"{d['macro_f1']:.6f}", d["n"], DEFAULT_BACKBONE,
             _f(_reference(d["dataset"], d["shots"], "base")), _f(_reference(d["dataset"], d["shots"], "lift"))]
            for variant, d in evals]
    paths = [_write(reports / "macro_f1.csv", _csv(SUMMARY_HEADER, rows))]
    for panel, (prefix, header) in INTERP_PANELS.items():
        body = []
        for p in sorted((reports / "interp").glob(f"{prefix}*.csv")):
            body += list(csv.reader(io.StringIO(p.read_text())))[1:]
        paths.append(_write(reports / f"interp_{panel}.csv", _csv(header, body)))
    with RunLock(run.root):
        run.record(*paths)
    print(json.dumps({"written": [p.relative_to(run.root).as_posix() for p in paths],
                      "summary_rows": len(rows)}, sort_keys=True))
    return 0


# -- parser -------------------------------------------------------------------

def _add_ckpt(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", help="checkpoint file or step directory inside a run")
    src.add_argument("--run", help="run id; uses its final checkpoint")
    p.add_argument("--runs-dir", default="runs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lift", description="Longitudinal instruction fine-tuning toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    corpus = sub.add_parser("corpus", help="standardize raw dataset records")
    csub = corpus.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
    csub.required = True
    cb = csub.add_parser("build", help="raw JSONL -> sorted timelines JSONL")
    cb.add_argument("--dataset", required=True, choices=DATASETS)
    src = cb.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="inp", help="raw records (JSONL)")
    src.add_argument("--fixture", action="store_true", help="use the bundled synthetic records")
    cb.add_argument("--out", required=True)
    cb.add_argument("--labelspace", help="label space JSON (default: built-in)")
    cb.add_argument("--stats", help="also write corpus statistics here")
    cb.set_defaults(func=cmd_corpus_build)

    b = sub.add_parser("build", help="timelines -> per-stage prompt shards")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--timelines", help="directory of <dataset>.jsonl timeline files")
    src.add_argument("--fixtures", action="store_true", help="use the bundled synthetic corpora")
    b.add_argument("--out", required=True)
    b.add_argument("--stage", default="all", choices=["all", "1", "2", "3"])
    b.add_argument("--budget", type=int, default=2048)
    b.add_argument("--seed", type=int, default=17)
    b.add_argument("--history-labels", type=_bool, default=None, metavar="on|off")
    b.add_argument("--labelspace")
    b.add_argument("--config", help="key = value config file")
    b.set_defaults(func=cmd_build)

    e = sub.add_parser("encode", help="prompt shards -> token ids, region ids and masks")
    e.add_argument("--in", dest="inp", required=True, help="shard directory from `lift build`")
    e.add_argument("--tokenizer", help="tokenizer JSON (default: <in>/tokenizer.json)")
    e.add_argument("--out", help="output directory (default: <in>/encoded)")
    e.set_defaults(func=cmd_encode)

    t = sub.add_parser("train", help="run the three-stage curriculum")
    t.add_argument("--run", required=True, help="run id")
    t.add_argument("--shards", required=True, help="shard directory from `lift build`")
    t.add_argument("--runs-dir", default="runs")
    t.add_argument("--config", help="key = value config file (LIFT_<KEY> variables override it)")
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true", help="overwrite an existing run")
    t.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="macro-F1 on held-out timelines")
    _add_ckpt(ev)
    ev.add_argument("--dataset", required=True, choices=[*DATASETS, "all"])
    ev.add_argument("--shots", type=_shots, default=[0, 1, 3])
    ev.add_argument("--mode", choices=["rank", "generate"], default="rank")
    ev.add_argument("--base", action="store_true", help="evaluate with adapters and conditioning disabled")
    ev.set_defaults(func=cmd_eval)

    for name, func, helptext in (("probe", cmd_probe, "linear probes on region representations"),
                                 ("attn", cmd_attn, "attention routing and recency profiles"),
                                 ("patch", cmd_patch, "history activation patching")):
        p = sub.add_parser(name, help=helptext)
        _add_ckpt(p)
        p.add_argument("--dataset", required=True, choices=DATASETS)
        p.add_argument("--layers", default="all", help="'all', 'a..b' or a comma list")
        p.add_argument("--shots", type=int, default=0)
        p.add_argument("--seed", type=int, default=0)
        if name == "probe":
            p.add_argument("--folds", type=int, default=5)
        else:
            p.add_argument("--n", type=int, default=150, help="examples to use")
        if name == "patch":
            p.add_argument("--corruption", choices=["shuffle", "none"], default="shuffle")
        p.set_defaults(func=func)

    r = sub.add_parser("report", help="collect eval and interp outputs into summary CSVs")
    r.add_argument("--run", required=True)
    r.add_argument("--runs-dir", default="runs")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 2
    except (LiftError, OSError, KeyError, ValueError) as e:
        err = {"error": type(e).__name__, "message": str(e.args[0]) if e.args else str(e), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
