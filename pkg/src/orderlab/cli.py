"""Command-line entry point: ``orderlab <subcommand> [--config FILE] [--set key=value ...]``.

Every subcommand writes its artifacts under ``output_dir`` and a manifest in
``output_dir/manifests/`` recording the config hash, seed and SHA-256
digests of every input and output file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import analysis
from .config import ConfigError, config_hash, load_config
from .data import (
    Dataset,
    GenConfig,
    Vocabulary,
    detokenize,
    dumps_record,
    generate_synthetic_corpus,
    identity,
    load_jsonl,
    max_serialized_length,
    save_jsonl,
    shuffle_persona,
)
from .decoding import DecodeConfig
from .metrics import ExternalConsistencyScorer, evaluate_corpus
from .model import ModelConfig, load_checkpoint
from .training import TrainConfig, train

log = logging.getLogger("orderlab")

EXIT_CONFIG = 2
EXIT_MISSING = 3


class MissingArtifact(FileNotFoundError):
    pass


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Resolved config plus bookkeeping of the files a subcommand touches."""

    def __init__(self, cfg: dict, command: str, threads: int):
        self.cfg = cfg
        self.command = command
        self.threads = threads
        self.out = Path(cfg["output_dir"])
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def need(self, rel: str) -> Path:
        path = self.out / rel
        if not path.exists():
            raise MissingArtifact(f"missing input artifact {path}")
        self.inputs.append(path)
        return path

    def produce(self, rel: str) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(path)
        return path

    def write_manifest(self, name: str, seed) -> Path:
        manifest = {
            "command": self.command,
            "config": self.cfg,
            "config_hash": config_hash(self.cfg),
            "seed": seed,
            "inputs": {str(p.relative_to(self.out)): _digest(p) for p in self.inputs},
            "outputs": {str(p.relative_to(self.out)): _digest(p) for p in self.outputs},
        }
        path = self.out / "manifests" / f"{name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path


def _section(cls, values: dict, section: str, drop: tuple[str, ...] = ()):
    kwargs = {k: v for k, v in values.items() if k not in drop}
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def _load_data(run: Run) -> tuple[Dataset, Dataset, Vocabulary]:
    train_ds = load_jsonl(run.need("data/train.jsonl"), "train")
    test_ds = load_jsonl(run.need("data/test.jsonl"), "test")
    vocab = Vocabulary.load(run.need("data/vocab.json"))
    return train_ds, test_ds, vocab


def _load_model(run: Run, name: str):
    return load_checkpoint(run.need(f"models/{name}/final.orgc"))


def _limit(ds: Dataset, limit) -> Dataset:
    return ds if limit is None else ds[: int(limit)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(run: Run) -> None:
    d = run.cfg["data"]
    if d["source"] == "synthetic":
        gen = _section(GenConfig, d, "data", drop=("source", "train_jsonl", "test_jsonl"))
        train_ds, test_ds, vocab = generate_synthetic_corpus(gen)
    elif d["source"] == "jsonl":
        if not d["train_jsonl"] or not d["test_jsonl"]:
            raise ConfigError("data.train_jsonl", "jsonl source needs train_jsonl and test_jsonl")
        for key in ("train_jsonl", "test_jsonl"):
            if not Path(d[key]).exists():
                raise MissingArtifact(f"missing input artifact {d[key]}")
        train_ds = load_jsonl(d["train_jsonl"], "train")
        test_ds = load_jsonl(d["test_jsonl"], "test")
        vocab = Vocabulary.build(w for s in train_ds.samples + test_ds.samples for w in s.words())
    else:
        raise ConfigError("data.source", f"unknown source {d['source']!r}")
    save_jsonl(train_ds, run.produce("data/train.jsonl"))
    save_jsonl(test_ds, run.produce("data/test.jsonl"))
    vocab.save(run.produce("data/vocab.json"))
    run.write_manifest("gen-data", d["seed"])
    log.info("wrote %d train / %d test samples, vocabulary %d", len(train_ds), len(test_ds), len(vocab))


def cmd_train(run: Run) -> None:
    t = run.cfg["train"]
    tc = _section(TrainConfig, t, "train", drop=("name",))
    name = t["name"] or tc.objective
    train_ds, test_ds, vocab = _load_data(run)
    mc = _section(ModelConfig, {**run.cfg["model"], "vocab_size": len(vocab)}, "model")
    longest = max_serialized_length(train_ds.samples + test_ds.samples)
    if longest > mc.max_seq_len:
        raise ConfigError("model.max_seq_len", f"{mc.max_seq_len} < longest serialized sample ({longest})")
    ckpt_dir = run.out / "models" / name
    _, tlog = train(mc, train_ds, vocab, tc, checkpoint_dir=ckpt_dir)
    for epoch in range(1, tc.epochs + 1):
        run.produce(f"models/{name}/epoch_{epoch:03d}.orgc")
    run.produce(f"models/{name}/final.orgc")
    run.produce(f"models/{name}/train_log.json").write_text(tlog.to_json(), encoding="utf-8")
    run.write_manifest(f"train-{name}", tc.seed)


def _decode_config(section: dict, strategy: str | None = None) -> DecodeConfig:
    values = {k: v for k, v in section.items() if k not in ("model", "limit")}
    if strategy is not None:
        values["strategy"] = strategy
    return _section(DecodeConfig, values, "decode")


def cmd_decode(run: Run) -> None:
    import numpy as np

    d = run.cfg["decode"]
    dc = _decode_config(d)
    _, test_ds, vocab = _load_data(run)
    model = _load_model(run, d["model"])
    test_ds = _limit(test_ds, d["limit"])
    path = run.produce(f"decodes/{d['model']}.jsonl")
    shuffled = bool(run.cfg["train"]["shuffle_at_eval"])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, sample in enumerate(test_ds):
            rng = np.random.default_rng([dc.seed, i])
            perm = shuffle_persona(sample.n_persona, rng) if shuffled else identity(sample.n_persona)
            toks = analysis.decode_response(model, sample, perm, vocab, dc, rng)
            fh.write(dumps_record({"index": i, "response": detokenize(toks), "reference": detokenize(sample.response)}) + "\n")
    run.write_manifest(f"decode-{d['model']}", dc.seed)


def cmd_eval(run: Run) -> None:
    from .data import tokenize

    name = run.cfg["decode"]["model"]
    m = run.cfg["metrics"]
    _, test_ds, _ = _load_data(run)
    records = [json.loads(line) for line in run.need(f"decodes/{name}.jsonl").read_text(encoding="utf-8").splitlines() if line]
    cands = [tokenize(r["response"]) for r in records]
    samples = [test_ds[r["index"]] for r in records]
    scorer = ExternalConsistencyScorer(m["consistency_scorer"]) if m["consistency_scorer"] else None
    res = evaluate_corpus(
        cands,
        [s.response for s in samples],
        personas=[s.persona for s in samples],
        entropy_order=int(m["entropy_order"]),
        scorer=scorer,
    )
    run.produce(f"metrics/{name}.json").write_text(json.dumps(res.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    run.write_manifest(f"eval-{name}", None)


def _emit(run: Run, report, stem: str) -> None:
    analysis.emit_report(report, run.produce(f"reports/{stem}.json"), "json")
    analysis.emit_report(report, run.produce(f"reports/{stem}.csv"), "csv")


def cmd_sweep(run: Run) -> None:
    a = run.cfg["analysis"]
    dc = _decode_config(run.cfg["decode"], a["sweep_strategy"])
    _, test_ds, vocab = _load_data(run)
    model = _load_model(run, a["model"])
    report = analysis.permutation_sweep(
        model, _limit(test_ds, a["limit"]), vocab, dc, a["metrics"], a["perm_cap"], a["seed"], run.threads,
        metadata={"model": a["model"]},
    )
    _emit(run, report, f"sweep-{a['model']}")
    run.write_manifest(f"sweep-{a['model']}", a["seed"])


def cmd_variance(run: Run) -> None:
    a = run.cfg["analysis"]
    dc = _decode_config(run.cfg["decode"], a["variance_strategy"])
    _, test_ds, vocab = _load_data(run)
    model = _load_model(run, a["model"])
    report = analysis.variance_study(
        model, _limit(test_ds, a["limit"]), vocab, a["runs"], a["master_seed"], dc, a["metrics"], run.threads,
        metadata={"model": a["model"]},
    )
    _emit(run, report, f"variance-{a['model']}")
    run.write_manifest(f"variance-{a['model']}", a["master_seed"])


def cmd_divergence(run: Run) -> None:
    a = run.cfg["analysis"]
    _, test_ds, vocab = _load_data(run)
    model = _load_model(run, a["model"])
    report = analysis.representation_divergence(
        model, _limit(test_ds, a["limit"]), vocab, a["pairs_per_sample"], a["seed"], run.threads,
        metadata={"model": a["model"]},
    )
    _emit(run, report, f"divergence-{a['model']}")
    run.write_manifest(f"divergence-{a['model']}", a["seed"])


def cmd_report(run: Run) -> None:
    a = run.cfg["analysis"]
    metric = a["report_metric"]
    reports = {}
    for name in a["compare"]:
        reports[name] = analysis.report_from_json(run.need(f"reports/variance-{name}.json").read_text(encoding="utf-8"))
    analysis.emit_boxplot_svg(reports, run.produce("reports/variance-boxplot.svg"), metric=metric, title=f"{metric} over shuffled runs")
    summary = {name: r.aggregate[metric] for name, r in reports.items()}
    run.produce("reports/summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    run.write_manifest("report", None)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "variance": cmd_variance,
    "divergence": cmd_divergence,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orderlab", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="worker cap for analysis procedures")
    parser.add_argument("--deterministic", action="store_true", help="force single-threaded execution")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("ORDERLAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        doc = None
        if args.config is not None:
            if not args.config.exists():
                raise MissingArtifact(f"missing config file {args.config}")
            try:
                doc = json.loads(args.config.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(str(args.config), f"invalid JSON ({exc.msg})") from None
        cfg = load_config(doc, args.overrides)
        threads = 1 if args.deterministic else max(1, args.threads)
        COMMANDS[args.command](Run(cfg, args.command, threads))
    except ConfigError as exc:
        print(json.dumps({"error": "config", "key": exc.path, "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(json.dumps({"error": "missing_input", "message": str(exc)}), file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
