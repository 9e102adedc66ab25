"""Command-line entry point.

Every subcommand writes into ``--out`` and finishes by writing a
``manifest.json`` there that lists its inputs, seeds and output hashes
(``train`` writes ``<system>.seed<k>.manifest.json`` instead).
Experiment settings come from an optional flat ``key = value`` file given
with ``--config``, overridden by per-field flags such as ``--sub-rate``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import evalkit
from . import numcore as nc
from .asrsim import ChannelSpec, read_hypotheses, write_hypotheses
from .pipeline import (
    DELTA_REFERENCE, REPORT_HEADER, SWEEP_HEADER, SYSTEM_SPECS, SYSTEMS, ExperimentConfig, build_vocab,
    clean_hypotheses, gen_corpus, input_wer, load_data, read_corpus, rows_to_csv, run_experiment, simulate_corpus,
    summarize, train_system, wer_sweep, write_corpus, write_manifest,
)
from .summodel import ModelConfig, Summarizer
from .textproc import decode

log = logging.getLogger("mhsum")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    g = p.add_argument_group("experiment config overrides")
    for f in fields(ExperimentConfig):
        if f.name == "out_dir":
            continue
        g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", default=None, metavar="VALUE")


def _config(args) -> ExperimentConfig:
    text = args.config.read_text(encoding="utf-8") if args.config else ""
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    overrides["out_dir"] = str(args.out)
    return ExperimentConfig.from_text(text, **overrides)


def _config_inputs(args) -> list[Path]:
    return [args.config] if args.config else []


def _finish(args, cfg: ExperimentConfig, inputs, outputs, seeds=(), name: str = "manifest.json") -> None:
    config = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "out_dir"}
    path = write_manifest(args.out, args.command, json.loads(json.dumps(config)), inputs, outputs, seeds, name)
    log.info("wrote %s", path)


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def _checkpoint_paths(directory: Path, system: str, seed: int) -> tuple[Path, Path]:
    stem = f"{SYSTEM_SPECS[system][2]}.seed{seed}"
    return directory / f"{stem}.ckpt", directory / f"{stem}.json"


def _save_model(model: Summarizer, ckpt: Path, meta: Path) -> None:
    model.save(ckpt)
    meta.write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_model(ckpt: Path, dtype: str) -> Summarizer:
    meta = ckpt.with_suffix(".json")
    if not ckpt.exists() or not meta.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt} or its config {meta}")
    with nc.precision(dtype):
        model = Summarizer(ModelConfig.from_dict(json.loads(meta.read_text(encoding="utf-8"))))
    model.load(ckpt)
    return model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> None:
    cfg = _config(args)
    train, test = gen_corpus(cfg)
    outputs = write_corpus(args.out, "train", train) + write_corpus(args.out, "test", test)
    vocab = build_vocab(train, cfg.bpe_size)
    vocab.save(args.out / "vocab.txt")
    stats = [evalkit.corpus_stats([(d.source, d.summary) for d in docs], name) for name, docs in
             (("train", train), ("test", test))]
    outputs += [args.out / "vocab.txt", _write(args.out / "stats.csv", evalkit.stats_csv(stats)),
                _write(args.out / "stats.txt", evalkit.stats_table(stats))]
    print(evalkit.stats_table(stats), end="")
    _finish(args, cfg, _config_inputs(args), outputs, [cfg.corpus_seed])


def cmd_simulate_asr(args) -> None:
    cfg = _config(args)
    data = load_data(args.corpus)
    spec = ChannelSpec(sub_rate=cfg.sub_rate, confusion_sharpness=cfg.sharpness, seed=args.seed)
    outputs, rows = [], []
    for split in args.split:
        docs = data.train if split == "train" else data.test
        hyps = simulate_corpus(docs, data.vocab, spec, cfg.max_hyps)
        path = args.out / f"{split}.hyp.jsonl"
        write_hypotheses(path, hyps)
        outputs.append(path)
        rows.append({"split": split, "sub_rate": cfg.sub_rate, "wer": input_wer(hyps, docs, data.vocab)})
        log.info("%s: 1-best WER %.4f at sub_rate %.2f", split, rows[-1]["wer"], cfg.sub_rate)
    outputs.append(_write(args.out / "wer.csv", rows_to_csv(rows, ["split", "sub_rate", "wer"])))
    inputs = [args.corpus / f"{s}.src.txt" for s in args.split] + [args.corpus / "vocab.txt"]
    _finish(args, cfg, _config_inputs(args) + inputs, outputs, [args.seed])


def cmd_train(args) -> None:
    cfg = _config(args)
    data = load_data(args.corpus)
    clean = SYSTEM_SPECS[args.system][1]
    inputs = [args.corpus / "train.src.txt", args.corpus / "train.tgt.txt", args.corpus / "vocab.txt"]
    if args.system == "baseline-1best":
        raise SystemExit("baseline-1best reuses the oracle-text checkpoint; train oracle-text instead")
    text_model, train_inputs = None, None
    if not clean:
        if args.init is None or args.hyps is None:
            raise SystemExit(f"{args.system} needs --init (text checkpoint) and --hyps (train hypotheses)")
        text_model = _load_model(args.init, cfg.dtype)
        hyp_path = args.hyps / "train.hyp.jsonl"
        train_inputs = read_hypotheses(hyp_path)
        inputs += [args.init, hyp_path]
    model, losses = train_system(args.system, data, cfg, args.seed, text_model, train_inputs)
    ckpt, meta = _checkpoint_paths(args.out, args.system, args.seed)
    _save_model(model, ckpt, meta)
    loss_csv = _write(args.out / f"{ckpt.stem}.loss.csv",
                      rows_to_csv([{"step": i + 1, "loss": v} for i, v in enumerate(losses)], ["step", "loss"]))
    # several systems share one checkpoint directory, so each gets its own manifest
    _finish(args, cfg, _config_inputs(args) + inputs, [ckpt, meta, loss_csv], [args.seed], f"{ckpt.stem}.manifest.json")


def cmd_summarize(args) -> None:
    cfg = _config(args)
    data = load_data(args.corpus)
    model = _load_model(args.checkpoint, cfg.dtype)
    docs = read_corpus(args.corpus, args.split)
    inputs = [args.checkpoint, args.corpus / f"{args.split}.src.txt", args.corpus / "vocab.txt"]
    if args.hyps is None:
        hyps = clean_hypotheses(docs, data.vocab)
    else:
        hyp_path = args.hyps / f"{args.split}.hyp.jsonl"
        hyps = read_hypotheses(hyp_path)
        inputs.append(hyp_path)
    with nc.precision(cfg.dtype):
        outputs = summarize(model, hyps, beam=cfg.beam, lm_weight=cfg.lm_weight, lm=data.lm)
    lines = [f"{d.doc_id}\t{decode(o, data.vocab)}\n" for d, o in zip(docs, outputs)]
    path = _write(args.out / "summaries.txt", "".join(lines))
    _finish(args, cfg, _config_inputs(args) + inputs, [path])


def _read_summaries(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        doc_id, _, text = line.partition("\t")
        out[doc_id] = text
    return out


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    docs = read_corpus(args.corpus, args.split)
    hyps = _read_summaries(args.summaries)
    missing = [d.doc_id for d in docs if d.doc_id not in hyps]
    if missing:
        raise SystemExit(f"summaries file lacks {len(missing)} documents, e.g. {missing[0]}")
    report = evalkit.evaluate_summaries([hyps[d.doc_id] for d in docs], [" ".join(d.summary) for d in docs])
    outputs = [_write(args.out / "report.csv", report.to_csv()), _write(args.out / "report.txt", report.to_table())]
    print(report.to_table(), end="")
    _finish(args, cfg, _config_inputs(args) + [args.summaries, args.corpus / f"{args.split}.tgt.txt"], outputs)


def cmd_sweep_wer(args) -> None:
    cfg = _config(args)
    data = load_data(args.corpus)
    systems = [s for s in cfg.systems if s != "oracle-text"]
    models, inputs = {}, []
    for system in systems:
        for seed in cfg.seeds:
            ckpt, _ = _checkpoint_paths(args.checkpoints, system, seed)
            if not ckpt.exists():
                raise SystemExit(f"missing trained checkpoint for system {system!r} (seed {seed}): {ckpt}")
            models[(system, seed)] = _load_model(ckpt, cfg.dtype)
            inputs.append(ckpt)
    rows = wer_sweep(cfg, models, data)
    path = _write(args.out / "sweep.csv", rows_to_csv(rows, SWEEP_HEADER))
    print(path.read_text(encoding="utf-8"), end="")
    _finish(args, cfg, _config_inputs(args) + inputs, [path], cfg.seeds)


def cmd_oracle_extract(args) -> None:
    cfg = _config(args)
    docs = read_corpus(args.corpus, args.split)
    lines, picks = [], []
    for d in docs:
        res = evalkit.oracle_extractive(d.source, " ".join(d.summary), max_k=args.max_k)
        text = " ".join(d.source[i] for i in res.indices)
        lines.append(f"{d.doc_id}\t{','.join(map(str, res.indices))}\t{res.score:.6f}\n")
        picks.append(text)
    report = evalkit.evaluate_summaries(picks, [" ".join(d.summary) for d in docs])
    outputs = [_write(args.out / "oracle.tsv", "".join(lines)), _write(args.out / "report.csv", report.to_csv())]
    print(report.to_table(), end="")
    _finish(args, cfg, _config_inputs(args) + [args.corpus / f"{args.split}.src.txt"], outputs)


def cmd_run_experiment(args) -> None:
    cfg = _config(args)
    ckpt_dir = args.out / "checkpoints"
    rows = run_experiment(cfg, checkpoint_dir=ckpt_dir)
    path = _write(args.out / "experiment.csv", rows_to_csv(rows, REPORT_HEADER))
    print(path.read_text(encoding="utf-8"), end="")
    outputs = [path] + sorted(ckpt_dir.glob("*.ckpt"))
    _finish(args, cfg, _config_inputs(args), outputs, cfg.seeds)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mhsum", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        _add_config_flags(p)
        p.set_defaults(func=fn)
        return p

    add("gen-corpus", cmd_gen_corpus, "generate the synthetic corpus and its BPE vocabulary")

    p = add("simulate-asr", cmd_simulate_asr, "corrupt a corpus split into aligned N-best hypotheses")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--split", nargs="+", choices=("train", "test"), default=["train", "test"])
    p.add_argument("--seed", type=int, default=0, help="channel seed")

    p = add("train", cmd_train, "train one system")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--system", choices=SYSTEMS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hyps", type=Path, help="simulate-asr output directory (ASR systems)")
    p.add_argument("--init", type=Path, help="text-model checkpoint to fine-tune from (ASR systems)")

    p = add("summarize", cmd_summarize, "decode summaries with a trained checkpoint")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--hyps", type=Path, help="simulate-asr output directory; clean text when omitted")
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = add("evaluate", cmd_evaluate, "score a summaries file against references")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--summaries", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = add("sweep-wer", cmd_sweep_wer, f"ROUGE-1 change relative to {DELTA_REFERENCE} across channel rates")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--checkpoints", type=Path, required=True, help="directory of trained checkpoints")

    p = add("oracle-extract", cmd_oracle_extract, "best extractive sentence subset per document")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--max-k", type=int, default=3)

    add("run-experiment", cmd_run_experiment, "train and evaluate every system for every seed")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
