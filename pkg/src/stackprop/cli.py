"""Single executable with subcommands wiring the library together.

Data flows through stdin/stdout (or files); logs go to stderr only. Every
training run emits a JSON manifest with the fully resolved configuration and
input hashes so the exact model bytes can be reproduced.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from typing import Iterator, Optional, TextIO

import numpy as np

from stackprop import corpus as corpus_mod
from stackprop import evaluator, model as model_mod, parser as parser_mod, trainer
from stackprop.corpus import Sentence, parse_conllu
from stackprop.tagger import tag_sentence
from stackprop.errors import (
    ConfigError,
    CorpusError,
    ModelError,
    StackpropError,
)
from stackprop.model import MODES, ParserNetworkConfig
from stackprop.nnkernel import OptimizerConfig
from stackprop.tagger import TaggerConfig
from stackprop.trainer import TrainingSchedule, TrainSettings

log = logging.getLogger("stackprop")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

TRAIN_DEFAULTS: dict[str, object] = {
    "mode": "stackprop",
    "swap": False,
    "parser_epochs": 10,
    "tagger_epochs": 5,
    "pretrain_epochs": 1,
    "lambda_weight": 1.0,
    "eta0": 0.05,
    "gamma": 10000.0,
    "mu": 0.9,
    "batch_size": 32,
    "averaging_start": 0,
    "patience": 3,
    "seed": 0,
    "h_tagger": 128,
    "h_parser": 1024,
    "d_implicit": 64,
    "d_label": 32,
    "d_word": 64,
    "d_affix": 16,
    "d_caps": 4,
    "d_symbols": 8,
    "jackknife_folds": 5,
    "embeddings": "",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as f:
            for i, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{i}: expected 'key = value'")
                key, value = line.split("=", 1)
                out[key.strip().replace("-", "_")] = value.strip()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}")
    return out


def _coerce(value, template):
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"bad boolean value {value!r}")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return str(value)


def resolve_config(args: argparse.Namespace, file_cfg: dict[str, str]) -> dict:
    """defaults < config file < explicit CLI flags."""
    resolved = dict(TRAIN_DEFAULTS)
    for key, raw in file_cfg.items():
        if key not in resolved:
            raise ConfigError(f"unknown config key {key!r}")
        resolved[key] = _coerce(raw, TRAIN_DEFAULTS[key])
    for key in resolved:
        cli = getattr(args, key, None)
        if cli is not None:
            resolved[key] = _coerce(cli, TRAIN_DEFAULTS[key])
    if resolved["mode"] not in MODES:
        raise ConfigError(f"unknown mode {resolved['mode']!r}")
    return resolved


def settings_from_config(cfg: dict) -> TrainSettings:
    return TrainSettings(
        schedule=TrainingSchedule(
            parser_epochs=cfg["parser_epochs"],
            tagger_epochs=cfg["tagger_epochs"],
            tagger_pretrain_epochs=cfg["pretrain_epochs"],
            lambda_weight=cfg["lambda_weight"],
            seed=cfg["seed"],
            patience=cfg["patience"],
        ),
        tagger_cfg=TaggerConfig(
            hidden=cfg["h_tagger"],
            d_symbols=cfg["d_symbols"],
            d_caps=cfg["d_caps"],
            d_affix=cfg["d_affix"],
            d_words=cfg["d_word"],
        ),
        parser_cfg=ParserNetworkConfig(
            hidden=cfg["h_parser"],
            d_implicit=cfg["d_implicit"],
            d_label=cfg["d_label"],
            d_word=cfg["d_word"],
        ),
        optimizer=OptimizerConfig(
            eta0=cfg["eta0"],
            gamma=cfg["gamma"],
            mu=cfg["mu"],
            batch_size=cfg["batch_size"],
            averaging_start=cfg["averaging_start"],
        ),
        swap=cfg["swap"],
        embeddings_path=cfg["embeddings"] or None,
        jackknife_folds=cfg["jackknife_folds"],
    )


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_corpus(path: str) -> list[Sentence]:
    try:
        with open(path, encoding="utf-8") as f:
            return parse_conllu(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read corpus {path}: {e}")


def iter_conllu_blocks(stream: TextIO) -> Iterator[Sentence]:
    """Stream sentences one block at a time (bounded memory)."""
    lines: list[str] = []
    for line in stream:
        if line.strip() == "":
            if lines:
                for s in parse_conllu("".join(lines)):
                    yield s
                lines = []
        else:
            lines.append(line)
    if lines:
        for s in parse_conllu("".join(lines)):
            yield s


# subcommands


def cmd_train(args: argparse.Namespace) -> int:
    if args.replay:
        try:
            with open(args.replay, encoding="utf-8") as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read manifest {args.replay}: {e}")
        cfg = dict(TRAIN_DEFAULTS)
        cfg.update(manifest["config"])
        train_path = args.train or manifest["inputs"]["train"]["path"]
        dev_path = args.dev or manifest["inputs"].get("dev", {}).get("path")
    else:
        file_cfg = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args, file_cfg)
        train_path, dev_path = args.train, args.dev
    if not train_path:
        raise ConfigError("--train is required")
    if not args.model:
        raise ConfigError("--model output path is required")
    train_sents = load_corpus(train_path)
    dev_sents = load_corpus(dev_path) if dev_path else None
    settings = settings_from_config(cfg)
    t0 = time.perf_counter()
    trained = trainer.train_variant(
        cfg["mode"], train_sents, dev_sents, settings,
        log_fn=lambda s: print(s, file=sys.stderr),
    )
    seconds = time.perf_counter() - t0
    model_mod.save(trained, args.model, training_meta=cfg)
    manifest = {
        "command": "train",
        "config": cfg,
        "seed": cfg["seed"],
        "inputs": {"train": {"path": train_path, "sha256": sha256_file(train_path)}},
        "model": {"path": args.model, "sha256": sha256_file(args.model)},
        "seconds": round(seconds, 3),
    }
    if dev_path:
        manifest["inputs"]["dev"] = {"path": dev_path, "sha256": sha256_file(dev_path)}
    manifest_path = args.manifest or args.model + ".manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    log.info("model written to %s (%.1fs)", args.model, seconds)
    return EXIT_OK


def _open_in(path: Optional[str]) -> TextIO:
    return sys.stdin if path in (None, "-") else open(path, encoding="utf-8")


def _open_out(path: Optional[str]) -> TextIO:
    return sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8")


def _annotate_stream(args: argparse.Namespace, tag_only: bool) -> int:
    m = model_mod.load(args.model)
    acts_out = open(args.emit_activations, "w", encoding="utf-8") if args.emit_activations else None
    oov = total_forms = 0
    stats = parser_mod.ParseStats()
    t0 = time.perf_counter()
    chunk_size = max(args.threads, 1) * 16
    fin = _open_in(args.input)
    fout = _open_out(args.output)
    try:
        block_iter = iter_conllu_blocks(fin)
        while True:
            chunk = []
            for s in block_iter:
                chunk.append(s)
                if len(chunk) >= chunk_size:
                    break
            if not chunk:
                break
            for s in chunk:
                for t in s.tokens:
                    total_forms += 1
                    oov += t.form.lower() not in m.forms
            if tag_only:
                out = []
                for s in chunk:
                    pred, acts = tag_sentence(s, m.tagger, m.tvocabs, m.tags)
                    stats.sentences += 1
                    stats.tokens += len(s)
                    stats.tagger_evals += len(s)
                    out.append(
                        Sentence(
                            [
                                replace(t, pred_upos=pred[t.index - 1],
                                        pred_head=t.gold_head, pred_deprel=t.gold_deprel)
                                for t in s.tokens
                            ],
                            id=s.id,
                        )
                    )
                    if acts_out:
                        _dump_activations(acts_out, s, acts.hidden)
                parsed = out
            else:
                parsed, chunk_stats = parser_mod.parse_corpus(
                    chunk, m, threads=args.threads
                )
                stats.add(chunk_stats)
                if acts_out:
                    for s in chunk:
                        _, acts = tag_sentence(s, m.tagger, m.tvocabs, m.tags)
                        _dump_activations(acts_out, s, acts.hidden)
            fout.write(corpus_mod.emit_conllu(parsed, use_predicted=True))
            fout.flush()
    finally:
        if fin is not sys.stdin:
            fin.close()
        if fout is not sys.stdout:
            fout.close()
        if acts_out:
            acts_out.close()
    seconds = time.perf_counter() - t0
    if total_forms and oov / total_forms > 0.5:
        log.warning(
            "input vocabulary barely overlaps the model's (%.0f%% unknown forms); "
            "proceeding with UNKNOWN mapping", 100 * oov / total_forms,
        )
    if stats.sentences and seconds > 0:
        evals = stats.tagger_evals + stats.parser_evals
        log.info(
            "processed %d sentences in %.2fs (%.1f sentences/s, %.1f network evals/s)",
            stats.sentences, seconds, stats.sentences / seconds, evals / seconds,
        )
    return EXIT_OK


def _dump_activations(out: TextIO, sentence: Sentence, hidden: np.ndarray) -> None:
    for t in sentence.tokens:
        vec = "\t".join(f"{x:.6g}" for x in hidden[t.index - 1])
        out.write(f"{sentence.id}\t{t.index}\t{t.form}\t{vec}\n")


def cmd_parse(args: argparse.Namespace) -> int:
    return _annotate_stream(args, tag_only=False)


def cmd_tag(args: argparse.Namespace) -> int:
    return _annotate_stream(args, tag_only=True)


def _as_predicted(system: list[Sentence]) -> list[Sentence]:
    """Re-read a system output file: its gold columns are the predictions."""
    out = []
    for s in system:
        out.append(
            Sentence(
                [
                    replace(
                        t,
                        pred_head=t.gold_head,
                        pred_deprel=t.gold_deprel,
                        pred_upos=None if t.gold_upos == "_" else t.gold_upos,
                    )
                    for t in s.tokens
                ],
                id=s.id,
            )
        )
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    gold = load_corpus(args.gold)
    system = _as_predicted(load_corpus(args.system))
    report = evaluator.attachment_scores(
        gold, system, include_punct=not args.exclude_punct
    )
    pairs = [("tokens", report.n_tokens), ("uas", f"{report.uas:.4f}"), ("las", f"{report.las:.4f}")]
    if report.pos_acc is not None:
        pairs.append(("pos_acc", f"{report.pos_acc:.4f}"))
    if args.reference_tags:
        ref = load_corpus(args.reference_tags)
        tags = [[t.gold_upos for t in s.tokens] for s in ref]
        las_err, las_rest = evaluator.cascade_breakdown(gold, system, tags)
        report.las_on_tag_errors, report.las_on_rest = las_err, las_rest
        report.n_tag_errors = sum(
            1 for s, ts in zip(gold, tags) for t, r in zip(s.tokens, ts) if t.gold_upos != r
        )
        pairs.append(("las_on_tag_errors", f"{las_err:.4f}"))
        pairs.append(("las_on_rest", f"{las_rest:.4f}"))
        pairs.append(("n_tag_errors", report.n_tag_errors))
    if args.machine:
        for k, v in pairs:
            print(f"{k}={v}")
    else:
        width = max(len(k) for k, _ in pairs)
        for k, v in pairs:
            print(f"{k:<{width}}  {v}")
    return EXIT_OK


def cmd_jackknife(args: argparse.Namespace) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    cfg = resolve_config(args, file_cfg)
    settings = settings_from_config(cfg)
    sentences = load_corpus(args.train)
    folds = args.folds or settings.jackknife_folds
    annotated, _, fold_models = trainer.jackknife_tags(
        sentences, folds, settings, seed=cfg["seed"]
    )
    if args.model_prefix:
        for i, fm in enumerate(fold_models):
            model_mod.save(fm, f"{args.model_prefix}.fold{i}.model")
    writable = [
        Sentence(
            [replace(t, pred_head=t.gold_head, pred_deprel=t.gold_deprel) for t in s.tokens],
            id=s.id,
        )
        for s in annotated
    ]
    with _open_out(args.output) as fout:
        fout.write(corpus_mod.emit_conllu(writable, use_predicted=True))
    return EXIT_OK


def cmd_neighbors(args: argparse.Namespace) -> int:
    m = model_mod.load(args.model)
    corpus = load_corpus(args.corpus)
    hits = evaluator.nearest_neighbors(
        m, corpus, (args.sentence - 1, args.token), args.k
    )
    q_sent = corpus[args.sentence - 1]
    print(f"query: {_context(q_sent, args.token)}")
    for rank, (si, tj, sim) in enumerate(hits, 1):
        print(f"{rank}\t{sim:+.4f}\t{_context(corpus[si], tj)}")
    return EXIT_OK


def _context(sentence: Sentence, j: int, window: int = 3) -> str:
    words = []
    for t in sentence.tokens:
        if abs(t.index - j) <= window:
            words.append(f"[{t.form}]" if t.index == j else t.form)
    return " ".join(words)


def cmd_inspect(args: argparse.Namespace) -> int:
    m = model_mod.load(args.model)
    print(f"mode          {m.mode}")
    print(f"swap          {m.system.swap}")
    print(f"joint         {m.system.joint}")
    print(f"forms         {m.forms.n_classes}")
    print(f"tags          {m.tags.n_classes}")
    print(f"labels        {m.labels.n_classes}")
    print(f"actions       {m.actions.size}")
    print(f"tagger_hidden {m.tagger_cfg.hidden}")
    print(f"parser_hidden {m.parser_cfg.hidden}")
    print(f"tagger_params {m.tagger.count_parameters()}")
    print(f"parser_params {m.parser.count_parameters()}")
    print(f"total_params  {m.count_parameters()}")
    print(f"tagger_steps  {m.tagger.step}")
    print(f"parser_steps  {m.parser.step}")
    return EXIT_OK


def build_arg_parser() -> _Parser:
    p = _Parser(prog="stackprop", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_train_flags(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--swap", action="store_const", const=True)
        for key in (
            "parser_epochs", "tagger_epochs", "pretrain_epochs", "patience",
            "batch_size", "averaging_start", "seed", "h_tagger", "h_parser",
            "d_implicit", "d_label", "d_word", "d_affix", "d_caps", "d_symbols",
            "jackknife_folds",
        ):
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
        for key in ("lambda_weight", "eta0", "gamma", "mu"):
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float)
        sp.add_argument("--embeddings", help="pretrained word embedding text file")

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--train", help="training CoNLL-U file")
    sp.add_argument("--dev", help="development CoNLL-U file (early stopping)")
    sp.add_argument("--model", help="output model path")
    sp.add_argument("--manifest", help="manifest path (default: <model>.manifest.json)")
    sp.add_argument("--replay", help="re-run from a training manifest")
    add_train_flags(sp)
    sp.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("parse", cmd_parse, "parse CoNLL-U, writing predicted heads/labels"),
        ("tag", cmd_tag, "tag CoNLL-U, writing predicted UPOS"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--model", required=True)
        sp.add_argument("--input", help="input file (default stdin)")
        sp.add_argument("--output", help="output file (default stdout)")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--emit-activations", dest="emit_activations",
                        help="dump per-token hidden vectors to this file")
        sp.set_defaults(func=func)

    sp = sub.add_parser("eval", help="score a system output against gold")
    sp.add_argument("--gold", required=True)
    sp.add_argument("--system", required=True)
    sp.add_argument("--exclude-punct", action="store_true")
    sp.add_argument("--machine", action="store_true", help="key=value output")
    sp.add_argument("--reference-tags",
                    help="CoNLL-U with reference tags for the cascade breakdown")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("jackknife", help="k-fold jackknife tagging")
    sp.add_argument("--train", required=True)
    sp.add_argument("--output", required=True, help="merged tagged corpus")
    sp.add_argument("--folds", type=int)
    sp.add_argument("--model-prefix", dest="model_prefix",
                    help="write fold models as <prefix>.foldN.model")
    add_train_flags(sp)
    sp.set_defaults(func=cmd_jackknife)

    sp = sub.add_parser("neighbors", help="nearest tokens in activation space")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--sentence", type=int, required=True, help="1-based sentence number")
    sp.add_argument("--token", type=int, required=True, help="1-based token index")
    sp.add_argument("-k", type=int, default=3)
    sp.set_defaults(func=cmd_neighbors)

    sp = sub.add_parser("inspect-model", help="print model metadata")
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except ModelError as e:
        log.error("%s", e)
        return EXIT_MODEL
    except (CorpusError, StackpropError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except OSError as e:
        log.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
