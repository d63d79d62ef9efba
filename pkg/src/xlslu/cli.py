"""Command-line entry point: ``xlslu <command> [options]``.

Exit codes: 0 success, 2 configuration/usage error, 3 I/O error,
4 numeric failure (non-finite loss or failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .checks import grad_check
from .corpus import (
    ConfigError, Corpus, CorpusFormatError, GeneratorSpec, Lexicon, code_switch,
    generate_synthetic, load_corpus, save_corpus, validate_corpus,
)
from .encoder import encode_batch, load_checkpoint, save_checkpoint
from .labels import LabelSpace
from .losses import TERM_NAMES, total_loss
from .numerics import NonFiniteError
from .queues import SampleQueues, entries_from_batch
from .train import AblationMode, TrainConfig, evaluate, fit, init_state, view_alignment

log = logging.getLogger("xlslu")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SCHEMA_DIR = Path(__file__).parent / "schemas"


class UsageError(Exception):
    pass


# -- data directory helpers --------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return path


def load_data_dir(data: Path):
    labels = LabelSpace.load(_require(data / "labels.json"))
    lexicon = Lexicon.load(_require(data / "lexicon.json"))
    train = load_corpus(_require(data / "train.jsonl"), labels)

    def split(prefix: str) -> dict[str, Corpus]:
        return {
            p.name[len(prefix) + 1:-len(".jsonl")]: load_corpus(p, labels)
            for p in sorted(data.glob(f"{prefix}.*.jsonl"))
        }

    return labels, lexicon, train, split("dev"), split("test")


def data_hashes(data: Path) -> dict[str, str]:
    names = ["labels.json", "lexicon.json", "train.jsonl"]
    names += sorted(p.name for p in data.glob("dev.*.jsonl"))
    names += sorted(p.name for p in data.glob("test.*.jsonl"))
    return {n: _sha256(data / n) for n in names if (data / n).exists()}


# -- config resolution --------------------------------------------------

_WEIGHT_FLAGS = {
    "lambda_i": "lambda_i", "lambda_s": "lambda_s", "lambda_un_i": "lambda_un_i",
    "lambda_un_s": "lambda_un_s", "lambda_un_gis": "lambda_un_gis",
    "beta_i": "beta_i", "beta_s": "beta_s", "beta_j": "beta_j",
    "gamma1": "gamma1", "gamma2": "gamma2",
}
_TOP_FLAGS = (
    "queue_size", "batch_size", "epochs", "optimizer", "lr", "dim", "hidden", "pooling",
    "dropout", "switch_p", "seed", "ablation",
)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args, base: dict | None = None) -> TrainConfig:
    """Defaults < manifest/config file < command-line flags."""
    cfg = TrainConfig().to_dict()
    if base:
        cfg = _merge(cfg, base)
    if getattr(args, "config", None):
        loaded = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = _merge(cfg, loaded)
    for flag, key in _WEIGHT_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg["weights"][key] = value
    for key in ("tau", "tau_prime"):
        value = getattr(args, key, None)
        if value is not None:
            cfg["cl"][key] = value
    if getattr(args, "exclude_o_anchors", False):
        cfg["cl"]["include_o_anchors"] = False
    if getattr(args, "strict_pairing", False):
        cfg["cl"]["strict_pairing"] = True
    for key in _TOP_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    try:
        return TrainConfig.from_dict(cfg)
    except TypeError as e:
        raise ConfigError(f"bad configuration: {e}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with TrainConfig fields")
    g = p.add_argument_group("loss weights")
    for flag in _WEIGHT_FLAGS:
        g.add_argument("--" + flag.replace("_", "-"), dest=flag, type=float)
    g.add_argument("--tau", type=float, help="unsupervised temperature")
    g.add_argument("--tau-prime", dest="tau_prime", type=float, help="supervised temperature")
    g.add_argument("--exclude-o-anchors", action="store_true")
    g.add_argument("--strict-pairing", action="store_true")
    t = p.add_argument_group("training")
    t.add_argument("--queue-size", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--optimizer", choices=["adam", "sgd"])
    t.add_argument("--lr", type=float)
    t.add_argument("--dim", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--pooling", choices=["mean", "attention"])
    t.add_argument("--dropout", type=float)
    t.add_argument("--switch-p", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablation", choices=[m.value for m in AblationMode])


# -- commands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = GeneratorSpec(
        n_intents=args.intents, n_slot_types=args.slots, n_templates=args.templates,
        n_train=args.train, n_dev=args.dev, n_test=args.test,
        translations_per_word=args.translations,
        source_language=args.source, target_languages=tuple(args.languages),
    )
    data = generate_synthetic(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.labels.save(out / "labels.json")
    data.lexicon.save(out / "lexicon.json")
    save_corpus(data.train, out / "train.jsonl")
    for split, corpora in (("dev", data.dev), ("test", data.test)):
        for lang, corpus in corpora.items():
            save_corpus(corpus, out / f"{split}.{lang}.jsonl")
    print(f"wrote {len(data.train)} training utterances to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    data = Path(args.data)
    labels, lexicon, train, dev, test = load_data_dir(data)
    problems = [f"train: {p}" for p in validate_corpus(train, lexicon)]
    for split, corpora in (("dev", dev), ("test", test)):
        for lang, corpus in corpora.items():
            problems += [f"{split}.{lang}: {p}" for p in validate_corpus(corpus)]
    for p in problems:
        print(p)
    if problems:
        return EXIT_CONFIG
    print(f"ok: {len(train)} train, "
          f"{sum(len(c) for c in dev.values())} dev, {sum(len(c) for c in test.values())} test")
    return EXIT_OK


def _write_curves(path: Path, curves: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", *TERM_NAMES, "total"])
        for row in curves:
            w.writerow([row["epoch"], *(repr(row[k]) for k in (*TERM_NAMES, "total"))])


def cmd_train(args) -> int:
    base, data_dir = None, args.data
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
        base = manifest["config"]
        data_dir = data_dir or manifest["data_dir"]
        if data_hashes(Path(data_dir)) != manifest["corpus_hashes"]:
            raise ConfigError("data files differ from the manifest's recorded hashes")
    if not data_dir:
        raise UsageError("--data is required")
    config = resolve_config(args, base)
    data = Path(data_dir)
    labels, lexicon, train, dev, test = load_data_dir(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = fit(config, train, dev, lexicon)
    save_checkpoint(result.params, out / "checkpoint.json")
    _write_curves(out / "curves.csv", result.curves)

    src_langs = {u.language for u in train}
    targets = init_state(config, train, lexicon, result.params).switch.languages
    metrics = {
        "best_epoch": result.best_epoch,
        "epochs": [
            {"epoch": i + 1, "dev": {lang: m.to_dict() for lang, m in h.items()}}
            for i, h in enumerate(result.history)
        ],
        "test": {lang: evaluate(result.params, c).to_dict() for lang, c in test.items()},
        "view_alignment": {},
    }
    for lang, corpus in test.items():
        # source-language utterances switch into the targets and vice versa
        others = list(targets) if lang in src_langs else sorted(src_langs)
        metrics["view_alignment"][lang] = {
            name: float(view_alignment(p, corpus.examples, lexicon, others,
                                       config.switch_p, config.seed).mean())
            for name, p in (("initial", result.initial_params), ("best", result.params))
        }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    manifest = {
        "tool": "xlslu",
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "data_dir": str(data),
        "corpus_hashes": data_hashes(data),
        "artifacts": {
            "checkpoint": "checkpoint.json",
            "curves": "curves.csv",
            "metrics": "metrics.json",
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    for lang, m in metrics["test"].items():
        print(f"test {lang}: intent {m['intent_accuracy']:.4f}  slot F1 {m['slot_f1']:.4f}  "
              f"overall {m['overall_accuracy']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_checkpoint(_require(Path(args.checkpoint)))
    report = {}
    for path in args.corpus:
        corpus = load_corpus(_require(Path(path)), params.labels)
        report[Path(path).name] = evaluate(params, corpus).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    terms = args.term or list(TERM_NAMES)
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise UsageError(f"unknown terms: {', '.join(sorted(unknown))}")
    results = grad_check(terms, trials=args.trials, seed=args.seed, h=args.h)
    failed = []
    for term, r in results.items():
        ok = r.error < args.tolerance
        print(f"{'PASS' if ok else 'FAIL'} {term}: max rel error {r.error:.3e}"
              f" (trial {r.trial}, coordinate {r.coordinate})")
        if not ok:
            failed.append(term)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _params_for(args, config: TrainConfig, train, lexicon):
    if args.checkpoint:
        return load_checkpoint(_require(Path(args.checkpoint)))
    return init_state(config, train, lexicon).params


def cmd_dump_losses(args) -> int:
    config = resolve_config(args)
    labels, lexicon, train, _, _ = load_data_dir(Path(args.data))
    state = init_state(config, train, lexicon, _params_for(args, config, train, lexicon))
    k = config.queue_size
    examples = train.examples
    if len(examples) < k + 1:
        raise ConfigError("training corpus too small to fill the queue")
    fill = examples[:k]
    batch = examples[k:k + config.batch_size]
    rng = np.random.default_rng(config.seed)
    switch = state.switch
    queues = SampleQueues(k)
    if fill:
        fill_views = [code_switch(u, lexicon, switch, rng) for u in fill]
        src = encode_batch(state.params, fill)
        view = encode_batch(state.params, fill_views)
        queues.enqueue_batch(entries_from_batch(fill, labels, src, view))
    views = [code_switch(u, lexicon, switch, rng) for u in batch]
    breakdown, _, _ = total_loss(state.params, batch, views, queues.snapshot(),
                                 config.effective_weights, config.cl)
    text = json.dumps(breakdown.as_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    params = load_checkpoint(_require(Path(args.checkpoint)))
    lexicon = Lexicon.load(_require(Path(args.lexicon)))
    known = sorted({lang for w in lexicon.entries.values() for lang in w})
    rows = []
    for path in args.corpus:
        corpus = load_corpus(_require(Path(path)), params.labels)
        for lang in sorted({u.language for u in corpus}):
            utts = [u for u in corpus if u.language == lang]
            others = [l for l in known if l != lang]
            cos = view_alignment(params, utts, lexicon, others, args.switch_p, args.seed)
            emb = encode_batch(params, utts).h_cls.data
            for u, c, e in zip(utts, cos, emb):
                rows.append([len(rows), lang, params.labels.intents[u.intent], repr(float(c)),
                             *(repr(float(x)) for x in e)])
    dim = params.config.dim
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "lang", "intent", "cos_view", *(f"e{i}" for i in range(dim))])
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xlslu", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"xlslu {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multilingual corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--intents", type=int, default=4)
    p.add_argument("--slots", type=int, default=5, help="number of slot types")
    p.add_argument("--templates", type=int, default=12)
    p.add_argument("--train", type=int, default=400)
    p.add_argument("--dev", type=int, default=100)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--translations", type=int, default=1)
    p.add_argument("--source", default="en")
    p.add_argument("--languages", nargs="+", default=["de"], help="target languages")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("validate", help="check a data directory")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="fit the model and write checkpoint, curves and metrics")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--from-manifest")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on corpus files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every loss term")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--term", action="append", choices=list(TERM_NAMES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-losses", help="loss breakdown for one batch as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_dump_losses)

    p = sub.add_parser("dump-embeddings", help="sentence embeddings as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--switch-p", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dump_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (ConfigError, CorpusFormatError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
