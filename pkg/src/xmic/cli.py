"""``xmic`` command-line front end.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from importlib.resources import files
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .datastore import ClassVocabulary, partition_shared_novel, read_store, store_dim
from .encoders import SyntheticSpec, ToyTextEncoder, build_text_classifier, synth_cross_domain, write_synthetic
from .errors import UnknownKindError, XmicError

ABLATIONS = {
    "norm": ("norm", ["n1", "none", "n2,n3", "n1,n2,n3", "n1,n2", "n1,n3"]),
    "alpha": ("alpha", [0.1, 0.5, 1.0, 2.0, 5.0]),
    "frames": ("frames", [2, 4, 8, 16, 32]),
    "spatial": ("spatial", ["F", "H", "F+H"]),
    "compose": ("strategy", ["early-uni,xmic", "early-cross,xmic", "xmic", "xmic,Tt", "xmic,Vv", "xmic,Tt,Vv"]),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


# ---------------------------------------------------------------- argument plumbing

def _flag(p, name, **kw):
    p.add_argument("--" + name, dest=name.replace("-", "_"), default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xmic", description="Video-conditioned text classifiers over frozen embeddings.")
    parser.verbs = {}
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)
    train_flags = ["task", "strategy", "alpha", "norm", "frames", "epochs", "lr", "batch", "temperature"]

    def verb(name, flags, help_, kind=False):
        p = sub.add_parser(name, help=help_, description=help_, allow_abbrev=False)
        parser.verbs[name] = p
        if kind:
            p.add_argument("kind", help="one of " + ", ".join(ABLATIONS))
        for f in flags:
            if f == "seed" or f in ("epochs", "frames", "batch"):
                _flag(p, f, type=int)
            elif f in ("alpha", "lr", "temperature"):
                _flag(p, f, type=float)
            elif f == "task":
                _flag(p, f, choices=["noun", "verb"])
            elif f == "format":
                _flag(p, f, choices=["json", "table", "csv"])
            elif f in ("eval-store", "eval-manifest"):
                _flag(p, f, action="append")
            else:
                _flag(p, f)
        return p

    verb("gen-synth", ["config", "seed", "out"], "write a seeded synthetic two-domain dataset")
    verb("ingest", ["config", "store-v", "store-v2", "manifest", "vocab", "task", "out"],
         "validate embedding stores, manifest and vocabulary")
    verb("train", ["config", "seed", "store-v", "store-v2", "manifest", "vocab", *train_flags, "joint-vocab", "out",
                   "ckpt", "eval-store", "eval-manifest", "eval-vocab"], "train an adapter")
    verb("eval", ["config", "seed", "ckpt", "vocab", "task", "frames", "strategy", "eval-store", "eval-manifest",
                  "eval-vocab", "format", "out"], "evaluate within- and cross-dataset accuracy")
    verb("ablate", ["config", "seed", "store-v", "store-v2", "manifest", "vocab", *train_flags, "joint-vocab",
                    "eval-store", "eval-manifest", "eval-vocab", "format", "out"], "run an ablation sweep", kind=True)
    verb("partition", ["config", "vocab-a", "vocab-b", "task"], "split two vocabularies into shared / novel")
    verb("gradcheck", ["config", "seed"], "finite-difference check of every differentiable op")
    verb("profile", ["config", "seed", "strategy", "batch", "frames", "vocab", "format", "out"],
         "measure conditioning-path activations per strategy")
    return parser


FLAG_TO_CONFIG = {"batch": "batch_size"}


def resolve(args) -> dict:
    """Config file values overridden by explicit flags."""
    cfg = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise UsageError("--config must hold a JSON object")
    for k, v in vars(args).items():
        if k in ("verb", "config") or v is None:
            continue
        cfg[FLAG_TO_CONFIG.get(k, k)] = v
    return cfg


def _data_file(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    bundled = files("xmic") / "data" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise UsageError(f"file not found: {name}")


def _manifest_for(store: str, manifest: str | None) -> str:
    if manifest:
        return manifest
    guess = Path(store).with_suffix(".jsonl")
    if not guess.exists():
        raise UsageError(f"no manifest given and {guess} does not exist")
    return str(guess)


def load_classifier(vocab_path: str, task: str, dim: int, seed: int = 0):
    """Class rows from ``<vocab>.npy`` when present, else the toy encoder over the names."""
    path = _data_file(vocab_path)
    vocab = ClassVocabulary.from_file(path, task)
    npy = path.with_suffix(".npy")
    if npy.exists():
        rows = np.load(npy).astype(np.float64)
        if rows.shape[-1] != dim:
            raise UsageError(f"{npy}: dim {rows.shape[-1]} does not match store dim {dim}")
        return build_text_classifier(rows, vocab)
    enc = ToyTextEncoder(dim, seed=seed)
    return build_text_classifier(enc.encode_plain(vocab.names), vocab)


def _train_config(cfg: dict):
    from .training import TrainConfig

    keys = {k: cfg[k] for k in cfg if k in TrainConfig.__dataclass_fields__}
    return TrainConfig.from_dict(keys)


def _load_clips(store, store2, manifest, classifier, task, joint=None):
    from .training import make_clips

    recs = read_store(store, _manifest_for(store, manifest))
    recs2 = None
    if store2:
        if store_dim(store2) != store_dim(store):
            raise UsageError(f"D mismatch between {store} and {store2}")
        recs2 = read_store(store2)
    return make_clips(recs, classifier, task, recs2, joint=joint)


def _eval_inputs(cfg, classifier_a, task):
    """Within-dataset (first ``--eval-store``) and cross-dataset (second) clips."""
    stores = cfg.get("eval_store") or []
    manifests = cfg.get("eval_manifest") or []
    if isinstance(stores, str):
        stores = [stores]
    if isinstance(manifests, str):
        manifests = [manifests]
    if len(stores) > 2:
        raise UsageError("--eval-store takes at most two stores (within, cross)")
    out = {"within": [], "cross": [], "classifier_b": None}
    for i, store in enumerate(stores):
        man = manifests[i] if i < len(manifests) else None
        if i == 0:
            out["within"] = _load_clips(store, None, man, classifier_a, task)
        else:
            if not cfg.get("eval_vocab"):
                raise UsageError("a cross-dataset store needs --eval-vocab")
            cls_b = load_classifier(cfg["eval_vocab"], task, classifier_a.dim, cfg.get("seed", 0))
            out["cross"] = _load_clips(store, None, man, cls_b, task)
            out["classifier_b"] = cls_b
    return out


def _emit(text: str, out: str | None):
    if out:
        with atomic_write(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _print_config(cfg: dict):
    print("resolved config: " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


# ---------------------------------------------------------------- verbs

def cmd_gen_synth(cfg):
    keys = {k: v for k, v in cfg.items() if k not in ("out", "shared")}
    spec = SyntheticSpec.from_dict(keys)
    if not cfg.get("out"):
        raise UsageError("gen-synth needs --out")
    bundle = synth_cross_domain(spec, cfg.get("shared"))
    paths = write_synthetic(bundle, cfg["out"])
    print(json.dumps({"spec": asdict(spec), "written": paths}, sort_keys=True))
    return 0


def cmd_ingest(cfg):
    for key in ("store_v", "vocab"):
        if not cfg.get(key):
            raise UsageError(f"ingest needs --{key.replace('_', '-')}")
    task = cfg.get("task", "noun")
    dim = store_dim(cfg["store_v"])
    classifier = load_classifier(cfg["vocab"], task, dim, cfg.get("seed", 0))
    clips = _load_clips(cfg["store_v"], cfg.get("store_v2"), cfg.get("manifest"), classifier, task)
    counts = np.bincount([c.label for c in clips], minlength=classifier.num_classes)
    summary = {"clips": len(clips), "dim": dim, "classes": classifier.num_classes,
               "classes_present": int(np.sum(counts > 0)), "with_hands": sum(c.v2.hand is not None for c in clips),
               "separate_v2": bool(cfg.get("store_v2"))}
    _emit(json.dumps(summary, sort_keys=True) + "\n", cfg.get("out"))
    return 0


def _train_inputs(cfg):
    for key in ("store_v", "vocab"):
        if not cfg.get(key):
            raise UsageError(f"needs --{key.replace('_', '-')}")
    if cfg.get("joint_vocab"):
        cfg["joint"] = True
    config = _train_config(cfg)
    dim = store_dim(cfg["store_v"])
    classifier = load_classifier(cfg["vocab"], config.task, dim, config.seed)
    joint = None
    if config.joint:
        if not cfg.get("joint_vocab"):
            raise UsageError("joint training needs --joint-vocab")
        other = "verb" if config.task == "noun" else "noun"
        joint = (load_classifier(cfg["joint_vocab"], other, dim, config.seed), other)
    clips = _load_clips(cfg["store_v"], cfg.get("store_v2"), cfg.get("manifest"), classifier, config.task, joint)
    return config, classifier, clips, joint


def cmd_train(cfg):
    from .training import train_run

    config, classifier, clips, joint = _train_inputs(cfg)
    ev = _eval_inputs(cfg, classifier, config.task)
    sets = {}
    if ev["within"]:
        sets["within"] = (ev["within"], None)
    if ev["cross"]:
        sets["cross"] = (ev["cross"], ev["classifier_b"])
    _, metrics = train_run(clips, classifier, config, sets, log_path=cfg.get("out"), ckpt_path=cfg.get("ckpt"),
                           verbose=lambda row: print(json.dumps(row, sort_keys=True), file=sys.stderr),
                           joint_classifier=joint[0] if joint else None)
    if not cfg.get("out"):
        for row in metrics:
            print(json.dumps(row, sort_keys=True))
    return 0


def _report(model, ev, classifier_a, task, frames):
    from .eval import EvalReport, evaluate_cross_dataset

    if ev["classifier_b"] is None:
        cls_b = classifier_a
        partition = partition_shared_novel(classifier_a.vocab, classifier_a.vocab)
        report = evaluate_cross_dataset(model, ev["within"], [], cls_b, partition, task, frames)
    else:
        partition = partition_shared_novel(classifier_a.vocab, ev["classifier_b"].vocab)
        report = evaluate_cross_dataset(model, ev["within"], ev["cross"], ev["classifier_b"], partition, task, frames)
    assert isinstance(report, EvalReport)
    return report


def cmd_eval(cfg):
    from .adapters import load_checkpoint
    from .training import build_model

    if not cfg.get("vocab") or not cfg.get("eval_store"):
        raise UsageError("eval needs --vocab and --eval-store")
    config = _train_config({k: v for k, v in cfg.items() if k in ("task", "frames", "seed", "strategy")})
    stores = cfg["eval_store"] if isinstance(cfg["eval_store"], list) else [cfg["eval_store"]]
    dim = store_dim(stores[0])
    classifier = load_classifier(cfg["vocab"], config.task, dim, config.seed)
    if cfg.get("ckpt"):
        model = load_checkpoint(cfg["ckpt"], classifier)
    else:
        config.strategy = cfg.get("strategy", "zero-shot")
        model = build_model(classifier, config)
    ev = _eval_inputs(cfg, classifier, config.task)
    report = _report(model, ev, classifier, config.task, config.n_eval)
    report.meta["variant"] = "checkpoint" if cfg.get("ckpt") else config.strategy
    _emit(report.render(cfg.get("format") or "json"), cfg.get("out"))
    return 0


def cmd_ablate(cfg):
    from .eval import format_csv, format_table
    from .training import train_run

    kind = cfg.pop("kind")
    if kind not in ABLATIONS:
        raise UnknownKindError(f"unknown ablation {kind!r}; choose from {', '.join(ABLATIONS)}")
    key, values = ABLATIONS[kind]
    base, classifier, clips, joint = _train_inputs(cfg)
    ev = _eval_inputs(cfg, classifier, base.task)
    rows, reports = [], []
    for value in values:
        config = _train_config(dict(base.to_dict(), **{key: value}))
        if kind == "frames":
            config.eval_frames = value
        model, _ = train_run(clips, classifier, config, joint_classifier=joint[0] if joint else None)
        report = _report(model, ev, classifier, config.task, config.n_eval)
        label = f"{kind}={value}"
        report.meta["variant"] = label
        rows.append(dict(report.row(), variant=label))
        reports.append(report.to_dict())
        print(f"{label}: {json.dumps(report.row(), sort_keys=True)}", file=sys.stderr)
    fmt = cfg.get("format") or "table"
    text = {"json": lambda: json.dumps({"kind": kind, "rows": rows, "reports": reports}, indent=2, sort_keys=True) + "\n",
            "table": lambda: format_table(rows), "csv": lambda: format_csv(rows)}[fmt]()
    _emit(text, cfg.get("out"))
    return 0


def cmd_partition(cfg):
    if not cfg.get("vocab_a") or not cfg.get("vocab_b"):
        raise UsageError("partition needs --vocab-a and --vocab-b")
    task = cfg.get("task")
    if task is None:
        task = "verb" if "verb" in Path(cfg["vocab_a"]).name else "noun"
    a = ClassVocabulary.from_file(_data_file(cfg["vocab_a"]), task)
    b = ClassVocabulary.from_file(_data_file(cfg["vocab_b"]), task)
    shared, novel_a, novel_b = partition_shared_novel(a, b).counts()
    print(f"shared={shared} novel_a={novel_a} novel_b={novel_b}")
    return 0


def cmd_gradcheck(cfg):
    from .selfcheck import run_suite

    ok = True
    for name, report in run_suite(cfg.get("seed", 0)):
        ok &= report.passed
        print(f"{'PASS' if report.passed else 'FAIL'}  {name:<20} max rel err {report.max_rel_error:.2e}")
    return 0 if ok else 2


def cmd_profile(cfg):
    from .eval import activation_cost_profile

    C = len(ClassVocabulary.from_file(_data_file(cfg["vocab"]))) if cfg.get("vocab") else int(cfg.get("C", 16))
    strategies = [cfg["strategy"]] if cfg.get("strategy") else ["early-uni", "early-cross", "xmic", "xmic,Tt", "xmic,Vv"]
    batches = [cfg["batch_size"]] if cfg.get("batch_size") else [1, 2, 4, 8]
    rows = [activation_cost_profile(s, b, C, int(cfg.get("prompts", 4)), int(cfg.get("D", 32)),
                                    int(cfg.get("frames", 16)), int(cfg.get("seed", 0)))
            for s in strategies for b in batches]
    fmt = cfg.get("format") or "table"
    if fmt == "json":
        text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
    else:
        cols = list(rows[0])
        cells = [cols] + [[str(r[c]) for c in cols] for r in rows]
        if fmt == "csv":
            text = "".join(",".join(line) + "\n" for line in cells)
        else:
            widths = [max(len(line[i]) for line in cells) for i in range(len(cols))]
            text = "".join("  ".join(v.rjust(w) for v, w in zip(line, widths)) + "\n" for line in cells)
    _emit(text, cfg.get("out"))
    return 0


COMMANDS = {"gen-synth": cmd_gen_synth, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "partition": cmd_partition, "gradcheck": cmd_gradcheck, "profile": cmd_profile}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.verb is None:
            raise UsageError(parser.format_help())
        if extra:
            verb = parser.verbs[args.verb]
            raise UsageError(f"{verb.prog}: unrecognized arguments: {' '.join(extra)}\n\n{verb.format_help()}")
        cfg = resolve(args)
        _print_config(cfg)
        return COMMANDS[args.verb](cfg)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (XmicError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        kind = 1 if isinstance(exc, (XmicError, ValueError, KeyError, json.JSONDecodeError)) else 2
        print(f"error: {exc}", file=sys.stderr)
        return kind
    except Exception as exc:  # noqa: BLE001 - top-level guard
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
