"""Command line front end: ``tthlab <command> [options]``.

Every command reads one JSON run configuration (defaults when none is
given), applies ``--set key.path=value`` overrides, and works inside the run
directory. The run directory is ``--out``, the config's ``out`` key, or
``$TTHLAB_OUT``, in that order. Artifacts left there by earlier commands are
reused. Every written file gets a ``.prov.json`` sidecar. Directories of
images get a single ``PROVENANCE.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .attack import save_trojan_set
from .config import RunConfig, load_config
from .errors import ConfigError, NonConvergenceError, TTHError
from .matcher import save_model
from .pipeline import Lab
from .ppm import write_ppm
from .retrieval import (
    ablate_lambda,
    ablate_patch_ratio,
    dump_embeddings,
    run_experiment_matrix,
    run_report,
    table_csv,
)
from .synthworld import save_benign_set, save_corpus, select_keywords

log = logging.getLogger("tthlab")

EXIT_OK = 0
EXIT_IO = 3


# ---------------------------------------------------------------- provenance


def _versions():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"tthlab": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def provenance(config: RunConfig, command: str, files) -> dict:
    return {
        "command": command,
        "config_digest": config.digest(),
        "seed": config.seed,
        "versions": _versions(),
        "files": {Path(f).name: hashlib.sha256(Path(f).read_bytes()).hexdigest() for f in files},
    }


def write_text(path: Path, text: str, config: RunConfig, command: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    side = path.with_name(path.name + ".prov.json")
    side.write_text(json.dumps(provenance(config, command, [path]), indent=1, sort_keys=True) + "\n")
    return path


def write_dir_provenance(directory: Path, config: RunConfig, command: str, pattern: str = "*.ppm"):
    files = sorted(Path(directory).glob(pattern))
    doc = provenance(config, command, files)
    (Path(directory) / "PROVENANCE.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(lab: Lab, args) -> int:
    root = lab.run_dir
    cfg = lab.config
    for flavor in (cfg.world.flavor, cfg.world.surrogate_flavor):
        corpus = lab.corpus(flavor)
        manifest = save_corpus(corpus, root / "corpus" / flavor)
        side = manifest.with_name(manifest.name + ".prov.json")
        side.write_text(json.dumps(provenance(cfg, "gen-corpus", [manifest]), indent=1, sort_keys=True) + "\n")
        write_dir_provenance(root / "corpus" / flavor / "images", cfg, "gen-corpus")
        counts = {s: len(corpus.split(s)) for s in ("train", "val", "test")}
        print(f"{flavor}: train {counts['train']} val {counts['val']} test {counts['test']} "
              f"captions {len(corpus.captions())}")
    save_benign_set(lab.benign(), root / "benign")
    write_dir_provenance(root / "benign", cfg, "gen-corpus")
    print(f"benign: {len(lab.benign())} carriers")
    return EXIT_OK


def cmd_train(lab: Lab, args) -> int:
    archs = sorted(lab.config.models) if args.arch == "all" else [args.arch]
    for arch in archs:
        model, tlog = lab.train(arch)
        path = lab.run_dir / "models" / f"{arch}.bin"
        save_model(model, path)
        side = path.with_name(path.name + ".prov.json")
        side.write_text(json.dumps(provenance(lab.config, "train", [path]), indent=1, sort_keys=True) + "\n")
        doc = {"arch": arch, "epochs": tlog.epochs, "losses": tlog.losses, "val_r10": tlog.val_r10}
        write_text(lab.run_dir / "models" / f"{arch}.log.json", json.dumps(doc, indent=1) + "\n",
                   lab.config, "train")
        print(f"arch {arch}: final loss {tlog.losses[-1]:.4f} val R@10 {tlog.val_r10:.1f}")
    return EXIT_OK


def cmd_select_keywords(lab: Lab, args) -> int:
    cfg = lab.config
    picked = select_keywords(lab.corpus(), cfg.eval.per_pos, cfg.seed)
    rows = [{"keyword": w, "pos": p, "frequency": f} for w, p, f in picked]
    write_text(lab.run_dir / "keywords.json", json.dumps(rows, indent=1) + "\n", cfg, "select-keywords")
    for r in rows:
        print(f"{r['pos']:9s} {r['keyword']:10s} {r['frequency']}")
    return EXIT_OK


def cmd_attack(lab: Lab, args) -> int:
    cfg = lab.config
    if args.all_keywords:
        keywords = lab.keywords()
    elif args.keyword:
        keywords = args.keyword
    else:
        raise ConfigError("give --keyword or --all-keywords")
    flavor = args.context_flavor or cfg.world.flavor
    unconverged = []
    for kw in keywords:
        ts = lab.trojan_set(args.arch, kw, flavor)
        out = lab.trojan_dir(args.arch, flavor, kw)
        record = save_trojan_set(ts, out, lab.attack_config())
        side = record.with_name(record.name + ".prov.json")
        side.write_text(json.dumps(provenance(cfg, "attack", [record]), indent=1, sort_keys=True) + "\n")
        write_dir_provenance(out, cfg, "attack")
        acc, ok = ts.scannable()
        att = ts.patch.loss_trace[-1][0] if ts.patch.loss_trace else float("nan")
        print(f"{kw:10s} attack loss {att:.4f} mcs {ts.context.mcs:.3f} cells {acc:.3f} "
              f"scannable {ok} converged {ts.converged}")
        if not ts.converged:
            unconverged.append(kw)
    if unconverged and args.strict:
        raise NonConvergenceError(f"no convergence for {', '.join(unconverged)}")
    return EXIT_OK


def _write_report(lab: Lab, rep) -> None:
    s = rep.setup
    name = f"{s['mode']}-{s['attack_net']}-{s['eval_net']}"
    base = lab.run_dir / "reports"
    write_text(base / f"{name}.csv", rep.to_csv(), lab.config, "eval")
    write_text(base / f"{name}.json", rep.to_json(), lab.config, "eval")
    if rep.rankings:
        write_text(base / f"{name}.rankings.json", json.dumps(rep.rankings, indent=1, sort_keys=True) + "\n",
                   lab.config, "eval")
    m = rep.mean_row
    print(f"{name:28s} relevant {m.relevant_r10_clean:5.1f} -> {m.relevant_r10_tth:5.1f}   "
          f"novel {m.trojan_r10_clean:5.1f} -> {m.trojan_r10_tth:5.1f}   spearman(mcs) {rep.spearman_mcs():.3f}")


def cmd_eval(lab: Lab, args) -> int:
    cfg = lab.config
    lab.stored_trojans_only = True
    if args.mode == "matrix":
        reports = run_experiment_matrix(lab=lab)
    elif args.mode == "white-box":
        reports = [run_report(lab, "white-box", args.arch, args.arch, cfg.world.flavor)]
    elif args.mode == "surrogate-dataset":
        reports = [run_report(lab, "surrogate-dataset", args.arch, args.arch, cfg.world.surrogate_flavor)]
    else:
        target = args.eval_arch or ("B" if args.arch == "A" else "A")
        if target == args.arch:
            raise ConfigError("surrogate-model mode needs two different archs")
        reports = [run_report(lab, "surrogate-model", args.arch, target, cfg.world.flavor)]
    for rep in reports:
        _write_report(lab, rep)
    return EXIT_OK


def cmd_ablate(lab: Lab, args) -> int:
    cfg = lab.config
    out = lab.run_dir / "ablations"
    if args.which == "lambda":
        points = ablate_lambda(lab=lab, arch=args.arch)
        for p in points:
            ts = lab.trojan_set(args.arch, p.keyword, benign_seed=p.seed, lam=p.lam, seed=p.seed)
            write_ppm(out / "lambda" / f"seed{p.seed}-lam{p.lam:g}-{p.keyword}.ppm", ts.patch.delta)
        write_dir_provenance(out / "lambda", cfg, "ablate")
        for p in points:
            print(f"seed {p.seed} lambda {p.lam:<5g} {p.keyword:10s} trojan R@10 {p.trojan_r10:5.1f} "
                  f"cells {p.cell_accuracy:.3f} scannable {p.scannable}")
    else:
        points = ablate_patch_ratio(lab=lab, arch=args.arch)
        for p in points:
            for kw in p.keywords:
                ts = lab.trojan_set(args.arch, kw, ratio=p.ratio)
                write_ppm(out / "ratio" / f"ratio{p.ratio:g}-{kw}.ppm", ts.patch.delta)
            print(f"ratio {p.ratio:<5g} mean trojan R@10 {p.trojan_r10:5.1f}")
        write_dir_provenance(out / "ratio", cfg, "ablate")
    write_text(out / f"{args.which}.csv", table_csv(points), cfg, "ablate")
    return EXIT_OK


def cmd_dump_embeddings(lab: Lab, args) -> int:
    lab.stored_trojans_only = True
    ts = lab.trojan_set(args.arch, args.keyword)
    path = lab.run_dir / "embeddings" / f"{args.arch}-{args.keyword}.csv"
    text = dump_embeddings(lab.model(args.arch), lab.corpus(), ts, args.keyword)
    write_text(path, text, lab.config, "dump-embeddings")
    print(f"{path}: {text.count(chr(10)) - 1} rows")
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "select-keywords": cmd_select_keywords,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-embeddings": cmd_dump_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. attack.lam=1.0")
    common.add_argument("--out", help="run directory (overrides config and $TTHLAB_OUT)")

    parser = argparse.ArgumentParser(prog="tthlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="render both corpus flavors and the carriers")
    p = sub.add_parser("train", parents=[common], help="train matchers on the union corpus")
    p.add_argument("--arch", default="all", choices=["A", "B", "all"])
    sub.add_parser("select-keywords", parents=[common], help="pick target keywords per part of speech")
    p = sub.add_parser("attack", parents=[common], help="build trojan sets")
    p.add_argument("--keyword", action="append", help="target keyword (repeatable)")
    p.add_argument("--all-keywords", action="store_true")
    p.add_argument("--arch", default="A", choices=["A", "B"])
    p.add_argument("--context-flavor", help="corpus flavor whose captions define the keyword embedding")
    p.add_argument("--strict", action="store_true", help="exit 5 if any attack fails to converge")
    p = sub.add_parser("eval", parents=[common], help="R@10 with and without trojans")
    p.add_argument("--mode", default="white-box",
                   choices=["white-box", "surrogate-dataset", "surrogate-model", "matrix"])
    p.add_argument("--arch", default="A", choices=["A", "B"], help="attack network")
    p.add_argument("--eval-arch", choices=["A", "B"], help="evaluation network (surrogate-model)")
    p = sub.add_parser("ablate", parents=[common], help="lambda or patch-ratio sweep")
    p.add_argument("which", choices=["lambda", "ratio"])
    p.add_argument("--arch", default="A", choices=["A", "B"])
    p = sub.add_parser("dump-embeddings", parents=[common], help="CSV of embeddings for one keyword")
    p.add_argument("--keyword", required=True)
    p.add_argument("--arch", default="A", choices=["A", "B"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config, args.set)
        if args.out:
            config.out = args.out
        root = config.output_root()
        root.mkdir(parents=True, exist_ok=True)
        write_text(root / "config.json", config.to_json(), config, args.command)
        return COMMANDS[args.command](Lab(config, root), args)
    except TTHError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
