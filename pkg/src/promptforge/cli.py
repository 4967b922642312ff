"""Command-line driver: run, ablate, sweep-nv, export-features, grad-check, report."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import config as cfg
from .encoders import encode_visual, init_frozen_weights, load_weights
from .episodes import EpisodeError, episode_seed, evaluate, generate_synthetic_domain, import_dataset, sample_episode
from .gradsuite import LOSSES, run_gradient_suite
from .numerics import SeededRng
from .pipeline import run_variant, variant_method
from .semantic import load_corpus

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class Context:
    """Everything a command needs, built once from a validated config document."""

    def __init__(self, doc):
        self.doc = doc
        enc = doc["encoder"]
        if enc["weights_path"]:
            self.weights = load_weights(enc["weights_path"])
        else:
            self.weights = init_frozen_weights(cfg.encoder_config(doc), enc["seed"])
        ds = doc["dataset"]
        if ds["path"]:
            self.dataset = import_dataset(ds["path"])
        else:
            e = doc["episodes"]
            self.dataset = generate_synthetic_domain(cfg.dataset_spec(doc), ds["seed"], min_per_class=e["k_shot"] + e["n_query"])
        self.corpus = load_corpus(doc["corpus_path"]) if doc["corpus_path"] else self.dataset.corpus
        self.fingerprint = cfg.fingerprint(doc)

    def evaluate(self, variant, seed, count=None, diagnostics=False, doc=None):
        doc = doc or self.doc
        method = variant_method(variant, self.corpus, self.weights, cfg.pipeline_config(doc, variant), diagnostics)
        return evaluate(
            method,
            self.dataset,
            count or doc["episodes"]["count"],
            cfg.episode_config(doc),
            seed,
            self.fingerprint,
            workers=worker_count(doc["workers"]),
        )


def worker_count(requested):
    cap = os.environ.get("PROMPTFORGE_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            pass
    return requested


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(x):
    return f"{x:.6f}"


# ------------------------------------------------------------------- commands


def cmd_run(ctx, out):
    doc = ctx.doc
    seed, variant = doc["seed"], doc["variant"]
    report = ctx.evaluate(variant, seed, diagnostics=doc["diagnostics"])
    payload = {
        "schema_version": cfg.SCHEMA_VERSION,
        "command": "run",
        "variant": variant,
        "config_fingerprint": ctx.fingerprint,
        "dataset_fingerprint": ctx.dataset.fingerprint(),
        "encoder_checksum": ctx.weights.checksum,
        "config": cfg.result_config(doc),
        **report.to_dict(),
    }
    _write_json(os.path.join(out, "report.json"), payload)
    _write_csv(
        os.path.join(out, "episodes.csv"),
        ["episode", "episode_seed", "accuracy", "config_fingerprint"],
        [[i, s, _fmt(a), ctx.fingerprint] for i, (s, a) in enumerate(zip(report.episode_seeds, report.accuracies))],
    )
    if doc["diagnostics"]:
        rows = []
        for i, records in enumerate(report.details):
            for r in records or []:
                rows.append([i, r["iter"], *("" if r[k] is None else repr(r[k]) for k in ("L_div", "L_se", "L_TSC"))])
        _write_csv(os.path.join(out, "diagnostics.csv"), ["episode", "iter", "L_div", "L_se", "L_TSC"], rows)
    print(f"{variant}: mean {report.mean:.4f} ± {report.ci95:.4f} over {len(report.accuracies)} episodes -> {out}")
    return report


RESULT_HEADER = ["variant", "N", "K", "n_v", "dataset", "mean", "ci95", "wall_time_s", "seed", "episode_seeds", "config_fingerprint"]


def _result_row(ctx, doc, variant, report, wall, seed):
    e = doc["episodes"]
    return [
        variant,
        e["n_way"],
        e["k_shot"],
        doc["pipeline"]["n_v"],
        ctx.dataset.fingerprint(),
        _fmt(report.mean),
        _fmt(report.ci95),
        f"{wall:.2f}",
        seed,
        ";".join(str(s) for s in report.episode_seeds),
        ctx.fingerprint,
    ]


def cmd_ablate(ctx, out):
    doc = ctx.doc
    rows, summary = [], {}
    for seed in doc["seeds"]:
        for variant in doc["variants"]:
            t0 = time.perf_counter()
            report = ctx.evaluate(variant, seed)
            rows.append(_result_row(ctx, doc, variant, report, time.perf_counter() - t0, seed))
            summary.setdefault(str(seed), {})[variant] = report.to_dict()
            print(f"seed {seed} {variant:9s} {report.mean:.4f} ± {report.ci95:.4f}")
    _write_csv(os.path.join(out, "ablation.csv"), RESULT_HEADER, rows)
    _write_json(
        os.path.join(out, "ablation.json"),
        {"schema_version": cfg.SCHEMA_VERSION, "command": "ablate", "config_fingerprint": ctx.fingerprint, "config": cfg.result_config(doc), "results": summary},
    )
    return rows


def cmd_sweep_nv(ctx, out):
    doc = ctx.doc
    if not doc["nv_list"]:
        raise cfg.ConfigError(["nv_list must be non-empty"])
    rows, means = [], []
    for nv in doc["nv_list"]:
        point = json.loads(json.dumps(doc))
        point["pipeline"]["n_v"] = int(nv)
        point["pipeline"]["feature_budget"] = None  # the budget moves with n_v here
        report = ctx.evaluate(doc["variant"], doc["seed"], doc=point)
        means.append(report.mean)
        rows.append([nv, _fmt(report.mean), _fmt(report.ci95), doc["seed"], ";".join(map(str, report.episode_seeds))])
        print(f"n_v={nv}: {report.mean:.4f} ± {report.ci95:.4f}")
    _write_csv(os.path.join(out, "sweep_nv.csv"), ["n_v", "mean", "ci95", "seed", "episode_seeds"], rows)
    diffs = np.diff(means)
    trend = "monotone" if np.all(diffs >= 0) else ("plateau" if np.all(diffs >= -0.01) else "non-monotone")
    print(f"trend: {trend} (reported only)")
    return rows, trend


def cmd_export_features(ctx, out, episode_index=0):
    doc = ctx.doc
    es = episode_seed(doc["seed"], episode_index)
    rng = SeededRng(es)
    e = doc["episodes"]
    ep = sample_episode(ctx.dataset, e["n_way"], e["k_shot"], e["n_query"], rng.substream("sample"))
    run = run_variant(doc["variant"], ep, ctx.corpus, ctx.weights, cfg.pipeline_config(doc), rng.substream("method"))
    groups = None if run.deep is None else run.deep.groups
    query = encode_visual(ep.query_images, None, groups, ctx.weights).data
    d = query.shape[1]
    rows = []
    for role, feats, labels in (
        ("support", run.features.features[run.features.roles == "support"], run.features.labels[run.features.roles == "support"]),
        ("generated", run.features.features[run.features.roles == "generated"], run.features.labels[run.features.roles == "generated"]),
        ("query", query, ep.query_labels),
    ):
        for f, y in zip(feats, labels):
            rows.append([role, int(y), ep.class_names[y], *(repr(float(v)) for v in f)])
    _write_csv(os.path.join(out, "features.csv"), ["role", "label", "class_name", *(f"f{i}" for i in range(d))], rows)
    print(f"episode seed {es}: {len(rows)} feature rows -> {out}")
    return rows


def cmd_grad_check(out, sign_flip=None, configs=20):
    report = run_gradient_suite(configs=configs, sign_flip=sign_flip)
    for name, r in report.items():
        print(f"{name:8s} max_rel_error={r['max_rel_error']:.3e} {'PASS' if r['passed'] else 'FAIL'}")
    if out:
        _write_json(os.path.join(out, "grad_check.json"), {"schema_version": cfg.SCHEMA_VERSION, "losses": report})
    failed = [n for n, r in report.items() if not r["passed"]]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
    return not failed


def cmd_report(paths):
    rows = []
    for path in paths:
        file = os.path.join(path, "report.json") if os.path.isdir(path) else path
        with open(file, encoding="utf-8") as fh:
            doc = json.load(fh)
        rows.append((doc.get("variant", "?"), doc["mean"], doc["ci95"], len(doc["accuracies"]), doc.get("config_fingerprint", ""), file))
    print("variant    mean      ci95     episodes  fingerprint       file")
    for v, m, c, n, fp, f in rows:
        print(f"{v:10s} {m:.4f}  ± {c:.4f}  {n:8d}  {fp:16s}  {f}")
    return rows


# ------------------------------------------------------------------------ main


def build_parser():
    parser = argparse.ArgumentParser(prog="promptforge", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--preset", choices=sorted(cfg.PRESETS), help="named settings applied under the config file")
    common.add_argument("--seed", type=int, help="evaluation seed (u64)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--episodes", type=int, help="episode count")
    common.add_argument("--workers", type=int, help="parallel episode workers")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override, repeatable")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="evaluate one variant")
    p.add_argument("--variant")
    p.add_argument("--diagnostics", action="store_true", help="write per-iteration losses")
    p = sub.add_parser("ablate", parents=[common], help="all variants on identical episodes")
    p.add_argument("--variants", help="comma-separated subset")
    p.add_argument("--seeds", help="comma-separated seed list")
    p = sub.add_parser("sweep-nv", parents=[common], help="accuracy versus n_v")
    p.add_argument("--nv", help="comma-separated n_v values")
    p.add_argument("--variant")
    p = sub.add_parser("export-features", parents=[common], help="support/generated/query features of one episode")
    p.add_argument("--episode-index", type=int, default=0)
    p.add_argument("--variant")
    p = sub.add_parser("grad-check", help="finite-difference checks of every loss")
    p.add_argument("--out")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--inject-sign-flip", choices=LOSSES, help=argparse.SUPPRESS)
    p = sub.add_parser("report", help="summarize report.json files")
    p.add_argument("paths", nargs="+")
    return parser


def _overrides(args):
    items = list(args.set)
    for flag, key in (("seed", "seed"), ("out", "out"), ("episodes", "episodes.count"), ("workers", "workers"), ("variant", "variant")):
        value = getattr(args, flag, None)
        if value is not None:
            items.append(f"{key}={json.dumps(value)}")
    if getattr(args, "diagnostics", False):
        items.append("diagnostics=true")
    if getattr(args, "variants", None):
        items.append("variants=" + json.dumps(args.variants.split(",")))
    if getattr(args, "seeds", None):
        items.append("seeds=" + json.dumps([int(s) for s in args.seeds.split(",")]))
    if getattr(args, "nv", None):
        items.append("nv_list=" + json.dumps([int(s) for s in args.nv.split(",")]))
    return items


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "grad-check":
            if args.out:
                os.makedirs(args.out, exist_ok=True)
            return EXIT_OK if cmd_grad_check(args.out, args.inject_sign_flip, args.configs) else EXIT_RUNTIME
        if args.command == "report":
            missing = [p for p in args.paths if not os.path.exists(p)]
            if missing:
                raise cfg.ConfigError([f"path does not exist: {p}" for p in missing])
            cmd_report(args.paths)
            return EXIT_OK
        doc = cfg.load_config(args.config, args.preset, _overrides(args))
    except cfg.ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = doc["out"]
    os.makedirs(out, exist_ok=True)
    try:
        ctx = Context(doc)
        if args.command == "run":
            cmd_run(ctx, out)
        elif args.command == "ablate":
            cmd_ablate(ctx, out)
        elif args.command == "sweep-nv":
            cmd_sweep_nv(ctx, out)
        elif args.command == "export-features":
            cmd_export_features(ctx, out, args.episode_index)
    except cfg.ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (EpisodeError, FloatingPointError, ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
