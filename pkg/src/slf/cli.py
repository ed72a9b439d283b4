"""Command-line entry point: ``slf <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 gradient-check
failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3

logger = logging.getLogger("slf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _set_threads():
    import torch

    n = os.environ.get("SLF_NUM_THREADS")
    torch.set_num_threads(max(1, int(n)) if n else 1)


def _load_config(args):
    from slf import config as C

    cfg = C.load(args.config) if getattr(args, "config", None) else C.RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
        changes["corpus"] = {**C.to_dict(cfg)["corpus"], "seed": args.seed}
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
    if getattr(args, "out", None):
        changes["out_dir"] = str(args.out)
    if changes:
        cfg = cfg.updated(**changes)
    if getattr(args, "steps", None) is not None:
        cfg = cfg.updated(train={**C.to_dict(cfg)["train"], "steps": args.steps})
    ablation = C.to_dict(cfg)["ablation"]
    for flag, key in (("no_swbn", "swbn"), ("no_dat", "dat"), ("no_contrastive", "contrastive"), ("no_kl", "kl")):
        if getattr(args, flag, False):
            ablation[key] = False
    return cfg.updated(ablation=ablation)


def _utterances(args, cfg):
    from slf.datagen import generate_corpus, read_corpus

    if getattr(args, "data", None):
        path = Path(args.data)
        return read_corpus(path / "manifest.tsv" if path.is_dir() else path)
    return generate_corpus(cfg.corpus)


def cmd_gen_data(args) -> int:
    import yaml

    from slf.datagen import generate_corpus, write_corpus

    cfg = _load_config(args)
    out = Path(args.out or "data")
    utts = generate_corpus(cfg.corpus)
    manifest = write_corpus(utts, out, force=args.force)
    # Corpus spec only, so identical specs give byte-identical directories.
    (out / "corpus.yaml").write_text(yaml.safe_dump({"corpus": cfg.corpus.to_dict()}, sort_keys=False))
    print(f"wrote {len(utts)} utterances to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from slf import config as C
    from slf.training import Trainer

    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    if (out / "loss_log.tsv").exists() and not args.force:
        raise FileExistsError(f"{out / 'loss_log.tsv'} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    C.save(cfg, out / "config.yaml")
    trainer = Trainer(cfg, _utterances(args, cfg))
    trainer.fit(out_dir=out)
    last = trainer.reports[-1] if trainer.reports else None
    print(f"trained {trainer.step} steps; final total {last.total:.6f}" if last else "trained 0 steps")
    print(f"checkpoint: {out / 'checkpoint.slfc'}")
    return EXIT_OK


def cmd_embed(args) -> int:
    from slf.evaluation import balanced_indices
    from slf.training import extract_embeddings, load_model

    model, cfg, _ = load_model(args.checkpoint)
    utts = _utterances(args, cfg)
    emb = extract_embeddings(model, utts)
    if args.balanced:
        emb = emb.subset(balanced_indices(emb.style_factors, args.balanced, cfg.seed if args.seed is None
                                          else args.seed))
    out = Path(args.out or "embeddings.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    emb.write_tsv(out)
    n_distinct = np.unique(emb.embeddings, axis=0).shape[0]
    print(f"wrote {len(emb)} embeddings ({n_distinct} distinct) to {out}")
    return EXIT_OK


def cmd_project(args) -> int:
    from slf.evaluation import EmbeddingSet, project_2d, silhouette
    from slf.plotting import plot_projection

    emb = EmbeddingSet.read_tsv(args.embeddings)
    points = project_2d(emb, method=args.method, seed=args.seed or 0)
    out = Path(args.out or "projection")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "points.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["utt_id", "speaker_id", "style_factor", "x", "y"])
        for i in range(len(emb)):
            w.writerow([emb.utt_ids[i], int(emb.speaker_ids[i]), int(emb.style_factors[i]),
                        repr(float(points[i, 0])), repr(float(points[i, 1]))])
    metrics = {"style_silhouette": silhouette(emb, "style"), "speaker_silhouette": silhouette(emb, "speaker")}
    with open(out / "metrics.tsv", "w") as fh:
        fh.write("metric\tvalue\n")
        for k, v in metrics.items():
            fh.write(f"{k}\t{v!r}\n")
    plot_projection(points, emb.style_factors, emb.speaker_ids, out / "projection.png",
                    title=f"{args.method} projection")
    for k, v in metrics.items():
        print(f"{k}\t{v:.4f}")
    print(f"figure: {out / 'projection.png'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from slf.evaluation import scan_dimensions, sweep_values, write_sweep
    from slf.plotting import plot_sweep
    from slf.training import extract_embeddings, load_model

    model, cfg, _ = load_model(args.checkpoint)
    utts = _utterances(args, cfg)
    emb = extract_embeddings(model, utts)
    ref = utts[args.reference]
    base = emb.embeddings[args.reference]
    dims = range(base.shape[0]) if args.dim is None else [args.dim]
    out = Path(args.out or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    results = scan_dimensions(model, emb.embeddings, base, ref.token_ids, args.speaker, dims,
                              n_values=args.n_values, span=args.span, seed=cfg.seed, max_frames=args.max_frames)
    write_sweep(results, out / "sweep.tsv")
    print("dim\tframes_monotone\tenergy_monotone\tcentroid_monotone")
    for r in results:
        print(f"{r['dim']}\t{r['frames_monotone']}\t{r['energy_monotone']}\t{r['centroid_monotone']}")
    figures = [r for r in results if r["frames_monotone"] or r["energy_monotone"]][:3] or results[:1]
    for r in figures:
        path = out / f"sweep_dim{r['dim']}.png"
        plot_sweep(r["outputs"], r["stats"], path, title=f"dimension {r['dim']}")
        print(f"figure: {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from slf.gradcheck import run_suite

    results = run_suite(names=args.check or None, seed=args.seed or 0, n_cases=args.cases)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_GRADCHECK
    print("all gradient checks passed")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from slf.ablation import ROW_ORDER, run_grid, summarize, write_results, write_table
    from slf.plotting import plot_ablation

    cfg = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    if len(seeds) < 1:
        raise UsageError("at least one seed is required")
    rows = args.rows.split(",") if args.rows else list(ROW_ORDER)
    variants = args.variants.split(",")
    out = Path(args.out or "ablation")
    if (out / "table.tsv").exists() and not args.force:
        raise FileExistsError(f"{out / 'table.tsv'} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    results = run_grid(cfg, variants=variants, rows=rows, seeds=seeds, out_dir=str(out / "runs"))
    table = summarize(results)
    write_results(results, out / "results.tsv")
    write_table(table, out / "table.tsv")
    plot_ablation(table, out / "ablation.png")
    print((out / "table.tsv").read_text(), end="")
    print(f"figure: {out / 'ablation.png'}")
    return EXIT_OK


def _common(p, steps=False, variant=False, ablation=False, data=False):
    p.add_argument("--config", type=str, default=None, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if steps:
        p.add_argument("--steps", type=int, default=None)
    if variant:
        p.add_argument("--variant", choices=("vae", "qvae"), default=None)
    if ablation:
        p.add_argument("--no-swbn", action="store_true")
        p.add_argument("--no-dat", action="store_true")
        p.add_argument("--no-contrastive", action="store_true")
        p.add_argument("--no-kl", action="store_true")
    if data:
        p.add_argument("--data", type=str, default=None, help="corpus directory or manifest.tsv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slf", description="Label-free cross-speaker style transfer at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic corpus")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _common(p, steps=True, variant=True, ablation=True, data=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="extract style embeddings")
    _common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--balanced", type=int, default=0, help="style-balanced sample size (0 = all)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("project", help="2-D projection, silhouettes and scatter figure")
    _common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--method", choices=("linear", "stochastic"), default="linear")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("sweep", help="single-dimension control sweeps")
    _common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dim", type=int, default=None, help="one dimension (default: scan all)")
    p.add_argument("--reference", type=int, default=0, help="corpus index of the base utterance")
    p.add_argument("--speaker", type=int, default=0, help="target speaker")
    p.add_argument("--n-values", type=int, default=5)
    p.add_argument("--span", type=float, default=2.0, help="half-width in embedding standard deviations")
    p.add_argument("--max-frames", type=int, default=200)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cases", type=int, default=None, help="cases per check (default 50)")
    p.add_argument("--check", action="append", help="run only this check (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="ablation grid over rows, variants and seeds")
    _common(p, steps=True, ablation=False)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default="vae,qvae")
    p.add_argument("--rows", default=None, help="comma-separated subset of ablation rows")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    from slf.errors import ConfigurationError, ContractViolation, TrainingAbort

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads()
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ContractViolation, TrainingAbort, FileExistsError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
