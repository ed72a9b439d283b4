"""Ablation grid: train each row, extract embeddings, score the style space."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from slf.config import ABLATION_LABELS, ABLATION_ROWS, RunConfig
from slf.datagen import generate_corpus
from slf.evaluation import balanced_indices, leakage_probe, silhouette
from slf.training import Trainer, extract_embeddings

logger = logging.getLogger(__name__)

ROW_ORDER = ("none", "no_dat", "no_contrastive", "no_swbn", "all")


@dataclass
class RowResult:
    variant: str
    row: str
    seed: int
    style_silhouette: float
    speaker_silhouette: float
    leakage: float
    distinct_embeddings: int
    final_total: float

    def as_dict(self):
        return dict(self.__dict__)


def evaluate_run(cfg: RunConfig, trainer: Trainer) -> RowResult:
    utts = trainer.utterances
    emb = extract_embeddings(trainer.model, utts)
    idx = balanced_indices(emb.style_factors, cfg.embed.n_balanced, cfg.seed)
    sub = emb.subset(idx)
    return RowResult(
        variant=cfg.variant,
        row="",
        seed=cfg.seed,
        style_silhouette=silhouette(sub, "style"),
        speaker_silhouette=silhouette(emb, "speaker"),
        leakage=leakage_probe(emb, seed=cfg.seed),
        distinct_embeddings=int(np.unique(emb.embeddings, axis=0).shape[0]),
        final_total=trainer.reports[-1].total if trainer.reports else float("nan"),
    )


def run_row(base: RunConfig, variant: str, row: str, seed: int, out_dir: Optional[str] = None) -> RowResult:
    cfg = base.updated(variant=variant, seed=seed).with_ablation(row)
    trainer = Trainer(cfg, generate_corpus(cfg.corpus))
    run_dir = None if out_dir is None else Path(out_dir) / f"{variant}_{row}_seed{seed}"
    trainer.fit(out_dir=run_dir)
    result = evaluate_run(cfg, trainer)
    result.row = row
    logger.info("%s/%s seed %d: style sil %.3f leakage %.3f", variant, row, seed,
                result.style_silhouette, result.leakage)
    return result


def _run_row_args(args):
    return run_row(*args)


def run_grid(base: RunConfig, variants: Sequence[str] = ("vae", "qvae"), rows: Sequence[str] = ROW_ORDER,
             seeds: Sequence[int] = (0, 1, 2), out_dir: Optional[str] = None,
             workers: Optional[int] = None) -> List[RowResult]:
    jobs = [(base, v, r, s, out_dir) for v in variants for r in rows for s in seeds]
    if workers is None:
        workers = int(os.environ.get("SLF_NUM_THREADS", "1") or 1)
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        return [run_row(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_row_args, jobs))


def summarize(results: Sequence[RowResult]) -> List[Dict[str, object]]:
    """One line per (variant, row): mean and stddev over seeds."""
    table = []
    keys = sorted({(r.variant, r.row) for r in results},
                  key=lambda k: (k[0], ROW_ORDER.index(k[1]) if k[1] in ROW_ORDER else 99))
    for variant, row in keys:
        rs = [r for r in results if r.variant == variant and r.row == row]
        sil = np.array([r.style_silhouette for r in rs])
        leak = np.array([r.leakage for r in rs])
        table.append({
            "variant": variant,
            "row": row,
            "label": ABLATION_LABELS.get(row, row),
            "n_seeds": len(rs),
            "style_silhouette_mean": float(sil.mean()),
            "style_silhouette_std": float(sil.std()),
            "leakage_mean": float(leak.mean()),
            "leakage_std": float(leak.std()),
        })
    return table


def write_table(table, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["variant", "row", "label", "n_seeds", "style_silhouette", "leakage_accuracy"])
        for t in table:
            w.writerow([t["variant"], t["row"], t["label"], t["n_seeds"],
                        f"{t['style_silhouette_mean']:.4f}±{t['style_silhouette_std']:.4f}",
                        f"{t['leakage_mean']:.4f}±{t['leakage_std']:.4f}"])


def write_results(results: Sequence[RowResult], path) -> None:
    with open(path, "w", newline="") as fh:
        fields = list(RowResult.__dataclass_fields__)
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(fields)
        for r in results:
            w.writerow([getattr(r, f) for f in fields])
