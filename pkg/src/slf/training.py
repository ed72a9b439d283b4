"""Training loop, speaker-grouped sampling, loss log and embedding extraction."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from slf import checkpoint as ckpt
from slf.config import RunConfig, from_dict, to_dict
from slf.datagen import Utterance, generate_corpus
from slf.errors import ConfigurationError, TrainingAbort
from slf.evaluation import EmbeddingSet
from slf.numerics import LossReport
from slf.synthesis import AcousticModel, forward_train, pad_batch

logger = logging.getLogger(__name__)

LOG_FIELDS = LossReport.FIELDS


def build_model(cfg: RunConfig) -> AcousticModel:
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    return AcousticModel(
        n_tokens=cfg.corpus.n_tokens,
        num_speakers=cfg.corpus.n_speakers,
        n_mels=cfg.corpus.n_mels,
        encoder_config=cfg.encoder,
        decoder_config=cfg.decoder,
        swbn_momentum=cfg.train.swbn_momentum,
        swbn_eps=cfg.train.swbn_eps,
        codebook_decay=cfg.train.codebook_decay,
        codebook_eps=cfg.train.codebook_eps,
        use_ema=cfg.train.use_ema,
        generator=gen,
    )


class SpeakerGroupedSampler:
    """Draws batches of ``speakers_per_batch`` distinct speakers with
    ``utterances_per_speaker`` distinct utterances each (at least two, so
    every speaker group has a defined variance)."""

    def __init__(self, utterances: Sequence[Utterance], speakers_per_batch: int,
                 utterances_per_speaker: int, rng: np.random.Generator):
        self.by_speaker: Dict[int, List[int]] = {}
        for i, u in enumerate(utterances):
            self.by_speaker.setdefault(u.speaker_id, []).append(i)
        self.speakers = sorted(self.by_speaker)
        if utterances_per_speaker < 2:
            raise ConfigurationError("speaker-grouped batches need >= 2 utterances per speaker")
        if speakers_per_batch > len(self.speakers):
            raise ConfigurationError("speakers_per_batch exceeds the number of speakers in the corpus")
        if any(len(v) < utterances_per_speaker for v in self.by_speaker.values()):
            raise ConfigurationError("a speaker has fewer utterances than utterances_per_speaker")
        self.k = speakers_per_batch
        self.m = utterances_per_speaker
        self.rng = rng

    def __call__(self) -> List[int]:
        chosen = sorted(self.rng.choice(self.speakers, size=self.k, replace=False).tolist())
        batch = []
        for spk in chosen:
            pool = self.by_speaker[spk]
            batch.extend(pool[j] for j in sorted(self.rng.choice(len(pool), size=self.m, replace=False)))
        return batch


def format_log_row(report: LossReport) -> str:
    row = report.as_row()
    return "\t".join(str(row["step"]) if k == "step" else repr(float(row[k])) for k in LOG_FIELDS)


def read_loss_log(path) -> List[Dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t") != list(LOG_FIELDS):
        raise ConfigurationError(f"{path}: not a loss log")
    rows = []
    for line in lines[1:]:
        values = line.split("\t")
        row = {k: float(v) for k, v in zip(LOG_FIELDS, values)}
        row["step"] = int(values[0])
        rows.append(row)
    return rows


class Trainer:
    """Owns the model state for one run.

    All randomness (init, sampling, crops, augmentation, reparameterization
    noise, dropout) derives from ``cfg.seed``.
    """

    def __init__(self, cfg: RunConfig, utterances: Optional[Sequence[Utterance]] = None):
        torch.set_num_threads(1)
        self.cfg = cfg
        self.utterances = list(utterances) if utterances is not None else generate_corpus(cfg.corpus)
        self.model = build_model(cfg)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.train.learning_rate)
        self.weights = cfg.loss_weights()
        self.options = cfg.train_options()
        self.rng = np.random.default_rng(cfg.seed)
        self.sampler = SpeakerGroupedSampler(self.utterances, cfg.train.speakers_per_batch,
                                             cfg.train.utterances_per_speaker, self.rng)
        self.step = 0
        self.reports: List[LossReport] = []

    def train_step(self) -> LossReport:
        self.model.train()
        batch = [self.utterances[i] for i in self.sampler()]
        self.optimizer.zero_grad(set_to_none=True)
        total, report = forward_train(self.model, batch, self.weights, self.step, self.rng, self.options)
        total.backward()
        params = [p for p in self.model.parameters() if p.grad is not None]
        if self.cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.train.grad_clip)
        grads_ok = all(bool(torch.isfinite(p.grad).all()) for p in params)
        if not grads_ok:
            raise TrainingAbort(f"non-finite gradient at step {self.step}", step=self.step,
                                terms=report.as_row())
        self.optimizer.step()
        self.step += 1
        self.reports.append(report)
        return report

    def save(self, path) -> Path:
        return ckpt.save_checkpoint(path, self.model, self.optimizer, to_dict(self.cfg), self.step)

    def fit(self, steps: Optional[int] = None, out_dir=None) -> List[LossReport]:
        """Train ``steps`` steps; with ``out_dir`` write ``loss_log.tsv`` and checkpoints.

        On a non-finite loss the last good checkpoint is kept and
        :class:`TrainingAbort` is re-raised after logging diagnostics.
        """
        steps = self.cfg.train.steps if steps is None else steps
        log_fh = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            log_path = out_dir / "loss_log.tsv"
            new = not log_path.exists() or self.step == 0
            log_fh = open(log_path, "w" if new else "a")
            if new:
                log_fh.write("\t".join(LOG_FIELDS) + "\n")
        every = self.cfg.train.checkpoint_every
        try:
            for _ in range(steps):
                try:
                    report = self.train_step()
                except TrainingAbort as exc:
                    logger.error("training aborted at step %s: %s terms=%s", exc.step, exc, exc.terms)
                    if out_dir is not None:
                        (out_dir / "abort.txt").write_text(f"step {exc.step}: {exc}\n{exc.terms}\n")
                    raise
                if log_fh is not None:
                    log_fh.write(format_log_row(report) + "\n")
                    log_fh.flush()
                    if every and self.step % every == 0:
                        self.save(out_dir / "checkpoint.slfc")
        finally:
            if log_fh is not None:
                log_fh.close()
        if out_dir is not None:
            self.save(out_dir / "checkpoint.slfc")
        return self.reports


def load_model(path):
    """Rebuild a model from a checkpoint. Returns (model, config, step)."""
    cfg_dict, step, tensors = ckpt.read_checkpoint(path)
    cfg = from_dict(cfg_dict)
    model = build_model(cfg)
    ckpt.load_into(model, None, tensors)
    model.eval()
    return model, cfg, step


@torch.no_grad()
def extract_embeddings(model: AcousticModel, utterances: Sequence[Utterance], batch_size: int = 64) -> EmbeddingSet:
    """Inference-mode style embeddings (posterior mean, quantized for Q-VAE)."""
    model.eval()
    enc = model.reference_encoder
    rows, codes = [], []
    for start in range(0, len(utterances), batch_size):
        chunk = utterances[start:start + batch_size]
        feats, lengths = pad_batch([u.features for u in chunk])
        ids = torch.tensor([u.speaker_id for u in chunk])
        out = enc(feats, lengths, ids)
        rows.append(out.embedding.numpy().astype(np.float64))
        if out.vq_index is not None:
            codes.append(out.vq_index.numpy())
    return EmbeddingSet(
        embeddings=np.concatenate(rows),
        speaker_ids=np.array([u.speaker_id for u in utterances]),
        style_factors=np.array([u.style_factor for u in utterances]),
        utt_ids=[u.utt_id for u in utterances],
        codes=np.concatenate(codes) if codes else None,
    )
