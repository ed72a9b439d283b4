import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slf import config as C
from slf.checkpoint import read_checkpoint, save_checkpoint
from slf.cli import main
from slf.datagen import CorpusSpec
from slf.encoder import EncoderConfig
from slf.errors import ConfigurationError
from slf.evaluation import EmbeddingSet
from slf.numerics import TERM_ORDER, stage_schedule
from slf.training import build_model, load_model, read_loss_log


def tiny_run_config(**changes):
    cfg = C.RunConfig(
        corpus=CorpusSpec(n_mels=16, utterances_per_cell=4, frames_range=(12, 40), tokens_range=(4, 6)),
        encoder=EncoderConfig.tiny(),
        weights=C.WeightsConfig(stage_thresholds=[0, 2, 4, 6, 8, 10]),
        train=C.TrainConfig(steps=14, checkpoint_every=5),
        embed=C.EmbedConfig(n_balanced=40),
    )
    return cfg.updated(**changes) if changes else cfg


@pytest.fixture(scope="module")
def tiny_yaml(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    C.save(tiny_run_config(), path)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_yaml):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", tiny_yaml, "--out", str(out)]) == 0
    return out


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(Path(directory).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(directory)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestConfig:
    def test_default_round_trip(self):
        cfg = C.RunConfig()
        assert C.to_dict(C.loads(C.dumps(cfg))) == C.to_dict(cfg)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(["vae", "qvae"]), st.integers(0, 10_000), st.floats(1e-6, 10.0),
           st.booleans(), st.integers(2, 128), st.integers(1, 5000))
    def test_round_trip_property(self, variant, seed, zeta, swbn, k, steps):
        cfg = C.RunConfig(variant=variant, seed=seed, num_codes=k,
                          weights=C.WeightsConfig(zeta=zeta), ablation=C.AblationConfig(swbn=swbn),
                          train=C.TrainConfig(steps=steps))
        text = C.dumps(cfg)
        again = C.loads(text)
        assert C.to_dict(again) == C.to_dict(cfg)
        assert C.dumps(again) == text

    def test_empty_file_gives_defaults(self):
        assert C.to_dict(C.loads("")) == C.to_dict(C.RunConfig())

    def test_partial_override(self):
        cfg = C.loads("weights:\n  zeta: 0.5\n")
        assert cfg.weights.zeta == 0.5 and cfg.weights.alpha == C.WeightsConfig().alpha

    @pytest.mark.parametrize("text", ["bogus: 1\n", "weights:\n  zeta2: 1\n", "variant: gan\n", "weights: 3\n"])
    def test_invalid(self, text):
        with pytest.raises(ConfigurationError):
            C.loads(text)

    def test_all_row_never_activates_additions(self):
        weights = C.RunConfig(variant="vae").with_ablation("all").loss_weights()
        for step in range(0, 2000, 7):
            assert stage_schedule(step, weights) <= {"spec", "stop"}

    def test_rows_map_to_switches(self):
        none = C.RunConfig().with_ablation("none").loss_weights()
        assert stage_schedule(10_000, none) == set(TERM_ORDER)
        no_dat = C.RunConfig().with_ablation("no_dat").loss_weights()
        assert "spk" not in stage_schedule(10_000, no_dat)
        no_c = C.RunConfig().with_ablation("no_contrastive").loss_weights()
        assert not {"cycle", "contrast"} & stage_schedule(10_000, no_c)
        assert C.RunConfig().with_ablation("no_swbn").encoder.use_swbn is False
        with pytest.raises(ConfigurationError):
            C.RunConfig().with_ablation("w/o everything")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny_run_config()
        model = build_model(cfg)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p))
        opt = torch.optim.Adam(model.parameters())
        save_checkpoint(tmp_path / "c.slfc", model, opt, C.to_dict(cfg), step=7)
        loaded, cfg2, step = load_model(tmp_path / "c.slfc")
        assert step == 7 and C.to_dict(cfg2) == C.to_dict(cfg)
        for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(a, b), k

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.slfc").write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ConfigurationError):
            read_checkpoint(tmp_path / "x.slfc")


class TestCli:
    def test_usage_errors(self, capsys):
        assert main([]) == 1
        assert main(["train", "--no-such-flag"]) == 1
        assert main(["frobnicate"]) == 1

    def test_missing_config_is_runtime_error(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path)]) == 2

    def test_gen_data_byte_identical_and_guarded(self, tmp_path, tiny_yaml):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-data", "--config", tiny_yaml, "--out", str(a)]) == 0
        assert main(["gen-data", "--config", tiny_yaml, "--out", str(b)]) == 0
        assert digest(a) == digest(b)
        rows = (a / "manifest.tsv").read_text().splitlines()
        assert len(rows) - 1 == (4 * 4 + 2) * 4
        assert main(["gen-data", "--config", tiny_yaml, "--out", str(a)]) == 2
        assert main(["gen-data", "--config", tiny_yaml, "--out", str(a), "--force"]) == 0
        assert digest(a) == digest(b)

    def test_train_outputs(self, trained):
        log = read_loss_log(trained / "loss_log.tsv")
        assert len(log) == 14 and [r["step"] for r in log] == list(range(14))
        assert (trained / "checkpoint.slfc").exists() and (trained / "config.yaml").exists()
        assert C.load(trained / "config.yaml").train.steps == 14

    def test_train_deterministic(self, tmp_path, trained, tiny_yaml):
        assert main(["train", "--config", tiny_yaml, "--out", str(tmp_path)]) == 0
        a = read_loss_log(trained / "loss_log.tsv")[-1]["total"]
        b = read_loss_log(tmp_path / "loss_log.tsv")[-1]["total"]
        assert round(a, 6) == round(b, 6)
        assert (tmp_path / "loss_log.tsv").read_text() == (trained / "loss_log.tsv").read_text()

    def test_train_refuses_overwrite(self, trained, tiny_yaml):
        assert main(["train", "--config", tiny_yaml, "--out", str(trained), "--steps", "1"]) == 2

    def test_train_from_written_corpus(self, tmp_path, tiny_yaml):
        assert main(["gen-data", "--config", tiny_yaml, "--out", str(tmp_path / "d")]) == 0
        assert main(["train", "--config", tiny_yaml, "--data", str(tmp_path / "d"), "--steps", "3",
                     "--out", str(tmp_path / "r"), "--no-dat", "--variant", "vae"]) == 0
        cfg = C.load(tmp_path / "r" / "config.yaml")
        assert cfg.variant == "vae" and cfg.ablation.dat is False and cfg.train.steps == 3

    def test_embed_is_discrete_and_balanced(self, tmp_path, trained):
        out = tmp_path / "emb.tsv"
        assert main(["embed", "--checkpoint", str(trained / "checkpoint.slfc"), "--out", str(out)]) == 0
        emb = EmbeddingSet.read_tsv(out)
        model, cfg, _ = load_model(trained / "checkpoint.slfc")
        book = model.codebook.vectors.detach().double().numpy()
        assert len(emb) == cfg.corpus.expected_count()
        distinct = np.unique(emb.embeddings, axis=0)
        assert distinct.shape[0] <= cfg.num_codes
        assert all(any(np.array_equal(row, b) for b in book) for row in distinct)
        np.testing.assert_array_equal(emb.embeddings, book[emb.codes])

        bal = tmp_path / "bal.tsv"
        assert main(["embed", "--checkpoint", str(trained / "checkpoint.slfc"), "--out", str(bal),
                     "--balanced", "40"]) == 0
        _, counts = np.unique(EmbeddingSet.read_tsv(bal).style_factors, return_counts=True)
        assert counts.tolist() == [10] * 4
        bal2 = tmp_path / "bal2.tsv"
        main(["embed", "--checkpoint", str(trained / "checkpoint.slfc"), "--out", str(bal2), "--balanced", "40"])
        assert bal.read_bytes() == bal2.read_bytes()

    def test_project_and_sweep(self, tmp_path, trained):
        emb = tmp_path / "emb.tsv"
        main(["embed", "--checkpoint", str(trained / "checkpoint.slfc"), "--out", str(emb)])
        # A quantized set may have very few distinct rows; jitter keeps the projection non-degenerate.
        s = EmbeddingSet.read_tsv(emb)
        s.embeddings = s.embeddings + np.random.default_rng(0).normal(size=s.embeddings.shape) * 1e-3
        s.write_tsv(emb)
        proj = tmp_path / "proj"
        assert main(["project", "--embeddings", str(emb), "--out", str(proj)]) == 0
        assert (proj / "points.tsv").exists() and (proj / "projection.png").stat().st_size > 0
        assert "style" in (proj / "metrics.tsv").read_text()
        sweep = tmp_path / "sweep"
        assert main(["sweep", "--checkpoint", str(trained / "checkpoint.slfc"), "--dim", "3", "--n-values", "3",
                     "--max-frames", "20", "--out", str(sweep)]) == 0
        lines = (sweep / "sweep.tsv").read_text().splitlines()
        assert len(lines) == 4 and any(p.suffix == ".png" for p in sweep.iterdir())

    def test_sweep_dim_out_of_range(self, tmp_path, trained):
        assert main(["sweep", "--checkpoint", str(trained / "checkpoint.slfc"), "--dim", "64",
                     "--out", str(tmp_path)]) == 2

    def test_gradcheck_subset(self, capsys):
        assert main(["gradcheck", "--check", "kl_margin_loss", "--check", "cycle_loss", "--cases", "4"]) == 0
        out = capsys.readouterr().out
        assert "kl_margin_loss" in out and "cycle_loss" in out and "max_rel_err" in out

    def test_gradcheck_unknown_check(self):
        assert main(["gradcheck", "--check", "nonexistent"]) in (1, 2)

    def test_ablate_small_grid(self, tmp_path, tiny_yaml):
        out = tmp_path / "abl"
        assert main(["ablate", "--config", tiny_yaml, "--seeds", "0,1", "--variants", "vae,qvae",
                     "--rows", "none,all", "--steps", "4", "--out", str(out)]) == 0
        table = (out / "table.tsv").read_text().splitlines()
        assert len(table) == 1 + 4
        assert (out / "ablation.png").stat().st_size > 0
        assert len((out / "results.tsv").read_text().splitlines()) == 1 + 8
        assert main(["ablate", "--config", tiny_yaml, "--seeds", "0", "--variants", "vae", "--rows", "none",
                     "--steps", "2", "--out", str(out)]) == 2
