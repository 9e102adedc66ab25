import json
import math

import pytest

import mhsum.pipeline as pl
from mhsum import evalkit
from mhsum.cli import main
from mhsum.pipeline import (
    MARKER, REPORT_HEADER, SWEEP_HEADER, ExperimentConfig, build_vocab, content_words, gen_corpus, input_wer,
    mean_by_system, prepare_data, read_corpus, rows_to_csv, run_experiment, simulate_corpus, wer_sweep,
    word_class_members, write_corpus,
)
from mhsum.asrsim import ChannelSpec


def small_config(**kw):
    base = dict(n_train=40, n_test=6, dim=8, layers_enc=2, layers_dec=1, heads=2, ffn_dim=8, fusion_layer=2,
                fusion_heads=2, n_attention=2, n_posterior=3, steps=3, finetune_steps=2, batch_size=4,
                finetune_batch_size=4, beam=1, seeds=(0,), dtype="float64")
    base.update(kw)
    return ExperimentConfig(**base)


class TestCorpus:
    def test_same_seed_same_corpus(self, tmp_path):
        cfg = ExperimentConfig(n_train=50, n_test=5)
        for sub in ("a", "b"):
            train, test = gen_corpus(cfg)
            write_corpus(tmp_path / sub, "train", train)
        assert (tmp_path / "a" / "train.src.txt").read_bytes() == (tmp_path / "b" / "train.src.txt").read_bytes()

    def test_marker_rule(self):
        train, test = gen_corpus(ExperimentConfig(n_train=100, n_test=10))
        for d in train + test:
            marked = [s for s in d.source if s.split()[0] == MARKER]
            assert len(marked) == 2
            assert d.summary == [s.split(" ", 1)[1] for s in marked]
            assert all(5 <= len(s.split()) - (s.split()[0] == MARKER) <= 10 for s in d.source)

    def test_splits_disjoint(self):
        train, test = gen_corpus(ExperimentConfig(n_train=30, n_test=30))
        assert not {d.doc_id for d in train} & {d.doc_id for d in test}

    def test_compression_in_expected_band(self):
        train, _ = gen_corpus(ExperimentConfig(n_train=500, n_test=1))
        stats = evalkit.corpus_stats([(d.source, d.summary) for d in train])
        assert 25.0 <= stats.compression_word <= 40.0
        assert stats.word_overlap == 100.0

    def test_sentences_cycle_through_word_classes(self):
        cfg = ExperimentConfig(n_train=50, n_test=1, word_classes=4)
        train, _ = gen_corpus(cfg)
        index = {w: i for i, w in enumerate(content_words(cfg.n_words, cfg.corpus_seed))}
        for d in train:
            for sent in d.source:
                cls = [index[w] % 4 for w in sent.split() if w != MARKER]
                assert all((b - a) % 4 == 1 for a, b in zip(cls, cls[1:]))

    def test_one_class_is_unconstrained(self):
        members = word_class_members(240, 1)
        assert len(members) == 1 and len(members[0]) == 240

    def test_word_class_range(self):
        with pytest.raises(ValueError):
            gen_corpus(ExperimentConfig(word_classes=0))

    def test_too_many_markers(self):
        with pytest.raises(ValueError):
            gen_corpus(ExperimentConfig(sentences=3, markers=4))

    def test_read_back(self, tmp_path):
        train, _ = gen_corpus(ExperimentConfig(n_train=7, n_test=1))
        write_corpus(tmp_path, "train", train)
        back = read_corpus(tmp_path, "train")
        assert [(d.doc_id, d.source, d.summary) for d in back] == [(d.doc_id, d.source, d.summary) for d in train]


class TestConfig:
    def test_text_round_trip(self):
        cfg = ExperimentConfig(sub_rate=0.1, seeds=(3, 4), channel_grid=(0.0, 0.2, 0.3), fusion_residual=True)
        assert ExperimentConfig.from_text(cfg.to_text()) == cfg

    def test_overrides_and_comments(self):
        cfg = ExperimentConfig.from_text("steps = 10  # short\nsystems = oracle-text,retrain-1best\n", beam="2")
        assert cfg.steps == 10 and cfg.beam == 2
        assert cfg.systems == ("oracle-text", "retrain-1best")

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_text("nonsense = 1")

    @pytest.mark.parametrize("kw", [{"seeds": ()}, {"channel_grid": ()}, {"systems": ("bogus",)}])
    def test_invariants(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)


class TestChannelSweepInputs:
    def test_wer_grows_with_rate(self):
        cfg = ExperimentConfig(n_train=60, n_test=1)
        train, _ = gen_corpus(cfg)
        vocab = build_vocab(train, cfg.bpe_size)
        wers = [input_wer(simulate_corpus(train, vocab, ChannelSpec(sub_rate=r, seed=1), 1), train, vocab)
                for r in (0.0, 0.05, 0.1, 0.2)]
        assert wers[0] == 0.0
        assert wers == sorted(wers)


@pytest.fixture(scope="module")
def results():
    cfg = small_config()
    data = prepare_data(cfg)
    return cfg, data, run_experiment(cfg, data)


class TestExperiment:
    def test_row_count(self, results):
        cfg, _, rows = results
        assert len(rows) == len(cfg.systems) * len(cfg.seeds)
        assert all(r["status"] == "ok" for r in rows)

    def test_attention_rows_record_hypothesis_count(self, results):
        cfg, _, rows = results
        assert next(r for r in rows if r["system"] == "attention-fusion")["n_hyps"] == cfg.n_attention

    def test_csv_is_reproducible(self, results):
        cfg, data, rows = results
        again = run_experiment(cfg, data)
        assert rows_to_csv(rows, REPORT_HEADER) == rows_to_csv(again, REPORT_HEADER)
        assert rows_to_csv(rows, REPORT_HEADER).splitlines()[0] == ",".join(REPORT_HEADER)

    def test_failed_training_is_reported(self, results, monkeypatch):
        cfg, data, _ = results
        real = pl.train_system

        def flaky(system, *args, **kw):
            if system == "confidence":
                raise FloatingPointError("non-finite loss")
            return real(system, *args, **kw)

        monkeypatch.setattr(pl, "train_system", flaky)
        rows = run_experiment(cfg, data)
        status = {r["system"]: r["status"] for r in rows}
        assert status["confidence"] == "failed"
        assert status["attention-fusion"] == "ok"
        assert math.isnan(next(r for r in rows if r["system"] == "confidence")["rouge1"])

    def test_mean_by_system_skips_failures(self):
        rows = [{"system": "a", "status": "ok", "rouge1": 0.5}, {"system": "a", "status": "failed", "rouge1": 0.0}]
        assert mean_by_system(rows) == {"a": 0.5}

    def test_sweep_requires_checkpoints(self, results):
        cfg, data, _ = results
        with pytest.raises(KeyError, match="missing trained checkpoint for system"):
            wer_sweep(ExperimentConfig(**{**cfg.__dict__, "channel_grid": (0.0, 0.1, 0.2)}), {}, data)

    def test_sweep_needs_three_rates(self, results):
        cfg, data, _ = results
        with pytest.raises(ValueError):
            wer_sweep(cfg.__class__(**{**cfg.__dict__, "channel_grid": (0.1, 0.2)}), {}, data)


class TestCLI:
    def run(self, *argv):
        assert main([str(a) for a in argv]) == 0

    def test_end_to_end_and_reproducible(self, tmp_path):
        cfg = small_config(channel_grid=(0.0, 0.1, 0.2), max_hyps=3)
        conf = tmp_path / "exp.cfg"
        conf.write_text(cfg.to_text())
        for rep in ("a", "b"):
            root = tmp_path / rep
            self.run("gen-corpus", "--config", conf, "--out", root / "corpus")
            self.run("simulate-asr", "--config", conf, "--corpus", root / "corpus", "--out", root / "asr", "--seed", 0)
            self.run("train", "--config", conf, "--corpus", root / "corpus", "--system", "oracle-text",
                     "--out", root / "ckpt")
            text = root / "ckpt" / "oracle-text.seed0.ckpt"
            for system in ("retrain-1best", "posterior-fusion", "attention-fusion", "confidence"):
                self.run("train", "--config", conf, "--corpus", root / "corpus", "--system", system,
                         "--hyps", root / "asr", "--init", text, "--out", root / "ckpt")
            self.run("summarize", "--config", conf, "--corpus", root / "corpus", "--checkpoint",
                     root / "ckpt" / "attention-fusion.seed0.ckpt", "--hyps", root / "asr", "--out", root / "sum")
            self.run("evaluate", "--config", conf, "--corpus", root / "corpus", "--summaries",
                     root / "sum" / "summaries.txt", "--out", root / "eval")
            self.run("sweep-wer", "--config", conf, "--corpus", root / "corpus", "--checkpoints", root / "ckpt",
                     "--out", root / "sweep")
            self.run("oracle-extract", "--config", conf, "--corpus", root / "corpus", "--out", root / "oracle")
        manifests = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*manifest.json"))
        assert len(manifests) == 11
        for rel in manifests:
            a = json.loads((tmp_path / "a" / rel).read_text())
            b = json.loads((tmp_path / "b" / rel).read_text())
            assert a["outputs"] == b["outputs"], rel
        header = (tmp_path / "a" / "sweep" / "sweep.csv").read_text().splitlines()[0]
        assert header == ",".join(SWEEP_HEADER)
        lines = (tmp_path / "a" / "sum" / "summaries.txt").read_text().splitlines()
        assert len(lines) == cfg.n_test and all("\t" in line for line in lines)

    def test_sweep_names_missing_system(self, tmp_path, caplog):
        cfg = small_config()
        conf = tmp_path / "exp.cfg"
        conf.write_text(cfg.to_text())
        self.run("gen-corpus", "--config", conf, "--out", tmp_path / "corpus")
        with pytest.raises(SystemExit, match="baseline-1best"):
            main(["sweep-wer", "--config", str(conf), "--corpus", str(tmp_path / "corpus"),
                  "--checkpoints", str(tmp_path / "none"), "--out", str(tmp_path / "sweep")])

    def test_flag_overrides_config(self, tmp_path):
        self.run("gen-corpus", "--n-train", 5, "--n-test", 2, "--out", tmp_path)
        assert len((tmp_path / "train.ids").read_text().split()) == 5
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["n_train"] == 5
        assert manifest["seeds"] == [0]
