import csv
import json
import os

import numpy as np
import pytest

from hopattn import autograd as ag
from hopattn.errors import ConfigError, DivergenceError, InputError
from hopattn.expt.config import ExperimentConfig, OptimConfig, config_from_dict, load_config
from hopattn.expt.data import extract_windows, make_char_corpus, make_synthetic_vision
from hopattn.expt.experiments import (
    expand_cells, grad_check_stack, run_collapse_sweep, run_experiment,
)
from hopattn.expt.sinks import CSV_COLUMNS, MetricsSink, RunManifest, merge_metrics, write_histogram
from hopattn.expt.train import evaluate, lr_at, train
from hopattn.models import ModelConfig, build_model

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TINY = dict(d_model=16, d_k=8, n_heads=2, n_layers=1, mlp_width=32, init_std=0.1)


def small_collapse_cfg(**sweep):
    raw = {"kind": "collapse_sweep", "seeds": [0, 1],
           "model": {"d_model": 12, "n_heads": 2, "d_k": 4, "init_std": 0.3, "alpha_prime": 0.5},
           "sweep": {"depths": [1, 2, 3], "n_tokens": 6, "input_scale": 1.0, **sweep}}
    return config_from_dict(raw)


class TestVisionData:
    def test_balance(self):
        d = make_synthetic_vision(n_classes=2, n_samples=64, seed=0)
        y = np.concatenate([d.y_train, d.y_test])
        assert np.bincount(y).tolist() == [32, 32]
        assert np.bincount(d.y_test).tolist() == [8, 8]

    def test_deterministic(self):
        a, b = make_synthetic_vision(seed=5, n_samples=40), make_synthetic_vision(seed=5, n_samples=40)
        np.testing.assert_array_equal(a.x_train, b.x_train)
        np.testing.assert_array_equal(a.y_test, b.y_test)
        c = make_synthetic_vision(seed=6, n_samples=40)
        assert not np.array_equal(a.x_train, c.x_train)

    def test_linear_probe_beats_chance(self):
        d = make_synthetic_vision(n_classes=4, n_samples=400, seed=1)
        x = d.x_train.reshape(len(d.x_train), -1)
        onehot = np.eye(4)[d.y_train]
        w, *_ = np.linalg.lstsq(np.c_[x, np.ones(len(x))], onehot, rcond=None)
        xt = d.x_test.reshape(len(d.x_test), -1)
        acc = np.mean((np.c_[xt, np.ones(len(xt))] @ w).argmax(1) == d.y_test)
        assert acc > d.chance() + 0.3

    def test_shapes_and_errors(self):
        d = make_synthetic_vision(n_samples=20)
        assert d.x_train.shape[1:] == (8, 8, 1)
        with pytest.raises(ConfigError):
            make_synthetic_vision(n_classes=1)
        with pytest.raises(ConfigError):
            make_synthetic_vision(n_classes=30, image_size=4, patch=2)


class TestCharCorpus:
    def test_window_count(self):
        x, y = extract_windows(np.arange(10), 4)
        assert len(x) == 6
        np.testing.assert_array_equal(x[1], [1, 2, 3, 4])
        np.testing.assert_array_equal(y[1], [2, 3, 4, 5])

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.txt"
        p.write_bytes(b"")
        with pytest.raises(InputError):
            make_char_corpus(p)

    def test_missing_and_short(self, tmp_path):
        with pytest.raises(InputError):
            make_char_corpus(tmp_path / "missing.txt")
        p = tmp_path / "short.txt"
        p.write_text("abc")
        with pytest.raises(InputError):
            make_char_corpus(p, context=8)

    def test_split(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("ab" * 100)
        c = make_char_corpus(p, context=8, val_fraction=0.1)
        assert len(c.train_ids) == 180 and len(c.val_ids) == 20
        assert c.windows("val")[0].shape == (12, 8)


class TestSchedule:
    def test_endpoints(self):
        cfg = OptimConfig(steps=100, lr=1e-2, warmup_steps=10, min_lr=1e-4)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(10, cfg) == pytest.approx(1e-2, rel=1e-12)
        assert lr_at(99, cfg) == pytest.approx(1e-4, rel=1e-12)
        lrs = [lr_at(s, cfg) for s in range(10, 100)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_no_warmup(self):
        cfg = OptimConfig(steps=5, lr=1e-2, warmup_steps=0, min_lr=0.0)
        assert lr_at(0, cfg) == 1e-2 and lr_at(4, cfg) == pytest.approx(0.0, abs=1e-18)


class TestTrain:
    def test_zero_lr_leaves_loss_unchanged(self):
        data = make_synthetic_vision(n_samples=40, seed=0)
        model = build_model(ModelConfig(**TINY), seed=0)
        cfg = OptimConfig(steps=4, batch_size=0, lr=0.0, min_lr=0.0, warmup_steps=0, eval_every=1)
        res = train(model, data, cfg)
        losses = [h["train_loss"] for h in res.history]
        assert max(losses) - min(losses) == 0.0

    def test_deterministic(self):
        data = make_synthetic_vision(n_samples=60, seed=0)
        cfg = OptimConfig(steps=5, batch_size=16, eval_every=5)
        a = train(build_model(ModelConfig(**TINY), seed=3), data, cfg, seed=9)
        b = train(build_model(ModelConfig(**TINY), seed=3), data, cfg, seed=9)
        assert a.history == b.history

    def test_separable_task_fits(self):
        data = make_synthetic_vision(n_samples=200, seed=2, noise=0.3)
        model = build_model(ModelConfig(**TINY, n_classes=4), seed=0)
        res = train(model, data, OptimConfig(steps=120, batch_size=50, lr=1e-2, eval_every=120))
        assert res.final["train_accuracy"] >= 0.95

    def test_periodic_corpus(self, tmp_path):
        p = tmp_path / "abab.txt"
        p.write_text("ab" * 400)
        corpus = make_char_corpus(p, context=8)
        cfg = ModelConfig(**dict(TINY, n_layers=2), arch="decoder", vocab=256, context=8)
        model = build_model(cfg, seed=0)
        res = train(model, corpus, OptimConfig(steps=80, batch_size=32, lr=1e-2, eval_every=80))
        assert res.final["val_perplexity"] < 1.5

    def test_divergence_is_reported(self):
        data = make_synthetic_vision(n_samples=20, seed=0)
        data.x_train = data.x_train * np.nan
        seen = []
        with pytest.raises(DivergenceError):
            train(build_model(ModelConfig(**TINY), seed=0), data, OptimConfig(steps=3, eval_every=10),
                  on_metric=lambda step, name, value: seen.append(name))
        assert "diverged" in seen

    def test_checkpoint_written(self, tmp_path):
        data = make_synthetic_vision(n_samples=20, seed=0)
        res = train(build_model(ModelConfig(**TINY), seed=0), data, OptimConfig(steps=2),
                    checkpoint_path=str(tmp_path / "ck.npz"))
        assert res.checkpoint and os.path.exists(res.checkpoint)

    @pytest.mark.parametrize("seed", range(3))
    def test_alpha_one_is_input_independent(self, seed):
        data = make_synthetic_vision(n_samples=40, seed=seed)
        model = build_model(ModelConfig(**TINY, alpha=1.0), seed=seed)
        logits = model(data.x_test).value
        assert np.ptp(logits, axis=0).max() == 0.0
        assert evaluate(model, data, "test")["accuracy"] == data.chance("test")


class TestSinks:
    def test_header_and_rows(self, tmp_path):
        with RunManifest(str(tmp_path), {}, 0, "x") as m:
            with MetricsSink(str(tmp_path), "x", m) as sink:
                sink.write(1, "mha", 0.5, 0.25, 3, 2, "ratio", 0.1)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "experiment_id,seed,model_kind,alpha,alpha_prime,depth,layer,metric_name,value"
        assert lines[1] == "x,1,mha,0.5,0.25,3,2,ratio,0.1"
        rec = json.loads((tmp_path / "metrics.jsonl").read_text())
        assert set(rec) == set(CSV_COLUMNS) | {"timestamp"}
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "completed" and manifest["end_time"]
        assert str(tmp_path / "metrics.csv") in manifest["outputs"]

    def test_metric_before_manifest_rejected(self, tmp_path):
        m = RunManifest(str(tmp_path), {}, 0, "x")
        with MetricsSink(str(tmp_path), "x", m) as sink:
            with pytest.raises(RuntimeError):
                sink.write(0, "mha", 0, 0, 1, 1, "v", 1.0)

    def test_manifest_finalized_on_abort(self, tmp_path):
        with pytest.raises(ZeroDivisionError):
            with RunManifest(str(tmp_path), {"a": 1}, 0, "x"):
                assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "running"
                1 / 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "aborted" and "ZeroDivisionError" in manifest["error"]
        assert manifest["config"] == {"a": 1}

    def test_histogram(self, tmp_path):
        path = write_histogram(str(tmp_path / "h" / "x.csv"), [0.5, 1.5], [0.25, 0.75])
        rows = list(csv.reader(open(path)))
        assert rows == [["bin_center", "density"], ["0.5", "0.25"], ["1.5", "0.75"]]

    def test_merge_keeps_order(self, tmp_path):
        dirs = []
        for i in range(3):
            d = str(tmp_path / f"c{i}")
            with MetricsSink(d, "x") as s:
                s.write(i, "mha", 0, 0, 1, 1, "v", float(i))
            dirs.append(d)
        csv_out, _ = merge_metrics(dirs[::-1], str(tmp_path / "all"))
        lines = open(csv_out).read().splitlines()
        assert len(lines) == 4 and [l.split(",")[1] for l in lines[1:]] == ["2", "1", "0"]


class TestExperiments:
    def test_byte_identical_metrics(self, tmp_path):
        cfg = small_collapse_cfg(skip_alpha=0.5)
        run_experiment(cfg, str(tmp_path / "a"))
        run_experiment(cfg, str(tmp_path / "b"))
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert len(a.splitlines()) > 10

    def test_parallel_matches_serial(self, tmp_path):
        cfg = small_collapse_cfg()
        run_experiment(cfg, str(tmp_path / "s"), workers=1)
        run_experiment(cfg, str(tmp_path / "p"), workers=2)
        assert (tmp_path / "s" / "metrics.csv").read_bytes() == (tmp_path / "p" / "metrics.csv").read_bytes()

    def test_collapse_summary(self):
        s = run_collapse_sweep(small_collapse_cfg(skip_alpha=0.5))
        assert set(s.ratios) == {"baseline", "mha", "mha_skip"}
        assert s.ratios["baseline"].shape == (2, 3)
        assert s.mean_ratio("baseline", 3) <= s.mean_ratio("baseline", 1)

    def test_cells(self):
        raw = {"kind": "depth_sweep", "seeds": [0, 1], "sweep": {"depths": [4, 2]}}
        cells = expand_cells(config_from_dict(raw))
        assert len(cells) == 8 and cells[0] == {"name": "baseline_L2_seed0", "kind": "baseline",
                                                 "depth": 2, "seed": 0}
        grid = expand_cells(config_from_dict({"kind": "alpha_grid", "seeds": [0]}))
        assert [(c["alpha"], c["alpha_prime"]) for c in grid][:3] == [(0.0, 0.5), (0.5, 0.5), (1.0, 0.5)]

    def test_grad_check_stack(self):
        loss, params = grad_check_stack(0, 0.3)
        assert "0.b_k" not in params.names() and "1.w_q" in params.names()
        assert ag.grad_check(loss, params) <= 1e-5


class TestConfig:
    def test_shipped_configs_load(self):
        for name in os.listdir(os.path.join(ROOT, "configs")):
            if name.endswith(".toml"):
                load_config(os.path.join(ROOT, "configs", name))

    def test_json_equivalent(self, tmp_path):
        raw = {"kind": "train", "seeds": [3], "model": {"d_model": 8, "d_k": 4}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(raw))
        t = tmp_path / "c.toml"
        t.write_text('kind = "train"\nseeds = [3]\n[model]\nd_model = 8\nd_k = 4\n')
        assert load_config(p) == load_config(t)

    def test_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="nowhere.toml"):
            load_config(tmp_path / "nowhere.toml")
        bad = tmp_path / "bad.toml"
        for text in ('kind = "other"', 'seeds = []', '[model]\nwidth = 3', 'bogus = 1',
                     '[optim]\nlr = -1.0', 'kind = "train"\n[model\n'):
            bad.write_text(text)
            with pytest.raises(ConfigError):
                load_config(bad)

    def test_overrides(self):
        cfg = ExperimentConfig().with_overrides(seed=4, kind="baseline", alpha=0.0, alpha_prime=1.0,
                                                out_dir="o")
        assert cfg.seeds == [4] and cfg.model.attention == "baseline" and cfg.out_dir == "o"
        assert cfg.sweep.kinds == ["baseline"] and cfg.model.alpha_prime == 1.0
        with pytest.raises(ConfigError):
            ExperimentConfig().with_overrides(alpha=3.0)
