import hashlib
import itertools
import json

import pytest

from sepda import experiments
from sepda.datasets import ConfigError, SyntheticConfig, generate_synthetic, save_manifest
from sepda.experiments import ExperimentConfig, ExperimentError, PlotError
from sepda.metrics import REFERENCE_ROWS

TINY_DATA = {"synthetic": {"n_source": 48, "n_target": 32, "n_test": 24, "n_source_test": 12}}


def tiny(**kw):
    base = dict(dataset=TINY_DATA, train={"epochs": 1, "batch_size": 16}, seeds=[0, 1],
                network={"hidden": [8], "disc_hidden": 4})
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_ablation_preset_gives_five_rows(tmp_path):
    rows = experiments.run_experiment(tiny(rows="ablation"), tmp_path)
    assert [r.label for r in rows] == ["ce", "f", "f+d1", "f+d1+d2", "f+d1+d2+div"]
    lines = (tmp_path / "results.tsv").read_text().splitlines()
    assert len(lines) == 6
    for r in rows:
        for s in (0, 1):
            run = tmp_path / "runs" / experiments._safe(r.label) / f"seed_{s}"
            assert {p.name for p in run.iterdir()} == {"trainlog.jsonl", "checkpoint.npz", "metrics.json"}


def test_ablation_rows_map_onto_loss_toggles():
    cfg = tiny(rows="ablation")
    loss = {info["label"]: tc.loss for info, _, tc, _ in cfg.expand()}
    assert loss["ce"].classification == "ce" and not loss["ce"].use_d1
    assert loss["f"].classification == "focal" and not (loss["f"].use_d1 or loss["f"].use_div)
    assert loss["f+d1+d2"].use_d2 and not loss["f+d1+d2"].use_div
    full = loss["f+d1+d2+div"]
    assert full.use_d1 and full.use_d2 and full.use_div


def test_every_toggle_combination_is_expressible():
    rows = [{"label": "".join(str(int(b)) for b in flags),
             "ablation": dict(zip(experiments.ABLATION_KEYS, flags))}
            for flags in itertools.product([False, True], repeat=4)]
    assert len(tiny(rows=rows).expand()) == 16


def test_alpha_sweep_gives_four_rows_without_crashing(tmp_path):
    rows = experiments.run_experiment(tiny(sweep={"alpha": [1e-3, 1e-2, 1e-1, 1.0]}, seeds=[0]), tmp_path)
    assert [(r.param, r.value) for r in rows] == [("alpha", v) for v in (1e-3, 1e-2, 1e-1, 1.0)]
    assert all(r.median["f1"] is not None for r in rows)
    data = json.loads((tmp_path / "results.json").read_text())["rows"]
    xs, ys, _ = experiments.sweep_points(data, "alpha")
    assert xs == [1e-3, 1e-2, 1e-1, 1.0] and len(ys) == 4
    files = experiments.emit_plots(tmp_path)
    assert tmp_path / "plots" / "sweep_alpha.png" in files


def test_same_seed_twice_gives_identical_tables(tmp_path):
    cfg = tiny(method="source_only", seeds=[3])
    experiments.run_experiment(cfg, tmp_path / "a")
    experiments.run_experiment(cfg, tmp_path / "b")
    for name in ("results.tsv", "results.json", "effective_config.yaml",
                 "runs/source_only/seed_3/trainlog.jsonl", "runs/source_only/seed_3/checkpoint.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_aggregate_median_and_iqr():
    recs = [{k: float(v) for k in experiments.METRIC_KEYS} | {"d1_accuracy": None} for v in (1, 2, 3, 4, 5)]
    med, iqr = experiments.aggregate(recs)
    assert med["f1"] == 3.0 and iqr["f1"] == 2.0
    assert med["d1_accuracy"] is None


def test_seed_override(tmp_path):
    rows = experiments.run_experiment(tiny(), tmp_path, seeds=[7])
    assert rows[0].seeds == [7]
    assert (tmp_path / "runs" / "covid_da" / "seed_7").is_dir()


def test_adversarial_rows_report_d1_accuracy(tmp_path):
    rows = experiments.run_experiment(tiny(rows="methods", seeds=[0]), tmp_path)
    by = {r.label: r for r in rows}
    assert by["covid_da"].median["d1_accuracy"] is not None
    assert by["feature_da_only"].median["d1_accuracy"] is not None
    assert by["source_only"].median["d1_accuracy"] is None


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"method": "nope"},
    {"train": {"epochz": 3}},
    {"loss": {"alpha": 0.1, "use_d1": False}},
    {"ablation": {"use_focus": True}},
    {"rows": "nope"},
    {"rows": [{"label": "a"}, {"label": "a"}]},
    {"rows": [{"method": "covid_da"}]},
    {"sweep": {"gamma": [1, 2]}},
    {"sweep": {"alpha": "0.1"}},
    {"seeds": []},
    {"dataset": {"synthetic": {}, "manifest": "x"}},
    {"network": {"activation": "relu6"}},
    {"loss": {"domain_measure": "hinge"}},
])
def test_invalid_configs_raise(bad):
    with pytest.raises(ConfigError):
        tiny(**bad)


def test_yaml_round_trip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("method: source_only\nseeds: [1, 2]\ntrain: {epochs: 2}\n")
    cfg = ExperimentConfig.from_yaml(p)
    assert cfg.method == "source_only" and cfg.seeds == [1, 2]
    eff = cfg.effective()
    assert eff["train"]["epochs"] == 2 and eff["train"]["lr"] == 0.001
    assert eff["loss"]["alpha"] == 0.1 and eff["ablation"]["use_div"] is True
    (tmp_path / "bad.yaml").write_text("train: [1, 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(tmp_path / "bad.yaml")


def test_manifest_dataset_is_read_not_mutated(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n_source=40, n_target=32, n_test=20, n_source_test=10))
    save_manifest(ds, tmp_path / "data.jsonl")
    before = hashlib.sha256((tmp_path / "data.jsonl").read_bytes()).hexdigest()
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text("dataset: {manifest: data.jsonl}\ntrain: {epochs: 1}\nseeds: [0]\n")
    experiments.run_experiment(ExperimentConfig.from_yaml(cfg_path), tmp_path / "out")
    assert hashlib.sha256((tmp_path / "data.jsonl").read_bytes()).hexdigest() == before


def test_failing_run_names_config_and_seed(tmp_path, monkeypatch):
    def boom(method, ds, tc, arch, evaluate_epochs):
        if tc.seed == 1:
            raise FloatingPointError("diverged")
        return real(method, ds, tc, arch, evaluate_epochs=evaluate_epochs)

    real = experiments.run_method
    monkeypatch.setattr(experiments, "run_method", boom)
    with pytest.raises(ExperimentError) as err:
        experiments.run_experiment(tiny(), tmp_path)
    assert err.value.label == "covid_da" and err.value.seed == 1
    rec = err.value.record()
    assert rec["error"] == "FloatingPointError" and rec["seed"] == 1


def test_missing_manifest_is_an_experiment_error(tmp_path):
    cfg = tiny(dataset={"manifest": str(tmp_path / "nope.jsonl")})
    with pytest.raises(ExperimentError):
        experiments.run_experiment(cfg, tmp_path / "out")


# --- plots -------------------------------------------------------------------


def test_empty_results_write_no_plots(tmp_path):
    (tmp_path / "results.json").write_text(json.dumps({"rows": []}))
    assert experiments.emit_plots(tmp_path) == []
    assert not (tmp_path / "plots").exists()


def test_plots_need_results(tmp_path):
    with pytest.raises(PlotError):
        experiments.emit_plots(tmp_path)


def test_plots_are_idempotent_and_need_logs(tmp_path):
    experiments.run_experiment(tiny(seeds=[0]), tmp_path)
    first = {p: p.read_bytes() for p in experiments.emit_plots(tmp_path)}
    second = {p: p.read_bytes() for p in experiments.emit_plots(tmp_path)}
    assert list(first) == [tmp_path / "plots" / "loss_covid_da.png"]
    assert first == second
    (tmp_path / "runs" / "covid_da" / "seed_0" / "trainlog.jsonl").unlink()
    with pytest.raises(PlotError, match="missing"):
        experiments.emit_plots(tmp_path)


# --- reference table ---------------------------------------------------------


def test_verify_reference_tables_passes():
    ok, text = experiments.verify_reference_tables()
    assert ok
    assert text.count("PASS") == 12
    assert text.splitlines()[-1] == "12/12 rows reproduce"


def test_verify_reference_tables_flags_perturbed_row():
    rows = [list(r) for r in REFERENCE_ROWS]
    rows[3][2] += 1.0
    ok, text = experiments.verify_reference_tables(rows)
    assert not ok
    assert text.splitlines()[3].startswith("FAIL")
    assert text.count("PASS") == 11
