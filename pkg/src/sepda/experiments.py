"""Config-driven experiment runner: comparisons, ablations, sweeps and plots."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .datasets import ConfigError, DomainDataset, SyntheticConfig, generate_synthetic, load_manifest
from .losses import LossConfig
from .metrics import evaluate, verify_reference_rows
from .networks import ArchSpec
from .trainer import METHODS, TrainConfig, domain_confusion, run_method, save_checkpoint

METRIC_KEYS = ("f1", "recall", "precision", "auc", "sum", "cost", "specificity")
ABLATION_KEYS = ("use_focal", "use_d1", "use_d2", "use_div")
SWEEP_KEYS = ("alpha", "beta")

# named row sets; each row is a label plus overrides of the base config
PRESETS = {
    "methods": [
        {"label": m, "method": m}
        for m in ("source_only", "target_only", "fine_tune", "feature_da_only", "covid_da")
    ],
    "ablation": [
        {"label": "ce", "ablation": dict(use_focal=False, use_d1=False, use_d2=False, use_div=False)},
        {"label": "f", "ablation": dict(use_focal=True, use_d1=False, use_d2=False, use_div=False)},
        {"label": "f+d1", "ablation": dict(use_focal=True, use_d1=True, use_d2=False, use_div=False)},
        {"label": "f+d1+d2", "ablation": dict(use_focal=True, use_d1=True, use_d2=True, use_div=False)},
        {"label": "f+d1+d2+div", "ablation": dict(use_focal=True, use_d1=True, use_d2=True, use_div=True)},
    ],
    "measures": (
        [{"label": f"domain={m}", "loss": {"domain_measure": m}} for m in ("least_square", "gan", "focal")]
        + [{"label": f"div={m}", "loss": {"diversity_measure": m}} for m in ("cosine", "l1", "l2", "kl", "js")]
    ),
}


class ExperimentError(RuntimeError):
    """A run failed; ``label`` and ``seed`` name the failing (config, seed)."""

    def __init__(self, msg: str, label: Optional[str] = None, seed: Optional[int] = None):
        super().__init__(msg)
        self.label = label
        self.seed = seed

    def record(self) -> dict:
        return {"error": type(self.__cause__ or self).__name__, "message": str(self),
                "label": self.label, "seed": self.seed}


def _check_keys(d: dict, allowed, where: str) -> None:
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown {where} keys: {', '.join(extra)}")


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"synthetic": {}})
    method: str = "covid_da"
    train: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    sweep: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "out"
    # directory relative manifest paths resolve against
    base_dir: str = "."

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.dataset, dict) or len(self.dataset) != 1 or \
                next(iter(self.dataset)) not in ("synthetic", "manifest"):
            raise ConfigError("dataset must hold exactly one of 'synthetic' or 'manifest'")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        _check_keys(self.train, [f.name for f in fields(TrainConfig) if f.name not in ("loss", "seed")], "train")
        _check_keys(self.loss, [f.name for f in fields(LossConfig)
                                if f.name not in ("use_d1", "use_d2", "use_div", "classification")], "loss")
        _check_keys(self.ablation, ABLATION_KEYS, "ablation")
        _check_keys(self.network, [f.name for f in fields(ArchSpec) if f.name != "input_dim"], "network")
        _check_keys(self.sweep, SWEEP_KEYS, "sweep")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        if isinstance(self.rows, str):
            if self.rows not in PRESETS:
                raise ConfigError(f"unknown row preset {self.rows!r}; expected one of {sorted(PRESETS)}")
        for row in self.row_specs():
            _check_keys(row, ("label", "method", "train", "loss", "ablation", "network"), "row")
            if "label" not in row:
                raise ConfigError("every row needs a label")
            if row.get("method", self.method) not in METHODS:
                raise ConfigError(f"row {row['label']!r}: unknown method {row.get('method')!r}")
        for key, values in self.sweep.items():
            if not isinstance(values, list) or not all(isinstance(v, (int, float)) for v in values):
                raise ConfigError(f"sweep.{key} must be a list of numbers")
        # build every row once so bad values surface before any training
        for *_, arch_kw in self.expand():
            ArchSpec.from_dict({**arch_kw, "input_dim": 1})

    def row_specs(self) -> list[dict]:
        return list(PRESETS[self.rows]) if isinstance(self.rows, str) else list(self.rows)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a mapping")
        _check_keys(d, [f.name for f in fields(cls)], "experiment")
        d = dict(d)
        d.setdefault("base_dir", str(base_dir))
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        return cls.from_dict(d, base_dir=str(path.parent))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def effective(self) -> dict:
        """Full configuration with every default spelled out."""
        d = self.to_dict()
        if "synthetic" in self.dataset:
            d["dataset"] = {"synthetic": SyntheticConfig.from_dict(self.dataset["synthetic"] or {}).to_dict()}
        d["train"] = {k: v for k, v in self.train_config(0).to_dict().items() if k not in ("loss", "seed")}
        loss = self.loss_config()
        d["loss"] = {k: v for k, v in asdict(loss).items()
                     if k not in ("use_d1", "use_d2", "use_div", "classification")}
        d["ablation"] = self.ablation_flags()
        arch = ArchSpec.from_dict({**self.network, "input_dim": 1}).to_dict()
        arch.pop("input_dim")
        d["network"] = {k: list(v) if isinstance(v, tuple) else v for k, v in arch.items()}
        d["rows"] = self.rows if isinstance(self.rows, str) else self.row_specs()
        return d

    def ablation_flags(self, overrides: Optional[dict] = None) -> dict:
        flags = dict(use_focal=True, use_d1=True, use_d2=True, use_div=True)
        flags.update(self.ablation)
        flags.update(overrides or {})
        return flags

    def loss_config(self, loss: Optional[dict] = None, ablation: Optional[dict] = None) -> LossConfig:
        flags = self.ablation_flags(ablation)
        kw = {**self.loss, **(loss or {})}
        return LossConfig(**kw, classification="focal" if flags["use_focal"] else "ce",
                          use_d1=flags["use_d1"], use_d2=flags["use_d2"], use_div=flags["use_div"])

    def train_config(self, seed: int, train: Optional[dict] = None, loss: Optional[LossConfig] = None) -> TrainConfig:
        return TrainConfig(**{**self.train, **(train or {})}, seed=seed, loss=loss or self.loss_config())

    def expand(self) -> list[tuple[dict, str, TrainConfig, dict]]:
        """(row info, method, seedless TrainConfig, arch overrides) per table row."""
        out = []
        rows = self.row_specs()
        if not rows and not self.sweep:
            rows = [{"label": self.method}]
        for row in rows:
            loss = self.loss_config(row.get("loss"), row.get("ablation"))
            tc = self.train_config(0, row.get("train"), loss)
            info = {"label": row["label"], "param": None, "value": None}
            out.append((info, row.get("method", self.method), tc, {**self.network, **row.get("network", {})}))
        for key in SWEEP_KEYS:
            for value in self.sweep.get(key, []):
                loss = replace(self.loss_config(), **{key: float(value)})
                info = {"label": f"{key}={value:g}", "param": key, "value": float(value)}
                out.append((info, self.method, self.train_config(0, loss=loss), dict(self.network)))
        labels = [info["label"] for info, *_ in out]
        dupes = sorted({x for x in labels if labels.count(x) > 1})
        if dupes:
            raise ConfigError(f"duplicate row labels: {', '.join(dupes)}")
        return out

    def load_dataset(self) -> DomainDataset:
        if "synthetic" in self.dataset:
            return generate_synthetic(SyntheticConfig.from_dict(self.dataset["synthetic"] or {}))
        path = Path(self.dataset["manifest"])
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        return load_manifest(path)


@dataclass
class ResultRow:
    label: str
    method: str
    param: Optional[str]
    value: Optional[float]
    seeds: list
    per_seed: list
    median: dict
    iqr: dict

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(records: list[dict]) -> tuple[dict, dict]:
    """Median and interquartile range of every metric across seeds."""
    med, iqr = {}, {}
    for key in METRIC_KEYS + ("d1_accuracy",):
        vals = [r[key] for r in records if r.get(key) is not None]
        if not vals:
            med[key] = iqr[key] = None
            continue
        q1, q2, q3 = np.percentile(vals, [25, 50, 75])
        med[key], iqr[key] = float(q2), float(q3 - q1)
    return med, iqr


def _run_one(ds: DomainDataset, method: str, tc: TrainConfig, arch_kw: dict, run_dir: Path) -> dict:
    arch = ArchSpec.from_dict({**arch_kw, "input_dim": ds.dim})
    bundle, log = run_method(method, ds, tc, arch, evaluate_epochs=False)
    run_dir.mkdir(parents=True, exist_ok=True)
    log.write_jsonl(run_dir / "trainlog.jsonl")
    save_checkpoint(bundle, log, run_dir / "checkpoint.npz")
    record = evaluate(bundle, ds.target_test).to_record()
    adversarial = method == "feature_da_only" or (method == "covid_da" and tc.loss.use_d1 and tc.loss.alpha > 0)
    record["d1_accuracy"] = domain_confusion(bundle, ds) if adversarial and ds.source_test else None
    (run_dir / "metrics.json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
    return record


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}" if math.isfinite(v) else str(v)
    return str(v)


def write_results(rows: list[ResultRow], out: Path) -> None:
    header = ["label", "method", "param", "value", "n_seeds"]
    for key in METRIC_KEYS + ("d1_accuracy",):
        header += [f"{key}_median", f"{key}_iqr"]
    lines = ["\t".join(header)]
    for r in rows:
        cells = [r.label, r.method, r.param, r.value, len(r.seeds)]
        for key in METRIC_KEYS + ("d1_accuracy",):
            cells += [r.median[key], r.iqr[key]]
        lines.append("\t".join(_fmt(c) for c in cells))
    (out / "results.tsv").write_text("\n".join(lines) + "\n")
    (out / "results.json").write_text(
        json.dumps({"rows": [r.to_dict() for r in rows]}, sort_keys=True, indent=1) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None, seeds=None) -> list[ResultRow]:
    """Train every (row, seed), evaluate on the target test split and write tables.

    Layout under the output directory: ``effective_config.yaml``,
    ``results.tsv``, ``results.json`` and ``runs/<label>/seed_<s>/`` holding
    ``trainlog.jsonl``, ``checkpoint.npz`` and ``metrics.json``.
    """
    seeds = list(seeds) if seeds is not None else list(cfg.seeds)
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    try:
        ds = cfg.load_dataset()
    except Exception as exc:
        raise ExperimentError(f"loading dataset: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    # the output location is not part of the configuration, so reruns elsewhere match
    effective = {**cfg.effective(), "seeds": seeds}
    effective.pop("output_dir")
    (out / "effective_config.yaml").write_text(yaml.safe_dump(effective, sort_keys=True))

    rows = []
    for info, method, tc, arch_kw in cfg.expand():
        records = []
        for seed in seeds:
            run_dir = out / "runs" / _safe(info["label"]) / f"seed_{seed}"
            try:
                records.append(_run_one(ds, method, replace(tc, seed=seed), arch_kw, run_dir))
            except Exception as exc:
                raise ExperimentError(f"run {info['label']!r} seed {seed} failed: {exc}",
                                      info["label"], seed) from exc
        med, iqr = aggregate(records)
        rows.append(ResultRow(info["label"], method, info["param"], info["value"], seeds, records, med, iqr))
    write_results(rows, out)
    return rows


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "+-=._" else "_" for c in label)


# ---------------------------------------------------------------------------
# plots


class PlotError(RuntimeError):
    pass


def sweep_points(rows: list[dict], param: str, metric: str = "f1") -> tuple[list, list, list]:
    """(values, medians, half-IQRs) of one swept parameter, sorted by value."""
    sweep = sorted((r for r in rows if r["param"] == param), key=lambda r: r["value"])
    return ([r["value"] for r in sweep], [r["median"][metric] for r in sweep],
            [r["iqr"][metric] / 2 for r in sweep])


def emit_plots(results_dir) -> list[Path]:
    """Loss curves per row and metric-vs-parameter curves per sweep.

    Returns the written files. A results table with no rows writes nothing.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results_dir = Path(results_dir)
    try:
        rows = json.loads((results_dir / "results.json").read_text())["rows"]
    except (OSError, ValueError, KeyError) as exc:
        raise PlotError(f"no readable results in {results_dir}: {exc}") from exc
    written = []
    plot_dir = results_dir / "plots"
    meta = {"Software": None}

    for row in rows:
        runs = [results_dir / "runs" / _safe(row["label"]) / f"seed_{s}" / "trainlog.jsonl" for s in row["seeds"]]
        missing = [str(p) for p in runs if not p.is_file()]
        if missing:
            raise PlotError(f"missing training logs: {', '.join(missing)}")
        plot_dir.mkdir(exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 4))
        for seed, path in zip(row["seeds"], runs):
            recs = [json.loads(line) for line in path.read_text().splitlines() if line]
            ax.plot([r["step"] for r in recs], [r["J"] for r in recs], lw=0.8, label=f"seed {seed}")
        ax.set_xlabel("step")
        ax.set_ylabel("J")
        ax.set_title(row["label"])
        ax.legend(fontsize=7)
        path = plot_dir / f"loss_{_safe(row['label'])}.png"
        fig.savefig(path, dpi=80, metadata=meta)
        plt.close(fig)
        written.append(path)

    for param in SWEEP_KEYS:
        xs, ys, err = sweep_points(rows, param)
        if not xs:
            continue
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.errorbar(xs, ys, yerr=err, marker="o", capsize=3)
        ax.set_xscale("log")
        ax.set_xlabel(param)
        ax.set_ylabel("median F1")
        path = plot_dir / f"sweep_{param}.png"
        fig.savefig(path, dpi=80, metadata=meta)
        plt.close(fig)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# published table check


def verify_reference_tables(rows=None) -> tuple[bool, str]:
    """Run the 12-row Sum/Cost reconstruction and format per-row residuals."""
    checks = verify_reference_rows() if rows is None else verify_reference_rows(rows)
    lines = []
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        lines.append(f"{status} {c.method:<16s} TP={c.counts.tp if c.counts else '-'} "
                     f"FP={c.counts.fp if c.counts else '-'} "
                     f"dSum={_fmt(c.sum_residual)} dCost={_fmt(c.cost_residual)}")
    ok = all(c.passed for c in checks)
    lines.append(f"{sum(c.passed for c in checks)}/{len(checks)} rows reproduce")
    return ok, "\n".join(lines)
