"""Experiment orchestration, metrics, and result serialization.

Each run writes four artifacts under `<out>/<name>/`: `summary.json` (the
EvalResult), `metrics.csv` (plot-ready table), `history.jsonl` (per-iteration
records), and `config.json` (the fully resolved config). Reruns with the
same config and seed produce byte-identical summaries.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .basemodels import make_learner
from .cotrain import ExchangePolicy, FusionWeights, fuse_predictions, icot_zsl_run
from .datamodel import LoadedDataset, UnlabeledPool, load_dataset
from .gzsl import (
    ROUTE_GATED,
    GzslPrediction,
    TwoStageConfig,
    icot_gzsl_run,
    two_stage_ood_run,
    two_stage_sod_run,
)
from .metrics import harmonic_mean, per_class_acc
from .oodgate import (
    DEFAULT_FNR_GRID,
    DEFAULT_ITER_FRACTION,
    max_softmax_score,
    select_simulated_iter,
    select_simulated_semantic,
    tnr_at_fnr,
    train_base_detector,
    train_ood_detector,
)
from .synthbench import SynthSpec, generate

PIPELINES = ("zsl", "gzsl", "ood", "ablation")


class ConfigError(ValueError):
    """Invalid run configuration (reported before any compute)."""


@dataclass
class OodSettings:
    method: str = "semantic"        # semantic | iter | max-softmax
    L: int | None = None            # iter-OOD scale; default 30% of the pool
    gate_fnr: float = 0.05
    epochs: int = 50
    lr: float = 1e-3
    batch: int = 256
    hidden: int = 1600
    margin: float = 0.0


@dataclass
class RunConfig:
    name: str
    pipeline: str
    seed: int
    dataset: dict
    learners: list[dict]
    T: int = 8
    policy: str = "cross"
    alpha: float = 0.5
    one_off: bool = False
    warm_start: bool = False
    gzsl_setting: str = "plain"     # plain | 1 | 2
    ood: OodSettings = field(default_factory=OodSettings)
    ablation: dict = field(default_factory=dict)
    out_dir: str = "out"
    threads: int = 1

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"name", "pipeline", "seed", "dataset", "learners"} - set(raw)
        if missing:
            raise ConfigError(f"config missing required keys: {sorted(missing)}")
        ood = OodSettings(**raw.get("ood", {})) if not isinstance(raw.get("ood"), OodSettings) \
            else raw["ood"]
        cfg = cls(**{**raw, "ood": ood})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer (wall-clock seeding is not allowed)")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.policy not in ("cross", "cyclic", "agreement"):
            raise ConfigError(f"unknown exchange policy {self.policy!r}")
        if self.gzsl_setting not in ("plain", "1", "2"):
            raise ConfigError("gzsl_setting must be 'plain', '1', or '2'")
        if self.ood.method not in ("semantic", "iter", "max-softmax"):
            raise ConfigError(f"unknown OOD method {self.ood.method!r}")
        if not 0.0 < self.ood.gate_fnr < 1.0:
            raise ConfigError("gate_fnr must lie in (0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not self.learners:
            raise ConfigError("at least one learner must be configured")
        for entry in self.learners:
            if "arch" not in entry:
                raise ConfigError(f"learner entry missing 'arch': {entry}")
        if "synth" not in self.dataset and "paths" not in self.dataset:
            raise ConfigError("dataset must provide either 'synth' or 'paths'")
        if "paths" in self.dataset:
            need = {"features", "labels", "attributes", "split"}
            missing = need - set(self.dataset["paths"])
            if missing:
                raise ConfigError(f"dataset.paths missing {sorted(missing)}")

    def to_dict(self) -> dict:
        out = asdict(self)
        return out

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalResult:
    name: str
    pipeline: str
    seed: int
    config_fingerprint: str
    version: str
    acc: float | None = None
    per_class: dict[str, float] = field(default_factory=dict)
    acc_seen: float | None = None
    acc_unseen: float | None = None
    harmonic: float | None = None
    apr: float | None = None
    inductive_acc: list[float] | None = None
    curves: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, raw: dict) -> "EvalResult":
        return cls(**raw)

    def check_consistency(self) -> None:
        if self.harmonic is not None:
            again = harmonic_mean(self.acc_seen, self.acc_unseen)
            if abs(again - self.harmonic) > 1e-9:
                raise AssertionError("stored H disagrees with recomputation")


def build_learners(entries: list[dict]) -> list:
    out = []
    for entry in entries:
        kwargs = {k: v for k, v in entry.items() if k != "arch"}
        out.append(make_learner(entry["arch"], **kwargs))
    return out


def resolve_dataset(config: RunConfig) -> LoadedDataset:
    if "synth" in config.dataset:
        spec = SynthSpec(**config.dataset["synth"])
        return generate(spec).data
    p = config.dataset["paths"]
    return load_dataset(p["features"], p["labels"], p["attributes"], p["split"])


def _compound(data: LoadedDataset) -> tuple[UnlabeledPool, np.ndarray]:
    """Unseen rows followed by seen rows, with ground-truth labels."""
    if data.test_seen is None:
        return data.test_unseen, data.test_unseen_labels
    feats = np.concatenate([data.test_unseen.features, data.test_seen.features])
    ids = np.arange(feats.shape[0], dtype=np.int64)
    truths = np.concatenate([data.test_unseen_labels, data.test_seen_labels])
    return UnlabeledPool(feats, ids), truths


def evaluate_gzsl(preds: np.ndarray, truths: np.ndarray, space) -> tuple[float, float, float]:
    """(ACC_unseen, ACC_seen, H) for predictions over the total class space."""
    unseen = sorted(space.unseen_labels)
    seen = sorted(space.seen_labels)
    unseen_mask = np.isin(truths, unseen)
    _, acc_u = per_class_acc(preds[unseen_mask], truths[unseen_mask], unseen)
    if unseen_mask.all():
        return acc_u, 0.0, 0.0
    _, acc_s = per_class_acc(preds[~unseen_mask], truths[~unseen_mask], seen)
    return acc_u, acc_s, harmonic_mean(acc_s, acc_u)


# ---------------------------------------------------------------------------
# pipelines


def _history_dicts(history) -> list[dict]:
    return [r.to_json_dict() for r in history]


def _run_zsl(config: RunConfig, data: LoadedDataset, result: EvalResult) -> list[dict]:
    learners = build_learners(config.learners)
    run = icot_zsl_run(
        learners, data.train, data.test_unseen, data.semantics, data.space,
        T=config.T, policy=ExchangePolicy(config.policy),
        fusion=FusionWeights(config.alpha), seed=config.seed,
        truths=data.test_unseen_labels, one_off=config.one_off,
        warm_start=config.warm_start, threads=config.threads,
    )
    unseen = sorted(data.space.unseen_labels)
    table, mean = per_class_acc(run.labels, data.test_unseen_labels, unseen)
    result.acc = mean
    result.per_class = {str(c): v for c, v in table.items()}
    class_arr = np.asarray(unseen, dtype=np.int64)
    result.inductive_acc = [
        per_class_acc(class_arr[np.argmax(p, axis=1)], data.test_unseen_labels, unseen)[1]
        for p in run.inductive_probs
    ]
    if run.history and run.history[-1].apr_ab is not None:
        result.apr = run.history[-1].apr_ab
    return _history_dicts(run.history)


def _run_gzsl(config: RunConfig, data: LoadedDataset, result: EvalResult) -> list[dict]:
    if data.test_seen is None:
        raise ConfigError("gzsl pipeline requires a test-seen pool")
    pool, truths = _compound(data)
    learners = build_learners(config.learners)
    history: list[dict] = []
    if config.gzsl_setting == "plain":
        run = icot_gzsl_run(
            learners, data.train, pool, data.semantics, data.space,
            T=config.T, policy=ExchangePolicy(config.policy),
            fusion=FusionWeights(config.alpha), seed=config.seed,
            truths=truths, one_off=config.one_off,
            warm_start=config.warm_start, threads=config.threads,
        )
        preds = run.labels
        history = _history_dicts(run.history)
        result.extra["routes"] = {"gated-unseen": 0, "remaining": len(pool)}
    else:
        ts_config = TwoStageConfig(
            learners=learners, T=config.T, policy=ExchangePolicy(config.policy),
            fusion=FusionWeights(config.alpha), seed=config.seed,
            gate_fnr=config.ood.gate_fnr, ood_epochs=config.ood.epochs,
            ood_lr=config.ood.lr, ood_batch=config.ood.batch,
            ood_hidden=config.ood.hidden, sod_margin=config.ood.margin,
            threads=config.threads,
        )
        if config.gzsl_setting == "1":
            pred = two_stage_ood_run(data.train, data.test_unseen, data.test_seen,
                                     data.semantics, data.space, ts_config)
        else:
            pred = two_stage_sod_run(data.train, pool, data.semantics,
                                     data.space, ts_config)
        preds = pred.labels
        gated = sum(1 for r in pred.routes if r == ROUTE_GATED)
        result.extra["routes"] = {"gated-unseen": gated,
                                  "remaining": len(pred.routes) - gated}
        result.extra["gate_threshold"] = pred.gate_threshold
        result.extra["simulated_size"] = pred.simulated_size
        for name, hist in (("zsl", pred.zsl_history), ("gzsl", pred.gzsl_history)):
            if hist:
                history += [{**r.to_json_dict(), "branch": name} for r in hist]
    acc_u, acc_s, h = evaluate_gzsl(preds, truths, data.space)
    result.acc_unseen, result.acc_seen, result.harmonic = acc_u, acc_s, h
    return history


def _run_ood(config: RunConfig, data: LoadedDataset, result: EvalResult) -> list[dict]:
    if data.test_seen is None:
        raise ConfigError("ood pipeline requires a test-seen pool")
    pool, truths = _compound(data)
    unseen_mask = np.isin(truths, sorted(data.space.unseen_labels))
    o = config.ood
    method = o.method
    if method == "max-softmax":
        base = train_base_detector(data.train, seed=config.seed, epochs=o.epochs,
                                   lr=o.lr, batch=o.batch, hidden=o.hidden)
        scores = max_softmax_score(base.predict_proba(pool.features))
        sim_size = None
    elif method == "iter":
        base = train_base_detector(data.train, seed=config.seed, epochs=o.epochs,
                                   lr=o.lr, batch=o.batch, hidden=o.hidden)
        L = o.L if o.L is not None else max(1, int(DEFAULT_ITER_FRACTION * len(pool)))
        sim = select_simulated_iter(base, pool, L)
        detector = train_ood_detector(data.train, sim, pool, seed=config.seed,
                                      epochs=o.epochs, lr=o.lr, batch=o.batch,
                                      hidden=o.hidden)
        scores = detector.scores(pool.features)
        sim_size = len(sim)
    else:
        sim = select_simulated_semantic(data.train, pool, data.semantics,
                                        data.space, seed=config.seed,
                                        epochs=o.epochs, lr=o.lr, batch=o.batch,
                                        hidden=o.hidden, margin=o.margin)
        detector = train_ood_detector(data.train, sim, pool, seed=config.seed,
                                      epochs=o.epochs, lr=o.lr, batch=o.batch,
                                      hidden=o.hidden)
        scores = detector.scores(pool.features)
        sim_size = len(sim)
    curve = tnr_at_fnr(scores[~unseen_mask], scores[unseen_mask], DEFAULT_FNR_GRID)
    result.curves = [{"fnr_target": p.fnr_target, "threshold": p.threshold,
                      "tnr": p.tnr} for p in curve.points]
    result.extra["average_tnr"] = curve.average_tnr
    result.extra["method"] = method
    result.extra["simulated_size"] = sim_size
    return []


def _run_ablation(config: RunConfig, data: LoadedDataset, result: EvalResult) -> list[dict]:
    kind = config.ablation.get("kind")
    if kind == "alpha-sweep":
        alphas = config.ablation.get("alphas",
                                     [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0])
        learners = build_learners(config.learners)
        run = icot_zsl_run(
            learners, data.train, data.test_unseen, data.semantics, data.space,
            T=config.T, policy=ExchangePolicy(config.policy),
            fusion=FusionWeights(config.alpha), seed=config.seed,
            truths=data.test_unseen_labels, threads=config.threads,
        )
        unseen = sorted(data.space.unseen_labels)
        rows = []
        for a in alphas:
            preds = fuse_predictions(run.probs, FusionWeights(a), unseen)
            _, acc = per_class_acc(preds, data.test_unseen_labels, unseen)
            rows.append({"alpha": a, "acc": acc})
        result.extra["alpha_sweep"] = rows
        result.acc = next(r["acc"] for r in rows
                          if abs(r["alpha"] - config.alpha) < 1e-12) \
            if any(abs(r["alpha"] - config.alpha) < 1e-12 for r in rows) else None
        return _history_dicts(run.history)
    if kind == "incremental-vs-oneoff":
        accs = {}
        history: list[dict] = []
        for mode, one_off in (("incremental", False), ("one-off", True)):
            learners = build_learners(config.learners)
            run = icot_zsl_run(
                learners, data.train, data.test_unseen, data.semantics,
                data.space, T=config.T, policy=ExchangePolicy(config.policy),
                fusion=FusionWeights(config.alpha), seed=config.seed,
                truths=data.test_unseen_labels, one_off=one_off,
                threads=config.threads,
            )
            unseen = sorted(data.space.unseen_labels)
            _, acc = per_class_acc(run.labels, data.test_unseen_labels, unseen)
            accs[mode] = acc
            history += [{**r.to_json_dict(), "mode": mode} for r in run.history]
        result.extra["mode_accs"] = accs
        result.acc = accs["incremental"]
        return history
    raise ConfigError(f"unknown ablation kind {kind!r}")


RUNNERS = {"zsl": _run_zsl, "gzsl": _run_gzsl, "ood": _run_ood,
           "ablation": _run_ablation}


def _write_metrics_csv(path: Path, result: EvalResult) -> None:
    lines = ["metric,value"]
    for key in ("acc", "acc_seen", "acc_unseen", "harmonic", "apr"):
        val = getattr(result, key)
        if val is not None:
            lines.append(f"{key},{val}")
    for c, v in sorted(result.per_class.items(), key=lambda kv: int(kv[0])):
        lines.append(f"class_{c},{v}")
    if result.inductive_acc:
        for i, v in enumerate(result.inductive_acc):
            lines.append(f"inductive_{i},{v}")
    for p in result.curves:
        lines.append(f"tnr@fnr={p['fnr_target']},{p['tnr']}")
    for key, val in sorted(result.extra.items()):
        if isinstance(val, (int, float)) and not isinstance(val, bool):
            lines.append(f"{key},{val}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_experiment(config: RunConfig | dict) -> EvalResult:
    """Execute the configured pipeline and write its artifact files."""
    if isinstance(config, dict):
        config = RunConfig.from_dict(config)
    else:
        config.validate()
    data = resolve_dataset(config)
    result = EvalResult(
        name=config.name,
        pipeline=config.pipeline,
        seed=config.seed,
        config_fingerprint=config.fingerprint(),
        version=__version__,
    )
    history = RUNNERS[config.pipeline](config, data, result)
    result.check_consistency()

    out_root = Path(os.environ.get("ICOT_OUT_DIR", config.out_dir))
    out_dir = out_root / config.name
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(
        json.dumps(result.to_json_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    (out_dir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    _write_metrics_csv(out_dir / "metrics.csv", result)
    with open(out_dir / "history.jsonl", "w", encoding="utf-8") as f:
        for record in history:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return result
