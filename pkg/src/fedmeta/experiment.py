"""End-to-end experiment: per-task baselines, one federated run, reports, Grad-CAM renders."""

from __future__ import annotations

import json
import logging
import platform
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import bce_loss
from .config import ExperimentConfig, TaskConfig
from .datasets import DatasetSplit, LabeledImageSet, gen_synthetic_task, load_idx_like, split
from .errors import DataError, DomainError
from .federation import FederationConfig, GlobalMetaModel, RoundLogEntry, make_node, run_federation
from .gradcam import grad_cam, write_pgm
from .metrics import EvalReport, ScoredPredictions, evaluate, metrics_csv, sens_spec_at
from .models import ModelSpec, build_standard_cnn
from .optim import SgdConfig
from .params import ParameterSet
from .stats import ComparisonResult, bootstrap_se_p_value, compare_bootstrap_ttest
from .training import predict, train_centralized

log = logging.getLogger(__name__)

BASELINE_MODEL = "Standard"
FL_MODEL = "Standard w/ FL"


def derive_seed(seed: int, *parts: str) -> int:
    """Stable 32-bit seed from an experiment seed and string labels."""
    words = [seed & 0xFFFFFFFF] + [zlib.crc32(p.encode("utf-8")) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class TaskOutcome:
    name: str
    data: DatasetSplit
    baseline: ParameterSet
    baseline_report: EvalReport
    fl_report: EvalReport
    comparison: ComparisonResult
    baseline_scores: np.ndarray
    fl_scores: np.ndarray


@dataclass
class ExperimentResult:
    reports: list[EvalReport]
    comparisons: dict[str, ComparisonResult]
    round_log: list[RoundLogEntry]
    meta_model: GlobalMetaModel
    outcomes: dict[str, TaskOutcome]
    output_dir: Path
    elapsed: float


def load_task(task: TaskConfig, seed: int) -> LabeledImageSet:
    try:
        if task.generator:
            data_seed = task.seed if task.seed is not None else derive_seed(seed, task.name, "data")
            return gen_synthetic_task(task.generator, task.n, task.hw, task.positive_rate,
                                      task.noise_sigma, data_seed, amplitude=task.amplitude,
                                      task_name=task.name)
        return load_idx_like(task.images, task.labels, task_name=task.name)
    except OSError as exc:
        raise DataError(f"task {task.name}: {exc}") from exc
    except DomainError as exc:
        raise DataError(f"task {task.name}: {exc}") from exc


def _sgd(cfg: ExperimentConfig, total_epochs: int) -> SgdConfig:
    return SgdConfig(cfg.initial_lr, cfg.lr_schedule, min(cfg.lr_floor, cfg.initial_lr),
                     max(1, total_epochs))


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    started = time.time()
    t0 = datetime.now(timezone.utc)
    out_dir = Path(cfg.output_dir)

    datasets = [load_task(t, cfg.seed) for t in cfg.tasks]
    shapes = {d.images.shape[1:] for d in datasets}
    if len(shapes) != 1:
        raise DataError(f"tasks disagree on image shape: {sorted(shapes)}")
    splits = []
    for task, data in zip(cfg.tasks, datasets):
        try:
            splits.append(split(data, cfg.validation_fraction, derive_seed(cfg.seed, task.name, "split")))
        except DomainError as exc:
            raise DataError(f"task {task.name}: {exc}") from exc

    spec = ModelSpec(input_shape=tuple(shapes.pop()), conv_channels=tuple(cfg.conv_channels),
                     kernel_size=cfg.kernel_size, dense_width=cfg.dense_width)
    graph, init = build_standard_cnn(spec, cfg.seed)
    node_seeds = {t.name: derive_seed(cfg.seed, t.name, "batches") for t in cfg.tasks}

    def baseline(i: int) -> ParameterSet:
        name = cfg.tasks[i].name
        train = splits[i].train
        params, losses = train_centralized(graph.copy(), init, train.images, train.labels,
                                           _sgd(cfg, cfg.baseline_epochs), node_seeds[name],
                                           epochs=cfg.baseline_epochs, batch_size=cfg.batch_size)
        log.info("baseline %s: final train loss %s", name, losses[-1] if losses else None)
        return params

    baselines = _map(baseline, range(len(cfg.tasks)), cfg.threads)

    fcfg = FederationConfig(total_rounds=cfg.fl_rounds, sgd=_sgd(cfg, 1), batch_size=cfg.batch_size,
                            weighting=cfg.aggregation_weighting, transport=cfg.transport,
                            threads=cfg.threads, collect_heads=False)
    nodes = [make_node(t.name, t.name, init, s.train, graph.copy(), fcfg,
                       epochs_per_round=cfg.epochs_per_round, seed=node_seeds[t.name])
             for t, s in zip(cfg.tasks, splits)]
    meta, round_log = run_federation(nodes, fcfg)

    outcomes: dict[str, TaskOutcome] = {}
    reports: list[EvalReport] = []
    for task, sp, base in zip(cfg.tasks, splits, baselines):
        val = sp.validation
        base_scores = predict(graph, base, val.images)
        fl_scores = predict(graph, meta.params_for(task.name), val.images)
        try:
            base_pred = ScoredPredictions(base_scores, val.labels, BASELINE_MODEL, task.name)
            fl_pred = ScoredPredictions(fl_scores, val.labels, FL_MODEL, task.name)
            cmp = compare_bootstrap_ttest(fl_pred, base_pred, cfg.bootstrap_replicates,
                                          derive_seed(cfg.seed, task.name, "bootstrap"))
            base_rep = evaluate(base_pred, bce_loss(base_scores, val.labels))
            fl_rep = evaluate(fl_pred, bce_loss(fl_scores, val.labels), p_value=cmp.p_value)
        except DomainError as exc:
            raise DataError(f"task {task.name}: validation set unusable: {exc}") from exc
        reports += [base_rep, fl_rep]
        outcomes[task.name] = TaskOutcome(task.name, sp, base, base_rep, fl_rep, cmp,
                                          base_scores, fl_scores)

    result = ExperimentResult(reports, {k: o.comparison for k, o in outcomes.items()}, round_log,
                              meta, outcomes, out_dir, time.time() - started)
    if write:
        write_artifacts(cfg, result, graph, t0)
    return result


def comparison_json(result: ExperimentResult) -> str:
    doc = {}
    for name, cmp in result.comparisons.items():
        d = cmp.to_dict()
        doc[name] = {
            "auroc_fl": d["auroc_a"],
            "auroc_baseline": d["auroc_b"],
            "mean_bootstrap_diff": float(np.mean(cmp.bootstrap_diffs)),
            "t_statistic": d["t_statistic"],
            "p_value": d["p_value"],
            "p_value_bootstrap_se": bootstrap_se_p_value(cmp),
            "significant": d["significant"],
            "replicates": d["replicates"],
        }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def rounds_csv(round_log) -> str:
    lines = ["round,node,mean_loss"]
    lines += [f"{e.round_index},{e.node_id},{e.mean_loss:.6f}" for e in round_log]
    return "\n".join(lines) + "\n"


def render_gradcams(cfg: ExperimentConfig, result: ExperimentResult, graph, out_dir: Path) -> list[Path]:
    """True positives at the Youden threshold, FL model first then baseline."""
    written = []
    for name, o in result.outcomes.items():
        val = o.data.validation
        hw = val.images.shape[2:]
        for label, params, scores, sub in (
            (FL_MODEL, result.meta_model.params_for(name), o.fl_scores, out_dir / "gradcam" / name),
            (BASELINE_MODEL, o.baseline, o.baseline_scores, out_dir / "gradcam" / name / "baseline"),
        ):
            _, _, tau = sens_spec_at(ScoredPredictions(scores, val.labels))
            tp = np.flatnonzero((scores >= tau) & (val.labels == 1))[: cfg.gradcam_samples]
            for j in tp:
                sample_id = int(o.data.validation_idx[j])
                smap = grad_cam(graph, params, val.images[j], sample_id=sample_id)
                path = sub / f"{sample_id:05d}.pgm"
                write_pgm(smap, path, hw)
                written.append(path)
    return written


def write_artifacts(cfg: ExperimentConfig, result: ExperimentResult, graph, started_at) -> None:
    out = result.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.reports), encoding="utf-8")
    (out / "comparison.json").write_text(comparison_json(result), encoding="utf-8")
    (out / "rounds.csv").write_text(rounds_csv(result.round_log), encoding="utf-8")
    render_gradcams(cfg, result, graph, out)
    meta = {
        "started_at": started_at.isoformat(),
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "elapsed_seconds": round(result.elapsed, 3),
        "config_source": cfg.source,
        "config": {k: v for k, v in asdict(cfg).items() if k != "tasks"},
        "tasks": [asdict(t) for t in cfg.tasks],
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "run-meta.json").write_text(json.dumps(meta, indent=2, default=str) + "\n", encoding="utf-8")


def format_table(reports) -> str:
    head = f"{'Task':<16} {'Model':<16} {'Loss':>6} {'Sens':>7} {'Spec':>7} {'AUPR':>6} {'AUROC':>6} {'p':>6}"
    lines = [head, "-" * len(head)]
    for r in reports:
        p = "-" if r.p_value is None else f"{r.p_value:.2f}"
        lines.append(f"{r.task:<16} {r.model:<16} {r.loss:6.2f} {100 * r.sensitivity:7.2f} "
                     f"{100 * r.specificity:7.2f} {r.aupr:6.2f} {r.auroc:6.2f} {p:>6}")
    return "\n".join(lines)

