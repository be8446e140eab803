"""Run persistence: manifests, metrics CSV, sweeps, frontier export.

A run directory contains::

    manifest.json   written before step 0, finalized exactly once
    resolved.cfg    the complete resolved configuration (reloadable)
    metrics.csv     one row per train step plus eval rows, flushed per step
    params.npz      final policy parameters

Metrics files are append-only CSV with a fixed column set; undefined metrics
serialize as empty fields, never as 0. Two runs with the same resolved config
and seed produce byte-identical metrics files.
"""

from __future__ import annotations

import csv
import glob as globlib
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import trainer
from .config import TrainConfig, dump_config, load_config, parse_config, set_key
from .errors import DivergenceError
from .metrics import METRIC_COLUMNS
from .policy import ParamLayout, PolicyParams

OUT_ROOT_ENV = "LENRL_RUNS"
DEFAULT_OUT_ROOT = "runs"

STATUS_RUNNING = "running"
STATUS_COMPLETED = "completed"
STATUS_DIVERGED = "diverged"
STATUS_ABORTED = "aborted"

CSV_COLUMNS = (
    "step",
    "phase",
    "mean_reward",
    "mean_length",
    "accuracy",
    *METRIC_COLUMNS,
    "dropped_groups",
    "shaping_method",
    "shaping_alpha",
    "shaping_beta",
    "shaping_lambda",
    "shaping_tau",
    "shaping_k",
)


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, DEFAULT_OUT_ROOT))


def run_id_for(cfg: TrainConfig) -> str:
    """Timestamp plus an 8-hex digest of the resolved config (seed included)."""
    digest = hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:8]
    return time.strftime("%Y%m%d-%H%M%S") + "-" + digest


@dataclass
class RunManifest:
    run_id: str
    run_dir: Path
    status: str = STATUS_RUNNING
    diverged_step: int | None = None
    created: str = ""
    finished: str = ""
    sweep_axis: str | None = None
    sweep_value: str | None = None
    artifacts: dict[str, str] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "status": self.status,
            "diverged_step": self.diverged_step,
            "created": self.created,
            "finished": self.finished,
            "sweep_axis": self.sweep_axis,
            "sweep_value": self.sweep_value,
            "artifacts": self.artifacts,
        }

    def write(self):
        with open(self.run_dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        run_dir = Path(run_dir)
        with open(run_dir / "manifest.json", "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            run_id=raw["run_id"],
            run_dir=run_dir,
            status=raw["status"],
            diverged_step=raw.get("diverged_step"),
            created=raw.get("created", ""),
            finished=raw.get("finished", ""),
            sweep_axis=raw.get("sweep_axis"),
            sweep_value=raw.get("sweep_value"),
            artifacts=raw.get("artifacts", {}),
        )


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))  # builtin repr even for numpy scalars
    return str(value)


class MetricsWriter:
    """Append-only CSV with the fixed column set, flushed after every row so
    interrupted runs stay analyzable."""

    def __init__(self, path: Path, cfg: TrainConfig):
        self.path = Path(path)
        self._shaping_echo = {
            "shaping_method": cfg.shaping.method,
            "shaping_alpha": cfg.shaping.alpha,
            "shaping_beta": cfg.shaping.beta,
            "shaping_lambda": cfg.shaping.lam,
            "shaping_tau": cfg.shaping.tau,
            "shaping_k": cfg.shaping.k,
        }
        self._fh = open(self.path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(CSV_COLUMNS)
        self._fh.flush()

    def _write(self, row: dict):
        full = {**self._shaping_echo, **row}
        self._writer.writerow([_cell(full.get(col)) for col in CSV_COLUMNS])
        self._fh.flush()

    def write_train(self, record: trainer.StepRecord):
        row = {
            "step": record.step,
            "phase": "train",
            "mean_reward": record.mean_reward,
            "mean_length": record.mean_length,
            "accuracy": record.accuracy,
            "length_bias": record.length_bias,
            "prob_gap": record.prob_gap,
            "dropped_groups": record.dropped_groups,
        }
        row.update(record.metrics)
        self._write(row)

    def write_eval(self, step: int, result: trainer.EvalResult):
        row = {
            "step": step,
            "phase": "eval",
            "mean_reward": result.mean_reward,
            "mean_length": result.mean_length,
            "accuracy": result.accuracy,
        }
        row.update(result.report.as_dict())
        self._write(row)

    def close(self):
        self._fh.close()


def save_params(path: Path, params: PolicyParams):
    lay = params.layout
    np.savez(
        path,
        flat=params.flatten(),
        layout=np.array([lay.n_buckets, lay.n_drift, lay.n_answer, lay.bucket_size]),
    )


def load_params(path) -> PolicyParams:
    data = np.load(path)
    b, d, a, w = (int(x) for x in data["layout"])
    return PolicyParams.unflatten(ParamLayout(b, d, a, w), data["flat"])


def prepare_run_dir(cfg: TrainConfig, out_dir=None, out_root=None) -> Path:
    if out_dir is not None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path
    root = Path(out_root) if out_root is not None else default_out_root()
    root.mkdir(parents=True, exist_ok=True)
    base = run_id_for(cfg)
    path = root / base
    bump = 0
    while True:
        try:
            path.mkdir(parents=True)
            return path
        except FileExistsError:
            bump += 1
            path = root / f"{base}-{bump:02d}"


def execute_run(
    cfg: TrainConfig,
    out_dir=None,
    out_root=None,
    sweep_axis: str | None = None,
    sweep_value: str | None = None,
) -> RunManifest:
    """Resolve the config, run training with periodic evaluation, and persist
    everything. Divergence finalizes the manifest as diverged and re-raises;
    I/O failure finalizes as aborted."""
    cfg = trainer.resolve_config(cfg)
    run_dir = prepare_run_dir(cfg, out_dir=out_dir, out_root=out_root)
    manifest = RunManifest(
        run_id=run_id_for(cfg),
        run_dir=run_dir,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
        sweep_axis=sweep_axis,
        sweep_value=sweep_value,
        artifacts={
            "config": "resolved.cfg",
            "metrics": "metrics.csv",
            "params": "params.npz",
        },
    )
    with open(run_dir / "resolved.cfg", "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    manifest.write()

    writer = MetricsWriter(run_dir / "metrics.csv", cfg)
    state = trainer.init_state(cfg)
    try:
        for _ in range(cfg.steps):
            record = trainer.train_step(state)
            writer.write_train(record)
            done = state.step
            if done % cfg.eval_every == 0 or done == cfg.steps:
                result = trainer.evaluate(state.params, cfg, step=done)
                writer.write_eval(done, result)
        save_params(run_dir / "params.npz", state.params)
        manifest.status = STATUS_COMPLETED
    except DivergenceError as exc:
        manifest.status = STATUS_DIVERGED
        manifest.diverged_step = exc.step
        manifest.finished = time.strftime("%Y-%m-%dT%H:%M:%S")
        manifest.write()
        writer.close()
        raise
    except OSError:
        manifest.status = STATUS_ABORTED
        manifest.finished = time.strftime("%Y-%m-%dT%H:%M:%S")
        manifest.write()
        writer.close()
        raise
    manifest.finished = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest.write()
    writer.close()
    return manifest


def _sweep_worker(args) -> str:
    cfg_text, axis, raw_value, out_dir = args
    cfg = set_key(parse_config(cfg_text), axis, raw_value)
    try:
        manifest = execute_run(cfg, out_dir=out_dir, sweep_axis=axis, sweep_value=raw_value)
    except DivergenceError:
        return out_dir
    return str(manifest.run_dir)


def sweep(
    base_cfg: TrainConfig,
    axis: str,
    values,
    out_root=None,
    parallel: int = 1,
) -> list[RunManifest]:
    """One independent seeded run per axis value.

    Runs write to disjoint directories and may execute in separate processes;
    results are identical either way because every run is fully determined by
    its config. Diverged runs are kept (their manifests say so).
    """
    values = list(values)
    if not values:
        return []
    root = Path(out_root) if out_root is not None else default_out_root()
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base_text = dump_config(trainer.resolve_config(base_cfg))
    jobs = []
    for i, value in enumerate(values):
        raw = value if isinstance(value, str) else _cell(value)
        set_key(parse_config(base_text), axis, raw)  # fail fast on a bad axis/value
        out_dir = root / f"sweep-{stamp}-{axis.replace('.', '_')}-{i:02d}"
        jobs.append((base_text, axis, raw, str(out_dir)))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            dirs = list(pool.map(_sweep_worker, jobs))
    else:
        dirs = [_sweep_worker(job) for job in jobs]
    return [RunManifest.load(d) for d in dirs]


FRONTIER_COLUMNS = (
    "run_id",
    "status",
    "method",
    "axis",
    "value",
    "accuracy",
    "mean_length",
    *METRIC_COLUMNS,
)


def _final_eval_row(manifest: RunManifest) -> dict | None:
    path = manifest.run_dir / manifest.artifacts.get("metrics", "metrics.csv")
    last = None
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["phase"] == "eval":
                last = row
    return last


def export_frontier(manifests) -> list[dict]:
    """One row per run: final eval accuracy and mean length plus the
    dispersion columns, i.e. the table behind length-vs-score frontier plots.
    Rows are sorted by mean length; diverged runs keep empty metrics."""
    rows = []
    for manifest in manifests:
        cfg = load_config(manifest.run_dir / manifest.artifacts.get("config", "resolved.cfg"))
        row = {col: None for col in FRONTIER_COLUMNS}
        row.update(
            run_id=manifest.run_id,
            status=manifest.status,
            method=cfg.shaping.method,
            axis=manifest.sweep_axis,
            value=manifest.sweep_value,
        )
        if manifest.status == STATUS_COMPLETED:
            final = _final_eval_row(manifest)
            if final is not None:
                row["accuracy"] = float(final["accuracy"])
                row["mean_length"] = float(final["mean_length"])
                for col in METRIC_COLUMNS:
                    row[col] = float(final[col]) if final[col] != "" else None
        rows.append(row)
    rows.sort(key=lambda r: (r["mean_length"] is None, r["mean_length"]))
    return rows


def write_frontier(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FRONTIER_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row.get(col)) for col in FRONTIER_COLUMNS])


def find_manifests(pattern: str) -> list[RunManifest]:
    dirs = sorted(globlib.glob(pattern))
    out = []
    for d in dirs:
        if (Path(d) / "manifest.json").exists():
            out.append(RunManifest.load(d))
    return out
