"""End-to-end runs: truth simulation, DEKF until convergence, DMHE hand-off, moisture recovery.

Everything written to disk is a pure function of the config (seed included);
wall-clock timings go to ``timings.json`` so ``metrics.json`` stays
reproducible byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dump_config
from .dekf import (
    TABLE2_GUESSES, ConvergenceMonitor, DekfBank, DekfDivergenceError, centralized_ekf_run,
    p0_scales, pairwise_spread,
)
from .dmhe import DmheBank, initial_guesses
from .richards import InstabilityError, TruthRun, simulate_truth
from .soil import SoilDomainError, SoilParams, water_content

log = logging.getLogger(__name__)

BETA_NAMES = ("theta_s", "theta_r", "alpha", "n")
FINAL_WINDOW = 24 * 3600.0


class PipelineError(RuntimeError):
    """A numerical failure inside one module, tagged with where it happened."""

    def __init__(self, module: str, instant: int, estimator: int | None, cause: Exception):
        self.module, self.instant, self.estimator, self.cause = module, instant, estimator, cause
        who = "" if estimator is None else f", estimator {estimator}"
        super().__init__(f"{module} failed at instant {instant}{who}: {cause}")


def recover_moisture(x_hat, beta_hat, k_sat: float | None = None) -> np.ndarray:
    """Moisture profile from estimated heads and retention parameters.

    ``k_sat`` is accepted only to make explicit that it plays no part: the
    retention curve does not depend on conductivity.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    if np.any(~(x_hat < 0)):
        raise SoilDomainError("estimated heads must be negative")
    ts, tr, a, n = np.asarray(beta_hat, dtype=float)
    p = SoilParams(k_sat=1.0 if k_sat is None else k_sat, theta_s=ts, theta_r=tr, alpha=a, n=n)
    return water_content(x_hat, p)


@dataclass
class RunResult:
    config: ExperimentConfig
    truth: TruthRun
    dekf_times: np.ndarray
    dekf_betas: np.ndarray | None  # (instants, filters, 4); None when the filters did not run
    dekf_spreads: np.ndarray | None
    tau0: int | None
    dmhe_instants: np.ndarray  # DEKF instant indices where the DMHE ran
    dmhe_x: np.ndarray  # (instants, estimators, n_x)
    dmhe_k: np.ndarray  # (instants, estimators)
    moisture: np.ndarray  # (instants, n_x) recovered
    dmhe_records: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def dmhe_times(self) -> np.ndarray:
        return self.truth.times[self.dmhe_instants]

    @property
    def has_dmhe(self) -> bool:
        return self.dmhe_instants.size > 0


@dataclass
class RunMetrics:
    """Scalar and per-instant summaries of a run (all RMSEs in the units of the state)."""

    tau0: int | None = None
    tau0_hours: float | None = None
    dekf_spread_first: float | None = None
    dekf_spread_10: float | None = None
    dekf_spread_tau0: float | None = None
    dekf_rel_error_tau0: list | None = None  # (filters, 4)
    dekf_rel_error_final: list | None = None
    dekf_beta_final: list | None = None
    dmhe_start_hours: float | None = None
    head_rmse: list | None = None  # per DMHE instant, per estimator, over all nodes
    moisture_rmse: list | None = None  # per DMHE instant, over all nodes
    head_rmse_final24_per_node: list | None = None  # (estimators, n_x)
    moisture_rmse_final24_per_node: list | None = None
    terminal_spread_per_node: list | None = None
    k_sat_final: list | None = None
    k_sat_mean: float | None = None
    k_sat_rel_error: float | None = None
    dmhe_fallbacks: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _rel_error(betas, truth) -> np.ndarray:
    return np.abs(np.asarray(betas) / truth - 1.0)


def compute_metrics(res: RunResult) -> RunMetrics:
    cfg = res.config
    truth_beta = cfg.soil.beta
    m = RunMetrics()
    if res.dekf_betas is not None:
        sp = res.dekf_spreads
        tau0 = res.tau0
        m = RunMetrics(
            tau0=tau0,
            tau0_hours=None if tau0 is None else float(res.dekf_times[tau0] / 3600.0),
            dekf_spread_first=float(sp[0]),
            dekf_spread_10=float(sp[9]) if sp.size >= 10 else None,
            dekf_spread_tau0=None if tau0 is None else float(sp[tau0]),
            dekf_rel_error_tau0=None if tau0 is None else _rel_error(res.dekf_betas[tau0],
                                                                     truth_beta).tolist(),
            dekf_rel_error_final=_rel_error(res.dekf_betas[-1], truth_beta).tolist(),
            dekf_beta_final=res.dekf_betas[-1].tolist(),
        )
    if not res.has_dmhe:
        return m
    states = res.truth.states[res.dmhe_instants]
    err = res.dmhe_x - states[:, None, :]
    theta_true = water_content(states, cfg.soil, clamp=True)
    merr = res.moisture - theta_true
    times = res.dmhe_times
    final = times >= times[-1] - FINAL_WINDOW + 1e-9
    x_end = res.dmhe_x[-1]
    m.dmhe_start_hours = float(times[0] / 3600.0)
    m.head_rmse = np.sqrt(np.mean(err**2, axis=2)).tolist()
    m.moisture_rmse = np.sqrt(np.mean(merr**2, axis=1)).tolist()
    m.head_rmse_final24_per_node = np.sqrt(np.mean(err[final] ** 2, axis=0)).tolist()
    m.moisture_rmse_final24_per_node = np.sqrt(np.mean(merr[final] ** 2, axis=0)).tolist()
    m.terminal_spread_per_node = (x_end.max(axis=0) - x_end.min(axis=0)).tolist()
    m.k_sat_final = res.dmhe_k[-1].tolist()
    m.k_sat_mean = float(res.dmhe_k[-1].mean())
    m.k_sat_rel_error = float(abs(m.k_sat_mean / cfg.soil.k_sat - 1.0))
    m.dmhe_fallbacks = int(sum(r["fell_back"] for r in res.dmhe_records))
    return m


def _truth(cfg: ExperimentConfig) -> TruthRun:
    x0 = np.full(cfg.grid.n_nodes, cfg.simulation.initial_head)
    try:
        return simulate_truth(cfg.grid, cfg.soil, cfg.forcing.schedule(), cfg.duration,
                              noise=cfg.noise, seed=cfg.seed, x0=x0, period=cfg.dekf_period,
                              substep=cfg.simulation.substep, guard=cfg.simulation.guard)
    except InstabilityError as exc:
        raise PipelineError("richards-model", -1, None, exc) from exc


def _dekf_bank(cfg: ExperimentConfig) -> DekfBank:
    n_y = cfg.grid.n_sensors
    scales = p0_scales(n_y, cfg.seed) if cfg.dekf.randomize_p0 else None
    return DekfBank(cfg.dekf.initial_guesses, cfg.dekf.tuning, p0_scales=scales, seed=cfg.seed)


def _dmhe_bank(cfg: ExperimentConfig, x_start) -> DmheBank:
    if cfg.dmhe.guess_reference == "activation":
        x0 = x_start
    else:
        x0 = np.full(cfg.grid.n_nodes, cfg.simulation.initial_head)
    tun = cfg.dmhe.tuning
    xs, ks = initial_guesses(x0, cfg.soil.k_sat, cfg.dmhe.multipliers, tun.x_bounds,
                             tun.k_sat_bounds)
    return DmheBank(cfg.grid, cfg.forcing.schedule(), xs, ks, tuning=tun, period=cfg.dmhe_period,
                    guard=cfg.simulation.guard, tortuosity=cfg.soil.tortuosity)


def run_experiment(cfg: ExperimentConfig, stages: tuple[str, ...] = ("dekf", "dmhe"),
                   oracle_beta: bool = False, dmhe_start: int | None = None) -> RunResult:
    """Run the staged pipeline.

    ``stages`` selects which estimators run; with ``oracle_beta`` the DMHE
    receives the true retention parameters and starts at DEKF instant
    ``dmhe_start`` (default 0) instead of waiting for the filters.
    """
    timings = {}
    t_start = time.perf_counter()
    truth = _truth(cfg)
    timings["truth_s"] = time.perf_counter() - t_start
    n_y = cfg.grid.n_sensors
    K = truth.n_instants
    stride = cfg.dmhe_stride
    use_dekf = "dekf" in stages and not oracle_beta
    use_dmhe = "dmhe" in stages

    bank = _dekf_bank(cfg) if use_dekf else None
    monitor = ConvergenceMonitor(cfg.dekf.window, cfg.dekf.eps_consensus, cfg.dekf.eps_settle)
    betas_hist = np.empty((K, n_y, 4))
    betas = np.tile(cfg.soil.beta, (n_y, 1)) if oracle_beta else np.array(
        [b for b in cfg.dekf.initial_guesses], dtype=float)
    tau0 = None
    dmhe, first = None, None
    if use_dmhe and oracle_beta:
        first = 0 if dmhe_start is None else int(dmhe_start)
        if first % stride:
            raise ValueError("the DMHE start must fall on a DMHE instant")
    dmhe_idx, xs_out, ks_out, moist = [], [], [], []
    t_dekf = t_dmhe = 0.0

    for k in range(K):
        t0 = time.perf_counter()
        if bank is not None and not (cfg.dekf.stop_after_tau0 and dmhe is not None):
            try:
                betas = bank.sampling_instant(truth.heads[k], truth.moisture[k], k)
            except DekfDivergenceError as exc:
                raise PipelineError("dekf", k, exc.filter_index, exc) from exc
            if monitor.update(k, betas) and tau0 is None:
                tau0 = monitor.tau0
                log.info("DEKF converged at instant %d (%.1f h)", tau0, truth.times[k] / 3600)
        betas_hist[k] = betas
        t_dekf += time.perf_counter() - t0

        if use_dmhe and first is None and tau0 is not None:
            first = -(-tau0 // stride) * stride  # first DMHE instant at or after tau0
        if first is None or k < first or (k - first) % stride:
            continue
        t0 = time.perf_counter()
        if dmhe is None:
            dmhe = _dmhe_bank(cfg, truth.states[k])
        try:
            x_hat, k_hat = dmhe.sampling_instant(truth.times[k], truth.moisture[k], betas)
        except (InstabilityError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            est = dmhe.records[-1]["estimator"] if dmhe.records else None
            raise PipelineError("dmhe", k, est, exc) from exc
        i = cfg.moisture_index
        dmhe_idx.append(k)
        xs_out.append(x_hat)
        ks_out.append(k_hat)
        moist.append(recover_moisture(x_hat[i], betas[i]))
        t_dmhe += time.perf_counter() - t0

    timings.update(dekf_s=t_dekf, dmhe_s=t_dmhe, total_s=time.perf_counter() - t_start)
    n_x = cfg.grid.n_nodes
    if bank is None:
        betas_hist = None
    return RunResult(
        config=cfg, truth=truth, dekf_times=truth.times, dekf_betas=betas_hist,
        dekf_spreads=None if bank is None else np.array([pairwise_spread(b) for b in betas_hist]),
        tau0=tau0,
        dmhe_instants=np.array(dmhe_idx, dtype=int),
        dmhe_x=np.array(xs_out).reshape(-1, n_y, n_x), dmhe_k=np.array(ks_out).reshape(-1, n_y),
        moisture=np.array(moist).reshape(-1, n_x),
        dmhe_records=[] if dmhe is None else dmhe.records, timings=timings)


@dataclass
class BaselineResult:
    guess_index: int
    times: np.ndarray
    trajectory: np.ndarray  # (instants, 4)
    final_rel_error: np.ndarray
    final50_rel_error: np.ndarray  # mean over the last 50 h

    @property
    def within_band(self) -> bool:
        return bool(np.all(self.final_rel_error <= 0.10))


def run_baseline_centralized_ekf(cfg: ExperimentConfig, guess_index: int,
                                 truth: TruthRun | None = None) -> BaselineResult:
    """One centralized EKF over all sensors, started from Table 2 row ``guess_index`` (1-based)."""
    if not 1 <= guess_index <= len(TABLE2_GUESSES):
        raise ValueError(f"guess index must lie in 1..{len(TABLE2_GUESSES)}")
    truth = _truth(cfg) if truth is None else truth
    try:
        traj = centralized_ekf_run(TABLE2_GUESSES[guess_index - 1], truth.heads, truth.moisture,
                                   cfg.dekf.tuning, seed=cfg.seed)
    except DekfDivergenceError as exc:
        raise PipelineError("baseline-ekf", exc.k, None, exc) from exc
    rel = _rel_error(traj, cfg.soil.beta)
    last = truth.times >= truth.times[-1] - 50 * 3600.0 + 1e-9
    return BaselineResult(guess_index, truth.times, traj, rel[-1], rel[last].mean(axis=0))


# ---------------------------------------------------------------- export


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> Path:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def export(res: RunResult, out, metrics: RunMetrics | None = None,
           formats: tuple[str, ...] = ("csv", "json", "txt")) -> dict[str, Path]:
    """Write the run's streams, metrics and summary under ``out``.

    Files: ``truth.csv``, ``measurements.csv``, ``dekf.csv``, ``dmhe.csv`` and
    ``moisture.csv`` (the last two only when the DMHE ran), ``metrics.json``,
    ``timings.json``, ``config.json`` and ``summary.txt``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = compute_metrics(res) if metrics is None else metrics
    cfg, truth = res.config, res.truth
    files = {}
    if "csv" in formats:
        files["truth"] = truth.to_csv(out / "truth.csv")
        files["measurements"] = _write_csv(
            out / "measurements.csv", ["time_s", "k", "node", "y_moist", "y_head"],
            ([_fmt(t), k, node, _fmt(truth.moisture[k, j]), _fmt(truth.heads[k, j])]
             for k, t in enumerate(truth.times) for j, node in enumerate(cfg.grid.sensor_nodes)))
        (out / "dekf.csv").unlink(missing_ok=True)
        if res.dekf_betas is not None:
            files["dekf"] = _write_csv(
                out / "dekf.csv", ["time_s", "k", "filter", *BETA_NAMES, "spread"],
                ([_fmt(t), k, i + 1, *map(_fmt, res.dekf_betas[k, i]), _fmt(res.dekf_spreads[k])]
                 for k, t in enumerate(res.dekf_times) for i in range(res.dekf_betas.shape[1])))
        for name in ("dmhe.csv", "moisture.csv"):
            (out / name).unlink(missing_ok=True)
        if res.has_dmhe:
            n_x = cfg.grid.n_nodes
            files["dmhe"] = _write_csv(
                out / "dmhe.csv",
                ["time_s", "k", "estimator", "k_sat", *(f"h_{j + 1}" for j in range(n_x))],
                ([_fmt(res.truth.times[k]), k, i + 1, _fmt(res.dmhe_k[d, i]),
                  *map(_fmt, res.dmhe_x[d, i])]
                 for d, k in enumerate(res.dmhe_instants) for i in range(res.dmhe_x.shape[1])))
            files["moisture"] = _write_csv(
                out / "moisture.csv", ["time_s", *(f"theta_{j + 1}" for j in range(n_x))],
                ([_fmt(t), *map(_fmt, row)] for t, row in zip(res.dmhe_times, res.moisture)))
    if "json" in formats:
        files["metrics"] = write_json(out / "metrics.json", metrics.to_dict())
        files["timings"] = write_json(out / "timings.json", res.timings)
        files["config"] = dump_config(cfg, out / "config.json")
    if "txt" in formats:
        files["summary"] = out / "summary.txt"
        files["summary"].write_text(summary_text(metrics, cfg))
    return files


def summary_text(m: RunMetrics, cfg: ExperimentConfig) -> str:
    lines = [f"seed {cfg.seed}, duration {cfg.duration / 3600:.1f} h, "
             f"{cfg.grid.n_nodes} nodes, sensors at {list(cfg.grid.sensor_nodes)}"]
    if m.dekf_beta_final is None:
        lines.append("DEKF: not run")
    elif m.tau0 is None:
        lines.append("DEKF: no convergence within the run")
    else:
        lines.append(f"DEKF: converged at instant {m.tau0} ({m.tau0_hours:.2f} h), "
                     f"spread {m.dekf_spread_tau0:.2e}")
        worst = np.max(m.dekf_rel_error_tau0, axis=0)
        lines.append("  worst relative error at tau0: " + ", ".join(
            f"{n} {e:.3f}" for n, e in zip(BETA_NAMES, worst)))
    if m.dekf_rel_error_final is not None:
        worst = np.max(m.dekf_rel_error_final, axis=0)
        lines.append("  worst relative error at end: " + ", ".join(
            f"{n} {e:.3f}" for n, e in zip(BETA_NAMES, worst)))
    if m.head_rmse is None:
        lines.append("DMHE: not active (no DMHE files written)")
    else:
        lines.append(f"DMHE: active from {m.dmhe_start_hours:.2f} h, "
                     f"{len(m.head_rmse)} instants, {m.dmhe_fallbacks} fallbacks")
        lines.append(f"  final-24h head RMSE, worst node: "
                     f"{np.max(m.head_rmse_final24_per_node):.4f} m")
        lines.append(f"  terminal pairwise spread, worst node: "
                     f"{np.max(m.terminal_spread_per_node):.2e} m")
        lines.append(f"  mean K_sat {m.k_sat_mean:.4e} m/s (relative error {m.k_sat_rel_error:.3f})")
        lines.append(f"  final-24h moisture RMSE, worst node: "
                     f"{np.max(m.moisture_rmse_final24_per_node):.4f}")
    return "\n".join(lines) + "\n"


def export_baseline(results: list[BaselineResult], out) -> dict[str, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for r in results:
        files[f"baseline_{r.guess_index}"] = _write_csv(
            out / f"baseline_ekf_guess{r.guess_index}.csv", ["time_s", "k", *BETA_NAMES],
            ([_fmt(t), k, *map(_fmt, b)] for k, (t, b) in enumerate(zip(r.times, r.trajectory))))
    files["comparison"] = _write_csv(
        out / "baseline_comparison.csv",
        ["guess", *(f"final_err_{n}" for n in BETA_NAMES), *(f"final50h_err_{n}" for n in BETA_NAMES),
         "within_10pct"],
        ([r.guess_index, *map(_fmt, r.final_rel_error), *map(_fmt, r.final50_rel_error),
          int(r.within_band)] for r in results))
    return files
