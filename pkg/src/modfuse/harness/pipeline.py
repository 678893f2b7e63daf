"""End-to-end pipelines: record generation, training-set loading,
Monte Carlo evaluation of both fusion methods, and dump files for plots.

Every record and evaluation run derives its RNG stream from (seed, index,
stream tag), so outputs are identical regardless of worker count and
reruns are byte-identical.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass

import numpy as np

from .. import bayesfusion, dataprep, metrics
from ..outputs import FusionOutput, extract_estimates
from ..tpmb import PoissonIntensity
from ..simworld import ScenarioRun, simulate_scenario
from ..tpmb import TrajectoryPmb, estimate, make_sensor_model, run_filter
from .config import DESK_TUNE_RUNS, GROUP_SIZE, TaskSpec
from .dataset import DatasetRecord

_GEN_TAG = 101
_EVAL_TAG = 202
_TUNE_TAG = 303


def _rng_for(seed: int, index: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index, tag)))


def run_scenario_and_filters(task: TaskSpec, rng: np.random.Generator
                             ) -> tuple[ScenarioRun, list[TrajectoryPmb]]:
    run = simulate_scenario(task.cfg, rng)
    pmbs = []
    for s in range(1, task.cfg.num_sensors + 1):
        model = make_sensor_model(task.cfg, s, run.sensor_poses[s - 1])
        pmbs.append(run_filter(run.measurements[s - 1], model,
                               task.filter_settings, sensor_index=s))
    return run, pmbs


def build_record(task: TaskSpec, seed: int, index: int) -> DatasetRecord:
    """Simulate, filter and vectorize one dataset record."""
    rng = _rng_for(seed, index, _GEN_TAG)
    run, pmbs = run_scenario_and_filters(task, rng)
    seq = dataprep.build_sequence(
        pmbs, sensor_poses=run.sensor_poses, p_ber=task.p_ber,
        mobile=task.mobile,
        orientations=[s.orientation for s in task.cfg.sensors])
    bounds = task.bounds_for(run.sensor_poses)
    if seq.vectors:
        values = seq.as_matrix()
        times, steps, sensors = seq.index_arrays()
    else:
        values = np.zeros((0, task.input_dim))
        times = steps = sensors = np.zeros(0, dtype=np.int64)
    return DatasetRecord(
        scenario=task.scenario, task=task.task, seed=seed, index=index,
        mobile=task.mobile, bounds=bounds.as_array(), values=values,
        times=times, steps=steps, sensors=sensors,
        truth=run.truth_at(task.cfg.horizon),
    )


_WORKER_TASK: TaskSpec | None = None
_WORKER_SEED = 0


def _worker_init(task: TaskSpec, seed: int):
    global _WORKER_TASK, _WORKER_SEED
    _WORKER_TASK = task
    _WORKER_SEED = seed


def _worker_build(index: int) -> DatasetRecord:
    return build_record(_WORKER_TASK, _WORKER_SEED, index)


def generate_records(task: TaskSpec, seed: int, start: int, stop: int,
                     workers: int = 1):
    """Yield records for indices [start, stop) in order."""
    if workers <= 1:
        for index in range(start, stop):
            yield build_record(task, seed, index)
        return
    with multiprocessing.Pool(workers, initializer=_worker_init,
                              initargs=(task, seed)) as pool:
        yield from pool.imap(_worker_build, range(start, stop), chunksize=8)


def record_to_train(record: DatasetRecord):
    """Normalize one dataset record into a training sample."""
    from ..fusenet.training import TrainRecord

    bounds = dataprep.NormalizationBounds.from_array(record.bounds)
    seq = dataprep.InputSequence([
        dataprep.InputVector(record.values[i], int(record.times[i]),
                             int(record.steps[i]), int(record.sensors[i]))
        for i in range(len(record.times))
    ])
    normed = dataprep.normalize(seq, bounds)
    values = normed.as_matrix() if normed.vectors else \
        np.zeros((0, record.input_dim))
    truth = np.array([bounds.normalize_state(x) for x in record.truth]) \
        if len(record.truth) else np.zeros((0, 4))
    return TrainRecord(values=values, times=record.times.copy(),
                       steps=record.steps.copy(),
                       sensors=record.sensors.copy(), truth=truth)


@dataclass
class MethodResult:
    gospa: metrics.MetricReport
    nll: metrics.MetricReport


@dataclass
class RunResult:
    run: int
    bayesian: MethodResult | None
    transformer: MethodResult | None


METRIC_ROWS = ["gospa_total", "gospa_loc", "gospa_miss", "gospa_false",
               "nll_total", "nll_loc", "nll_miss", "nll_false"]


def _method_row(result: MethodResult) -> list[float]:
    return [result.gospa.total, result.gospa.localization,
            result.gospa.missed, result.gospa.false,
            result.nll.total, result.nll.localization,
            result.nll.missed, result.nll.false]


def bayesian_fusion_for_run(task: TaskSpec, run: ScenarioRun,
                            pmbs: list[TrajectoryPmb]
                            ) -> tuple[FusionOutput, object]:
    T = task.cfg.horizon
    locals_ = [
        bayesfusion.marginalize_to_current(
            pmb, T, task.cfg.sensors[pmb.sensor_index - 1],
            run.sensor_poses[pmb.sensor_index - 1][T - 1])
        for pmb in pmbs
    ]
    return bayesfusion.fuse(locals_)


def transformer_fusion_for_run(task: TaskSpec, run: ScenarioRun,
                               pmbs: list[TrajectoryPmb], model,
                               capture_attention: bool = False):
    from ..fusenet import infer

    seq = dataprep.build_sequence(
        pmbs, sensor_poses=run.sensor_poses, p_ber=task.p_ber,
        mobile=task.mobile,
        orientations=[s.orientation for s in task.cfg.sensors])
    bounds = task.bounds_for(run.sensor_poses)
    if not seq.vectors:
        return FusionOutput([]), None, bounds
    normed = dataprep.normalize(seq, bounds)
    values = normed.as_matrix()
    times, steps, sensors = normed.index_arrays()
    output, attention = infer(model, values, times, steps, sensors, bounds,
                              capture_attention)
    return output, attention, bounds


def _collect_tuning_batch(task: TaskSpec, seed: int, runs: int, model,
                          methods: tuple[str, ...]):
    batches = {m: ([], []) for m in methods}
    for run_idx in range(runs):
        rng = _rng_for(seed, run_idx, _TUNE_TAG)
        run, pmbs = run_scenario_and_filters(task, rng)
        truth = run.truth_at(task.cfg.horizon)
        if "bayesian" in methods:
            output, ppp = bayesian_fusion_for_run(task, run, pmbs)
            batches["bayesian"][0].append((output, ppp))
            batches["bayesian"][1].append(truth)
        if "transformer" in methods:
            output, _, _ = transformer_fusion_for_run(task, run, pmbs, model)
            batches["transformer"][0].append((output,
                                              PoissonIntensity.empty()))
            batches["transformer"][1].append(truth)
    return batches


def tune_floors(task: TaskSpec, seed: int, model,
                methods: tuple[str, ...],
                tune_runs: int = DESK_TUNE_RUNS) -> dict[str, float]:
    """Tune the uniform PPP floor per method on a validation batch.

    The floor volume uses the initial-pose FoV box also for mobile
    scenarios; the tuning absorbs the scale.
    """
    volume = task.region_volume(task.static_bounds())
    batches = _collect_tuning_batch(task, seed, tune_runs, model, methods)
    floors = {}
    for method in methods:
        outputs, truths = batches[method]
        cfg = metrics.NllConfig(region_volume=volume)
        floors[method] = metrics.tune_ppp(outputs, truths, cfg)
    return floors


def evaluate(task: TaskSpec, seed: int, runs: int, model=None,
             methods: tuple[str, ...] = ("bayesian", "transformer"),
             tune_runs: int = DESK_TUNE_RUNS,
             progress=None) -> tuple[list[RunResult], dict[str, float]]:
    """Monte Carlo evaluation; both methods see the same simulated runs."""
    if "transformer" in methods and model is None:
        raise ValueError("transformer evaluation requires a checkpoint")
    gospa_cfg = metrics.GospaConfig()
    floors = tune_floors(task, seed, model, methods, tune_runs)
    volume = task.region_volume(task.static_bounds())
    results = []
    for run_idx in range(runs):
        rng = _rng_for(seed, run_idx, _EVAL_TAG)
        run, pmbs = run_scenario_and_filters(task, rng)
        truth = run.truth_at(task.cfg.horizon)
        per_method = {}
        if "bayesian" in methods:
            output, ppp = bayesian_fusion_for_run(task, run, pmbs)
            ests = extract_estimates(output, task.bayesian_threshold)
            est_states = np.array([e.mean for e in ests]) if ests else \
                np.zeros((0, 4))
            g = metrics.gospa(est_states, truth, gospa_cfg)
            n = metrics.nll(output, ppp, truth, metrics.NllConfig(
                ppp_floor=floors["bayesian"], region_volume=volume))
            per_method["bayesian"] = MethodResult(g, n)
        if "transformer" in methods:
            output, _, _ = transformer_fusion_for_run(task, run, pmbs, model)
            ests = extract_estimates(output, task.transformer_threshold)
            est_states = np.array([e.mean for e in ests]) if ests else \
                np.zeros((0, 4))
            g = metrics.gospa(est_states, truth, gospa_cfg)
            n = metrics.nll(output, PoissonIntensity.empty(), truth,
                            metrics.NllConfig(
                                ppp_floor=floors["transformer"],
                                region_volume=volume))
            per_method["transformer"] = MethodResult(g, n)
        results.append(RunResult(run_idx, per_method.get("bayesian"),
                                 per_method.get("transformer")))
        if progress is not None:
            progress(run_idx + 1, runs)
    return results, floors


def mean_table(results: list[RunResult]) -> dict[str, list[float]]:
    """Mean of each metric row per method, in Table-2 layout order."""
    table: dict[str, list[float]] = {}
    for method in ("bayesian", "transformer"):
        rows = [_method_row(getattr(r, method)) for r in results
                if getattr(r, method) is not None]
        if rows:
            table[method] = list(np.mean(np.array(rows), axis=0))
    return table
