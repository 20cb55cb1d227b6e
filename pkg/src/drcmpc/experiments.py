"""Dataset extraction, training-subset selection, Monte Carlo campaigns and MMD tables."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .drcvar import AmbiguityConfig
from .dynamics import AgentState
from .planner import CMPC, DRCMPC, MODES, NMPC, MpcConfig, Planner
from .predict import ContextualPredictor, build_context
from .rkhs import (DEFAULT_LAMBDA, CkmeModel, KernelConfig, bootstrap_radius, ckme_fit,
                   cross_gram, empirical_mmd, median_heuristic)
from .sim import (BEHAVIORS, SCENARIOS, BehaviorPolicy,
                  ScenarioConfig, TrajectoryLog, ego_mpc_config, generate_training_runs,
                  perturb_obstacles, run_closed_loop)


# --- datasets ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LookaheadDataset:
    """Context/label pairs for one lookahead ``i``.

    ``contexts`` has shape ``(n, 2(i+1))`` and ``labels`` (observed obstacle
    positions ``i`` steps after the base index) shape ``(n, 2)``. ``sources``
    records ``(log index, base index)`` per pair.
    """

    lookahead: int
    contexts: np.ndarray
    labels: np.ndarray
    sources: tuple = ()

    def __post_init__(self):
        n = self.contexts.shape[0]
        if n < 1:
            raise ValueError("a dataset needs at least one pair")
        if self.contexts.shape[1] != 2 * (self.lookahead + 1):
            raise ValueError(f"contexts have dim {self.contexts.shape[1]}, "
                             f"expected {2 * (self.lookahead + 1)}")
        if self.labels.shape != (n, 2):
            raise ValueError(f"labels have shape {self.labels.shape}, expected ({n}, 2)")

    @property
    def n_pairs(self) -> int:
        return self.contexts.shape[0]

    def subset(self, indices) -> "LookaheadDataset":
        idx = np.asarray(indices, dtype=int)
        src = tuple(self.sources[k] for k in idx) if self.sources else ()
        return LookaheadDataset(self.lookahead, self.contexts[idx].copy(), self.labels[idx].copy(), src)


def extract_datasets(logs: Sequence[TrajectoryLog], N: int, obstacle: int = 0) -> list[LookaheadDataset]:
    """Sliding-window datasets ``D_1..D_N`` for one obstacle.

    Every base index ``k`` with ``k + i`` inside the log yields the context
    built from ego positions ``p(k..k+i-1)`` and ``p_obs(k)``, labelled with
    ``p_obs(k+i)``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if not logs:
        raise ValueError("no logs given")
    out = []
    for i in range(1, N + 1):
        ctx, lab, src = [], [], []
        for li, log in enumerate(logs):
            if log.n_rows < N + 1:
                raise ValueError(f"log {li} has {log.n_rows} rows, lookahead {N} needs at least {N + 1}")
            P = log.ego[:, :2]
            O = log.obstacles[:, obstacle, :2]
            for k in range(log.n_rows - i):
                ctx.append(build_context(P[k:k + i], O[k], i))
                lab.append(O[k + i])
                src.append((li, k))
        out.append(LookaheadDataset(i, np.array(ctx), np.array(lab), tuple(src)))
    return out


def extract_all(logs: Sequence[TrajectoryLog], N: int) -> list[list[LookaheadDataset]]:
    """:func:`extract_datasets` for every obstacle of the logs."""
    return [extract_datasets(logs, N, obstacle=j) for j in range(logs[0].n_obstacles)]


# --- training subset selection ----------------------------------------------

def dataset_kernels(data: LookaheadDataset) -> tuple[KernelConfig, KernelConfig]:
    """Median-heuristic input and output kernels over the whole dataset (1.0 if degenerate)."""
    return _kernel_or_unit(data.contexts), _kernel_or_unit(data.labels)


def _kernel_or_unit(points) -> KernelConfig:
    try:
        return KernelConfig(median_heuristic(points))
    except ValueError:
        return KernelConfig(1.0)


class _HeldOutScorer:
    """Held-out MSE of CKME fits on index subsets, sharing one full Gram matrix."""

    def __init__(self, data: LookaheadDataset, input_kernel: KernelConfig, lam: float):
        self.K = cross_gram(data.contexts, data.contexts, input_kernel)
        self.Y = data.labels
        self.lam = lam
        self.n = data.n_pairs

    def mse(self, selected: Sequence[int]) -> float:
        sel = np.asarray(selected, dtype=int)
        rest = np.setdiff1d(np.arange(self.n), sel)
        if rest.size == 0:
            return 0.0
        m = sel.size
        A = self.K[np.ix_(sel, sel)] + m * self.lam * np.eye(m)
        beta = np.linalg.solve(A, self.K[np.ix_(sel, rest)])
        err = beta.T @ self.Y[sel] - self.Y[rest]
        return float(np.mean(np.sum(err * err, axis=1)))


def select_training_subset(full: LookaheadDataset, n_samples: int, metric: str = "mse",
                           exact: bool = False, lam: float = DEFAULT_LAMBDA,
                           input_kernel: KernelConfig | None = None) -> LookaheadDataset:
    """Pick ``n_samples`` pairs whose CKME fit best predicts the remaining pairs.

    Greedy forward selection: each round adds the candidate minimizing the
    mean squared position error over ``full`` minus the selected pairs. Ties go
    to the lowest index, so the result is deterministic. Repeated contexts are
    skipped while distinct ones remain. ``exact=True``
    searches all subsets instead and is limited to 12 pairs.
    """
    if metric != "mse":
        raise ValueError(f"unknown selection metric {metric!r}")
    n = full.n_pairs
    if not 1 <= n_samples <= n:
        raise ValueError(f"cannot select {n_samples} pairs from a dataset of {n}")
    if n_samples == n:
        return full.subset(np.arange(n))
    kin = input_kernel or dataset_kernels(full)[0]
    scorer = _HeldOutScorer(full, kin, lam)
    if exact:
        if n > 12:
            raise ValueError(f"exact subset search is limited to 12 pairs, got {n}")
        best = min(itertools.combinations(range(n), n_samples), key=scorer.mse)
        return full.subset(best)
    # a repeated context adds no information, so copies are only taken once
    # every distinct context is already selected
    _, first = np.unique(full.contexts, axis=0, return_inverse=True)
    first = first.ravel()
    selected: list[int] = []
    for _ in range(n_samples):
        taken = {first[i] for i in selected}
        pool = [c for c in range(n) if c not in selected and first[c] not in taken]
        pool = pool or [c for c in range(n) if c not in selected]
        selected.append(min((scorer.mse(selected + [c]), c) for c in pool)[1])
    return full.subset(sorted(selected))


def held_out_mse(full: LookaheadDataset, indices, lam: float = DEFAULT_LAMBDA,
                 input_kernel: KernelConfig | None = None) -> float:
    kin = input_kernel or dataset_kernels(full)[0]
    return _HeldOutScorer(full, kin, lam).mse(list(indices))


def fit_lookahead_models(datasets: Sequence[LookaheadDataset], n_samples: int = 8,
                         lam: float = DEFAULT_LAMBDA, select: bool = True) -> list[CkmeModel]:
    """One CKME model per lookahead, trained on a selected subset of each dataset.

    Kernel length scales come from the median heuristic over the full dataset
    so that the selection and the final fit use the same kernels.
    """
    models = []
    for data in datasets:
        kin, kout = dataset_kernels(data)
        chosen = (select_training_subset(data, n_samples, lam=lam, input_kernel=kin)
                  if select else data)
        models.append(ckme_fit(chosen.contexts, chosen.labels, data.lookahead, lam=lam,
                               input_kernel=kin, output_kernel=kout))
    return models


def bootstrap_epsilon(models: Sequence[CkmeModel], n_resamples: int = 1000, delta: float = 0.05,
                      seed: int = 0) -> float:
    """Largest bootstrap MMD radius over the training outputs of ``models``."""
    eps = 0.0
    for m in models:
        eps = max(eps, bootstrap_radius(m.outputs, m.output_kernel, n_resamples=n_resamples,
                                        delta=delta, rng=np.random.default_rng([seed, m.lookahead])))
    return eps


# --- MMD between behaviors -------------------------------------------------

def trajectory_features(log: TrajectoryLog, obstacle: int = 0, n_points: int = 50) -> np.ndarray:
    """Obstacle path resampled at ``n_points`` equally spaced times, flattened to ``2 * n_points``."""
    P = log.obstacle_positions(obstacle)
    t = log.times
    if P.shape[0] < 2:
        return np.tile(P[0], n_points)
    grid = np.linspace(t[0], t[-1], n_points)
    return np.column_stack([np.interp(grid, t, P[:, 0]), np.interp(grid, t, P[:, 1])]).ravel()


@dataclass
class MmdTable:
    behaviors: list
    matrix: np.ndarray
    split_half: dict
    length_scale: float

    def to_dict(self) -> dict:
        return {"behaviors": list(self.behaviors), "matrix": self.matrix.tolist(),
                "split_half": dict(self.split_half), "length_scale": self.length_scale}


def mmd_behavior_table(logs_by_behavior: Mapping[str, Sequence[TrajectoryLog]], obstacle: int = 0,
                       n_points: int = 50, length_scale: float | None = None) -> MmdTable:
    """Pairwise MMD between behavior groups plus split-half MMD within each group.

    The length scale defaults to the median heuristic over all pooled feature
    vectors. The diagonal compares each group with itself and is zero.
    """
    names = list(logs_by_behavior)
    feats = {}
    for name in names:
        logs = logs_by_behavior[name]
        if len(logs) < 2:
            raise ValueError(f"behavior {name!r} needs at least 2 runs, got {len(logs)}")
        feats[name] = np.array([trajectory_features(l, obstacle, n_points) for l in logs])
    if length_scale is None:
        length_scale = _kernel_or_unit(np.vstack(list(feats.values()))).length_scale
    cfg = KernelConfig(length_scale)
    M = np.zeros((len(names), len(names)))
    for a, b in itertools.combinations(range(len(names)), 2):
        M[a, b] = M[b, a] = empirical_mmd(feats[names[a]], feats[names[b]], cfg)
    split = {}
    for name in names:
        F = feats[name]
        h = F.shape[0] // 2
        split[name] = empirical_mmd(F[:h], F[h:], cfg)
    return MmdTable(names, M, split, float(length_scale))


# --- configuration -----------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Campaign settings, stored as JSON with sections scenario/planner/ambiguity/campaign.

    ``epsilons`` may contain the string ``"bootstrap"``, replaced by
    :func:`bootstrap_epsilon` of the fitted models.
    """

    scenario: int = 1
    scenario_overrides: dict = field(default_factory=dict)
    velocity_weight: float = 0.1
    slack_weight: float = 1e4
    epsilons: list = field(default_factory=lambda: [0.0, 0.1, 0.5, 1.0])
    alpha: float = 0.1
    bootstrap_resamples: int = 1000
    bootstrap_delta: float = 0.05
    modes: list = field(default_factory=lambda: list(MODES))
    behaviors: list = field(default_factory=lambda: list(BEHAVIORS))
    runs: int = 25
    seed: int = 0
    x_var: float = 1.0
    v_var: float = 0.25
    training_runs: int = 20
    training_seed: int = 1
    n_samples: int = 8
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("run count must be >= 1")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario}")
        for e in self.epsilons:
            if e != "bootstrap" and not float(e) >= 0:
                raise ValueError(f"epsilon values must be nonnegative, got {e}")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown planner mode {m!r}")
        for b in self.behaviors:
            if b not in BEHAVIORS:
                raise ValueError(f"unknown behavior {b!r}")

    _SECTIONS = {
        "scenario": ("scenario", "scenario_overrides", "x_var", "v_var"),
        "planner": ("velocity_weight", "slack_weight"),
        "ambiguity": ("epsilons", "alpha", "bootstrap_resamples", "bootstrap_delta",
                      "n_samples", "training_runs", "training_seed"),
        "campaign": ("modes", "behaviors", "runs", "seed", "workers", "out"),
    }

    def to_dict(self) -> dict:
        flat = asdict(self)
        return {sec: {k: flat[k] for k in keys} for sec, keys in self._SECTIONS.items()}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExperimentConfig":
        flat = {}
        for sec, body in doc.items():
            if sec not in cls._SECTIONS:
                raise ValueError(f"unknown config section {sec!r}")
            for k, v in body.items():
                if k not in cls._SECTIONS[sec]:
                    raise ValueError(f"unknown key {k!r} in section {sec!r}")
                flat[k] = v
        return cls(**flat)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def scenario_config(self) -> ScenarioConfig:
        overrides = dict(self.scenario_overrides)
        if "ego_v0" in overrides:
            v0 = float(overrides.pop("ego_v0"))
            overrides["ego_init"] = AgentState(0.0, 0.5, 0.0, v0)
        return SCENARIOS[self.scenario](**overrides)

    def planner_config(self, scenario: ScenarioConfig, mode: str, epsilon: float = 0.0) -> MpcConfig:
        return ego_mpc_config(scenario, Q_terminal=np.diag([0.0, 0.0, 0.1, self.velocity_weight]),
                              slack_weight=self.slack_weight, mode=mode,
                              ambiguity=AmbiguityConfig(epsilon=float(epsilon), alpha=self.alpha))


# --- models for the contextual planners --------------------------------------

def train_models(cfg: ExperimentConfig, scenario: ScenarioConfig | None = None) -> list[list[CkmeModel]]:
    """Generate training runs and fit per-lookahead models for every obstacle."""
    scenario = scenario or cfg.scenario_config()
    logs = generate_training_runs(scenario, cfg.training_runs, cfg.training_seed,
                                  x_var=cfg.x_var, v_var=cfg.v_var)
    return [fit_lookahead_models(ds, cfg.n_samples) for ds in extract_all(logs, scenario.N)]


def resolve_epsilons(cfg: ExperimentConfig, models: Sequence[Sequence[CkmeModel]] | None) -> list[float]:
    out = []
    for e in cfg.epsilons:
        if e == "bootstrap":
            if not models:
                raise ValueError("a bootstrap epsilon needs fitted models")
            out.append(max(bootstrap_epsilon(m, cfg.bootstrap_resamples, cfg.bootstrap_delta, cfg.seed)
                           for m in models))
        else:
            out.append(float(e))
    return out


# --- campaigns ---------------------------------------------------------------

@dataclass
class RunRecord:
    mode: str
    behavior: str
    epsilon: float
    run: int
    min_distance: float
    collided: bool
    max_slack: float
    n_steps: int
    solve_ms: list = field(default_factory=list)


CSV_FIELDS = ("mode", "behavior", "epsilon", "run", "min_distance", "collided", "max_slack", "n_steps")


@dataclass
class CampaignResult:
    records: list
    d_safe: float
    epsilons: list = field(default_factory=list)

    def cell(self, mode: str, behavior: str, epsilon: float | None = None) -> list:
        return [r for r in self.records if r.mode == mode and r.behavior == behavior
                and (epsilon is None or r.epsilon == epsilon)]

    def min_distances(self, mode: str, behavior: str, epsilon: float | None = None) -> np.ndarray:
        return np.array([r.min_distance for r in self.cell(mode, behavior, epsilon)])

    def collision_rate(self, mode: str, behavior: str, epsilon: float | None = None) -> float:
        cell = self.cell(mode, behavior, epsilon)
        return float(np.mean([r.collided for r in cell])) if cell else math.nan

    def cells(self) -> list:
        seen = []
        for r in self.records:
            key = (r.mode, r.behavior, r.epsilon)
            if key not in seen:
                seen.append(key)
        return seen

    def to_csv(self, path=None) -> str:
        """Per-run rows without wall-clock columns, so fixed seeds give identical bytes."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            w.writerow([r.mode, r.behavior, format(r.epsilon, ".17g"), r.run,
                        format(r.min_distance, ".17g"), int(r.collided),
                        format(r.max_slack, ".17g"), r.n_steps])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self) -> dict:
        """Quartiles of the minimum distance, collision rate and solve times per cell."""
        cells = []
        for mode, behavior, eps in self.cells():
            cell = self.cell(mode, behavior, eps)
            d = np.array([r.min_distance for r in cell])
            times = np.concatenate([np.asarray(r.solve_ms, dtype=float) for r in cell] or [np.zeros(0)])
            q = np.quantile(d, [0.0, 0.25, 0.5, 0.75, 1.0])
            cells.append({
                "mode": mode, "behavior": behavior, "epsilon": eps, "runs": len(cell),
                "min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4],
                "collision_rate": float(np.mean([r.collided for r in cell])),
                "solve_ms_mean": float(times.mean()) if times.size else None,
                "solve_ms_max": float(times.max()) if times.size else None,
            })
        return {"d_safe": self.d_safe, "epsilons": list(self.epsilons), "cells": cells}


@dataclass(frozen=True)
class _Job:
    mode: str
    behavior: str
    epsilon: float
    run: int


def _run_job(cfg: ExperimentConfig, scenario: ScenarioConfig, models, job: _Job) -> RunRecord:
    rng = np.random.default_rng([cfg.seed, job.run])
    obstacles = perturb_obstacles(scenario, rng, cfg.x_var, cfg.v_var)
    mpc = cfg.planner_config(scenario, job.mode, job.epsilon)
    contextual = None if job.mode == NMPC else [ContextualPredictor(m) for m in models]
    behaviors = [BehaviorPolicy(job.behavior, target=t) for t in scenario.obstacle_targets]
    try:
        log = run_closed_loop(scenario, Planner(mpc, contextual), behaviors, obstacles_init=obstacles)
    except Exception as exc:
        raise RuntimeError(f"run failed (mode={job.mode}, behavior={job.behavior}, "
                           f"epsilon={job.epsilon}, run={job.run}): {exc}") from exc
    return RunRecord(mode=job.mode, behavior=job.behavior, epsilon=job.epsilon, run=job.run,
                     min_distance=log.min_distance, collided=log.collided(scenario.d_safe),
                     max_slack=float(np.max(log.slack)), n_steps=log.n_rows - 1,
                     solve_ms=[float(t) for t in log.solve_ms[:-1]])


def _run_job_star(args):
    return _run_job(*args)


def campaign_jobs(cfg: ExperimentConfig, epsilons: Sequence[float]) -> list[_Job]:
    jobs = []
    for mode in cfg.modes:
        eps_list = list(epsilons) if mode == DRCMPC else [0.0]
        for behavior in cfg.behaviors:
            for eps in eps_list:
                jobs += [_Job(mode, behavior, float(eps), r) for r in range(cfg.runs)]
    return jobs


def run_campaign(cfg: ExperimentConfig, models: Sequence[Sequence[CkmeModel]] | None = None,
                 progress=None) -> CampaignResult:
    """Seeded closed loops for every (mode, behavior, epsilon) cell of ``cfg``.

    Run ``r`` draws its obstacle perturbation from the stream seeded with
    ``(cfg.seed, r)``, so every cell sees the same initial states. Models are
    trained from ``cfg`` if CMPC or DRCMPC is requested and none are given.
    """
    scenario = cfg.scenario_config()
    needs_models = any(m in (CMPC, DRCMPC) for m in cfg.modes)
    if needs_models and models is None:
        models = train_models(cfg, scenario)
    epsilons = resolve_epsilons(cfg, models) if DRCMPC in cfg.modes else []
    jobs = campaign_jobs(cfg, epsilons)
    args = [(cfg, scenario, models, job) for job in jobs]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_run_job_star, args))
    else:
        records = []
        for a in args:
            records.append(_run_job(*a))
            if progress is not None:
                progress(records[-1])
    return CampaignResult(records=records, d_safe=scenario.d_safe, epsilons=epsilons)


def behavior_mmd(cfg: ExperimentConfig) -> MmdTable:
    """Run ``cfg.runs`` seeded NMPC closed loops per behavior and tabulate MMD."""
    sc = cfg.scenario_config()
    logs = {}
    for behavior in cfg.behaviors:
        runs = []
        for r in range(cfg.runs):
            obstacles = perturb_obstacles(sc, np.random.default_rng([cfg.seed, r]), cfg.x_var, cfg.v_var)
            policies = [BehaviorPolicy(behavior, target=t) for t in sc.obstacle_targets]
            runs.append(run_closed_loop(sc, Planner(cfg.planner_config(sc, NMPC)), policies,
                                        obstacles_init=obstacles))
        logs[behavior] = runs
    return mmd_behavior_table(logs)
