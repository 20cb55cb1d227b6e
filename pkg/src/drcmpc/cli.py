"""Command-line entry point: ``drcmpc <subcommand> ...``."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .experiments import (ExperimentConfig, bootstrap_epsilon, extract_all,
                          behavior_mmd, extract_datasets, fit_lookahead_models, held_out_mse,
                          run_campaign, select_training_subset)
from .nlpsolve import check_gradients
from .planner import MODES, NMPC, Planner, build_problem, make_predictors
from .predict import ContextualPredictor
from .rkhs import analytic_radius, load_model, save_model
from .sim import (BEHAVIORS, BehaviorPolicy, TrajectoryLog, generate_training_runs,
                  perturb_obstacles, run_closed_loop)

MODEL_MANIFEST = "models.json"
DATA_MANIFEST = "manifest.json"


def _config(path, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    doc = cfg.to_dict()
    flat = {k: v for sec in doc.values() for k, v in sec.items()}
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**flat)


def _epsilons(text):
    if text is None:
        return None
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        out.append(tok if tok == "bootstrap" else float(tok))
    return out


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def save_models(models, out) -> Path:
    """Write one JSON file per (obstacle, lookahead) plus a manifest."""
    out = _out_dir(out)
    files = []
    for j, per_obstacle in enumerate(models):
        names = []
        for m in per_obstacle:
            name = f"obs{j}_lookahead{m.lookahead}.json"
            save_model(m, out / name)
            names.append(name)
        files.append(names)
    (out / MODEL_MANIFEST).write_text(json.dumps({"files": files}, indent=2) + "\n")
    return out


def load_models(path) -> list:
    path = Path(path)
    manifest = json.loads((path / MODEL_MANIFEST).read_text())
    return [[load_model(path / name) for name in names] for names in manifest["files"]]


def load_logs(path) -> list[TrajectoryLog]:
    path = Path(path)
    manifest = json.loads((path / DATA_MANIFEST).read_text())
    return [TrajectoryLog.from_csv(path / name, Ts=manifest["Ts"]) for name in manifest["files"]]


class _Group(click.Group):
    """Turn any library error into a one-line message and exit code 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except Exception as exc:  # noqa: BLE001 - reported to the user
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc


@click.group(cls=_Group)
def main():
    """Contextual and distributionally robust MPC experiments."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--scenario", type=click.IntRange(1, 2))
@click.option("--runs", type=click.IntRange(min=1))
@click.option("--seed", type=int)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def gen_data(config_path, scenario, runs, seed, out):
    """Training runs: non-reactive ego against cooperative obstacles."""
    cfg = _config(config_path, scenario=scenario, training_runs=runs, training_seed=seed)
    sc = cfg.scenario_config()
    logs = generate_training_runs(sc, cfg.training_runs, cfg.training_seed,
                                  x_var=cfg.x_var, v_var=cfg.v_var)
    out = _out_dir(out)
    files = []
    for r, log in enumerate(logs):
        name = f"run_{r:04d}.csv"
        log.to_csv(out / name, include_timing=False)
        files.append(name)
    manifest = {"scenario": cfg.scenario, "seed": cfg.training_seed, "runs": len(logs),
                "Ts": sc.Ts, "N": sc.N, "files": files}
    (out / DATA_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    click.echo(f"wrote {len(files)} runs to {out}")


@main.command("fit")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--horizon", default=8, show_default=True, type=click.IntRange(min=1))
@click.option("--ns", default=8, show_default=True, type=click.IntRange(min=1))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def fit(data, horizon, ns, out):
    """Fit one CKME model per obstacle and lookahead."""
    logs = load_logs(data)
    models = [fit_lookahead_models(ds, ns) for ds in extract_all(logs, horizon)]
    save_models(models, out)
    click.echo(f"wrote {sum(len(m) for m in models)} models to {out}")


@main.command("select-subset")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--lookahead", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--obstacle", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--ns", default=8, show_default=True, type=click.IntRange(min=1))
@click.option("--exact", is_flag=True, help="Exhaustive search (at most 12 pairs).")
@click.option("--out", type=click.Path(dir_okay=False))
def select_subset(data, lookahead, obstacle, ns, exact, out):
    """Greedy training-subset selection by held-out MSE."""
    logs = load_logs(data)
    full = extract_datasets(logs, lookahead, obstacle)[lookahead - 1]
    chosen = select_training_subset(full, ns, exact=exact)
    idx = [full.sources.index(s) for s in chosen.sources]
    doc = {"lookahead": lookahead, "obstacle": obstacle, "n_pairs": full.n_pairs,
           "selected_sources": [list(s) for s in chosen.sources],
           "held_out_mse": held_out_mse(full, idx)}
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    click.echo(text)


@main.command("simulate")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(MODES), default=NMPC, show_default=True)
@click.option("--behavior", type=click.Choice(BEHAVIORS), default="cooperative", show_default=True)
@click.option("--epsilon", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, help="Perturb the obstacle start with this seed.")
@click.option("--models", "models_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def simulate(config_path, mode, behavior, epsilon, seed, models_dir, out):
    """One closed-loop run; writes trajectory.csv."""
    cfg = _config(config_path)
    sc = cfg.scenario_config()
    contextual = None
    if mode != NMPC:
        from .experiments import train_models
        models = load_models(models_dir) if models_dir else train_models(cfg, sc)
        contextual = [ContextualPredictor(m) for m in models]
    obstacles = perturb_obstacles(sc, np.random.default_rng(seed), cfg.x_var, cfg.v_var) \
        if seed is not None else None
    behaviors = [BehaviorPolicy(behavior, target=t) for t in sc.obstacle_targets]
    log = run_closed_loop(sc, Planner(cfg.planner_config(sc, mode, epsilon), contextual), behaviors,
                          obstacles_init=obstacles)
    out = _out_dir(out)
    log.to_csv(out / "trajectory.csv")
    click.echo(f"min distance {log.min_distance:.6f} over {log.n_rows - 1} steps; "
               f"collision={log.collided(sc.d_safe)}")


@main.command("montecarlo")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int)
@click.option("--epsilon", "epsilon_list", help="Comma-separated list; 'bootstrap' allowed.")
@click.option("--mode", "modes", type=click.Choice(MODES), multiple=True)
@click.option("--behavior", "behaviors", type=click.Choice(BEHAVIORS), multiple=True)
@click.option("--runs", type=click.IntRange(min=1))
@click.option("--workers", type=click.IntRange(min=1))
@click.option("--models", "models_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def montecarlo(config_path, seed, epsilon_list, modes, behaviors, runs, workers, models_dir, out):
    """Seeded campaign; writes results.csv (deterministic) and summary.json (with timing)."""
    cfg = _config(config_path, seed=seed, epsilons=_epsilons(epsilon_list),
                  modes=list(modes) or None, behaviors=list(behaviors) or None,
                  runs=runs, workers=workers)
    models = load_models(models_dir) if models_dir else None
    result = run_campaign(cfg, models)
    out = _out_dir(out)
    result.to_csv(out / "results.csv")
    summary = result.summary()
    summary["config"] = cfg.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for cell in summary["cells"]:
        click.echo(f"{cell['mode']:7s} {cell['behavior']:12s} eps={cell['epsilon']:<8.4g} "
                   f"median={cell['median']:.4f} collisions={cell['collision_rate']:.2f}")


@main.command("mmd-table")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int)
@click.option("--runs", type=click.IntRange(min=2))
@click.option("--mode", type=click.Choice([NMPC]), default=NMPC, show_default=True)
@click.option("--out", type=click.Path(file_okay=False))
def mmd_table(config_path, seed, runs, mode, out):
    """MMD between obstacle trajectories of the three behaviors (NMPC ego)."""
    cfg = _config(config_path, seed=seed, runs=runs)
    table = behavior_mmd(cfg)
    text = json.dumps(table.to_dict(), indent=2)
    if out:
        (_out_dir(out) / "mmd_table.json").write_text(text + "\n")
    click.echo(text)


@main.command("radius")
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--delta", default=0.05, show_default=True, type=float)
@click.option("--resamples", default=1000, show_default=True, type=click.IntRange(min=100))
@click.option("--seed", default=0, show_default=True, type=int)
def radius(models_dir, delta, resamples, seed):
    """Analytic finite-sample radius and bootstrap epsilon of fitted models."""
    models = load_models(models_dir)
    n = min(m.n_samples for per in models for m in per)
    doc = {"analytic": analytic_radius(1.0, n, delta),
           "bootstrap": max(bootstrap_epsilon(m, resamples, delta, seed) for m in models),
           "n_samples": n, "delta": delta}
    click.echo(json.dumps(doc, indent=2))


@main.command("check-grad")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(MODES), default=NMPC, show_default=True)
@click.option("--epsilon", type=float, default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--points", default=5, show_default=True, type=click.IntRange(min=1))
@click.option("--models", "models_dir", type=click.Path(exists=True, file_okay=False))
def check_grad(config_path, mode, epsilon, seed, points, models_dir):
    """Finite-difference check of planner gradients at random points."""
    cfg = _config(config_path)
    sc = cfg.scenario_config()
    mpc = cfg.planner_config(sc, mode, epsilon)
    contextual = None
    if mode != NMPC:
        from .experiments import train_models
        models = load_models(models_dir) if models_dir else train_models(cfg, sc)
        contextual = [ContextualPredictor(m) for m in models]
    obstacles = [o.as_array() for o in sc.obstacles_init]
    preds = make_predictors(obstacles, mpc, contextual)
    prob = build_problem(sc.ego_init.as_array(), np.zeros(2), obstacles, preds, mpc)
    nlp = prob.to_nlp()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        z = prob.random_point(rng)
        worst = max(worst, check_gradients(nlp, z).max_rel_error)
    click.echo(f"max relative gradient error {worst:.3e} over {points} points")
    if worst > 1e-5:
        sys.exit(1)


if __name__ == "__main__":  # pragma: no cover
    main()
