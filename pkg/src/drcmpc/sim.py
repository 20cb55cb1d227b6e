"""Closed-loop simulation of the ego planner against obstacle behaviors."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import AgentState, ControlInput, DynamicsConfig, euler_step
from .planner import NMPC, MpcConfig, Planner, PlannerNumericalFailure

NEUTRAL = "neutral"
COOPERATIVE = "cooperative"
ADVERSARIAL = "adversarial"
BEHAVIORS = (NEUTRAL, COOPERATIVE, ADVERSARIAL)

# terminal speed weight for the ego so it actually tracks its target speed
EGO_VELOCITY_WEIGHT = 0.1


class SimulationError(RuntimeError):
    pass


@dataclass
class BehaviorPolicy:
    """How one obstacle chooses its input.

    Neutral and cooperative obstacles run their own NMPC towards ``target``;
    only the cooperative one adds safety rows against a constant-velocity
    prediction of the ego. The adversarial obstacle keeps its lane and changes
    speed by ``gain`` times the ego's last speed change.
    """

    kind: str
    target: np.ndarray = field(default_factory=lambda: np.array([400.0, 0.5, 0.0, 1.0]))
    mpc_cfg: MpcConfig | None = None
    gain: float = 2.0

    def __post_init__(self):
        if self.kind not in BEHAVIORS:
            raise ValueError(f"unknown behavior {self.kind!r}")
        self.target = np.asarray(self.target, dtype=float)


@dataclass
class ScenarioConfig:
    ego_init: AgentState
    obstacles_init: list
    ego_target: np.ndarray
    obstacle_targets: list
    x_min: np.ndarray
    x_max: np.ndarray
    obstacle_v_max: float = 10.0
    N: int = 8
    Ts: float = 0.1
    wheelbase_L: float = 2.5
    run_length: int = 60
    goal_x: float | None = None
    d_safe: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if len(self.obstacles_init) < 1:
            raise ValueError("a scenario needs at least one obstacle")
        if len(self.obstacle_targets) != len(self.obstacles_init):
            raise ValueError("one target per obstacle required")
        if self.run_length < 0:
            raise ValueError("run_length must be nonnegative")
        self.ego_target = np.asarray(self.ego_target, dtype=float)
        self.obstacle_targets = [np.asarray(t, dtype=float) for t in self.obstacle_targets]
        self.x_min = np.asarray(self.x_min, dtype=float)
        self.x_max = np.asarray(self.x_max, dtype=float)

    @property
    def dynamics(self) -> DynamicsConfig:
        return DynamicsConfig(wheelbase_L=self.wheelbase_L, Ts=self.Ts)

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacles_init)


def scenario_one(**overrides) -> ScenarioConfig:
    """Single obstacle ahead in the ego lane."""
    # the ego starts cruising at its target speed
    base = dict(
        ego_init=AgentState(0.0, 0.5, 0.0, 15.0),
        obstacles_init=[AgentState(10.0, 0.5, 0.0, 1.0)],
        ego_target=np.array([0.0, 0.5, 0.0, 15.0]),
        obstacle_targets=[np.array([400.0, 0.5, 0.0, 1.0])],
        x_min=np.array([-math.inf, 0.0, 0.0, 0.0]),
        x_max=np.array([math.inf, 2.0, 2 * math.pi, 15.0]),
        goal_x=40.0,
    )
    base.update(overrides)
    return ScenarioConfig(**base)


def scenario_two(**overrides) -> ScenarioConfig:
    """Scenario one plus a second obstacle further ahead in the opposite lane."""
    base = dict(
        obstacles_init=[AgentState(10.0, 0.5, 0.0, 1.0), AgentState(20.0, 1.5, 0.0, 1.0)],
        obstacle_targets=[np.array([400.0, 0.5, 0.0, 1.0]), np.array([400.0, 1.5, 0.0, 1.0])],
        goal_x=50.0,
    )
    base.update(overrides)
    return scenario_one(**base)


SCENARIOS = {1: scenario_one, 2: scenario_two}


@dataclass
class TrajectoryLog:
    """Per-step record of a closed-loop run.

    Row ``k`` holds the states at time ``k * Ts`` and the ego input applied
    from that state (NaN on the final row, where no input was applied).
    """

    Ts: float
    ego: np.ndarray
    ego_inputs: np.ndarray
    obstacles: np.ndarray
    solve_ms: np.ndarray
    slack: np.ndarray
    min_dist: np.ndarray
    obstacle_inputs: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.ego.shape[0]

    @property
    def n_obstacles(self) -> int:
        return self.obstacles.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_rows) * self.Ts

    @property
    def min_distance(self) -> float:
        return float(np.min(self.min_dist))

    def collided(self, d_safe: float) -> bool:
        return bool(np.any(self.min_dist < d_safe))

    def obstacle_positions(self, j: int = 0) -> np.ndarray:
        return self.obstacles[:, j, :2]

    def header(self) -> list[str]:
        cols = ["k", "t", "ego_px", "ego_py", "ego_theta", "ego_v", "a", "delta"]
        for j in range(self.n_obstacles):
            cols += [f"obs{j}_px", f"obs{j}_py", f"obs{j}_theta", f"obs{j}_v"]
        return cols + ["solve_ms", "slack", "min_dist"]

    def to_csv(self, path=None, include_timing: bool = True) -> str:
        """Write the log as CSV with 17 significant digits.

        With ``include_timing=False`` the wall-clock column is written as 0 so
        that repeated runs produce identical bytes.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for k in range(self.n_rows):
            solve = self.solve_ms[k] if include_timing else 0.0
            row = [k, k * self.Ts, *self.ego[k], *self.ego_inputs[k]]
            row += list(self.obstacles[k].ravel())
            row += [solve, self.slack[k], self.min_dist[k]]
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source, Ts: float | None = None) -> "TrajectoryLog":
        text = Path(source).read_text() if not isinstance(source, str) or "\n" not in source else source
        rows = list(csv.reader(io.StringIO(text)))
        header, data = rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        if data.size == 0:
            raise ValueError("empty trajectory log")
        n_obs = sum(1 for c in header if c.endswith("_px")) - 1
        if Ts is None:
            Ts = float(data[1, 1] - data[0, 1]) if data.shape[0] > 1 else 0.1
        obs = data[:, 8:8 + 4 * n_obs].reshape(-1, n_obs, 4)
        tail = data[:, 8 + 4 * n_obs:]
        return cls(Ts=Ts, ego=data[:, 2:6], ego_inputs=data[:, 6:8], obstacles=obs,
                   solve_ms=tail[:, 0], slack=tail[:, 1], min_dist=tail[:, 2])


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def min_pairwise_distance(ego: np.ndarray, obstacles: np.ndarray) -> float:
    """Smallest rear-axle distance between the ego and any obstacle."""
    return float(np.min(np.linalg.norm(obstacles[:, :2] - ego[:2], axis=1)))


def adversarial_policy_step(obstacle_state, ego_v_now: float, ego_v_prev: float,
                            a_limits=(-4.0, 4.0), v_limits=(0.0, 10.0), Ts: float = 0.1,
                            gain: float = 2.0) -> ControlInput:
    """Change speed by ``gain`` times the ego's last speed change, keep heading.

    The speed change is clamped so that the resulting speed stays inside
    ``v_limits`` and the implied acceleration inside ``a_limits``.
    """
    v_obs = obstacle_state.v if isinstance(obstacle_state, AgentState) else float(obstacle_state[3])
    dv = gain * (ego_v_now - ego_v_prev)
    v_cmd = min(max(v_obs + dv, v_limits[0]), v_limits[1])
    a = min(max((v_cmd - v_obs) / Ts, a_limits[0]), a_limits[1])
    return ControlInput(a, 0.0)


def obstacle_mpc_config(scenario: ScenarioConfig, target, v_max: float | None = None,
                        base: MpcConfig | None = None) -> MpcConfig:
    """NMPC configuration used by neutral/cooperative obstacles.

    Lane keeping and speed tracking at the horizon end; the obstacle's own
    speed limit replaces the ego's.
    """
    base = base or MpcConfig()
    x_max = scenario.x_max.copy()
    x_max[3] = scenario.obstacle_v_max if v_max is None else v_max
    return replace(base, N=scenario.N, Ts=scenario.Ts, wheelbase_L=scenario.wheelbase_L,
                   Q_terminal=np.diag([0.0, 0.0, 0.1, 0.1]), x_ref=np.asarray(target, float),
                   x_min=scenario.x_min.copy(), x_max=x_max, d_safe=scenario.d_safe, mode=NMPC)


class ObstacleAgent:
    """Wraps a :class:`BehaviorPolicy` with the planner state it needs."""

    def __init__(self, policy: BehaviorPolicy, scenario: ScenarioConfig):
        self.policy = policy
        self.scenario = scenario
        self.planner = None
        if policy.kind in (NEUTRAL, COOPERATIVE):
            cfg = policy.mpc_cfg or obstacle_mpc_config(scenario, policy.target)
            self.planner = Planner(cfg)

    def act(self, own: np.ndarray, u_prev: np.ndarray, ego_now: np.ndarray,
            ego_prev: np.ndarray | None) -> np.ndarray:
        kind = self.policy.kind
        if kind == ADVERSARIAL:
            cfg = self.scenario
            v_prev = ego_now[3] if ego_prev is None else ego_prev[3]
            u = adversarial_policy_step(own, ego_now[3], v_prev, a_limits=(-4.0, 4.0),
                                        v_limits=(cfg.x_min[3], cfg.obstacle_v_max),
                                        Ts=cfg.Ts, gain=self.policy.gain)
            return u.as_array()
        others = [ego_now] if kind == COOPERATIVE else []
        plan = self.planner.plan(own, u_prev, others)
        return plan.u0.as_array()


def neutral_policy_step(obstacle_state, cfg: MpcConfig, warm_start=None):
    """Obstacle NMPC towards its target, ignoring the ego."""
    from .planner import plan_step
    return plan_step(obstacle_state, np.zeros(2), [], [], cfg, warm_start).u0


def cooperative_policy_step(obstacle_state, ego_state, cfg: MpcConfig, warm_start=None):
    """Obstacle NMPC with safety rows against a constant-velocity ego."""
    from .planner import make_predictors, plan_step
    preds = make_predictors([ego_state], cfg)
    return plan_step(obstacle_state, np.zeros(2), [ego_state], preds, cfg, warm_start).u0


def _clamp_state(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    x = x.copy()
    x[3] = min(max(x[3], lo[3]), hi[3])
    return x


def run_closed_loop(scenario: ScenarioConfig, ego_planner: Planner,
                    behaviors: Sequence[BehaviorPolicy], obstacles_init=None,
                    ego_init=None) -> TrajectoryLog:
    """Simulate ``scenario.run_length`` steps (or until the ego passes ``goal_x``).

    ``ego_planner`` must be configured for the scenario; its warm start is
    reset at the beginning. Obstacle states default to the scenario's
    initial states.
    """
    if len(behaviors) != scenario.n_obstacles:
        raise ValueError(f"{len(behaviors)} behaviors for {scenario.n_obstacles} obstacles")
    dyn = scenario.dynamics
    ego = (ego_init or scenario.ego_init).as_array()
    obs0 = obstacles_init or scenario.obstacles_init
    obs = np.array([o.as_array() for o in obs0])
    agents = [ObstacleAgent(b, scenario) for b in behaviors]
    ego_planner.reset()
    v_hi = scenario.x_max.copy()
    obs_hi = v_hi.copy()
    obs_hi[3] = scenario.obstacle_v_max

    egos, inputs, obstacles, solve_ms, slack, dists, obs_inputs = [], [], [], [], [], [], []
    u_prev = np.zeros(2)
    obs_u_prev = np.zeros((len(agents), 2))
    ego_prev = None
    for k in range(scenario.run_length + 1):
        egos.append(ego.copy())
        obstacles.append(obs.copy())
        dists.append(min_pairwise_distance(ego, obs))
        done = k == scenario.run_length or (scenario.goal_x is not None and ego[0] >= scenario.goal_x)
        if done:
            inputs.append(np.full(2, np.nan))
            obs_inputs.append(np.full((len(agents), 2), np.nan))
            solve_ms.append(0.0)
            slack.append(0.0)
            break
        t0 = time.perf_counter()
        try:
            plan = ego_planner.plan(ego, u_prev, list(obs))
        except PlannerNumericalFailure as exc:
            raise SimulationError(f"ego planner failed at step {k}: {exc}") from exc
        solve_ms.append(1e3 * (time.perf_counter() - t0))
        slack.append(plan.slack_used)
        u = plan.u0.as_array()
        obs_u = np.array([a.act(obs[j], obs_u_prev[j], ego, ego_prev) for j, a in enumerate(agents)])
        inputs.append(u)
        obs_inputs.append(obs_u)
        ego_prev = ego
        ego = _clamp_state(euler_step(ego, u, dyn), scenario.x_min, v_hi)
        obs = np.array([_clamp_state(euler_step(obs[j], obs_u[j], dyn), scenario.x_min, obs_hi)
                        for j in range(len(agents))])
        u_prev = u
        obs_u_prev = obs_u
    return TrajectoryLog(Ts=scenario.Ts, ego=np.array(egos), ego_inputs=np.array(inputs),
                         obstacles=np.array(obstacles), solve_ms=np.array(solve_ms),
                         slack=np.array(slack), min_dist=np.array(dists),
                         obstacle_inputs=np.array(obs_inputs))


def ego_mpc_config(scenario: ScenarioConfig, base: MpcConfig | None = None, **overrides) -> MpcConfig:
    base = base or MpcConfig(Q_terminal=np.diag([0.0, 0.0, 0.1, EGO_VELOCITY_WEIGHT]))
    cfg = replace(base, N=scenario.N, Ts=scenario.Ts, wheelbase_L=scenario.wheelbase_L,
                  x_ref=scenario.ego_target.copy(), x_min=scenario.x_min.copy(),
                  x_max=scenario.x_max.copy(), d_safe=scenario.d_safe)
    return replace(cfg, **overrides) if overrides else cfg


def perturb_obstacles(scenario: ScenarioConfig, rng: np.random.Generator,
                      x_var: float = 1.0, v_var: float = 0.25) -> list:
    """Gaussian perturbation of each obstacle's initial x-position and speed."""
    out = []
    for o in scenario.obstacles_init:
        dx = rng.normal(0.0, math.sqrt(x_var))
        dv = rng.normal(0.0, math.sqrt(v_var))
        v = min(max(o.v + dv, scenario.x_min[3]), scenario.obstacle_v_max)
        out.append(AgentState(o.px + dx, o.py, o.theta, v))
    return out


def generate_training_runs(scenario: ScenarioConfig, count: int, seed: int,
                           x_var: float = 1.0, v_var: float = 0.25,
                           ego_base: MpcConfig | None = None) -> list[TrajectoryLog]:
    """Non-reactive ego NMPC against cooperative obstacles, randomized starts."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    ego_cfg = ego_mpc_config(scenario, ego_base, mode=NMPC)
    logs = []
    for r in range(count):
        obstacles = perturb_obstacles(scenario, rng, x_var, v_var)
        behaviors = [BehaviorPolicy(COOPERATIVE, target=t) for t in scenario.obstacle_targets]
        log = run_closed_loop(scenario, _NonReactivePlanner(ego_cfg), behaviors, obstacles_init=obstacles)
        log.meta.update(run=r, seed=seed)
        logs.append(log)
    return logs


class _NonReactivePlanner(Planner):
    """Ego planner that ignores obstacles entirely."""

    def plan(self, x0, u_prev, obstacles):
        return super().plan(x0, u_prev, [])
