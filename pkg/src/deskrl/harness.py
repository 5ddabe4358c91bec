"""Experiment runner: per-seed training loops, CSV logging, checkpoints.

Reproducibility contract: in 64-bit mode every run is a pure function of
(config, seed). All randomness flows from named per-seed streams, evaluation
streams are derived statelessly from (seed, env_step), and the wallclock
column is pinned to 0.0 so CSV bytes are comparable across machines. A
checkpoint is dropped at every eval point; it contains the full agent state
plus the CSV rows written so far, which makes kill/resume emit byte-identical
files and makes rerunning a finished config a no-op.
"""

import dataclasses
import os
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import VARIANTS, Agent
from .autodiff import ContractError
from .config import RunConfig, replace_agent
from .diagnostics import bootstrap_ci, q_bias, weight_trace
from .envs import make_env

METRICS_SCHEMA = "deskrl-metrics-v1"
AGGREGATE_SCHEMA = "deskrl-aggregate-v1"
CHECKPOINT_VERSION = 1
OUTPUT_ROOT_ENV = "DESKRL_OUTPUT_ROOT"

# stream tags so the harness RNGs can never collide with the agent's
_ENV_STREAM, _EVAL_STREAM, _QBIAS_STREAM, _AGG_STREAM = 11, 22, 33, 44

_BASE_COLUMNS = (
    "env_step", "grad_step", "episode_return", "qbias_mean", "qbias_std",
    "qbias_normalized", "qbias_n", "alpha", "critic_loss", "actor_loss",
    "alpha_loss", "reset_count", "wallclock",
)


@dataclass
class MetricRecord:
    env_step: int
    grad_step: int
    episode_return: float
    qbias_mean: float
    qbias_std: float
    qbias_normalized: float
    qbias_n: int
    alpha: float
    critic_loss: float
    actor_loss: float
    alpha_loss: float
    reset_count: int
    wallclock: float
    norms: dict = field(default_factory=dict)
    elrs: dict = field(default_factory=dict)
    note: str = ""


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % float(value)


def _layer_names(cfg: RunConfig):
    n = len(cfg.agent.critic_widths) + 1
    return [f"{net}.linear{i}" for net in ("q1", "q2") for i in range(n)]


def metric_columns(cfg: RunConfig):
    layers = _layer_names(cfg)
    cols = list(_BASE_COLUMNS)
    cols += [f"norm_{name.replace('.', '_')}" for name in layers]
    cols += [f"elr_{name.replace('.', '_')}" for name in layers]
    cols.append("note")
    return cols


def _record_to_line(rec: MetricRecord, cfg: RunConfig) -> str:
    parts = [_fmt(getattr(rec, col)) for col in _BASE_COLUMNS]
    for name in _layer_names(cfg):
        parts.append(_fmt(rec.norms[name]))
    for name in _layer_names(cfg):
        parts.append(_fmt(rec.elrs[name]))
    parts.append(rec.note)
    return ",".join(parts)


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _write_csv(path: Path, header_lines, rows) -> None:
    text = "".join(line + "\n" for line in (*header_lines, *rows))
    _atomic_write_bytes(path, text.encode("utf-8"))


def output_root(override=None) -> Path:
    if override is not None:
        return Path(override)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


# ------------------------------------------------------------- evaluation

def evaluate(agent, env_id, seed, env_step, episodes) -> float:
    """Mean return of the deterministic tanh(mean) policy over fresh episodes.

    The eval env and its reset stream are derived from (seed, env_step), so
    evaluation never consumes training randomness and a resumed run sees the
    exact same eval episodes.
    """
    env = make_env(env_id)
    rng = np.random.default_rng([_EVAL_STREAM, seed, env_step])
    total = 0.0
    for _ in range(episodes):
        obs = env.reset(rng)
        while True:
            action = agent.policy_batch(obs[None, :], stochastic=False)[0]
            res = env.step(action)
            total += res.reward
            if res.terminated or res.truncated:
                break
            obs = res.observation
    return total / episodes


def _measure(agent, cfg: RunConfig, seed, env_step, eval_index, last_metrics,
             wallclock) -> MetricRecord:
    notes = []
    ret = evaluate(agent, cfg.env_id, seed, env_step, cfg.eval_episodes)

    probe_on = cfg.qbias_states > 0 and cfg.qbias_interval > 0 \
        and eval_index % cfg.qbias_interval == 0
    if probe_on:
        est = q_bias(agent.critics, agent.actor, make_env(cfg.env_id),
                     gamma=agent.config.gamma, n_states=cfg.qbias_states,
                     rng=np.random.default_rng([_QBIAS_STREAM, seed, env_step]))
        qb = (est.mean_bias, est.std_bias, est.normalized_mean_bias,
              est.n_samples)
    else:
        qb = (float("nan"), float("nan"), float("nan"), 0)
        notes.append("qbias_skipped")

    if last_metrics:
        losses = (last_metrics["critic_loss"], last_metrics["actor_loss"],
                  last_metrics["alpha_loss"])
    else:
        losses = (float("nan"),) * 3
        notes.append("no_updates_yet")

    point = weight_trace(agent.critics, agent.config.lr_critic)
    return MetricRecord(
        env_step=env_step, grad_step=agent.grad_step, episode_return=ret,
        qbias_mean=qb[0], qbias_std=qb[1], qbias_normalized=qb[2],
        qbias_n=qb[3], alpha=agent.alpha, critic_loss=losses[0],
        actor_loss=losses[1], alpha_loss=losses[2],
        reset_count=agent.reset_count, wallclock=wallclock,
        norms=point.norms, elrs=point.elrs, note=";".join(notes),
    )


# ---------------------------------------------------------------- per-seed

def _config_key(cfg: RunConfig, seed: int):
    return (CHECKPOINT_VERSION, cfg.env_id, dataclasses.astuple(cfg.agent),
            cfg.total_env_steps, cfg.eval_interval, cfg.eval_episodes,
            cfg.numeric_width, cfg.qbias_states, cfg.qbias_interval, seed)


def seed_csv_path(out_dir: Path, seed: int) -> Path:
    return out_dir / f"seed_{seed}.csv"


def _ckpt_path(out_dir: Path, seed: int) -> Path:
    return out_dir / f"seed_{seed}.ckpt.pkl"


def run_seed(cfg: RunConfig, seed: int, out_dir: Path, stop_after=None) -> Path:
    """Train one seed to total_env_steps, emitting its CSV and checkpoints.

    ``stop_after`` ends the loop early at that env step without marking the
    run complete; calling again resumes from the last checkpoint. This is the
    controlled form of killing the process, and the artifacts are identical
    either way.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = seed_csv_path(out_dir, seed)
    ckpt_path = _ckpt_path(out_dir, seed)
    header = [f"# schema={METRICS_SCHEMA}", ",".join(metric_columns(cfg))]

    if cfg.total_env_steps == 0:
        _write_csv(csv_path, header, [])
        return csv_path

    env = make_env(cfg.env_id)
    state_dim, action_dim = env.spec.state_dim, env.spec.action_dim
    deterministic = cfg.numeric_width == 64
    started = time.monotonic()

    def wallclock():
        return 0.0 if deterministic else time.monotonic() - started

    agent = Agent(state_dim, action_dim, cfg.agent, seed)
    env_rng = np.random.default_rng([_ENV_STREAM, seed])
    rows = []

    if ckpt_path.exists():
        with open(ckpt_path, "rb") as fh:
            ckpt = pickle.load(fh)
        if ckpt["config_key"] != _config_key(cfg, seed):
            raise RuntimeError(
                f"checkpoint {ckpt_path} belongs to a different config; "
                f"delete it or change output_dir")
        agent.restore(ckpt["agent"])
        env.set_state(ckpt["env_state"])
        env._t = ckpt["env_t"]
        env_rng.bit_generator.state = ckpt["env_rng"]
        rows = list(ckpt["rows"])
        obs = ckpt["obs"]
        start_step = ckpt["env_step"]
        if start_step >= cfg.total_env_steps:
            if not csv_path.exists():
                _write_csv(csv_path, header, rows)
            return csv_path
    else:
        obs = env.reset(env_rng)
        start_step = 0
        rec = _measure(agent, cfg, seed, 0, 0, {}, wallclock())
        rows.append(_record_to_line(rec, cfg))
        _save_ckpt(ckpt_path, cfg, seed, agent, env, env_rng, obs, 0, rows)
        _write_csv(csv_path, header, rows)

    last = cfg.total_env_steps if stop_after is None \
        else min(int(stop_after), cfg.total_env_steps)
    last_metrics = {}
    for step in range(start_step + 1, last + 1):
        action = agent.act(obs)
        res = env.step(action)
        last_metrics = agent.train_step(obs, action, res.reward,
                                        res.observation, res.terminated)
        if res.terminated or res.truncated:
            obs = env.reset(env_rng)
        else:
            obs = res.observation
        if step % cfg.eval_interval == 0:
            eval_index = step // cfg.eval_interval
            rec = _measure(agent, cfg, seed, step, eval_index, last_metrics,
                           wallclock())
            rows.append(_record_to_line(rec, cfg))
            _save_ckpt(ckpt_path, cfg, seed, agent, env, env_rng, obs, step,
                       rows)
            _write_csv(csv_path, header, rows)
    return csv_path


def _save_ckpt(path, cfg, seed, agent, env, env_rng, obs, env_step, rows):
    payload = pickle.dumps({
        "config_key": _config_key(cfg, seed),
        "agent": agent.snapshot(),
        "env_state": env.get_state(),
        "env_t": env._t,
        "env_rng": env_rng.bit_generator.state,
        "obs": np.array(obs, copy=True),
        "env_step": env_step,
        "rows": list(rows),
    }, protocol=pickle.HIGHEST_PROTOCOL)
    _atomic_write_bytes(Path(path), payload)


# -------------------------------------------------------------- aggregate

def read_metrics_csv(path):
    """Returns (columns, list of row dicts with floats where possible)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].startswith("# schema="):
        raise ContractError(f"{path}: missing schema line")
    schema = lines[0].split("=", 1)[1]
    if schema != METRICS_SCHEMA:
        raise ContractError(f"{path}: expected {METRICS_SCHEMA}, got {schema}")
    cols = lines[1].split(",")
    rows = []
    for line in lines[2:]:
        if not line:
            continue
        parts = line.split(",")
        row = {}
        for key, part in zip(cols, parts):
            if key == "note":
                row[key] = part
            else:
                row[key] = float(part)
        rows.append(row)
    return cols, rows


def aggregate_runs(cfg: RunConfig, csv_paths, out_dir: Path) -> Path:
    """Bootstrap the per-seed return curves into one aggregate CSV."""
    out_path = Path(out_dir) / "aggregate.csv"
    header = [f"# schema={AGGREGATE_SCHEMA}",
              "env_step,iqm_return,ci_lower,ci_upper,n_seeds"]
    if cfg.total_env_steps == 0:
        _write_csv(out_path, header, [])
        return out_path

    steps = None
    curves = []
    for path in csv_paths:
        _, rows = read_metrics_csv(path)
        these = [int(r["env_step"]) for r in rows]
        if steps is None:
            steps = these
        elif these != steps:
            raise ContractError(f"{path}: eval grid differs across seeds")
        curves.append([r["episode_return"] for r in rows])
    runs = np.asarray(curves)

    if len(curves) >= 2:
        curve = bootstrap_ci(runs, level=cfg.ci_level, n_boot=cfg.n_boot,
                             rng=np.random.default_rng([_AGG_STREAM]),
                             steps=np.asarray(steps))
        iqm_vals, lo, hi = curve.iqm, curve.lower, curve.upper
    else:
        iqm_vals = runs[0]
        lo = hi = runs[0]
    lines = []
    for i, step in enumerate(steps):
        lines.append(",".join([str(step), _fmt(iqm_vals[i]), _fmt(lo[i]),
                               _fmt(hi[i]), str(len(curves))]))
    _write_csv(out_path, header, lines)
    return out_path


def read_aggregate_csv(path):
    """Returns dict of numpy columns from an aggregate CSV."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].startswith("# schema="):
        raise ContractError(f"{path}: missing schema line")
    schema = lines[0].split("=", 1)[1]
    if schema != AGGREGATE_SCHEMA:
        raise ContractError(f"{path}: expected {AGGREGATE_SCHEMA}, got {schema}")
    cols = lines[1].split(",")
    data = {c: [] for c in cols}
    for line in lines[2:]:
        if not line:
            continue
        for key, part in zip(cols, line.split(",")):
            data[key].append(float(part))
    return {k: np.asarray(v) for k, v in data.items()}


# ------------------------------------------------------------- experiment

def _run_seed_job(cfg, seed, out_dir_str):
    return str(run_seed(cfg, seed, Path(out_dir_str)))


def run_experiment(cfg: RunConfig, root=None) -> dict:
    """All seeds of one config, then the aggregate CSV.

    Returns {"per_seed": [paths...], "aggregate": path, "out_dir": path}.
    Seeds never share state, so with workers > 1 they run in a process pool;
    artifacts are identical either way.
    """
    out_dir = output_root(root) / cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_run_seed_job, cfg, seed, str(out_dir))
                       for seed in cfg.seeds]
            per_seed = [Path(f.result()) for f in futures]
    else:
        per_seed = [run_seed(cfg, seed, out_dir) for seed in cfg.seeds]
    aggregate = aggregate_runs(cfg, per_seed, out_dir)
    return {"per_seed": per_seed, "aggregate": aggregate, "out_dir": out_dir}


def sweep(cfg: RunConfig, axis: str, values, root=None) -> dict:
    """Cross product of values x seeds along one axis, plus a comparison plot."""
    from .svgplot import render_curves  # local import; svgplot imports harness

    if axis not in ("utd", "variant"):
        raise ContractError(f"sweep axis must be utd or variant, got '{axis}'")
    if not values:
        raise ContractError("sweep needs at least one value")
    results, labels = [], []
    for value in values:
        if axis == "utd":
            utd = int(value)
            if utd < 1:
                raise ContractError(f"utd values must be >= 1, got {value}")
            derived = replace_agent(cfg, utd=utd)
            tag = f"utd_{utd}"
            labels.append(f"utd={utd}")
        else:
            if value not in VARIANTS:
                raise ContractError(f"unknown variant '{value}'")
            derived = replace_agent(cfg, variant=value)
            tag = f"variant_{value}"
            labels.append(str(value))
        sub = dataclasses.replace(derived,
                                  output_dir=str(Path(cfg.output_dir) / tag))
        results.append(run_experiment(sub, root=root))

    out_dir = output_root(root) / cfg.output_dir
    plot_path = out_dir / "comparison.svg"
    curves = [read_aggregate_csv(r["aggregate"]) for r in results]
    svg = render_curves(curves, labels, title=f"{cfg.env_id}: {axis} sweep")
    _atomic_write_bytes(plot_path, svg.encode("utf-8"))
    return {"runs": results, "plot": plot_path, "out_dir": out_dir}
