"""Measurement tools: Q-bias probes, weight-norm traces, IQM aggregation.

Everything here is a pure function over recorded data or a frozen agent;
nothing mutates networks, so the probes can run mid-training without
perturbing the run they are measuring.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, Tensor
from .envs import default_horizon, mc_return
from .layers import effective_lr

# Documented per-env return bounds used to normalize scores to [0, 1] before
# cross-env pooling. Fixed constants, not data-dependent, so curves from
# different runs stay comparable.
ENV_RETURN_BOUNDS = {
    "pendulum-dense": (-1600.0, 0.0),
    "pendulum-sparse": (0.0, 200.0),
    "pointmass": (-400.0, 0.0),
    "chain": (0.0, 3.0),
}


@dataclass
class QBiasEstimate:
    mean_bias: float
    std_bias: float
    normalized_mean_bias: float
    n_samples: int

    def __post_init__(self):
        if self.std_bias < 0:
            raise ContractError(f"std_bias must be >= 0, got {self.std_bias}")
        if self.n_samples < 1:
            raise ContractError(f"n_samples must be >= 1, got {self.n_samples}")


@dataclass
class WeightNormPoint:
    """Frobenius norm and effective learning rate of every critic linear."""

    norms: dict
    elrs: dict


@dataclass
class WeightNormTrace:
    steps: list = field(default_factory=list)
    norms: dict = field(default_factory=dict)  # layer name -> list of floats
    elrs: dict = field(default_factory=dict)

    def append(self, step: int, point: WeightNormPoint) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ContractError(
                f"trace steps must strictly increase, got {step} after {self.steps[-1]}")
        for name, norm in point.norms.items():
            if norm < 0:
                raise ContractError(f"negative norm for layer '{name}'")
            self.norms.setdefault(name, []).append(norm)
            self.elrs.setdefault(name, []).append(point.elrs[name])
        self.steps.append(step)

    def layer_names(self):
        return sorted(self.norms)


@dataclass
class AggregateCurve:
    steps: np.ndarray
    iqm: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    scope: str = "per-env"

    def __post_init__(self):
        self.steps = np.asarray(self.steps)
        self.iqm = np.asarray(self.iqm, dtype=np.float64)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if not (len(self.steps) == len(self.iqm) == len(self.lower) == len(self.upper)):
            raise ContractError("curve arrays must share a length")
        if np.any(self.lower > self.iqm) or np.any(self.iqm > self.upper):
            raise ContractError("curve must satisfy lower <= iqm <= upper pointwise")


# ------------------------------------------------------------------ Q-bias

def stochastic_policy(actor):
    """numpy policy closure over a frozen actor: tanh(mean + std * noise)."""

    def policy(obs, rng):
        mean, log_std = actor.forward(Tensor(np.asarray(obs, dtype=np.float64)))
        noise = rng.standard_normal(mean.shape)
        return np.tanh(mean.data + np.exp(log_std.data) * noise)

    return policy


def q_min(critics, obs, actions):
    """Eval-mode min(Q1, Q2) as a flat numpy vector."""
    x = Tensor(np.concatenate([np.asarray(obs, dtype=np.float64),
                               np.asarray(actions, dtype=np.float64)], axis=1))
    q1 = critics.q1.forward(x, mode="eval", update_running=False).data
    q2 = critics.q2.forward(x, mode="eval", update_running=False).data
    return np.minimum(q1, q2)[:, 0]


def _probe_pairs(env, policy, n_states, rng, max_depth):
    """Roll the policy from fresh resets, capture one (state, action) per row.

    Each row gets its own capture depth, uniform over 0..max_depth, so the
    probe set spans the on-policy state distribution rather than only the
    reset distribution. Rows that terminate early capture where they stopped.
    """
    states = np.stack([env.sample_state(rng) for _ in range(n_states)])
    depths = rng.integers(0, max_depth + 1, size=n_states)
    cur = states
    alive = np.ones(n_states, dtype=bool)
    for t in range(int(depths.max()) if n_states else 0):
        active = alive & (depths > t)
        if not active.any():
            break
        acts = np.asarray(policy(env.state_to_obs(cur), rng), dtype=np.float64)
        nxt, _, term = env.dynamics(cur, acts)
        cur = np.where(active[:, None], nxt, cur)
        alive &= ~(term & active)
    acts = np.asarray(policy(env.state_to_obs(cur), rng), dtype=np.float64)
    return cur, acts


def q_bias(critics, actor, env, gamma, n_states=256, rng=None, episodes=1,
           horizon=None, max_depth=None) -> QBiasEstimate:
    """Bias of the critic against Monte-Carlo ground truth.

    Per probe pair: bias = min(Q1, Q2)(s, a) - mean MC return of the current
    policy from (s, a). Reports raw mean/std and the mean normalized by
    max(|mean MC return|, 1); the clamp keeps early-training numbers finite
    when returns sit near zero.
    """
    if n_states < 1:
        raise ContractError(f"n_states must be >= 1, got {n_states}")
    if rng is None:
        rng = np.random.default_rng(0)
    if max_depth is None:
        max_depth = env.spec.max_episode_steps
    policy = stochastic_policy(actor)
    states, actions = _probe_pairs(env, policy, n_states, rng, max_depth)
    returns = mc_return(env, policy, states, actions, gamma,
                        horizon=horizon, rng=rng, episodes=episodes)
    mc = returns.mean(axis=1)
    preds = q_min(critics, env.state_to_obs(states), actions)
    bias = preds - mc
    denom = max(abs(float(mc.mean())), 1.0)
    return QBiasEstimate(
        mean_bias=float(bias.mean()),
        std_bias=float(bias.std()),
        normalized_mean_bias=float(bias.mean()) / denom,
        n_samples=n_states,
    )


# ----------------------------------------------------------- weight norms

def weight_trace(critics, eta) -> WeightNormPoint:
    """One trace point: ‖W‖_F and eta/‖W‖_F² for every critic linear layer."""
    norms, elrs = {}, {}
    for net_name, net in (("q1", critics.q1), ("q2", critics.q2)):
        for i, lin in enumerate(net.linears):
            name = f"{net_name}.linear{i}"
            norms[name] = float(np.linalg.norm(lin.W.data))
            elrs[name] = effective_lr(lin, eta)
    return WeightNormPoint(norms=norms, elrs=elrs)


def total_hidden_norm(point: WeightNormPoint, n_layers: int) -> float:
    """Sum of non-final layer norms across both critics.

    The final layer is exempt from weight normalization, so growth/flatness
    claims are about the normalized set only.
    """
    last = n_layers - 1
    return sum(v for name, v in point.norms.items()
               if not name.endswith(f"linear{last}"))


# ------------------------------------------------------------ aggregation

def _trim_weights(n: int) -> np.ndarray:
    """Retained mass per sorted sample after trimming n/4 units off each tail."""
    trim = n / 4.0
    k = np.arange(n)
    w = np.minimum(k + 1.0, n - trim) - np.maximum(k, trim)
    return np.clip(w, 0.0, 1.0)


def iqm(values) -> float:
    """Interquartile mean with fractional trimming.

    n/4 units of sample mass are removed from each tail of the sorted values;
    a sample straddling the cut boundary keeps the leftover fraction. The
    result is the weighted mean of what remains (total mass n/2).
    """
    x = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    n = len(x)
    if n == 0:
        raise ContractError("iqm of empty input")
    w = _trim_weights(n)
    return float((w * x).sum() / w.sum())


def bootstrap_ci(runs, level=0.95, n_boot=2000, rng=None, steps=None,
                 scope="per-env") -> AggregateCurve:
    """Percentile bootstrap of the per-timepoint IQM over seeds.

    ``runs`` is seeds x timepoints. One seed-resampling index matrix is drawn
    and reused across timepoints, so curves stay coherent along the step axis.
    Bounds are clamped to bracket the point estimate (the percentile interval
    of a finite bootstrap can otherwise exclude it by a hair).
    """
    runs = np.asarray(runs, dtype=np.float64)
    if runs.ndim != 2:
        raise ContractError(f"runs must be 2-D (seeds x timepoints), got {runs.shape}")
    n_seeds, n_t = runs.shape
    if n_seeds < 2:
        raise ContractError(f"need >= 2 seeds, got {n_seeds}")
    if not 0.0 < level < 1.0:
        raise ContractError(f"level must lie in (0, 1), got {level}")
    if rng is None:
        rng = np.random.default_rng(0)
    point = np.array([iqm(runs[:, t]) for t in range(n_t)])
    idx = rng.integers(0, n_seeds, size=(n_boot, n_seeds))
    w = _trim_weights(n_seeds)
    resampled = np.sort(runs[idx], axis=1)  # (n_boot, n_seeds, n_t)
    boot = (w[None, :, None] * resampled).sum(axis=1) / w.sum()
    alpha = (1.0 - level) / 2.0
    lower = np.quantile(boot, alpha, axis=0)
    upper = np.quantile(boot, 1.0 - alpha, axis=0)
    lower = np.minimum(lower, point)
    upper = np.maximum(upper, point)
    if steps is None:
        steps = np.arange(n_t)
    return AggregateCurve(steps=steps, iqm=point, lower=lower, upper=upper,
                          scope=scope)


def pool_normalized(runs_by_env) -> np.ndarray:
    """Stack per-env seed matrices into one cross-env score matrix.

    Each env's returns are mapped to [0, 1] by the documented bounds in
    ENV_RETURN_BOUNDS (clipped), then the seed rows are concatenated so a
    downstream bootstrap resamples seed-env pairs.
    """
    blocks = []
    for env_id, runs in runs_by_env.items():
        if env_id not in ENV_RETURN_BOUNDS:
            raise ContractError(f"no documented return bounds for env '{env_id}'")
        lo, hi = ENV_RETURN_BOUNDS[env_id]
        runs = np.asarray(runs, dtype=np.float64)
        blocks.append(np.clip((runs - lo) / (hi - lo), 0.0, 1.0))
    if not blocks:
        raise ContractError("pool_normalized needs at least one env")
    return np.concatenate(blocks, axis=0)
