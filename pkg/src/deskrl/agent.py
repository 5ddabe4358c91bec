"""SAC-family agents: squashed-Gaussian actor, twin critics, and the three
training variants (sac, crossq, crossq_wn) under a configurable UTD ratio.

Update structure: every loss has a pure builder (``*_loss``) that only reads
parameters, so finite-difference oracles can re-evaluate it freely, plus a
step wrapper (``*_update``) that samples whatever noise is needed, runs one
reverse pass, and advances the optimizer.

Gradient-flow contract: next actions for the critic target are sampled
tape-free and enter the joint batch as constants, so critic updates move
only critic parameters; the actor update freezes the critics and reaches
the actor only through the reparameterized action.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tape, Tensor
from .layers import MLP, Adam, MLPSpec
from .replay import ReplayBuffer

LOG2PI = math.log(2.0 * math.pi)
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6  # keeps the tanh Jacobian log argument positive

VARIANTS = ("sac", "crossq", "crossq_wn")


@dataclass(frozen=True)
class AgentConfig:
    variant: str = "crossq_wn"
    utd: int = 1
    actor_utd: int = 1  # actor/temperature updates per env step; UTD scales critics only
    gamma: float = 0.99
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 256
    actor_widths: tuple = (256, 256)
    critic_widths: tuple = (512, 512)
    target_entropy: float = None  # None -> -action_dim at agent build
    tau: float = 0.005
    reset_interval: int = None
    warmup: int = 1000
    buffer_capacity: int = 200_000
    bn_momentum: float = 0.01
    bn_eps: float = 1e-5
    activation: str = "relu"
    actor_update_bn_mode: str = "eval"  # BN mode of the critics inside actor_update
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "actor_widths", tuple(int(w) for w in self.actor_widths))
        object.__setattr__(self, "critic_widths", tuple(int(w) for w in self.critic_widths))
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.utd < 1 or self.actor_utd < 1:
            raise ContractError("utd and actor_utd must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ContractError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            raise ContractError("adam betas must lie in [0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError(f"tau must be in [0, 1], got {self.tau}")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 (train-mode batchnorm)")
        if self.warmup < 0:
            raise ContractError("warmup must be >= 0")
        if self.reset_interval is not None and self.reset_interval < 1:
            raise ContractError("reset_interval must be >= 1 when set")
        if self.actor_update_bn_mode not in ("train", "eval"):
            raise ContractError("actor_update_bn_mode must be 'train' or 'eval'")


@contextmanager
def frozen(tensors):
    """Temporarily drop requires_grad so a forward records no grads for them."""
    saved = [(t, t.requires_grad) for t in tensors]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, was in saved:
            t.requires_grad = was


class ActorNet:
    """Squashed-Gaussian policy: MLP -> (mean, log_std), tanh at sample time."""

    def __init__(self, state_dim, action_dim, widths, rng, activation="relu",
                 dtype="float64"):
        self.action_dim = int(action_dim)
        self.net = MLP(MLPSpec((state_dim, *widths, 2 * action_dim),
                               activation=activation, dtype=dtype), rng)

    def forward(self, s: Tensor):
        out = self.net.forward(s, mode="eval")
        mean = ad.narrow(out, 1, 0, self.action_dim)
        log_std = ad.clip(ad.narrow(out, 1, self.action_dim, self.action_dim),
                          LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample(self, s: Tensor, noise: np.ndarray):
        """Reparameterized draw a = tanh(mean + std * noise) and its log-prob.

        ``noise`` is a constant (B, action_dim) standard-normal array, threaded
        explicitly so the same draw can be replayed by oracles.
        """
        mean, log_std = self.forward(s)
        noise = np.asarray(noise, dtype=mean.data.dtype)
        u = mean + ad.exp(log_std) * Tensor(noise)
        a = ad.tanh(u)
        # N(u; mean, std) log-density, written in terms of the unit noise
        gauss = Tensor(-0.5 * (noise * noise + LOG2PI))
        per_dim = gauss - log_std - ad.log(1.0 - ad.square(a) + SQUASH_EPS)
        logp = ad.tsum(per_dim, axis=1, keepdims=True)
        return a, logp

    def mean_action(self, s: Tensor):
        mean, _ = self.forward(s)
        return ad.tanh(mean)

    def named_parameters(self, prefix="actor."):
        return self.net.named_parameters(prefix)

    def parameters(self):
        return self.net.parameters()


def _clone_untrainable(spec, src):
    net = MLP(spec, np.random.default_rng(0))  # throwaway draws, overwritten below
    for (_, pt), (_, ps) in zip(net.named_parameters(), src.named_parameters()):
        pt.data[...] = ps.data
        pt.requires_grad = False
    return net


class CriticPair:
    """Twin Q networks over concat(s, a); target copies exist only for sac."""

    def __init__(self, state_dim, action_dim, widths, variant, rng,
                 bn_momentum=0.01, bn_eps=1e-5, activation="relu", dtype="float64"):
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}")
        self.variant = variant
        use_bn = variant in ("crossq", "crossq_wn")
        self.spec = MLPSpec((state_dim + action_dim, *widths, 1),
                            activation=activation, batchnorm=use_bn,
                            wn=(variant == "crossq_wn"),
                            bn_momentum=bn_momentum, bn_eps=bn_eps, dtype=dtype)
        self.q1 = MLP(self.spec, rng)
        self.q2 = MLP(self.spec, rng)
        if variant == "sac":
            self.t1 = _clone_untrainable(self.spec, self.q1)
            self.t2 = _clone_untrainable(self.spec, self.q2)
        else:
            self.t1 = None
            self.t2 = None

    def _target_pairs(self):
        for tgt, src in ((self.t1, self.q1), (self.t2, self.q2)):
            for (_, pt), (_, ps) in zip(tgt.named_parameters(), src.named_parameters()):
                yield pt, ps

    def sync_targets(self) -> None:
        for pt, ps in self._target_pairs():
            pt.data[...] = ps.data

    def polyak(self, tau: float) -> None:
        for pt, ps in self._target_pairs():
            pt.data *= 1.0 - tau
            pt.data += tau * ps.data

    def named_parameters(self, prefix="critic."):
        return (self.q1.named_parameters(prefix + "q1.")
                + self.q2.named_parameters(prefix + "q2."))

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix="critic."):
        out = (self.q1.named_state(prefix + "q1.")
               + self.q2.named_state(prefix + "q2."))
        if self.t1 is not None:
            out += self.t1.named_state(prefix + "target1.")
            out += self.t2.named_state(prefix + "target2.")
        return out

    def wn_layers(self):
        return self.q1.wn_layers() + self.q2.wn_layers()

    def reset_parameters(self, rng) -> None:
        self.q1.reset_parameters(rng)
        self.q2.reset_parameters(rng)
        if self.t1 is not None:
            self.sync_targets()


def _as2d(arr, dtype):
    a = np.asarray(arr, dtype=dtype)
    return a[:, None] if a.ndim == 1 else a


# ------------------------------------------------------------------- losses

def crossq_critic_loss(critics, batch, gamma, alpha, a_next, logp_next,
                       update_stats=True):
    """Joint-batch CrossQ critic loss.

    Each critic sees [(s,a); (s',a')] in ONE train-mode forward of size 2B,
    so its BN statistics are computed over the union of both state-action
    distributions; the outputs are then split back apart. ``a_next`` and
    ``logp_next`` are constant arrays sampled from the current policy, and
    the bootstrap half is wrapped in stop_gradient, so gradients reach
    critic parameters only through the Q(s,a) rows.
    """
    B = len(batch.r)
    if B < 2:
        raise ContractError(f"crossq critic update needs batch size >= 2, got {B}")
    dtype = critics.spec.np_dtype
    x_cur = np.concatenate([batch.s, batch.a], axis=1)
    x_nxt = np.concatenate([batch.s_next, np.asarray(a_next)], axis=1)
    x = Tensor(np.concatenate([x_cur, x_nxt], axis=0).astype(dtype))
    r = Tensor(_as2d(batch.r, dtype))
    live = Tensor(_as2d(1.0 - batch.done, dtype))
    ent = Tensor(alpha * _as2d(logp_next, dtype))

    q1_all = critics.q1.forward(x, mode="train", update_running=update_stats)
    q2_all = critics.q2.forward(x, mode="train", update_running=update_stats)
    q1_cur, q1_next = ad.narrow(q1_all, 0, 0, B), ad.narrow(q1_all, 0, B, B)
    q2_cur, q2_next = ad.narrow(q2_all, 0, 0, B), ad.narrow(q2_all, 0, B, B)

    boot = ad.stop_gradient(ad.minimum(q1_next, q2_next) - ent)
    y = r + gamma * live * boot
    loss = ad.tmean(ad.square(q1_cur - y)) + ad.tmean(ad.square(q2_cur - y))
    return loss, {"y": y.data[:, 0].copy(),
                  "q1": q1_cur.data[:, 0].copy(), "q2": q2_cur.data[:, 0].copy()}


def sac_critic_loss(critics, batch, gamma, alpha, a_next, logp_next):
    """Classic target-network backup; targets are evaluated as constants."""
    if critics.t1 is None:
        raise ContractError("sac_critic_loss requires target networks")
    dtype = critics.spec.np_dtype
    x_cur = Tensor(np.concatenate([batch.s, batch.a], axis=1).astype(dtype))
    x_nxt = Tensor(np.concatenate([batch.s_next, np.asarray(a_next)], axis=1).astype(dtype))
    tq1 = critics.t1.forward(x_nxt, mode="eval").data
    tq2 = critics.t2.forward(x_nxt, mode="eval").data
    y_np = (_as2d(batch.r, dtype)
            + gamma * _as2d(1.0 - batch.done, dtype)
            * (np.minimum(tq1, tq2) - alpha * _as2d(logp_next, dtype)))
    y = Tensor(y_np.astype(dtype))
    q1 = critics.q1.forward(x_cur, mode="train")
    q2 = critics.q2.forward(x_cur, mode="train")
    loss = ad.tmean(ad.square(q1 - y)) + ad.tmean(ad.square(q2 - y))
    return loss, {"y": y.data[:, 0].copy(),
                  "q1": q1.data[:, 0].copy(), "q2": q2.data[:, 0].copy()}


def actor_loss(actor, critics, s, alpha, noise, bn_mode="eval"):
    """mean(alpha * logp - min Q). Critics frozen: eval-mode BN (running stats,
    no batch coupling) by default, and their parameters take no gradient."""
    s_t = Tensor(np.asarray(s, dtype=critics.spec.np_dtype))
    a, logp = actor.sample(s_t, noise)
    x = ad.concat([s_t, a], axis=1)
    with frozen(critics.parameters()):
        q1 = critics.q1.forward(x, mode=bn_mode, update_running=False)
        q2 = critics.q2.forward(x, mode=bn_mode, update_running=False)
    loss = ad.tmean(alpha * logp - ad.minimum(q1, q2))
    return loss, {"logp": logp.data.copy()}


def temperature_loss(log_alpha, logp, target_entropy):
    """mean(-log_alpha * (logp + target_entropy)); logp enters detached."""
    const = Tensor(np.asarray(logp, dtype=np.float64) + float(target_entropy))
    return ad.neg(ad.tmean(log_alpha * const))


# ------------------------------------------------------------ update steps

def _finite_or_raise(loss_val, what, step_index):
    if not math.isfinite(loss_val):
        raise NumericError(f"non-finite {what} loss at gradient step {step_index}")


def crossq_critic_update(critics, actor, batch, gamma, alpha, opt, noise_rng=None,
                         next_noise=None, step_index=0):
    B = len(batch.r)
    if next_noise is None:
        next_noise = noise_rng.standard_normal((B, actor.action_dim))
    s_next = Tensor(np.asarray(batch.s_next, dtype=critics.spec.np_dtype))
    a_next, logp_next = actor.sample(s_next, next_noise)  # tape-free: constants
    opt.zero_grad()
    with Tape() as tape:
        loss, info = crossq_critic_loss(critics, batch, gamma, alpha,
                                        a_next.data, logp_next.data)
        val = loss.item()
        _finite_or_raise(val, "critic", step_index)
        tape.backward(loss)
    opt.step()
    return val, info


def sac_critic_update(critics, actor, batch, gamma, alpha, tau, opt, noise_rng=None,
                      next_noise=None, step_index=0):
    B = len(batch.r)
    if next_noise is None:
        next_noise = noise_rng.standard_normal((B, actor.action_dim))
    s_next = Tensor(np.asarray(batch.s_next, dtype=critics.spec.np_dtype))
    a_next, logp_next = actor.sample(s_next, next_noise)
    opt.zero_grad()
    with Tape() as tape:
        loss, info = sac_critic_loss(critics, batch, gamma, alpha,
                                     a_next.data, logp_next.data)
        val = loss.item()
        _finite_or_raise(val, "critic", step_index)
        tape.backward(loss)
    opt.step()
    critics.polyak(tau)
    return val, info


def actor_update(actor, critics, batch, alpha, opt, noise_rng=None, noise=None,
                 bn_mode="eval", step_index=0):
    B = len(batch.r)
    if noise is None:
        noise = noise_rng.standard_normal((B, actor.action_dim))
    opt.zero_grad()
    with Tape() as tape:
        loss, info = actor_loss(actor, critics, batch.s, alpha, noise, bn_mode)
        val = loss.item()
        _finite_or_raise(val, "actor", step_index)
        tape.backward(loss)
    opt.step()
    return val, info


def temperature_update(log_alpha, opt, logp, target_entropy, step_index=0):
    opt.zero_grad()
    with Tape() as tape:
        loss = temperature_loss(log_alpha, logp, target_entropy)
        val = loss.item()
        _finite_or_raise(val, "temperature", step_index)
        tape.backward(loss)
    opt.step()
    return val, float(np.exp(log_alpha.data[0]))


def _opt_snapshot(opt):
    return {"t": opt.t,
            "m": {k: v.copy() for k, v in opt.m.items()},
            "v": {k: v.copy() for k, v in opt.v.items()}}


def _opt_restore(opt, snap):
    opt.t = snap["t"]
    for k in opt.m:
        opt.m[k][...] = snap["m"][k]
        opt.v[k][...] = snap["v"][k]


def periodic_reset(agent) -> None:
    """Fresh nets, temperature, and optimizer state from the init stream;
    the replay buffer and environment are untouched."""
    agent.actor.net.reset_parameters(agent.init_rng)
    agent.critics.reset_parameters(agent.init_rng)
    agent.log_alpha.data[...] = 0.0
    agent.log_alpha.grad[...] = 0.0
    agent._build_optimizers()
    agent.reset_count += 1


class Agent:
    """One training run's worth of mutable state.

    RNG discipline: four child streams from the run seed — init (weight
    draws, reused by periodic resets), action (exploration), buffer
    (replay sampling), noise (update-time policy noise). Keeping them
    separate means e.g. a different eval cadence cannot nudge training.
    """

    def __init__(self, state_dim, action_dim, config: AgentConfig, seed):
        self.config = config
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_ss, action_ss, buffer_ss, noise_ss = ss.spawn(4)
        self.init_rng = np.random.default_rng(init_ss)
        self.action_rng = np.random.default_rng(action_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.buffer = ReplayBuffer(config.buffer_capacity, state_dim, action_dim,
                                   np.random.default_rng(buffer_ss))
        self.actor = ActorNet(state_dim, action_dim, config.actor_widths,
                              self.init_rng, config.activation, config.dtype)
        self.critics = CriticPair(state_dim, action_dim, config.critic_widths,
                                  config.variant, self.init_rng, config.bn_momentum,
                                  config.bn_eps, config.activation, config.dtype)
        self.log_alpha = Tensor(np.zeros(1), requires_grad=True)
        self.target_entropy = (float(config.target_entropy)
                               if config.target_entropy is not None else -float(action_dim))
        self._build_optimizers()
        self.env_step = 0
        self.grad_step = 0
        self.reset_count = 0

    def _build_optimizers(self):
        cfg = self.config
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        self.actor_opt = Adam(self.actor.named_parameters("actor."),
                              lr=cfg.lr_actor, beta1=b1, beta2=b2)
        self.critic_opt = Adam(self.critics.named_parameters("critic."),
                               lr=cfg.lr_critic, beta1=b1, beta2=b2,
                               wn_layers=self.critics.wn_layers())
        self.alpha_opt = Adam([("log_alpha", self.log_alpha)],
                              lr=cfg.lr_alpha, beta1=b1, beta2=b2)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data[0]))

    def policy_batch(self, obs, rng=None, stochastic=True):
        """Batched numpy policy; the stochastic form is the pi that Q estimates."""
        dtype = self.critics.spec.np_dtype
        obs = np.asarray(obs, dtype=dtype)
        mean, log_std = self.actor.forward(Tensor(obs))
        if stochastic:
            noise = rng.standard_normal(mean.shape).astype(dtype)
            return np.tanh(mean.data + np.exp(log_std.data) * noise)
        return np.tanh(mean.data)

    def act(self, obs, deterministic=False):
        """Single-step action; uniform-random during warmup."""
        if not deterministic and self.env_step < self.config.warmup:
            return self.action_rng.uniform(-1.0, 1.0, self.action_dim)
        return self.policy_batch(np.asarray(obs)[None, :], self.action_rng,
                                 stochastic=not deterministic)[0]

    def train_step(self, s, a, r, s_next, done) -> dict:
        """Consume one transition; run G critic + actor_utd actor/temperature
        updates once the buffer holds warmup transitions; then maybe reset."""
        cfg = self.config
        self.buffer.add(s, a, r, s_next, done)
        self.env_step += 1
        metrics = {}
        if len(self.buffer) >= max(cfg.warmup, 1):
            for _ in range(cfg.utd):
                batch = self.buffer.sample(cfg.batch_size)
                if cfg.variant == "sac":
                    cl, _ = sac_critic_update(self.critics, self.actor, batch,
                                              cfg.gamma, self.alpha, cfg.tau,
                                              self.critic_opt, self.noise_rng,
                                              step_index=self.grad_step)
                else:
                    cl, _ = crossq_critic_update(self.critics, self.actor, batch,
                                                 cfg.gamma, self.alpha,
                                                 self.critic_opt, self.noise_rng,
                                                 step_index=self.grad_step)
                self.grad_step += 1
            for _ in range(cfg.actor_utd):
                batch = self.buffer.sample(cfg.batch_size)
                al, info = actor_update(self.actor, self.critics, batch, self.alpha,
                                        self.actor_opt, self.noise_rng,
                                        bn_mode=cfg.actor_update_bn_mode,
                                        step_index=self.grad_step)
                tl, _ = temperature_update(self.log_alpha, self.alpha_opt,
                                           info["logp"], self.target_entropy,
                                           step_index=self.grad_step)
            metrics = {"critic_loss": cl, "actor_loss": al, "alpha_loss": tl,
                       "alpha": self.alpha}
        if cfg.reset_interval is not None and self.env_step % cfg.reset_interval == 0:
            periodic_reset(self)
            metrics["reset"] = True
        return metrics

    def named_state(self):
        """Every array worth checkpointing, in a stable order."""
        out = self.actor.net.named_state("actor.")
        out += self.critics.named_state("critic.")
        out.append(("log_alpha", self.log_alpha))
        return out

    def snapshot(self) -> dict:
        """Deep-copied resumable state: parameters and BN statistics, Adam
        moments, every RNG stream, the replay contents, and the counters.
        Restoring it continues training bitwise-identically."""
        params = {}
        for name, arr in self.named_state():
            data = arr.data if isinstance(arr, Tensor) else arr
            params[name] = np.array(data, copy=True)
        buf = self.buffer
        used = len(buf)
        return {
            "params": params,
            "opt": {"actor": _opt_snapshot(self.actor_opt),
                    "critic": _opt_snapshot(self.critic_opt),
                    "alpha": _opt_snapshot(self.alpha_opt)},
            "rng": {"init": self.init_rng.bit_generator.state,
                    "action": self.action_rng.bit_generator.state,
                    "buffer": buf.rng.bit_generator.state,
                    "noise": self.noise_rng.bit_generator.state},
            "buffer": {"s": buf.s[:used].copy(), "a": buf.a[:used].copy(),
                       "r": buf.r[:used].copy(),
                       "s_next": buf.s_next[:used].copy(),
                       "done": buf.done[:used].copy(), "count": buf.count},
            "counters": {"env_step": self.env_step, "grad_step": self.grad_step,
                         "reset_count": self.reset_count},
        }

    def restore(self, snap: dict) -> None:
        """Inverse of snapshot(); the agent must have been built with the
        same config and dimensions."""
        for name, arr in self.named_state():
            if name not in snap["params"]:
                raise ContractError(
                    f"snapshot does not match agent architecture: missing '{name}'")
            src = snap["params"][name]
            if isinstance(arr, Tensor):
                arr.data[...] = src
            else:
                arr[...] = src
        _opt_restore(self.actor_opt, snap["opt"]["actor"])
        _opt_restore(self.critic_opt, snap["opt"]["critic"])
        _opt_restore(self.alpha_opt, snap["opt"]["alpha"])
        self.init_rng.bit_generator.state = snap["rng"]["init"]
        self.action_rng.bit_generator.state = snap["rng"]["action"]
        self.buffer.rng.bit_generator.state = snap["rng"]["buffer"]
        self.noise_rng.bit_generator.state = snap["rng"]["noise"]
        buf, saved = self.buffer, snap["buffer"]
        used = len(saved["r"])
        if used > buf.capacity:
            raise ContractError("snapshot replay larger than buffer capacity")
        buf.s[:used] = saved["s"]
        buf.a[:used] = saved["a"]
        buf.r[:used] = saved["r"]
        buf.s_next[:used] = saved["s_next"]
        buf.done[:used] = saved["done"]
        buf.count = saved["count"]
        self.env_step = snap["counters"]["env_step"]
        self.grad_step = snap["counters"]["grad_step"]
        self.reset_count = snap["counters"]["reset_count"]
