"""Run configuration: an INI file with [run] and [agent] sections.

Grammar: ``key = value`` lines under a section header, ``#``/``;`` comments.
Every key has a default except env, total_env_steps, and eval_interval.
Validation gathers ALL violations before reporting, so a bad config fails
with one complete list instead of a fix-rerun loop; parse errors and unknown
keys carry their line numbers.
"""

import configparser
import dataclasses
from dataclasses import dataclass

from .agent import VARIANTS, AgentConfig
from .envs import ENV_IDS


class ConfigError(Exception):
    """Carries every violation found in a config file."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class RunConfig:
    env_id: str
    agent: AgentConfig
    total_env_steps: int
    eval_interval: int
    eval_episodes: int = 5
    seeds: tuple = (0,)
    output_dir: str = "run"
    numeric_width: int = 64
    qbias_states: int = 32
    qbias_interval: int = 1  # in eval points; 0 disables the probe
    workers: int = 1
    n_boot: int = 2000
    ci_level: float = 0.95


_RUN_KEYS = {
    "env", "total_env_steps", "eval_interval", "eval_episodes", "seeds",
    "output_dir", "numeric_width", "qbias_states", "qbias_interval",
    "workers", "n_boot", "ci_level",
}
_AGENT_KEYS = {
    "variant", "utd", "actor_utd", "gamma", "lr_actor", "lr_critic",
    "lr_alpha", "adam_beta1", "adam_beta2", "batch_size", "actor_widths",
    "critic_widths", "target_entropy", "tau", "reset_interval", "warmup",
    "buffer_capacity", "bn_momentum", "bn_eps", "activation",
    "actor_update_bn_mode",
}


def _key_lines(text):
    """Map (section, key) -> 1-based line number of its first assignment."""
    out, section = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            out.setdefault(("__section__", section), i)
            continue
        for sep in "=:":
            if sep in line:
                key = line.split(sep, 1)[0].strip().lower()
                out.setdefault((section, key), i)
                break
    return out


class _Reader:
    """Typed getters over one section; appends violations instead of raising."""

    def __init__(self, section, name, errors, lines):
        self.section = section
        self.name = name
        self.errors = errors
        self.lines = lines

    def _where(self, key):
        n = self.lines.get((self.name, key))
        return f" (line {n})" if n else ""

    def complain(self, key, msg):
        self.errors.append(f"[{self.name}] {key}{self._where(key)}: {msg}")

    def raw(self, key, default=None):
        if self.section is None or key not in self.section:
            return default
        return self.section[key].strip()

    def _parse(self, key, default, convert, kind):
        raw = self.raw(key)
        if raw is None:
            return default
        try:
            return convert(raw)
        except ValueError:
            self.complain(key, f"expected {kind}, got '{raw}'")
            return default

    def get_int(self, key, default=None):
        return self._parse(key, default, int, "an integer")

    def get_float(self, key, default=None):
        return self._parse(key, default, float, "a number")

    def get_str(self, key, default=None):
        return self._parse(key, default, str, "a string")

    def get_int_tuple(self, key, default=None):
        def convert(raw):
            return tuple(int(p) for p in raw.replace(",", " ").split())
        return self._parse(key, default, convert, "a comma-separated integer list")

    def require(self, key, getter):
        if self.raw(key) is None:
            self.complain(key, "required key is missing")
            return None
        return getter(key)

    def check(self, key, value, ok, msg):
        if value is not None and not ok(value):
            self.complain(key, msg)
            return False
        return True


def parse_config(text: str):
    """Parse and validate config text. Returns (RunConfig, warnings).

    Raises ConfigError carrying the full list of violations.
    """
    errors, warnings = [], []
    lines = _key_lines(text)

    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"parse error: {exc}"]) from exc

    for section in parser.sections():
        if section not in ("run", "agent"):
            n = lines.get(("__section__", section.lower()))
            where = f" (line {n})" if n else ""
            errors.append(f"unknown section [{section}]{where}")
    run_sec = parser["run"] if parser.has_section("run") else None
    agent_sec = parser["agent"] if parser.has_section("agent") else None
    if run_sec is None:
        errors.append("missing required section [run]")
    for sec, allowed, name in ((run_sec, _RUN_KEYS, "run"),
                               (agent_sec, _AGENT_KEYS, "agent")):
        if sec is None:
            continue
        for key in sec:
            if key not in allowed:
                n = lines.get((name, key))
                where = f" (line {n})" if n else ""
                errors.append(f"[{name}] unknown key '{key}'{where}")

    run = _Reader(run_sec, "run", errors, lines)
    agent = _Reader(agent_sec, "agent", errors, lines)

    env_id = run.require("env", run.get_str)
    run.check("env", env_id, lambda v: v in ENV_IDS,
              f"unknown env, expected one of {', '.join(ENV_IDS)}")
    total = run.require("total_env_steps", run.get_int)
    run.check("total_env_steps", total, lambda v: v >= 0, "must be >= 0")
    interval = run.require("eval_interval", run.get_int)
    run.check("eval_interval", interval, lambda v: v >= 1, "must be >= 1")
    if (total or 0) > 0 and interval and interval >= 1 and total % interval != 0:
        run.complain("eval_interval",
                     f"must divide total_env_steps ({total} % {interval} != 0)")
    episodes = run.get_int("eval_episodes", 5)
    run.check("eval_episodes", episodes, lambda v: v >= 1, "must be >= 1")
    seeds = run.get_int_tuple("seeds", (0,))
    if seeds is not None:
        if not seeds:
            run.complain("seeds", "needs at least one seed")
        elif len(set(seeds)) != len(seeds):
            run.complain("seeds", "seeds must be distinct")
    output_dir = run.get_str("output_dir", "run")
    width = run.get_int("numeric_width", 64)
    run.check("numeric_width", width, lambda v: v in (32, 64), "must be 32 or 64")
    qbias_states = run.get_int("qbias_states", 32)
    run.check("qbias_states", qbias_states, lambda v: v >= 0, "must be >= 0")
    qbias_interval = run.get_int("qbias_interval", 1)
    run.check("qbias_interval", qbias_interval, lambda v: v >= 0, "must be >= 0")
    workers = run.get_int("workers", 1)
    run.check("workers", workers, lambda v: v >= 1, "must be >= 1")
    n_boot = run.get_int("n_boot", 2000)
    run.check("n_boot", n_boot, lambda v: v >= 1, "must be >= 1")
    ci_level = run.get_float("ci_level", 0.95)
    run.check("ci_level", ci_level, lambda v: 0.0 < v < 1.0,
              "must lie in (0, 1)")

    defaults = AgentConfig()
    variant = agent.get_str("variant", defaults.variant)
    agent.check("variant", variant, lambda v: v in VARIANTS,
                f"unknown variant, expected one of {', '.join(VARIANTS)}")
    utd = agent.get_int("utd", 1)
    agent.check("utd", utd, lambda v: v >= 1, "must be >= 1")
    actor_utd = agent.get_int("actor_utd", defaults.actor_utd)
    agent.check("actor_utd", actor_utd, lambda v: v >= 1, "must be >= 1")
    gamma = agent.get_float("gamma", defaults.gamma)
    agent.check("gamma", gamma, lambda v: 0.0 < v < 1.0, "discount out of (0,1)")
    lr_actor = agent.get_float("lr_actor", defaults.lr_actor)
    lr_critic = agent.get_float("lr_critic", defaults.lr_critic)
    lr_alpha = agent.get_float("lr_alpha", defaults.lr_alpha)
    for key, lr in (("lr_actor", lr_actor), ("lr_critic", lr_critic),
                    ("lr_alpha", lr_alpha)):
        agent.check(key, lr, lambda v: v > 0.0, "must be > 0")
    adam_beta1 = agent.get_float("adam_beta1", defaults.adam_beta1)
    adam_beta2 = agent.get_float("adam_beta2", defaults.adam_beta2)
    for key, beta in (("adam_beta1", adam_beta1), ("adam_beta2", adam_beta2)):
        agent.check(key, beta, lambda v: 0.0 <= v < 1.0, "must lie in [0, 1)")
    batch_size = agent.get_int("batch_size", defaults.batch_size)
    agent.check("batch_size", batch_size, lambda v: v >= 2, "must be >= 2")
    actor_widths = agent.get_int_tuple("actor_widths", defaults.actor_widths)
    critic_widths = agent.get_int_tuple("critic_widths", defaults.critic_widths)
    for key, widths in (("actor_widths", actor_widths),
                        ("critic_widths", critic_widths)):
        agent.check(key, widths,
                    lambda v: len(v) >= 1 and all(w >= 1 for w in v),
                    "needs at least one positive width")
    target_entropy = agent.get_float("target_entropy", None)
    tau = agent.get_float("tau", defaults.tau)
    agent.check("tau", tau, lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]")
    reset_interval = agent.get_int("reset_interval", None)
    agent.check("reset_interval", reset_interval, lambda v: v >= 1, "must be >= 1")
    warmup = agent.get_int("warmup", defaults.warmup)
    agent.check("warmup", warmup, lambda v: v >= 0, "must be >= 0")
    capacity = agent.get_int("buffer_capacity", defaults.buffer_capacity)
    agent.check("buffer_capacity", capacity, lambda v: v >= 1, "must be >= 1")
    bn_momentum = agent.get_float("bn_momentum", defaults.bn_momentum)
    agent.check("bn_momentum", bn_momentum, lambda v: 0.0 < v <= 1.0,
                "must lie in (0, 1]")
    bn_eps = agent.get_float("bn_eps", defaults.bn_eps)
    agent.check("bn_eps", bn_eps, lambda v: v > 0.0, "must be > 0")
    activation = agent.get_str("activation", defaults.activation)
    agent.check("activation", activation, lambda v: v in ("relu", "tanh"),
                "must be relu or tanh")
    bn_mode = agent.get_str("actor_update_bn_mode", defaults.actor_update_bn_mode)
    agent.check("actor_update_bn_mode", bn_mode, lambda v: v in ("eval", "train"),
                "must be eval or train")

    if reset_interval is not None and variant in ("crossq", "crossq_wn"):
        warnings.append(
            f"[agent] reset_interval: periodic resets are a sac-baseline "
            f"intervention; unusual together with variant={variant}")

    if errors:
        raise ConfigError(errors)

    agent_cfg = AgentConfig(
        variant=variant, utd=utd, actor_utd=actor_utd, gamma=gamma,
        lr_actor=lr_actor, lr_critic=lr_critic, lr_alpha=lr_alpha,
        adam_beta1=adam_beta1, adam_beta2=adam_beta2,
        batch_size=batch_size, actor_widths=actor_widths,
        critic_widths=critic_widths, target_entropy=target_entropy, tau=tau,
        reset_interval=reset_interval, warmup=warmup, buffer_capacity=capacity,
        bn_momentum=bn_momentum, bn_eps=bn_eps, activation=activation,
        actor_update_bn_mode=bn_mode,
        dtype="float64" if width == 64 else "float32",
    )
    run_cfg = RunConfig(
        env_id=env_id, agent=agent_cfg, total_env_steps=total,
        eval_interval=interval, eval_episodes=episodes, seeds=seeds,
        output_dir=output_dir, numeric_width=width, qbias_states=qbias_states,
        qbias_interval=qbias_interval, workers=workers, n_boot=n_boot,
        ci_level=ci_level,
    )
    return run_cfg, warnings


def validate_config(path):
    """Parse the file at ``path``; returns (RunConfig, warnings) or raises
    ConfigError listing every violation."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def replace_agent(cfg: RunConfig, **agent_fields) -> RunConfig:
    return dataclasses.replace(cfg, agent=dataclasses.replace(cfg.agent,
                                                              **agent_fields))
