"""PPO temperature controller and the dynamic distillation loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import DistillConfig, DistillTrace, EpochRecord, _guarded, distill_epoch, kl_divergence, \
    softened_probs, teacher_logits
from .featurizer import DatasetSplit
from .models import Model, glorot
from .numcore import Adam, Tensor, backward, ops

log = logging.getLogger(__name__)

STATE_NAMES = ("acc_mean", "acc_std", "acc_rate", "kl_mean", "kl_std", "kl_rate", "progress")
SIGMA_FLOOR = 1e-6


@dataclass
class ControllerConfig:
    tau_min: float = 1.0
    tau_max: float = 10.0
    window: int = 5
    gamma: float = 0.99
    gae_lambda: float = 1.0
    clip: float = 0.2
    entropy_coef: float = 0.01
    lr: float = 3e-3
    reward_weights: tuple[float, float, float] = (1.0, -0.5, -0.1)
    rho: float = 1.0
    xi_base: float = 0.8
    k_target: float = 0.1
    a_base: float = 0.9
    reward_clip: tuple[float, float] = (-1.0, 1.0)
    sigma_clip: tuple[float, float] = (0.01, 0.1)
    horizon: int = 8
    minor_epochs: int = 4
    hidden: int = 32
    init_sigma: float = 0.25

    def validate(self) -> "ControllerConfig":
        if not 0 < self.tau_min < self.tau_max:
            raise ValueError(f"need 0 < tau_min < tau_max, got [{self.tau_min}, {self.tau_max}]")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 < self.clip < 1:
            raise ValueError(f"clip must lie in (0, 1), got {self.clip}")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.window < 1 or self.horizon < 1 or self.minor_epochs < 1 or self.hidden < 1:
            raise ValueError("window, horizon, minor_epochs and hidden must be >= 1")
        lo, hi = self.sigma_clip
        if not 0 < lo <= hi:
            raise ValueError(f"sigma_clip must satisfy 0 < lo <= hi, got {self.sigma_clip}")
        if self.reward_clip[0] > self.reward_clip[1]:
            raise ValueError(f"reward_clip is empty: {self.reward_clip}")
        if not self.init_sigma > 0:
            raise ValueError("init_sigma must be > 0")
        return self


# ---------------------------------------------------------------- state

@dataclass(frozen=True)
class ControllerState:
    acc_mean: float
    acc_std: float
    acc_rate: float
    kl_mean: float
    kl_std: float
    kl_rate: float
    progress: float

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in STATE_NAMES])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.vector())))


def _window_stats(history, k: int) -> tuple[float, float, float]:
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        raise ValueError("telemetry history is empty")
    w = h[-min(k, h.size):]
    if w.size == 1:
        return float(w[0]), 0.0, 0.0
    x = np.arange(w.size, dtype=np.float64)
    xc = x - x.mean()
    slope = float((xc * (w - w.mean())).sum() / (xc * xc).sum())
    return float(w.mean()), float(w.std()), slope


def state_features(acc_history, kl_history, epoch: int, total_epochs: int, k: int) -> ControllerState:
    """Moving mean, population std and least-squares slope over the last ``k`` entries."""
    am, asd, ar = _window_stats(acc_history, k)
    km, ksd, kr = _window_stats(kl_history, k)
    zeta = min(max(epoch / total_epochs, 0.0), 1.0) if total_epochs > 0 else 1.0
    return ControllerState(am, asd, ar, km, ksd, kr, zeta)


# ---------------------------------------------------------------- policy

class PolicyNets:
    """Actor ``7 -> (mu, log sigma)`` with tanh hidden layers, and a linear critic ``7 -> 1``.

    ``mu`` passes through a sigmoid so it lives in the action interval.
    """

    def __init__(self, cfg: ControllerConfig, rng: np.random.Generator):
        d, h = len(STATE_NAMES), cfg.hidden

        def dense(n_in, n_out, scale=1.0):
            return (Tensor(glorot(rng, (n_in, n_out), n_in, n_out) * scale, requires_grad=True),
                    Tensor(np.zeros(n_out), requires_grad=True))

        self.actor: dict[str, Tensor] = {}
        for name, (n_in, n_out, scale) in {"l1": (d, h, 1.0), "l2": (h, h, 1.0),
                                           "mu": (h, 1, 0.01), "log_sigma": (h, 1, 0.01)}.items():
            self.actor[f"{name}.W"], self.actor[f"{name}.b"] = dense(n_in, n_out, scale)
        self.actor["log_sigma.b"].data[:] = math.log(cfg.init_sigma)
        self.critic: dict[str, Tensor] = {}
        self.critic["v.W"], self.critic["v.b"] = dense(d, 1)

    def actor_params(self) -> list[Tensor]:
        return list(self.actor.values())

    def critic_params(self) -> list[Tensor]:
        return list(self.critic.values())

    def heads(self, states: np.ndarray, sigma_clip) -> tuple[Tensor, Tensor]:
        """``(mu, log_sigma)`` for a ``(B, 7)`` batch, each shaped ``(B,)``."""
        mu, sigma = self.mu_sigma(states, sigma_clip)
        return mu, ops.log(sigma)

    def mu_sigma(self, states: np.ndarray, sigma_clip) -> tuple[Tensor, Tensor]:
        """``(mu, sigma)`` for a ``(B, 7)`` batch, each shaped ``(B,)``.

        ``sigma_clip`` is ``None`` (only the positive floor applies), a
        ``(lo, hi)`` pair applied to every row, or a tuple of the pair and a
        boolean row mask selecting which rows are clamped.
        """
        a = self.actor
        h = ops.tanh(Tensor(states) @ a["l1.W"] + a["l1.b"])
        h = ops.tanh(h @ a["l2.W"] + a["l2.b"])
        mu = ops.sigmoid(h @ a["mu.W"] + a["mu.b"]).reshape(-1)
        raw = ops.exp(h @ a["log_sigma.W"] + a["log_sigma.b"]).reshape(-1)
        floored = ops.clip(raw, SIGMA_FLOOR, np.inf)
        if sigma_clip is None:
            sigma = floored
        else:
            (lo, hi), mask = (sigma_clip, None) if not isinstance(sigma_clip[0], tuple) else sigma_clip
            clamped = ops.clip(raw, lo, hi)
            if mask is None:
                sigma = clamped
            else:
                m = np.asarray(mask, dtype=np.float64)
                sigma = clamped * Tensor(m) + floored * Tensor(1.0 - m)
        return mu, sigma

    def value(self, states: np.ndarray) -> Tensor:
        return (Tensor(np.atleast_2d(states)) @ self.critic["v.W"] + self.critic["v.b"]).reshape(-1)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"actor.{k}": v.data.copy() for k, v in self.actor.items()}
        out.update({f"critic.{k}": v.data.copy() for k, v in self.critic.items()})
        return out


@dataclass
class ActionSample:
    action: float     # clipped to [0, 1]
    pre_clip: float   # raw Gaussian draw
    log_prob: float   # of the raw draw
    mu: float
    sigma: float


def sample_action(state: ControllerState | np.ndarray, nets: PolicyNets, rng: np.random.Generator,
                  sigma_clip=None) -> ActionSample:
    s = state.vector() if isinstance(state, ControllerState) else np.asarray(state, dtype=np.float64)
    mu, sigma = nets.mu_sigma(s[None, :], sigma_clip)
    m, sd = float(mu.data[0]), float(sigma.data[0])
    x = m + sd * float(rng.standard_normal())
    lp = float(ops.gaussian_log_prob(np.array([x]), mu, ops.log(sigma)).data[0])
    return ActionSample(min(max(x, 0.0), 1.0), x, lp, m, sd)


def map_temperature(a: float, tau_min: float, tau_max: float) -> float:
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"action must lie in [0, 1], got {a}")
    return tau_min + a * (tau_max - tau_min)


def reward(xi: float, k: float, tau: float, tau_prev: float, cfg: ControllerConfig) -> float:
    """Weighted accuracy gain, KL mismatch and temperature churn, clipped to ``cfg.reward_clip``."""
    w1, w2, w3 = cfg.reward_weights
    r = (w1 * (xi - cfg.xi_base) + w2 * math.log1p(10.0 * (k - cfg.k_target) ** 2)
         + w3 * abs(tau - tau_prev) ** cfg.rho)
    lo, hi = cfg.reward_clip
    return min(max(r, lo), hi)


def gae(rewards, values, value_next: float, gamma: float, lam: float = 1.0) -> np.ndarray:
    """Generalized advantages by backward recursion; ``value_next`` bootstraps past the last step."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape or r.ndim != 1:
        raise ValueError(f"rewards {r.shape} and values {v.shape} must be equal-length vectors")
    v_next = np.append(v[1:], value_next)
    delta = r + gamma * v_next - v
    adv = np.zeros_like(delta)
    acc = 0.0
    for t in range(delta.size - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return adv


def clipped_objective(log_prob_new, log_prob_old, adv, kappa: float) -> Tensor:
    """Per-step ``min(r A, clip(r, 1-kappa, 1+kappa) A)`` with ``r = exp(new - old)``."""
    ratio = ops.exp(ops.as_tensor(log_prob_new) - ops.as_tensor(log_prob_old))
    adv = ops.as_tensor(adv)
    return ops.minimum(ratio * adv, ops.clip(ratio, 1.0 - kappa, 1.0 + kappa) * adv)


def entropy_bonus(log_sigma) -> Tensor:
    """Gaussian differential entropy ``0.5 ln(2 pi e sigma^2)`` from ``log sigma``."""
    return ops.as_tensor(log_sigma) + 0.5 * math.log(2.0 * math.pi * math.e)


def gaussian_entropy(sigma: float) -> float:
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return float(entropy_bonus(Tensor(math.log(sigma))).item())


# ---------------------------------------------------------------- buffer and update

@dataclass
class RolloutBuffer:
    capacity: int
    states: list[np.ndarray] = field(default_factory=list)
    pre_clip: list[float] = field(default_factory=list)
    actions: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    clamped: list[bool] = field(default_factory=list)

    def push(self, state: np.ndarray, sample: ActionSample, r: float, value: float, clamped: bool) -> None:
        if self.full:
            raise RuntimeError("rollout buffer is full; run policy_update first")
        self.states.append(np.asarray(state, dtype=np.float64))
        self.pre_clip.append(sample.pre_clip)
        self.actions.append(sample.action)
        self.rewards.append(float(r))
        self.log_probs.append(sample.log_prob)
        self.values.append(float(value))
        self.clamped.append(bool(clamped))

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity

    def clear(self) -> None:
        for name in ("states", "pre_clip", "actions", "rewards", "log_probs", "values", "clamped"):
            getattr(self, name).clear()


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    c = adv - adv.mean()
    sd = adv.std()
    return c / (sd + 1e-8) if sd > 0 else c


def actor_loss(nets: PolicyNets, buf: RolloutBuffer, adv_norm: np.ndarray, cfg: ControllerConfig) -> Tensor:
    """``-(mean surrogate + omega * mean entropy)`` over the buffer."""
    states = np.stack(buf.states)
    mu, log_sigma = nets.heads(states, (tuple(cfg.sigma_clip), buf.clamped))
    lp = ops.gaussian_log_prob(np.array(buf.pre_clip), mu, log_sigma)
    surr = clipped_objective(lp, np.array(buf.log_probs), adv_norm, cfg.clip).mean()
    return -(surr + entropy_bonus(log_sigma).mean() * cfg.entropy_coef)


def critic_loss(nets: PolicyNets, buf: RolloutBuffer, returns: np.ndarray) -> Tensor:
    d = nets.value(np.stack(buf.states)) - Tensor(returns)
    return (d * d).mean()


@dataclass
class UpdateStats:
    advantages: np.ndarray
    returns: np.ndarray
    actor_loss: float
    critic_loss: float


def policy_update(buf: RolloutBuffer, nets: PolicyNets, cfg: ControllerConfig, actor_opt: Adam,
                  critic_opt: Adam, value_next: float = 0.0) -> UpdateStats:
    """Several full-buffer actor and critic steps, then clear the buffer."""
    if len(buf) == 0:
        raise ValueError("policy_update needs a nonempty buffer")
    adv = gae(buf.rewards, buf.values, value_next, cfg.gamma, cfg.gae_lambda)
    returns = adv + np.asarray(buf.values)
    adv_norm = normalize_advantages(adv)
    a_loss = c_loss = float("nan")
    for _ in range(cfg.minor_epochs):
        loss = actor_loss(nets, buf, adv_norm, cfg)
        actor_opt.step(backward(loss, nets.actor_params()))
        a_loss = float(loss.item())
        closs = critic_loss(nets, buf, returns)
        critic_opt.step(backward(closs, nets.critic_params()))
        c_loss = float(closs.item())
    buf.clear()
    return UpdateStats(adv, returns, a_loss, c_loss)


# ---------------------------------------------------------------- dynamic loop

CONTROLLER_COLUMNS = ("t",) + STATE_NAMES + ("a", "tau", "reward", "sigma", "mu", "clamped", "held", "val_acc")


@dataclass
class ControllerTrace:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CONTROLLER_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else int(v) if isinstance(v, bool) else v
                            for k, v in r.items()})


@dataclass
class DynamicResult:
    trace: DistillTrace
    controller: ControllerTrace
    nets: PolicyNets
    updates: list[UpdateStats]


def _initial_telemetry(student: Model, t_logits: np.ndarray, data: DatasetSplit, tau: float) -> tuple[float, float]:
    s_logits = student.predict_logits(data.train.x)
    acc = float(np.mean(s_logits.argmax(axis=1) == data.train.y))
    kl = float(kl_divergence(softened_probs(t_logits, tau), softened_probs(s_logits, tau)).mean())
    return acc, kl


def dynamic_distill(student: Model, teacher: Model | np.ndarray, data: DatasetSplit, dcfg: DistillConfig,
                    ccfg: ControllerConfig, rng: np.random.Generator,
                    controller_rng: np.random.Generator) -> DynamicResult:
    """Distillation with the temperature chosen each epoch by the PPO controller.

    ``rng`` drives the student's batch order and dropout exactly as in the
    other modes; ``controller_rng`` drives policy init and action noise.
    Telemetry histories start from the untrained student scored at the
    middle of the temperature range.
    """
    dcfg.validate()
    ccfg.validate()
    t_logits = teacher if isinstance(teacher, np.ndarray) else teacher_logits(teacher, data.train.x)
    nets = PolicyNets(ccfg, controller_rng)
    actor_opt = Adam(nets.actor_params(), lr=ccfg.lr)
    critic_opt = Adam(nets.critic_params(), lr=ccfg.lr)
    opt = dcfg.optim.make(student.parameters())
    buf = RolloutBuffer(ccfg.horizon)
    tau_prev = 0.5 * (ccfg.tau_min + ccfg.tau_max)
    acc0, kl0 = _initial_telemetry(student, t_logits, data, tau_prev)
    acc_hist, kl_hist = [acc0], [kl0]
    trace, ctrace, updates = DistillTrace("dynamic"), ControllerTrace(), []
    clamped, val_acc = False, float("nan")
    total = dcfg.epochs
    for t in range(1, total + 1):
        t0 = time.perf_counter()
        state = state_features(acc_hist, kl_hist, t - 1, total, ccfg.window)
        if val_acc > ccfg.a_base:
            clamped = True
        sig_clip = tuple(ccfg.sigma_clip) if clamped else None
        held = not state.is_finite()
        if held:
            log.warning("controller step %d: non-finite telemetry, holding tau=%g", t, tau_prev)
            tau, sample = tau_prev, None
        else:
            sample = sample_action(state, nets, controller_rng, sig_clip)
            tau = map_temperature(sample.action, ccfg.tau_min, ccfg.tau_max)
        m = _guarded(student, t, lambda: distill_epoch(student, t_logits, data, tau, dcfg.beta, opt, rng,
                                                       dcfg.batch_size, dcfg.tau_squared, dcfg.direction))
        xi, k = m.train_acc, m.kl
        telemetry_ok = k is not None and math.isfinite(k) and math.isfinite(xi)
        if not telemetry_ok:
            log.warning("controller step %d: non-finite telemetry (acc %r, kl %r), reward set to 0", t, xi, k)
        r = reward(xi, k, tau, tau_prev, ccfg) if telemetry_ok else 0.0
        if sample is not None:
            value = float(nets.value(state.vector()).data[0])
            buf.push(state.vector(), sample, r, value, clamped)
        acc_hist.append(xi)
        kl_hist.append(k if k is not None else float("nan"))
        val_acc = m.val_acc
        a_t = sample.action if sample else (tau - ccfg.tau_min) / (ccfg.tau_max - ccfg.tau_min)
        sigma = sample.sigma if sample else float("nan")
        trace.append(EpochRecord(t, tau, xi, val_acc, m.ce, k if telemetry_ok else None, r,
                                 time.perf_counter() - t0, m.batch_acc))
        ctrace.rows.append({"t": t, **dict(zip(STATE_NAMES, state.vector().tolist())), "a": a_t, "tau": tau,
                            "reward": r, "sigma": sigma, "mu": sample.mu if sample else float("nan"),
                            "clamped": clamped, "held": held, "val_acc": val_acc})
        if buf.full or (t == total and len(buf)):
            v_next = 0.0
            if t < total:
                nxt = state_features(acc_hist, kl_hist, t, total, ccfg.window)
                v_next = float(nets.value(nxt.vector()).data[0]) if nxt.is_finite() else 0.0
            updates.append(policy_update(buf, nets, ccfg, actor_opt, critic_opt, v_next))
        log.info("dynamic epoch %d: tau %.3f sigma %.4f reward %.4f val %.4f", t, tau, sigma, r, val_acc)
        tau_prev = tau
    return DynamicResult(trace, ctrace, nets, updates)

