"""PPO with a frozen ternary backbone: rollouts, GAE, clipped updates.

Only the policy and value heads train. The update is the clipped surrogate
with an entropy bonus under the quantization-hardened configuration
(epsilon 0.1, entropy coefficient 0.05, grad clip 0.5). Critic precision is
an ablation axis: the value head can read ternary latents, FP-shadow
latents, or average an ensemble of independently initialized heads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import envs, heads
from .backbone import BackboneConfig, BackboneModel, build_backbone, encode
from .checkpoint import (backbone_from_tensors, backbone_to_tensors,
                         head_from_tensors, head_to_tensors, load_checkpoint,
                         save_checkpoint)
from .tensor_core import RngStream, entropy_of_rows, softmax
from .text import default_vocabulary, serialize_state

CRITIC_MODES = ("ternary", "fp32", "ensemble3", "ensemble5")
VALUE_LOSS_COEF = 0.5
_DIVERGENCE_PATIENCE = 20
_EVALS_FOR_FAILURE = 10
_EVAL_EPISODES = 20


@dataclass(frozen=True)
class TrainConfig:
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    clip_epsilon: float = 0.1
    entropy_coef: float = 0.05
    discount: float = 0.99
    gae_lambda: float = 0.95
    minibatch: int = 64
    epochs_per_update: int = 4
    rollout_length: int = 2048
    grad_clip: float = 0.5          # <= 0 disables clipping
    total_steps: int = 500_000
    eval_every: int = 50_000
    seed: int = 0
    critic_mode: str = "ternary"
    stop_return: float | None = None  # optional early stop on eval return

    def __post_init__(self) -> None:
        if not (0.0 < self.clip_epsilon < 1.0):
            raise ValueError("clip_epsilon must be in (0, 1)")
        if not (0.0 < self.discount < 1.0):
            raise ValueError("discount must be in (0, 1)")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.critic_mode not in CRITIC_MODES:
            raise ValueError(f"critic_mode must be one of {CRITIC_MODES}")


_CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


def parse_config(path, overrides: dict | None = None) -> tuple:
    """Flat key = value config file; unknown keys are rejected.

    Missing keys fall back to the defaults; returns (config, list of
    fallback messages) so callers can log them.
    """
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        f = _CONFIG_FIELDS[key]
        if key == "critic_mode":
            values[key] = val
        elif key == "stop_return":
            values[key] = None if val.lower() == "none" else float(val)
        elif f.type == "int":
            values[key] = int(val)
        else:
            values[key] = float(val)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = TrainConfig(**values)
    notes = [f"config key {name} not set; using default {getattr(cfg, name)!r}"
             for name in _CONFIG_FIELDS if name not in values]
    return cfg, notes


class LatentEncoder:
    """serialize -> tokenize -> encode, with a text-keyed latent cache.

    Serialization discretizes observations to 0.01, so near-identical states
    share latents; caching them is exact, not approximate.
    """

    def __init__(self, model: BackboneModel, env_id: str, cache_size: int = 100_000):
        self.model = model
        self.env_id = env_id
        self.cache_size = cache_size
        self._cache: dict = {}

    def latent(self, obs: np.ndarray, instruction: str | None = None) -> np.ndarray:
        text = serialize_state(self.env_id, obs, instruction)
        h = self._cache.get(text)
        if h is None:
            h = encode(self.model, self.model.vocab.tokenize(text))
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[text] = h
        return h


@dataclass
class CriticEnsemble:
    mode: str                      # "ternary", "fp32", or "ensemble"
    members: list                  # k value heads
    uses_fp_latents: bool

    @property
    def k(self) -> int:
        return len(self.members)

    def value(self, h_ternary: np.ndarray, h_fp: np.ndarray | None = None):
        h = h_fp if self.uses_fp_latents else h_ternary
        preds = [heads.value_forward(m, h) for m in self.members]
        if np.asarray(preds[0]).ndim == 0:
            return float(np.mean(preds))
        return np.mean(preds, axis=0)


def make_critic(mode: str, in_dim: int, rng: RngStream,
                fp_shadow_available: bool = True) -> CriticEnsemble:
    if mode == "ternary":
        k, uses_fp = 1, False
    elif mode == "fp32":
        if not fp_shadow_available:
            raise ValueError("fp32 critic mode needs the FP-shadow backbone")
        k, uses_fp = 1, True
    elif mode in ("ensemble3", "ensemble5"):
        k, uses_fp = int(mode[-1]), False
    else:
        raise ValueError(f"unknown critic mode {mode!r}")
    members = [heads.init_value_head(in_dim, rng.derive(i)) for i in range(k)]
    return CriticEnsemble("ensemble" if k > 1 else mode, members, uses_fp)


def sample_categorical(probs: np.ndarray, rng: RngStream) -> int:
    """Exact cumulative-probability inversion (reproducible)."""
    u = float(rng.random())
    c = np.cumsum(probs)
    return int(np.searchsorted(c, u * c[-1], side="right").clip(0, probs.size - 1))


@dataclass
class RolloutBuffer:
    latents: np.ndarray          # (n, d) ternary-path latents
    latents_fp: np.ndarray | None
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    bootstrap_value: float
    episode_returns: list        # returns of episodes completed in this rollout
    advantages: np.ndarray | None = None
    return_targets: np.ndarray | None = None

    def __len__(self) -> int:
        return self.actions.shape[0]


@dataclass
class RolloutContext:
    """Persistent environment state across rollout boundaries."""
    env_id: str
    env_rng: RngStream
    sample_rng: RngStream
    state: envs.EnvState | None = None
    episode_return: float = 0.0


def collect_rollout(ctx: RolloutContext, enc: LatentEncoder,
                    enc_fp: LatentEncoder | None, policy: heads.HeadParams,
                    critic: CriticEnsemble, cfg: TrainConfig) -> RolloutBuffer:
    n = cfg.rollout_length
    d = enc.model.cfg.d_model
    need_fp = critic.uses_fp_latents
    lat = np.empty((n, d))
    lat_fp = np.empty((n, d)) if need_fp else None
    actions = np.empty(n, dtype=np.int64)
    log_probs = np.empty(n)
    rewards = np.empty(n)
    values = np.empty(n)
    dones = np.empty(n, dtype=np.float64)
    episode_returns = []

    if ctx.state is None or ctx.state.done:
        ctx.state = envs.reset(ctx.env_id, ctx.env_rng.derive(0))
        ctx.episode_return = 0.0
    step_rng = ctx.env_rng

    for t in range(n):
        s = ctx.state
        h = enc.latent(s.obs, s.instruction)
        hf = enc_fp.latent(s.obs, s.instruction) if need_fp else None
        probs = heads.policy_forward(policy, h)
        a = sample_categorical(probs, ctx.sample_rng)
        try:
            result, nxt = envs.step(s, a, step_rng)
        except envs.EpisodeDoneError:
            raise
        except Exception as e:  # annotate with the step index
            raise RuntimeError(f"environment error at rollout step {t}") from e
        lat[t] = h
        if need_fp:
            lat_fp[t] = hf
        actions[t] = a
        log_probs[t] = np.log(probs[a])
        rewards[t] = result.reward
        values[t] = critic.value(h, hf)
        done = result.done or result.truncated
        dones[t] = 1.0 if done else 0.0
        ctx.episode_return += result.reward
        if done:
            episode_returns.append(ctx.episode_return)
            ctx.episode_return = 0.0
            ctx.state = envs.reset(ctx.env_id, ctx.env_rng.derive(t + 1))
        else:
            ctx.state = nxt

    if dones[-1]:
        bootstrap = 0.0
    else:
        s = ctx.state
        h = enc.latent(s.obs, s.instruction)
        hf = enc_fp.latent(s.obs, s.instruction) if need_fp else None
        bootstrap = critic.value(h, hf)
    return RolloutBuffer(lat, lat_fp, actions, log_probs, rewards, values,
                         dones, float(bootstrap), episode_returns)


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    """Backward GAE recursion plus per-rollout advantage normalization."""
    n = len(buffer)
    adv = np.empty(n)
    next_values = np.append(buffer.values[1:], buffer.bootstrap_value)
    deltas = buffer.rewards + gamma * next_values * (1.0 - buffer.dones) - buffer.values
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = deltas[t] + gamma * lam * (1.0 - buffer.dones[t]) * acc
        adv[t] = acc
    buffer.return_targets = adv + buffer.values
    std = max(float(adv.std()), 1e-8)
    buffer.advantages = (adv - adv.mean()) / std
    return buffer


@dataclass
class UpdateMetrics:
    step: int
    mean_return: float
    policy_entropy: float
    value_loss: float
    grad_norm: float
    approx_kl: float
    clip_fraction: float
    failure_flag: bool

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "mean_return": self.mean_return,
            "entropy": self.policy_entropy,
            "value_loss": self.value_loss,
            "grad_norm": self.grad_norm,
            "approx_kl": self.approx_kl,
            "clip_fraction": self.clip_fraction,
            "failed": self.failure_flag,
        })


def policy_loss_gradient(logits: np.ndarray, actions: np.ndarray,
                         old_log_probs: np.ndarray, advantages: np.ndarray,
                         clip_epsilon: float, entropy_coef: float):
    """Loss value and d(loss)/d(logits) for the clipped surrogate + entropy.

    Gradient through the ratio is zero for samples where the clipped branch
    is active; the entropy bonus always contributes.
    """
    n = logits.shape[0]
    log_p = logits - logits.max(axis=1, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    idx = np.arange(n)
    new_log = log_p[idx, actions]
    ratio = np.exp(new_log - old_log_probs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantages
    surrogate = np.minimum(unclipped, clipped)
    ent = entropy_of_rows(p)
    loss = float(-(surrogate.mean()) - entropy_coef * ent.mean())

    active = unclipped <= clipped
    d_newlog = np.where(active, -ratio * advantages, 0.0) / n
    one_hot = np.zeros_like(p)
    one_hot[idx, actions] = 1.0
    d_logits = d_newlog[:, None] * (one_hot - p)
    d_logits += entropy_coef * p * (log_p + ent[:, None]) / n
    stats = {
        "entropy": float(ent.mean()),
        "approx_kl": float((old_log_probs - new_log).mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_epsilon)),
    }
    return loss, d_logits, stats


@dataclass
class Trainer:
    """Bundles heads and optimizer state for the update step."""
    policy: heads.HeadParams
    critic: CriticEnsemble
    policy_opt: heads.AdamState
    critic_opts: list

    @staticmethod
    def build(in_dim: int, n_actions: int, cfg: TrainConfig,
              fp_shadow_available: bool = True) -> "Trainer":
        policy = heads.init_policy_head(in_dim, n_actions, RngStream(cfg.seed, 102))
        critic = make_critic(cfg.critic_mode, in_dim, RngStream(cfg.seed, 103),
                             fp_shadow_available)
        return Trainer(policy, critic, heads.AdamState.for_params(policy),
                       [heads.AdamState.for_params(m) for m in critic.members])


def ppo_update(buffer: RolloutBuffer, trainer: Trainer, cfg: TrainConfig,
               shuffle_rng: RngStream, step: int,
               eval_history: list | None = None, env_id: str | None = None) -> UpdateMetrics:
    if buffer.advantages is None:
        raise ValueError("advantages not computed; call compute_gae first")
    n = len(buffer)
    critic_latents = buffer.latents_fp if trainer.critic.uses_fp_latents else buffer.latents
    nonfinite = False
    stats_acc = {"entropy": [], "approx_kl": [], "clip_fraction": [],
                 "value_loss": [], "grad_norm": []}
    for epoch in range(cfg.epochs_per_update):
        order = np.argsort(shuffle_rng.random(n), kind="stable")
        final_epoch = epoch == cfg.epochs_per_update - 1
        for start in range(0, n, cfg.minibatch):
            mb = order[start:start + cfg.minibatch]
            h_mb = buffer.latents[mb]
            cache = heads.forward(trainer.policy, h_mb)
            loss, d_logits, stats = policy_loss_gradient(
                cache.out, buffer.actions[mb], buffer.log_probs[mb],
                buffer.advantages[mb], cfg.clip_epsilon, cfg.entropy_coef)

            targets = buffer.return_targets[mb]
            hc_mb = critic_latents[mb]
            member_caches = [heads.forward(m, hc_mb) for m in trainer.critic.members]
            v_mean = np.mean([c.out[:, 0] for c in member_caches], axis=0)
            value_loss = VALUE_LOSS_COEF * float(np.mean((v_mean - targets) ** 2))

            if not (np.isfinite(loss) and np.isfinite(value_loss)):
                nonfinite = True
                continue

            grads = heads.backward(trainer.policy, cache, d_logits)
            info = heads.apply_update(trainer.policy, grads, cfg.policy_lr,
                                      cfg.grad_clip, trainer.policy_opt)
            if not info.applied:
                nonfinite = True
            for m, mc, opt in zip(trainer.critic.members, member_caches,
                                  trainer.critic_opts):
                dv = (mc.out[:, 0] - targets) / mb.size
                vgrads = heads.backward(m, mc, dv[:, None])
                vinfo = heads.apply_update(m, vgrads, cfg.value_lr,
                                           cfg.grad_clip, opt)
                if not vinfo.applied:
                    nonfinite = True
            if final_epoch:
                stats_acc["entropy"].append(stats["entropy"])
                stats_acc["approx_kl"].append(stats["approx_kl"])
                stats_acc["clip_fraction"].append(stats["clip_fraction"])
                stats_acc["value_loss"].append(value_loss)
                if info.applied:
                    stats_acc["grad_norm"].append(info.grad_norm)

    mean_return = float(np.mean(buffer.episode_returns)) if buffer.episode_returns \
        else float(buffer.rewards.sum())
    failed = nonfinite
    if env_id is not None and eval_history is not None and \
            len(eval_history) >= _EVALS_FOR_FAILURE:
        recent = float(np.mean(eval_history[-_EVALS_FOR_FAILURE:]))
        if recent < envs.FAILURE_FLOOR[env_id]:
            failed = True

    def agg(key):
        return float(np.mean(stats_acc[key])) if stats_acc[key] else float("nan")

    return UpdateMetrics(step, mean_return, agg("entropy"), agg("value_loss"),
                         agg("grad_norm"), agg("approx_kl"),
                         agg("clip_fraction"), failed)


DEFAULT_BACKBONE = BackboneConfig()


def _meta_tensor(cfg: BackboneConfig) -> np.ndarray:
    return np.array([cfg.layers, cfg.d_model, cfg.n_heads, cfg.ffn_dim],
                    dtype=np.float32)


def save_agent_checkpoint(path, backbone, policy, critic) -> None:
    tensors = {"meta.backbone": _meta_tensor(backbone.cfg)}
    tensors["meta.critic"] = np.array(
        [len(critic.members), 1.0 if critic.uses_fp_latents else 0.0],
        dtype=np.float32)
    tensors.update(backbone_to_tensors(backbone))
    tensors.update(head_to_tensors("policy", policy))
    for i, m in enumerate(critic.members):
        tensors.update(head_to_tensors(f"critic{i}", m))
    save_checkpoint(path, tensors, backbone.vocab.id_to_token)


def load_agent_checkpoint(path):
    tensors, vocab_tokens = load_checkpoint(path)
    meta = tensors["meta.backbone"]
    cfg = BackboneConfig(int(meta[0]), int(meta[1]), int(meta[2]), int(meta[3]))
    vocab = default_vocabulary()
    if vocab_tokens is not None and vocab_tokens != vocab.id_to_token:
        raise ValueError("checkpoint vocabulary does not match the build")
    backbone = backbone_from_tensors(tensors, cfg, vocab)
    policy = head_from_tensors("policy", tensors)
    k = int(tensors["meta.critic"][0])
    uses_fp = bool(tensors["meta.critic"][1])
    members = [head_from_tensors(f"critic{i}", tensors) for i in range(k)]
    critic = CriticEnsemble("ensemble" if k > 1 else ("fp32" if uses_fp else "ternary"),
                            members, uses_fp)
    return backbone, policy, critic


@dataclass
class TrainResult:
    status: str                  # "completed", "solved", or "diverged"
    metrics: list
    evals: list                  # (step, mean, std)
    checkpoint_path: str | None
    final_eval: float | None


def evaluate_policy(enc: LatentEncoder, policy: heads.HeadParams, env_id: str,
                    episodes: int, rng: RngStream):
    """Deterministic argmax evaluation; returns (mean, std, per-episode)."""
    returns = []
    for ep in range(episodes):
        state = envs.reset(env_id, rng.derive(ep))
        total = 0.0
        while not state.done:
            h = enc.latent(state.obs, state.instruction)
            probs = heads.policy_forward(policy, h)
            result, state = envs.step(state, int(np.argmax(probs)), rng)
            total += result.reward
        returns.append(total)
    returns = np.asarray(returns)
    return float(returns.mean()), float(returns.std()), returns.tolist()


def train(env_id: str, cfg: TrainConfig, out_dir,
          backbone_cfg: BackboneConfig = DEFAULT_BACKBONE) -> TrainResult:
    """Full loop: rollouts, GAE, clipped updates, periodic deterministic eval.

    Writes metrics.jsonl (one JSON object per update), evals.jsonl, and the
    final BTRL checkpoint. Aborts with "diverged" status after 20
    consecutive failed updates.
    """
    if env_id not in envs.ENV_IDS:
        raise KeyError(f"unknown environment id {env_id!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ternary_bb, shadow_bb = build_backbone(backbone_cfg, RngStream(cfg.seed, 101))
    frozen_checksum = ternary_bb.checksum()
    enc = LatentEncoder(ternary_bb, env_id)
    enc_fp = LatentEncoder(shadow_bb, env_id) if cfg.critic_mode == "fp32" else None
    trainer = Trainer.build(backbone_cfg.d_model, envs.action_count(env_id), cfg)
    ctx = RolloutContext(env_id, RngStream(cfg.seed, 201), RngStream(cfg.seed, 202))
    shuffle_rng = RngStream(cfg.seed, 203)

    metrics: list = []
    evals: list = []
    eval_means: list = []
    steps = 0
    next_eval = cfg.eval_every
    consecutive_failures = 0
    status = "completed"

    with open(out / "metrics.jsonl", "w") as mf, open(out / "evals.jsonl", "w") as ef:
        while steps < cfg.total_steps:
            buffer = collect_rollout(ctx, enc, enc_fp, trainer.policy,
                                     trainer.critic, cfg)
            steps += len(buffer)
            compute_gae(buffer, cfg.discount, cfg.gae_lambda)
            m = ppo_update(buffer, trainer, cfg, shuffle_rng, steps,
                           eval_means, env_id)
            metrics.append(m)
            mf.write(m.to_json() + "\n")
            consecutive_failures = consecutive_failures + 1 if m.failure_flag else 0
            if consecutive_failures >= _DIVERGENCE_PATIENCE:
                status = "diverged"
                break
            while steps >= next_eval:
                mean, std, _ = evaluate_policy(
                    enc, trainer.policy, env_id, _EVAL_EPISODES,
                    RngStream(cfg.seed, 300 + next_eval // cfg.eval_every))
                evals.append((next_eval, mean, std))
                eval_means.append(mean)
                ef.write(json.dumps({"step": next_eval, "mean_return": mean,
                                     "std_return": std}) + "\n")
                next_eval += cfg.eval_every
                if cfg.stop_return is not None and mean >= cfg.stop_return:
                    status = "solved"
                    break
            if status == "solved":
                break

    if ternary_bb.checksum() != frozen_checksum:
        raise RuntimeError("frozen backbone was modified during training")

    ckpt = out / "checkpoint.btrl"
    save_agent_checkpoint(ckpt, ternary_bb, trainer.policy, trainer.critic)
    final_eval = None
    if status != "diverged":
        mean, std, _ = evaluate_policy(enc, trainer.policy, env_id,
                                       _EVAL_EPISODES, RngStream(cfg.seed, 299))
        final_eval = mean
        with open(out / "evals.jsonl", "a") as ef:
            ef.write(json.dumps({"step": steps, "mean_return": mean,
                                 "std_return": std, "final": True}) + "\n")
    return TrainResult(status, metrics, evals, str(ckpt), final_eval)


def evaluate(checkpoint_path, env_id: str, episodes: int, rng: RngStream):
    """Deterministic evaluation from a checkpoint; (mean, std, returns)."""
    backbone, policy, _ = load_agent_checkpoint(checkpoint_path)
    if policy.out_dim != envs.action_count(env_id):
        raise ValueError(f"checkpoint policy has {policy.out_dim} actions; "
                         f"{env_id} needs {envs.action_count(env_id)}")
    enc = LatentEncoder(backbone, env_id)
    return evaluate_policy(enc, policy, env_id, episodes, rng)
