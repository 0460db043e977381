import json

import numpy as np
import pytest

from bitrl import envs, heads, ppo
from bitrl.backbone import BackboneConfig
from bitrl.tensor_core import RngStream, softmax

SMALL = BackboneConfig(layers=2, d_model=64, n_heads=2, ffn_dim=128)


class TestParseConfig:
    def _write(self, tmp_path, text):
        p = tmp_path / "train.cfg"
        p.write_text(text)
        return p

    def test_defaults_match_reference_table(self):
        cfg = ppo.TrainConfig()
        assert cfg.policy_lr == 3e-4
        assert cfg.value_lr == 1e-3
        assert cfg.clip_epsilon == 0.1
        assert cfg.entropy_coef == 0.05
        assert cfg.discount == 0.99
        assert cfg.gae_lambda == 0.95
        assert cfg.minibatch == 64
        assert cfg.epochs_per_update == 4
        assert cfg.rollout_length == 2048
        assert cfg.grad_clip == 0.5
        assert cfg.eval_every == 50_000

    def test_parse_and_fallback_notes(self, tmp_path):
        p = self._write(tmp_path, "policy_lr = 0.001\nseed = 3\n# comment\n")
        cfg, notes = ppo.parse_config(p)
        assert cfg.policy_lr == 0.001 and cfg.seed == 3
        assert any("value_lr" in n for n in notes)
        assert not any("policy_lr" in n for n in notes)

    def test_unknown_key_rejected(self, tmp_path):
        p = self._write(tmp_path, "learning_rate = 0.1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            ppo.parse_config(p)

    def test_missing_equals_rejected(self, tmp_path):
        p = self._write(tmp_path, "policy_lr 0.001\n")
        with pytest.raises(ValueError, match="key = value"):
            ppo.parse_config(p)

    def test_overrides(self, tmp_path):
        p = self._write(tmp_path, "seed = 1\n")
        cfg, _ = ppo.parse_config(p, {"seed": 9, "critic_mode": "ensemble3"})
        assert cfg.seed == 9 and cfg.critic_mode == "ensemble3"

    def test_int_fields_parsed_as_int(self, tmp_path):
        p = self._write(tmp_path, "rollout_length = 256\n")
        cfg, _ = ppo.parse_config(p)
        assert cfg.rollout_length == 256 and isinstance(cfg.rollout_length, int)

    def test_validation(self):
        with pytest.raises(ValueError):
            ppo.TrainConfig(clip_epsilon=0.0)
        with pytest.raises(ValueError):
            ppo.TrainConfig(discount=1.0)
        with pytest.raises(ValueError):
            ppo.TrainConfig(critic_mode="int8")


class TestSampling:
    def test_deterministic(self):
        p = np.array([0.2, 0.5, 0.3])
        a = [ppo.sample_categorical(p, RngStream(0, 1).derive(i)) for i in range(20)]
        b = [ppo.sample_categorical(p, RngStream(0, 1).derive(i)) for i in range(20)]
        assert a == b

    def test_frequencies(self):
        p = np.array([0.1, 0.6, 0.3])
        rng = RngStream(1, 2)
        draws = np.bincount([ppo.sample_categorical(p, rng) for _ in range(20_000)],
                            minlength=3) / 20_000
        np.testing.assert_allclose(draws, p, atol=0.02)

    def test_degenerate_distribution(self):
        p = np.array([0.0, 1.0, 0.0])
        rng = RngStream(2, 3)
        assert all(ppo.sample_categorical(p, rng) == 1 for _ in range(50))


def _manual_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Direct double-sum oracle for the advantage recursion."""
    n = len(rewards)
    next_v = np.append(values[1:], bootstrap)
    deltas = rewards + gamma * next_v * (1 - dones) - values
    adv = np.zeros(n)
    for t in range(n):
        coef = 1.0
        for k in range(t, n):
            adv[t] += coef * deltas[k]
            if dones[k]:
                break
            coef *= gamma * lam
    return adv


def _random_buffer(n=32, seed=0, d=4):
    rng = RngStream(seed, 90)
    dones = (rng.random(n) < 0.1).astype(np.float64)
    return ppo.RolloutBuffer(
        latents=rng.normal(size=(n, d)), latents_fp=None,
        actions=rng.integers(0, 2, size=n).astype(np.int64),
        log_probs=np.log(rng.uniform(0.3, 0.7, size=n)),
        rewards=rng.normal(size=n), values=rng.normal(size=n),
        dones=dones, bootstrap_value=float(rng.normal()), episode_returns=[10.0])


class TestGae:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_direct_sum_oracle(self, seed):
        buf = _random_buffer(seed=seed)
        raw = _manual_gae(buf.rewards, buf.values, buf.dones,
                          buf.bootstrap_value, 0.99, 0.95)
        ppo.compute_gae(buf, 0.99, 0.95)
        # return targets carry the un-normalized advantages
        np.testing.assert_allclose(buf.return_targets - buf.values, raw,
                                   rtol=1e-10, atol=1e-12)

    def test_advantages_normalized(self):
        buf = ppo.compute_gae(_random_buffer(seed=5), 0.99, 0.95)
        assert buf.advantages.mean() == pytest.approx(0.0, abs=1e-12)
        assert buf.advantages.std() == pytest.approx(1.0, rel=1e-9)

    def test_done_blocks_bootstrap(self):
        buf = _random_buffer(seed=6)
        buf.dones[:] = 1.0
        ppo.compute_gae(buf, 0.99, 0.95)
        np.testing.assert_allclose(buf.return_targets, buf.rewards, atol=1e-12)

    def test_lambda_zero_is_one_step_td(self):
        buf = _random_buffer(seed=7)
        next_v = np.append(buf.values[1:], buf.bootstrap_value)
        ppo.compute_gae(buf, 0.9, 0.0)
        td = buf.rewards + 0.9 * next_v * (1 - buf.dones) - buf.values
        np.testing.assert_allclose(buf.return_targets - buf.values, td, atol=1e-12)


class TestPolicyLossGradient:
    def _setup(self, seed=0, n=16, k=3):
        rng = RngStream(seed, 91)
        logits = rng.normal(size=(n, k))
        actions = rng.integers(0, k, size=n)
        adv = rng.normal(size=n)
        old = np.log(softmax(logits)[np.arange(n), actions]) + rng.normal(size=n) * 0.1
        return logits, actions, old, adv

    def test_gradient_matches_finite_differences(self):
        logits, actions, old, adv = self._setup()
        loss, d_logits, _ = ppo.policy_loss_gradient(logits, actions, old, adv,
                                                     0.1, 0.05)
        eps = 1e-6
        for i in range(4):
            for j in range(3):
                zp, zm = logits.copy(), logits.copy()
                zp[i, j] += eps
                zm[i, j] -= eps
                lp, _, _ = ppo.policy_loss_gradient(zp, actions, old, adv, 0.1, 0.05)
                lm, _, _ = ppo.policy_loss_gradient(zm, actions, old, adv, 0.1, 0.05)
                assert d_logits[i, j] == pytest.approx((lp - lm) / (2 * eps),
                                                       rel=1e-4, abs=1e-8)

    def test_ratio_one_identities(self):
        logits, actions, _, adv = self._setup(seed=1)
        old = np.log(softmax(logits)[np.arange(len(actions)), actions])
        _, _, stats = ppo.policy_loss_gradient(logits, actions, old, adv, 0.1, 0.05)
        assert stats["approx_kl"] == pytest.approx(0.0, abs=1e-12)
        assert stats["clip_fraction"] == 0.0

    def test_clip_fraction_monotone_in_epsilon(self):
        logits, actions, old, adv = self._setup(seed=2, n=64)
        fracs = [ppo.policy_loss_gradient(logits, actions, old, adv, e, 0.0)[2]
                 ["clip_fraction"] for e in (0.02, 0.1, 0.5)]
        assert fracs[0] >= fracs[1] >= fracs[2]

    def test_loss_decomposition(self):
        # zero advantages: loss reduces to the negated entropy bonus
        logits, actions, old, _ = self._setup(seed=3)
        adv = np.zeros(len(actions))
        loss, _, stats = ppo.policy_loss_gradient(logits, actions, old, adv,
                                                  0.1, 0.05)
        assert loss == pytest.approx(-0.05 * stats["entropy"], abs=1e-12)


class TestCritic:
    def test_ensemble_prediction_is_member_mean(self):
        critic = ppo.make_critic("ensemble3", 8, RngStream(0, 103))
        assert critic.k == 3
        h = RngStream(1, 104).normal(size=(100, 8))
        want = np.mean([heads.value_forward(m, h) for m in critic.members], axis=0)
        np.testing.assert_allclose(critic.value(h), want, atol=1e-12)

    def test_ensemble5(self):
        assert ppo.make_critic("ensemble5", 8, RngStream(0, 103)).k == 5

    def test_members_differ(self):
        critic = ppo.make_critic("ensemble3", 8, RngStream(0, 103))
        assert not np.allclose(critic.members[0].w1, critic.members[1].w1)

    def test_fp32_mode_uses_shadow_latents(self):
        critic = ppo.make_critic("fp32", 8, RngStream(0, 103))
        h_t = np.zeros(8)
        h_fp = RngStream(2, 105).normal(size=8)
        assert critic.value(h_t, h_fp) == heads.value_forward(critic.members[0], h_fp)

    def test_fp32_requires_shadow(self):
        with pytest.raises(ValueError):
            ppo.make_critic("fp32", 8, RngStream(0, 103), fp_shadow_available=False)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ppo.make_critic("int8", 8, RngStream(0, 103))


def _update_oracle(buf, policy, critic_member, cfg):
    """Independent single-minibatch PPO update (textbook formulas + Adam)."""
    h = buf.latents
    n = h.shape[0]
    # forward
    a1 = np.tanh(h @ policy.w1.T + policy.b1)
    a2 = np.tanh(a1 @ policy.w2.T + policy.b2)
    logits = a2 @ policy.w3.T + policy.b3
    p = softmax(logits)
    logp = np.log(p)
    idx = np.arange(n)
    ratio = np.exp(logp[idx, buf.actions] - buf.log_probs)
    unclipped = ratio * buf.advantages
    clipped = np.clip(ratio, 1 - cfg.clip_epsilon, 1 + cfg.clip_epsilon) * buf.advantages
    ent = -(p * logp).sum(axis=1)
    sel = (unclipped <= clipped).astype(float)
    onehot = np.zeros_like(p)
    onehot[idx, buf.actions] = 1.0
    d_logits = (-(sel * ratio * buf.advantages)[:, None] * (onehot - p)
                + cfg.entropy_coef * p * (logp + ent[:, None])) / n
    # backward
    d3 = d_logits
    gw3, gb3 = d3.T @ a2, d3.sum(0)
    d2 = (d3 @ policy.w3) * (1 - a2 ** 2)
    gw2, gb2 = d2.T @ a1, d2.sum(0)
    d1 = (d2 @ policy.w2) * (1 - a1 ** 2)
    gw1, gb1 = d1.T @ h, d1.sum(0)
    grads = dict(w1=gw1, b1=gb1, w2=gw2, b2=gb2, w3=gw3, b3=gb3)
    norm = np.sqrt(sum((g ** 2).sum() for g in grads.values()))
    scale = min(1.0, cfg.grad_clip / norm) if cfg.grad_clip > 0 else 1.0
    new = {k: getattr(policy, k).copy() for k in grads}
    for k, g in grads.items():
        g = g * scale
        m_hat = 0.1 * g / (1 - 0.9)
        v_hat = 0.001 * g * g / (1 - 0.999)
        new[k] -= cfg.policy_lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    return new


class TestPpoUpdate:
    def _buffer_with_latents(self, n, d, seed):
        rng = RngStream(seed, 92)
        buf = ppo.RolloutBuffer(
            latents=rng.normal(size=(n, d)), latents_fp=None,
            actions=rng.integers(0, 3, size=n).astype(np.int64),
            log_probs=np.log(rng.uniform(0.2, 0.5, size=n)),
            rewards=rng.normal(size=n), values=rng.normal(size=n),
            dones=np.zeros(n), bootstrap_value=0.0, episode_returns=[1.0])
        return ppo.compute_gae(buf, 0.99, 0.95)

    def test_single_minibatch_matches_independent_oracle(self):
        cfg = ppo.TrainConfig(minibatch=16, epochs_per_update=1,
                              rollout_length=16)
        buf = self._buffer_with_latents(16, 8, 0)
        trainer = ppo.Trainer.build(8, 3, cfg)
        want = _update_oracle(buf, trainer.policy.copy(),
                              trainer.critic.members[0], cfg)
        m = ppo.ppo_update(buf, trainer, cfg, RngStream(0, 203), step=16)
        for name, tensor in want.items():
            np.testing.assert_allclose(getattr(trainer.policy, name), tensor,
                                       atol=1e-10, err_msg=name)
        assert not m.failure_flag

    def test_requires_gae(self):
        cfg = ppo.TrainConfig(minibatch=8, rollout_length=8)
        buf = _random_buffer(n=8, d=8)
        trainer = ppo.Trainer.build(8, 2, cfg)
        with pytest.raises(ValueError, match="advantages"):
            ppo.ppo_update(buf, trainer, cfg, RngStream(0, 203), step=8)

    def test_value_loss_decreases_over_updates(self):
        cfg = ppo.TrainConfig(minibatch=32, epochs_per_update=4,
                              rollout_length=64, value_lr=5e-3)
        trainer = ppo.Trainer.build(8, 3, cfg)
        losses = []
        for i in range(15):
            buf = self._buffer_with_latents(64, 8, 7)  # same data every time
            m = ppo.ppo_update(buf, trainer, cfg, RngStream(i, 203), step=i)
            losses.append(m.value_loss)
        assert losses[-1] < losses[0]

    def test_failure_flag_on_low_eval_history(self):
        cfg = ppo.TrainConfig(minibatch=16, epochs_per_update=1, rollout_length=16)
        buf = self._buffer_with_latents(16, 8, 1)
        trainer = ppo.Trainer.build(8, 3, cfg)
        m = ppo.ppo_update(buf, trainer, cfg, RngStream(0, 203), step=16,
                           eval_history=[10.0] * 10, env_id="cartpole")
        assert m.failure_flag

    def test_no_failure_flag_with_few_evals(self):
        cfg = ppo.TrainConfig(minibatch=16, epochs_per_update=1, rollout_length=16)
        buf = self._buffer_with_latents(16, 8, 2)
        trainer = ppo.Trainer.build(8, 3, cfg)
        m = ppo.ppo_update(buf, trainer, cfg, RngStream(0, 203), step=16,
                           eval_history=[10.0] * 9, env_id="cartpole")
        assert not m.failure_flag

    def test_metrics_json_fields(self):
        m = ppo.UpdateMetrics(10, 1.0, 0.5, 0.1, 0.2, 0.01, 0.0, False)
        d = json.loads(m.to_json())
        assert set(d) == {"step", "mean_return", "entropy", "value_loss",
                          "grad_norm", "approx_kl", "clip_fraction", "failed"}


class TestRollout:
    def _setup(self, env_id="cartpole", critic_mode="ternary", seed=0):
        from bitrl.backbone import build_backbone
        cfg = ppo.TrainConfig(rollout_length=64, seed=seed,
                              critic_mode=critic_mode)
        bb, sh = build_backbone(SMALL, RngStream(seed, 101))
        enc = ppo.LatentEncoder(bb, env_id)
        enc_fp = ppo.LatentEncoder(sh, env_id) if critic_mode == "fp32" else None
        trainer = ppo.Trainer.build(SMALL.d_model, envs.action_count(env_id), cfg)
        ctx = ppo.RolloutContext(env_id, RngStream(seed, 201), RngStream(seed, 202))
        return cfg, enc, enc_fp, trainer, ctx

    def test_exact_length_and_shapes(self):
        cfg, enc, enc_fp, trainer, ctx = self._setup()
        buf = ppo.collect_rollout(ctx, enc, enc_fp, trainer.policy,
                                  trainer.critic, cfg)
        assert len(buf) == 64
        assert buf.latents.shape == (64, SMALL.d_model)
        assert buf.latents_fp is None

    def test_log_probs_match_policy(self):
        cfg, enc, enc_fp, trainer, ctx = self._setup(seed=1)
        buf = ppo.collect_rollout(ctx, enc, enc_fp, trainer.policy,
                                  trainer.critic, cfg)
        for t in range(0, 64, 7):
            probs = heads.policy_forward(trainer.policy, buf.latents[t])
            assert buf.log_probs[t] == pytest.approx(np.log(probs[buf.actions[t]]))

    def test_episode_boundaries_consistent(self):
        cfg, enc, enc_fp, trainer, ctx = self._setup("mountaincar", seed=2)
        buf = ppo.collect_rollout(ctx, enc, enc_fp, trainer.policy,
                                  trainer.critic, cfg)
        # mountaincar with a random policy never terminates within 64 steps
        assert buf.dones.sum() == 0 and buf.episode_returns == []
        assert buf.bootstrap_value != 0.0

    def test_fp_latents_collected_for_fp32_critic(self):
        cfg, enc, enc_fp, trainer, ctx = self._setup(critic_mode="fp32", seed=3)
        buf = ppo.collect_rollout(ctx, enc, enc_fp, trainer.policy,
                                  trainer.critic, cfg)
        assert buf.latents_fp is not None
        assert not np.allclose(buf.latents, buf.latents_fp)

    def test_context_persists_across_rollouts(self):
        cfg, enc, enc_fp, trainer, ctx = self._setup(seed=4)
        ppo.collect_rollout(ctx, enc, enc_fp, trainer.policy, trainer.critic, cfg)
        first_state = ctx.state
        ppo.collect_rollout(ctx, enc, enc_fp, trainer.policy, trainer.critic, cfg)
        assert ctx.state is not first_state


class TestTrainLoop:
    def test_single_update_run(self, tmp_path):
        cfg = ppo.TrainConfig(total_steps=128, rollout_length=128,
                              eval_every=128, minibatch=64, seed=0)
        result = ppo.train("cartpole", cfg, tmp_path, backbone_cfg=SMALL)
        assert result.status == "completed"
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1  # total-steps == rollout-length -> one update
        assert (tmp_path / "checkpoint.btrl").exists()
        evals = (tmp_path / "evals.jsonl").read_text().splitlines()
        assert len(evals) == 2  # scheduled eval + final eval

    def test_checkpoint_reload_reproduces_eval(self, tmp_path):
        cfg = ppo.TrainConfig(total_steps=128, rollout_length=128,
                              eval_every=256, seed=1)
        result = ppo.train("textgrid", cfg, tmp_path, backbone_cfg=SMALL)
        m1 = ppo.evaluate(result.checkpoint_path, "textgrid", 5, RngStream(0, 400))
        m2 = ppo.evaluate(result.checkpoint_path, "textgrid", 5, RngStream(0, 400))
        assert m1 == m2

    def test_eval_env_mismatch_rejected(self, tmp_path):
        cfg = ppo.TrainConfig(total_steps=128, rollout_length=128,
                              eval_every=256, seed=2)
        result = ppo.train("textgrid", cfg, tmp_path, backbone_cfg=SMALL)
        with pytest.raises(ValueError, match="actions"):
            ppo.evaluate(result.checkpoint_path, "cartpole", 2, RngStream(0, 400))

    def test_unknown_env(self, tmp_path):
        with pytest.raises(KeyError):
            ppo.train("pendulum", ppo.TrainConfig(), tmp_path)

    def test_seed_repeat_reproduces_metrics(self, tmp_path):
        cfg = ppo.TrainConfig(total_steps=128, rollout_length=128,
                              eval_every=128, seed=3)
        ppo.train("cartpole", cfg, tmp_path / "a", backbone_cfg=SMALL)
        ppo.train("cartpole", cfg, tmp_path / "b", backbone_cfg=SMALL)
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == \
            (tmp_path / "b" / "metrics.jsonl").read_bytes()
        assert (tmp_path / "a" / "checkpoint.btrl").read_bytes() == \
            (tmp_path / "b" / "checkpoint.btrl").read_bytes()
