"""Empirical checks of the quantization-perturbation theory.

Four suites, each comparing a measured quantity against an analytic bound
or reporting a directional effect:

- repr: representation drift between the ternary and FP-shadow encoders is
  bounded by L_f * eps_Q * ||theta||, with L_f a product/Cauchy-Schwarz
  composition of per-tensor spectral-norm upper bounds.
- grad: policy-gradient bias between the two latent pathways is bounded by
  L_g * L_f * eps_Q * ||theta|| with L_g an analytic Lipschitz constant of
  the head-gradient map.
- value: the ternary-vs-FP gap of TD fixed-point value functions grows
  with the discount (bootstrap amplification).
- entropy: paired ternary/FP initial-policy entropies with a sign test.

All Lipschitz constants are deliberately loose upper bounds; validity, not
tightness, is what the suites assert.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import envs, heads
from .backbone import (LN_EPS, MAX_TOKENS, BackboneConfig, BackboneModel,
                       LINEAR_NAMES, build_backbone, encode)
from .quantization import TernaryTensor, dequantize
from .tensor_core import (RngStream, ShapeError, entropy_of_rows, softmax,
                          spectral_norm_upper_bound)

_HOLDS_RTOL = 1e-9


@dataclass(frozen=True)
class BoundCheckResult:
    measured: float
    bound: float
    holds: bool
    slack_ratio: float          # bound / measured; inf when measured == 0

    @staticmethod
    def compare(measured: float, bound: float) -> "BoundCheckResult":
        holds = measured <= bound * (1.0 + _HOLDS_RTOL)
        slack = float("inf") if measured == 0.0 else bound / measured
        return BoundCheckResult(float(measured), float(bound), holds, slack)

    def to_dict(self) -> dict:
        return {"measured": self.measured, "bound": self.bound,
                "holds": self.holds, "slack_ratio": self.slack_ratio}


@dataclass(frozen=True)
class LipschitzEstimate:
    per_layer_bounds: tuple
    product: float

    def __post_init__(self) -> None:
        if any(b < 0 for b in self.per_layer_bounds):
            raise ValueError("per-layer bounds must be nonnegative")
        expected = float(np.prod(self.per_layer_bounds)) if self.per_layer_bounds else 1.0
        if not math.isclose(self.product, expected, rel_tol=1e-9):
            raise ValueError("product must equal the per-layer bound product")


def _dense(w) -> np.ndarray:
    if isinstance(w, TernaryTensor):
        return dequantize(w)
    return np.asarray(w, dtype=np.float64)


def _ln_constants(g: np.ndarray, b: np.ndarray) -> tuple:
    """(output-norm bound G, Lipschitz bound) of a layer norm.

    The normalized vector has norm <= sqrt(d), so outputs are bounded by
    max|g|*sqrt(d) + ||b|| regardless of the input; the Jacobian norm is at
    most 2*max|g|/sqrt(eps) because the inverse std is capped at 1/sqrt(eps).
    """
    gmax = float(np.abs(g).max())
    out_bound = gmax * math.sqrt(g.size) + float(np.linalg.norm(b))
    lipschitz = 2.0 * gmax / math.sqrt(LN_EPS)
    return out_bound, lipschitz


def _spectral_pair(wq, wfp) -> float:
    """Spectral-norm upper bound valid for both the ternary and FP copy."""
    s = spectral_norm_upper_bound(_dense(wq))
    if wfp is not None:
        s = max(s, spectral_norm_upper_bound(_dense(wfp)))
    return s


def encoder_lipschitz(model: BackboneModel,
                      shadow: BackboneModel | None = None) -> LipschitzEstimate:
    """Input-to-output Lipschitz upper bound of the encoder, layer by layer.

    Each residual layer contributes (1 + attention branch)(1 + FFN branch);
    the final entry covers the last layer norm and mean pooling. When a
    shadow twin is given, each weight uses the larger of the two spectral
    bounds so the estimate is valid for any hybrid of the pair.
    """
    cfg = model.cfg
    dh = cfg.d_model // cfg.n_heads
    sqrt_T = math.sqrt(MAX_TOKENS)
    factors = []
    shadow_layers = shadow.layers if shadow is not None else [None] * len(model.layers)
    for layer, slayer in zip(model.layers, shadow_layers):
        s = {n: _spectral_pair(getattr(layer, n),
                               getattr(slayer, n) if slayer else None)
             for n in LINEAR_NAMES}
        G1, L1 = _ln_constants(layer.ln1_g, layer.ln1_b)
        G2, L2 = _ln_constants(layer.ln2_g, layer.ln2_b)
        # value path + attention-weight path (softmax rows move by at most
        # twice the max score change in l1)
        att = cfg.n_heads * s["wo"] * (
            sqrt_T * s["wv"]
            + 2.0 * (1.0 + sqrt_T) * G1 * G1 * s["wq"] * s["wk"] * s["wv"] / math.sqrt(dh))
        ffn = s["w1"] * s["w2"]
        factors.append((1.0 + L1 * att) * (1.0 + L2 * ffn))
    G, L = _ln_constants(model.final_ln_g, model.final_ln_b)
    # Mean pooling contracts the Frobenius norm by sqrt(T) for T tokens, but
    # the bound must hold for every sequence length, so the worst case (T=1,
    # no contraction) is used; the sqrt(T) growth factors above already use
    # the maximum length.
    factors.append(L)
    return LipschitzEstimate(tuple(factors), float(np.prod(factors)))


def weight_sensitivity_bound(model: BackboneModel, shadow: BackboneModel) -> float:
    """L_f such that ||f_Q(x) - f(x)|| <= L_f * ||Q(theta) - theta|| for all x.

    Swapping one weight tensor at a time between the FP and ternary copies
    telescopes the output difference into per-tensor terms; each term is the
    tensor's local sensitivity times the downstream Lipschitz factor.
    Cauchy-Schwarz over tensors turns the sum into sqrt(sum c_l^2) times the
    concatenated perturbation norm.
    """
    cfg = model.cfg
    dh = cfg.d_model // cfg.n_heads
    sqrt_T = math.sqrt(MAX_TOKENS)
    H = cfg.n_heads
    layer_factors = encoder_lipschitz(model, shadow).per_layer_bounds
    sensitivities = []
    for i, (layer, slayer) in enumerate(zip(model.layers, shadow.layers)):
        s = {n: _spectral_pair(getattr(layer, n), getattr(slayer, n))
             for n in LINEAR_NAMES}
        G1, _ = _ln_constants(layer.ln1_g, layer.ln1_b)
        G2, L2 = _ln_constants(layer.ln2_g, layer.ln2_b)
        ffn = s["w1"] * s["w2"]
        # downstream of this layer's residual add
        tail = float(np.prod(layer_factors[i + 1:]))
        att_tail = (1.0 + L2 * ffn) * tail   # attention output also crosses the FFN sublayer
        score = 2.0 * G1 ** 3 / math.sqrt(dh)
        branch = {
            "wq": H * sqrt_T * score * s["wk"] * s["wv"] * s["wo"],
            "wk": H * sqrt_T * score * s["wq"] * s["wv"] * s["wo"],
            "wv": H * sqrt_T * G1 * s["wo"],
            "wo": H * sqrt_T * G1 * s["wv"],
            "w1": sqrt_T * G2 * s["w2"],
            "w2": sqrt_T * G2 * s["w1"],
        }
        for name in ("wq", "wk", "wv", "wo"):
            sensitivities.append(branch[name] * att_tail)
        for name in ("w1", "w2"):
            sensitivities.append(branch[name] * tail)
    return math.sqrt(sum(c * c for c in sensitivities))


def quantization_perturbation(model: BackboneModel, shadow: BackboneModel) -> tuple:
    """(delta_norm, theta_norm, eps_Q) over the concatenated linear weights."""
    delta_sq = 0.0
    theta_sq = 0.0
    for (_, wq), (_, wfp) in zip(model.linear_weights(), shadow.linear_weights()):
        dq = _dense(wq)
        df = _dense(wfp)
        if dq.shape != df.shape:
            raise ShapeError("mismatched backbone architectures")
        delta_sq += float(((dq - df) ** 2).sum())
        theta_sq += float((df ** 2).sum())
    delta = math.sqrt(delta_sq)
    theta = math.sqrt(theta_sq)
    return delta, theta, (delta / theta if theta > 0 else 0.0)


def _random_token_batch(vocab_size: int, n: int, rng: RngStream,
                        min_len: int = 4, max_len: int = 32) -> list:
    seqs = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        seqs.append(rng.integers(0, vocab_size, size=length).astype(np.int64))
    return seqs


def verify_repr_bound(model: BackboneModel, shadow: BackboneModel,
                      token_seqs: list) -> BoundCheckResult:
    """Max representation drift over the inputs against the analytic bound."""
    if len(token_seqs) == 0:
        raise ValueError("at least one input sequence required")
    delta, theta, eps_q = quantization_perturbation(model, shadow)
    l_f = weight_sensitivity_bound(model, shadow)
    measured = max(float(np.linalg.norm(encode(model, t) - encode(shadow, t)))
                   for t in token_seqs)
    return BoundCheckResult.compare(measured, l_f * eps_q * theta)


def head_gradient_lipschitz(policy: heads.HeadParams, input_bound: float,
                            max_abs_advantage: float, entropy_coef: float) -> float:
    """Lipschitz constant of h -> per-sample policy-gradient, over ||h|| <= B.

    The upstream logit gradient is -A*(onehot - p) + beta*p*(log p + H(p));
    its norm is bounded by 2|A| + 2*beta*ln K and its logit-Jacobian by
    |A|/2 (softmax Jacobian) plus an entropy-term bound from row/column
    sums. Backpropagating through the two tanh layers (1-Lipschitz, with
    the 1 - tanh^2 gate moving at most 2x the pre-activation change) gives
    a per-parameter-block constant; the stacked constant is the root sum
    of squares.
    """
    s1 = spectral_norm_upper_bound(policy.w1)
    s2 = spectral_norm_upper_bound(policy.w2)
    s3 = spectral_norm_upper_bound(policy.w3)
    k = policy.out_dim
    ln_k = math.log(k)
    b_h = input_bound
    b1 = min(math.sqrt(policy.w1.shape[0]), s1 * b_h + float(np.linalg.norm(policy.b1)))
    b2 = min(math.sqrt(policy.w2.shape[0]), s2 * b1 + float(np.linalg.norm(policy.b2)))

    b_u = 2.0 * max_abs_advantage + 2.0 * entropy_coef * ln_k
    row = 2.0 / math.e + 4.0 * ln_k + 2.0
    col = 3.0 * ln_k + 1.0 + 1.0 / math.e
    l_u_z = 0.5 * max_abs_advantage + entropy_coef * math.sqrt(row * col)
    l_z = s3 * s2 * s1                    # logits as a function of h
    l_u = l_u_z * l_z                     # upstream as a function of h

    l_b3 = l_u
    l_w3 = l_u * b2 + b_u * s2 * s1
    b_u2 = s3 * b_u
    l_u2 = 2.0 * s2 * s1 * s3 * b_u + s3 * l_u
    l_b2 = l_u2
    l_w2 = l_u2 * b1 + b_u2 * s1
    b_u1 = s2 * b_u2
    l_u1 = 2.0 * s1 * s2 * b_u2 + s2 * l_u2
    l_b1 = l_u1
    l_w1 = l_u1 * b_h + b_u1
    return math.sqrt(sum(v * v for v in
                         (l_w1, l_b1, l_w2, l_b2, l_w3, l_b3)))


def _policy_gradient(policy: heads.HeadParams, latents: np.ndarray,
                     actions: np.ndarray, advantages: np.ndarray,
                     entropy_coef: float) -> np.ndarray:
    """Stacked gradient of the ratio-1 surrogate plus entropy bonus."""
    n = latents.shape[0]
    cache = heads.forward(policy, latents)
    log_p = cache.out - cache.out.max(axis=1, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    ent = entropy_of_rows(p)
    one_hot = np.zeros_like(p)
    one_hot[np.arange(n), actions] = 1.0
    upstream = (-advantages[:, None] * (one_hot - p)
                + entropy_coef * p * (log_p + ent[:, None])) / n
    grads = heads.backward(policy, cache, upstream)
    return np.concatenate([g.ravel() for _, g in grads.tensors()])


def measure_gradient_bias(policy: heads.HeadParams, model: BackboneModel,
                          shadow: BackboneModel, token_seqs: list,
                          advantages: np.ndarray, actions: np.ndarray,
                          entropy_coef: float = 0.05) -> BoundCheckResult:
    """Gradient gap between the two latent pathways against the Eq-style bound."""
    if len(token_seqs) == 0:
        raise ValueError("batch must be non-empty")
    h_q = np.stack([encode(model, t) for t in token_seqs])
    h_fp = np.stack([encode(shadow, t) for t in token_seqs])
    g_q = _policy_gradient(policy, h_q, actions, advantages, entropy_coef)
    g_fp = _policy_gradient(policy, h_fp, actions, advantages, entropy_coef)
    measured = float(np.linalg.norm(g_q - g_fp))

    delta, theta, eps_q = quantization_perturbation(model, shadow)
    l_f = weight_sensitivity_bound(model, shadow)
    input_bound = float(max(np.linalg.norm(h_q, axis=1).max(),
                            np.linalg.norm(h_fp, axis=1).max()))
    l_g = head_gradient_lipschitz(policy, input_bound,
                                  float(np.abs(advantages).max()), entropy_coef)
    return BoundCheckResult.compare(measured, l_g * l_f * eps_q * theta)


def _collect_transitions(env_id: str, n: int, rng: RngStream):
    """Uniform-random-policy transitions: (obs, reward, next_obs, done)."""
    n_actions = envs.action_count(env_id)
    obs, rewards, next_obs, dones = [], [], [], []
    state = envs.reset(env_id, rng.derive(0))
    episode = 1
    while len(obs) < n:
        if state.done:
            state = envs.reset(env_id, rng.derive(episode))
            episode += 1
        a = int(rng.integers(0, n_actions))
        result, nxt = envs.step(state, a, rng)
        obs.append(state.obs)
        rewards.append(result.reward)
        next_obs.append(result.next_obs)
        dones.append(1.0 if (result.done or result.truncated) else 0.0)
        state = nxt
    return (np.asarray(obs), np.asarray(rewards), np.asarray(next_obs),
            np.asarray(dones))


def _latents_for(model: BackboneModel, env_id: str, obs: np.ndarray) -> np.ndarray:
    from .text import serialize_state
    return np.stack([encode(model, model.vocab.tokenize(serialize_state(env_id, o)))
                     for o in obs])


def _td_fixed_point(phi: np.ndarray, phi_next: np.ndarray, rewards: np.ndarray,
                    dones: np.ndarray, gamma: float, ridge: float = 1e-4) -> np.ndarray:
    """Least-squares TD solution w of Phi w = r + gamma * Phi' w (ridge-regularized)."""
    masked_next = phi_next * (1.0 - dones)[:, None]
    a = phi.T @ (phi - gamma * masked_next) + ridge * np.eye(phi.shape[1])
    b = phi.T @ rewards
    return np.linalg.solve(a, b)


def verify_value_amplification(env_id: str, gammas, seed: int,
                               n_transitions: int = 1024,
                               backbone_cfg: BackboneConfig | None = None) -> dict:
    """TD fixed-point gap between pathways across discounts.

    Fits a linear value function on each pathway's latents at every gamma
    (including a no-bootstrap gamma = 0 baseline) and reports the max-norm
    gap on held-out states. The gap should be non-decreasing in gamma, and
    gap * (1 - gamma) should stay within a 10x band over the grid.
    """
    gammas = sorted(gammas)
    if any(not (0.0 < g < 1.0) for g in gammas) or gammas != sorted(set(gammas)):
        raise ValueError("gamma grid must be strictly increasing in (0, 1)")
    cfg = backbone_cfg or BackboneConfig()
    model, shadow = build_backbone(cfg, RngStream(seed, 101))
    rng = RngStream(seed, 31)
    obs, rewards, next_obs, dones = _collect_transitions(env_id, n_transitions, rng)

    def features(m):
        h = _latents_for(m, env_id, obs)
        h_next = _latents_for(m, env_id, next_obs)
        ones = np.ones((h.shape[0], 1))
        return np.hstack([h, ones]), np.hstack([h_next, ones])

    phi_q, phi_q_next = features(model)
    phi_f, phi_f_next = features(shadow)
    n_train = int(0.75 * n_transitions)
    tr = slice(0, n_train)
    ho = slice(n_train, None)

    gaps = {}
    for gamma in [0.0] + list(gammas):
        w_q = _td_fixed_point(phi_q[tr], phi_q_next[tr], rewards[tr], dones[tr], gamma)
        w_f = _td_fixed_point(phi_f[tr], phi_f_next[tr], rewards[tr], dones[tr], gamma)
        gaps[gamma] = float(np.abs(phi_q[ho] @ w_q - phi_f[ho] @ w_f).max())

    grid_gaps = [gaps[g] for g in gammas]
    monotone = all(b >= a * (1.0 - 1e-12) for a, b in zip(grid_gaps, grid_gaps[1:]))
    baseline_ok = all(gaps[0.0] <= g * (1.0 + 1e-12) for g in grid_gaps)
    scaled = [gaps[g] * (1.0 - g) for g in gammas if gaps[g] > 0]
    band = (max(scaled) / min(scaled)) if scaled else float("inf")
    return {
        "env": env_id,
        "seed": seed,
        "gamma_grid": list(gammas),
        "gaps": {str(g): gaps[g] for g in gaps},
        "monotone": bool(monotone),
        "baseline_is_smallest": bool(baseline_ok),
        "scaled_band_ratio": band,
        "band_within_10x": bool(band <= 10.0),
    }


def sign_test_p_value(deltas) -> float:
    """One-sided exact binomial sign test for median > 0 (zeros dropped)."""
    deltas = [d for d in deltas if d != 0.0]
    m = len(deltas)
    if m == 0:
        return 1.0
    k = sum(1 for d in deltas if d > 0)
    return sum(math.comb(m, j) for j in range(k, m + 1)) / 2.0 ** m


def measure_entropy_delta(env_id: str, n_seeds: int = 20, n_states: int = 512,
                          backbone_cfg: BackboneConfig | None = None) -> dict:
    """Paired ternary-minus-FP initial-policy entropy over sampled states.

    For each seed, a fresh backbone pair and policy head are built and the
    mean action-distribution entropy is measured on states visited by a
    uniform random policy. Reports the paired mean difference and a sign
    test; a negative mean is flagged, not failed.
    """
    if n_seeds < 20:
        raise ValueError("at least 20 paired seeds required")
    cfg = backbone_cfg or BackboneConfig()
    deltas = []
    for seed in range(n_seeds):
        model, shadow = build_backbone(cfg, RngStream(seed, 101))
        policy = heads.init_policy_head(cfg.d_model, envs.action_count(env_id),
                                        RngStream(seed, 102))
        obs, _, _, _ = _collect_transitions(env_id, n_states, RngStream(seed, 7))
        h_q = _latents_for(model, env_id, obs)
        h_fp = _latents_for(shadow, env_id, obs)
        ent_q = float(entropy_of_rows(heads.policy_forward(policy, h_q)).mean())
        ent_fp = float(entropy_of_rows(heads.policy_forward(policy, h_fp)).mean())
        deltas.append(ent_q - ent_fp)
    mean_delta = float(np.mean(deltas))
    p = sign_test_p_value(deltas)
    return {
        "env": env_id,
        "n_seeds": n_seeds,
        "n_states": n_states,
        "per_seed_delta": deltas,
        "mean_delta": mean_delta,
        "sign_test_p": p,
        "positive_direction": mean_delta > 0,
        "divergence_flag": mean_delta <= 0,
    }


_SMALL_CFG = BackboneConfig(layers=2, d_model=64, n_heads=2, ffn_dim=128)


def run_repr_suite(n_encoders: int = 100, n_inputs: int = 100, seed: int = 0) -> dict:
    """Representation-drift bound over many random small encoder pairs."""
    results = []
    for i in range(n_encoders):
        model, shadow = build_backbone(_SMALL_CFG, RngStream(seed + i, 101))
        seqs = _random_token_batch(len(model.vocab), n_inputs, RngStream(seed + i, 5))
        results.append(verify_repr_bound(model, shadow, seqs))
    return {
        "suite": "repr",
        "n_encoders": n_encoders,
        "n_inputs": n_inputs,
        "all_hold": all(r.holds for r in results),
        "min_slack_ratio": min(r.slack_ratio for r in results),
        "cases": [r.to_dict() for r in results],
        "passed": all(r.holds for r in results),
    }


def run_grad_suite(n_trials: int = 20, batch_size: int = 32, seed: int = 0) -> dict:
    """Policy-gradient bias bound over random (encoder, head, batch) triples."""
    results = []
    for i in range(n_trials):
        rng = RngStream(seed + i, 11)
        model, shadow = build_backbone(_SMALL_CFG, RngStream(seed + i, 101))
        n_actions = int(rng.integers(2, 6))
        policy = heads.init_policy_head(_SMALL_CFG.d_model, n_actions,
                                        RngStream(seed + i, 102))
        seqs = _random_token_batch(len(model.vocab), batch_size, rng.derive(1))
        advantages = rng.uniform(-2.0, 2.0, size=batch_size)
        actions = rng.integers(0, n_actions, size=batch_size)
        results.append(measure_gradient_bias(policy, model, shadow, seqs,
                                             advantages, actions))
    return {
        "suite": "grad",
        "n_trials": n_trials,
        "all_hold": all(r.holds for r in results),
        "min_slack_ratio": min(r.slack_ratio for r in results),
        "cases": [r.to_dict() for r in results],
        "passed": all(r.holds for r in results),
    }


def run_value_suite(env_id: str = "cartpole", n_seeds: int = 5,
                    gammas=(0.5, 0.9, 0.99), n_transitions: int = 1024) -> dict:
    """Discount-amplification trend over several seeds."""
    reports = [verify_value_amplification(env_id, gammas, seed,
                                          n_transitions=n_transitions)
               for seed in range(n_seeds)]
    monotone_count = sum(1 for r in reports if r["monotone"])
    return {
        "suite": "value",
        "env": env_id,
        "n_seeds": n_seeds,
        "monotone_seeds": monotone_count,
        "reports": reports,
        "passed": monotone_count >= max(1, n_seeds - 1),
    }


def run_entropy_suite(env_id: str = "cartpole", n_seeds: int = 20,
                      n_states: int = 512) -> dict:
    """Entropy-direction report; fails only if a positive mean lacks support."""
    report = measure_entropy_delta(env_id, n_seeds, n_states)
    if report["mean_delta"] > 0:
        passed = report["sign_test_p"] < 0.1
    else:
        passed = True  # documented divergence, flagged in the report
    report.update({"suite": "entropy", "passed": passed})
    return report


SUITES = {
    "lemma1": run_repr_suite,
    "thm1": run_grad_suite,
    "thm2": run_value_suite,
    "entropy": run_entropy_suite,
}
