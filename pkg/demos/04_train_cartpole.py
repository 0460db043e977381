"""A short PPO run on CartPole with a frozen ternary backbone.

Only the FP32 policy and value heads receive gradients; the quantized
encoder never changes (the trainer asserts its checksum after training).
A few thousand steps with a small backbone is enough to see the return
climb. The CLI equivalent is:

    bitrl train --env cartpole --config <file> --out <dir>

Run: python3 demos/04_train_cartpole.py
"""

import tempfile
from pathlib import Path

from bitrl.backbone import BackboneConfig
from bitrl.ppo import TrainConfig, evaluate, train
from bitrl.tensor_core import RngStream

cfg = TrainConfig(
    total_steps=8192,
    rollout_length=1024,
    eval_every=4096,
    minibatch=64,
    seed=0,
)
backbone = BackboneConfig(layers=2, d_model=64, n_heads=2, ffn_dim=128)

out = Path(tempfile.mkdtemp(prefix="bitrl_demo_"))
print(f"training 8192 steps -> {out}")
result = train("cartpole", cfg, out, backbone_cfg=backbone)

print(f"\nstatus: {result.status}")
print(f"{'step':>8} {'rollout return':>15} {'entropy':>9} {'value loss':>11}")
for m in result.metrics:
    print(f"{m.step:>8} {m.mean_return:>15.1f} {m.policy_entropy:>9.3f} "
          f"{m.value_loss:>11.3f}")

print(f"\nscheduled evals (deterministic argmax policy):")
for step, mean, std in result.evals:
    print(f"  step {step}: {mean:.1f} +/- {std:.1f}")
print(f"final eval: {result.final_eval:.1f}")

mean, std, _ = evaluate(result.checkpoint_path, "cartpole", 10, RngStream(0, 400))
print(f"reloaded checkpoint evaluates to {mean:.1f} +/- {std:.1f} "
      f"over 10 episodes")
