"""Price every fusion mode: parameters and per-frame multiplies.

Run: python3 demos/model_costs.py
"""
from bargein.nnet import FUSIONS, TcnConfig, count_cost, encoder_fov, receptive_field

cfg = TcnConfig()
print(f"default config: {cfg.hidden_h} hidden, {cfg.bottleneck_d} bottleneck, "
      f"{cfg.n_blocks} blocks, {cfg.n_classes} classes")
print(f"receptive field: {receptive_field(cfg)} frames")
print("encoder field of view by depth:",
      {d: encoder_fov(cfg, d, 'span') for d in (1, 2, 3)})
print()

# the published ladder prices the single-keyword head
header = f"{'fusion':<14}{'params':>10}{'idle':>12}{'playback':>12}"
print(header)
print("-" * len(header))
for fusion in FUSIONS:
    c = TcnConfig(fusion=fusion, n_classes=1)
    idle = count_cost(c, playback_mode=False)
    busy = count_cost(c, playback_mode=True)
    print(f"{fusion:<14}{idle.params:>10,}{idle.flops_per_output_frame:>12,}"
          f"{busy.flops_per_output_frame:>12,}")

print()
print("idle = no playback reference present; the gated mode skips its")
print("reference branch entirely, so its idle column equals the baseline")
