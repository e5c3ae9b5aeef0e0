"""Desk-scale run: train the AHD student with and without distillation, then compare strategies.

Usage: python3 scripts/desk_experiment.py [n_frames] [epochs] [lr]
"""
import sys
import time

from coopercept.config import TINY, KdConfig, TrainConfig, replace
from coopercept.distill import build_samples, fit
from coopercept.evaluation import evaluate_strategy
from coopercept.lidar_sim import generate_scene

n = int(sys.argv[1]) if len(sys.argv) > 1 else 200
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 30
lr = float(sys.argv[3]) if len(sys.argv) > 3 else 2e-3
t0 = time.time()
preset = replace(TINY, scene=replace(TINY.scene, n_agents=(2, 4)))
samples = build_samples([generate_scene(preset.scene, seed=i) for i in range(n)], preset)
split = int(0.8 * n)
train, test = samples[:split], samples[split:]
cfg = TrainConfig(epochs=epochs, lr=lr, lr_step=max(1, 2 * epochs // 3))
print(f"data {time.time() - t0:.1f}s", flush=True)
for name, kd, tcfg in (("kd", KdConfig(), cfg), ("nokd", replace(KdConfig(), lambda_kd=0.0), replace(cfg, train_teacher=False))):
    t = time.time()
    st = fit(train, preset, kd, tcfg, seed=0)
    print(name, f"fit {time.time() - t:.1f}s", "l_det", [round(h["l_det"], 4) for h in st.history], flush=True)
    for strat in (("none", "early", "late", "ahd") if name == "kd" else ("ahd",)):
        r = evaluate_strategy(test, st.model, strat)
        print(f"  {strat:6s} ap50={r.ap50.ap:.4f} ap70={r.ap70.ap:.4f} tp70={r.ap70.tp} fp70={r.ap70.fp} "
              f"bytes/frame={r.bytes_per_frame:.0f}", flush=True)
print(f"total {time.time() - t0:.1f}s")
