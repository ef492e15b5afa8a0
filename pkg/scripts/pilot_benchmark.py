"""Pilot run for the desk-scale learning benchmark: reduced episode counts."""
import sys, time, tempfile
from pathlib import Path
import numpy as np

from fewseg3d import data, engine as eng
from fewseg3d.intrinsic import ILConfig, ILTrainConfig, pretrain_il
from fewseg3d.diffusion import DLConfig, DLTrainConfig, pretrain_dl

EPISODES = int(sys.argv[1]) if len(sys.argv) > 1 else 300
SEEDS = [int(s) for s in (sys.argv[2].split(",") if len(sys.argv) > 2 else ["0"])]
DIVERSITY = float(sys.argv[3]) if len(sys.argv) > 3 else 1.2

t0 = time.time()
root = Path(tempfile.mkdtemp(prefix="pilot_"))
man = data.build_corpus(root / "data", n_scenes=10, n_classes=6, diversity=DIVERSITY,
                        seed=7, points_per_instance=320)
print(f"[{time.time()-t0:6.1f}s] corpus: 10 scenes, 6 classes, diversity {DIVERSITY}")

il, il_curve = pretrain_il(man, "S0", ILTrainConfig(
    epochs=10, steps_per_epoch=30, lr=1e-3, n_points=512, seed=0,
    model=ILConfig()))
print(f"[{time.time()-t0:6.1f}s] IL pretrained: loss {il_curve[0]:.3f} -> {il_curve[-1]:.3f}")

dl, dl_curve = pretrain_dl(man, "S0", DLTrainConfig(
    epochs=4, steps_per_epoch=75, lr=1e-3, n_points=512, seed=0, model=DLConfig()))
print(f"[{time.time()-t0:6.1f}s] DL pretrained: loss {np.mean(dl_curve[:10]):.3f} -> {np.mean(dl_curve[-10:]):.3f}")

cfg = eng.RunConfig.from_dict({
    "n_way": 2, "k_shot": 1, "split": "S0",
    "episodes": EPISODES, "eval_episodes": 80, "seeds": SEEDS,
    "n_points": 512, "fps_seeds": 5,
    "optimizer": {"lr": 1e-3, "decay_factor": 0.5, "decay_interval": 500},
    "pam": {"iterations": 2, "variant": "pushpull", "width": 64},
    "loss": {"lambda": 1.0},
})

results = {}
for variant in "DBAECF":
    res = eng.run_variant(variant, cfg, man, il, dl, store=False)
    results[variant] = res
    per_seed = [round(r.mean_iou * 100, 2) for r in res.reports]
    print(f"[{time.time()-t0:6.1f}s] variant {variant}: {res.seed_mean_iou*100:6.2f} mIoU  {per_seed}")

f = results["F"].seed_mean_iou * 100
d = results["D"].seed_mean_iou * 100
print(f"\nF - D margin: {f - d:+.2f} points (need >= 2)")
for v in "ABCE":
    print(f"F vs {v}: {f - results[v].seed_mean_iou*100:+.2f} (need >= 0)")
