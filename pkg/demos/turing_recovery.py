"""Training-free dynamics for a Gray-Scott pattern.

Simulates a preset to build a pattern dataset, fits a grid denoiser, then
rotates the score between the two chemical channels (both orientations) and
keeps the one whose change looks most like the simulator's.  Random kernels
and re-weighted scores are the baselines.

    python3 demos/turing_recovery.py [life|maze|wave|spirals]
"""
import sys

from eqflow.diffusion import train_denoiser
from eqflow.pipelines import turing_comparison
from eqflow.skew import LangevinConfig
from eqflow.systems import generate_turing_dataset

preset = sys.argv[1] if len(sys.argv) > 1 else "life"
states = generate_turing_dataset(preset, 256 + 8, grid=(64, 64), burn_in=4000, seed=0)
score = train_denoiser(states[:256], objective="v", epochs=50, batch=16, seed=0)

cfg = LangevinConfig(eta=0.1, dt=0.01, steps=50, seed=1)
res = turing_comparison(score.score_fn(0.9), states[256:], preset, cfg, T=50)
print("chosen gamma per state:", res["gamma"].tolist())
for kind in ("training_free", "random_kernel", "score_reweight"):
    print(f"{kind:15s} {res[kind].mean():.3f} +- {res[kind].std():.3f}")
