"""Learn several equilibrium flows on Lorenz samples and compare them with the true field.

Each seed gives a different stationary flow for the same density.  The table
shows how close they land to the Lorenz vector field, to each other and to
random networks.  About 15 minutes on one CPU core with the defaults.

    python3 demos/lorenz_fidelity.py [n_seeds]
"""
import sys

from eqflow.diffusion import train_denoiser
from eqflow.pipelines import lorenz_fidelity, lorenz_fingerprint_groups, standardized_lorenz
from eqflow.trainer import FlowTrainConfig, train_flow

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 5
X, std = standardized_lorenz(2048, seed=0)
score = train_denoiser(X, objective="v", epochs=800, seed=0)

models = []
for seed in range(n_seeds):
    net, report = train_flow(X, score, FlowTrainConfig(epochs=1000, seed=seed))
    print(f"seed {seed}: residual {report.mean_sq_residual:.4f}, speed {report.mean_speed:.2f}")
    models.append(net)

fid = lorenz_fidelity(lorenz_fingerprint_groups(models, X[:1024], std, score_model=score))
for key in ("learned_vs_lorenz", "random_vs_lorenz", "learned_pairwise", "random_pairwise"):
    v = fid[key]
    print(f"{key:18s} {v.mean():.3f} +- {v.std():.3f}")
print()
for row in fid["table"]:
    print(*row)
