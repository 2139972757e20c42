"""Learned posterior versus an exactly solvable one.

A linear forward map with Gaussian prior and noise has a closed-form
posterior, which makes it the one problem where the whole pipeline can
be graded against the truth. This script trains a small affine flow on
2000 simulated pairs (a couple of minutes on one core), then prints the
learned posterior mean and standard deviation next to the analytic
values for a few held-out observation sets.

Run from the repository root:

    python3 demos/conjugate_check.py
"""

import numpy as np

from flowinfer.autodiff import RngState
from flowinfer.model import PosteriorModel
from flowinfer.simulate import LinearGaussianModel
from flowinfer.train import TrainingConfig, train


def main() -> None:
    rng = RngState(2024)
    G = np.eye(4) + 0.3 * rng.normal((4, 4))
    lin = LinearGaussianModel(G, prior_cov=np.eye(4), noise_var=0.07)

    dataset = lin.generate(2120, seed=123).with_split(n_val=100, n_test=20)
    print(f"simulated {dataset.m} pairs "
          f"({dataset.n_train} train / {dataset.n_val} val / 20 test)")

    model = PosteriorModel.build(
        dim=4, n_sensors=1,
        summary={"type": "flatten", "k": 4, "n_sensors": 1},
        n_affine=4, n_spline=0, hidden=(16,), dropout=0.1, seed=1)
    config = TrainingConfig(epochs=1500, batch_size=500, lr=5e-4,
                            lr_decay=0.97, patience=400, seed=1)
    history = train(model, dataset, config, log_every=250)
    print(f"best validation loss {history.best_val:.4f} "
          f"at epoch {history.best_epoch}\n")

    for case in range(3):
        obs = dataset.test_obs[case].astype(np.float64)
        samples = model.sample(obs, 8000, RngState(900 + case))
        exact_mean, exact_cov = lin.posterior(obs[:, 0])
        exact_std = np.sqrt(np.diag(exact_cov))
        est_mean = samples.mean(axis=0)
        est_std = samples.std(axis=0)
        print(f"held-out set {case}:")
        print("  dim   mean (flow)   mean (exact)   std (flow)   std (exact)")
        for d in range(4):
            print(f"  {d}     {est_mean[d]:9.4f}     {exact_mean[d]:9.4f}"
                  f"      {est_std[d]:7.4f}      {exact_std[d]:7.4f}")
        gap = np.max(np.abs(est_mean - exact_mean))
        print(f"  worst mean gap: {gap:.4f} prior standard deviations\n")


if __name__ == "__main__":
    main()
