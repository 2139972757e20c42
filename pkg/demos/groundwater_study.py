"""A miniature groundwater inversion, end to end.

Simulates a training set on the desk-scale aquifer (8 x 4 cells, four
wells, 25 half-day steps), trains the posterior model with a reduced
budget, scores it on every held-out scenario, and then works through
the median one in detail: posterior samples for the log-conductivity
field, error metrics against the true field, and 95% predictive bands
for the well drawdown curves.

The full-budget counterpart of this run lives in the acceptance tests;
here the simulation count and epochs are cut so the whole script
finishes in a few minutes on one core. Outputs land in
demo_output/.

Run from the repository root:

    python3 demos/groundwater_study.py
"""

from pathlib import Path

import numpy as np

from flowinfer.autodiff import RngState
from flowinfer.diagnose import MetricsReport, bands_to_csv, posterior_predictive
from flowinfer.model import PosteriorModel
from flowinfer.simulate import desk_scale_setup, generate_dataset
from flowinfer.train import TrainingConfig, train


def main() -> None:
    out = Path("demo_output")
    out.mkdir(exist_ok=True)
    grid, prior, forward, noise = desk_scale_setup()

    print("simulating 700 training records ...")
    dataset = generate_dataset(grid, prior, forward, noise, m=700, seed=42,
                               n_val=60, n_test=20)

    model = PosteriorModel.build(
        dim=grid.n_cells, n_sensors=grid.n_sensors,
        summary={"type": "conv", "n_sensors": grid.n_sensors,
                 "channels": [32, 64], "kernel": 7, "features": 64,
                 "dropout": 0.4},
        n_affine=6, n_spline=0, hidden=(64, 64), dropout=0.4,
        seed=7)
    config = TrainingConfig(epochs=250, batch_size=120, lr=5e-4,
                            lr_decay=0.97, patience=120, seed=7)
    history = train(model, dataset, config, log_every=50)
    print(f"best validation loss {history.best_val:.3f} "
          f"at epoch {history.best_epoch}\n")

    rels = []
    for i in range(dataset.n_test):
        draws = model.sample(dataset.test_obs[i].astype(np.float64), 500,
                             RngState(5000 + i))
        rels.append(np.linalg.norm(draws.mean(axis=0)
                                   - dataset.test_theta[i])
                    / np.linalg.norm(dataset.test_theta[i]))
    print(f"median posterior-mean relative l2 error over "
          f"{dataset.n_test} held-out scenarios: {np.median(rels):.3f} "
          f"(the zero-field prior mean scores 1.000)")

    case = int(np.argsort(rels)[len(rels) // 2])  # the median scenario
    truth = dataset.test_theta[case].astype(np.float64)
    obs = dataset.test_obs[case].astype(np.float64)
    samples = model.sample(obs, 2000, RngState(6000))

    report = MetricsReport.evaluate(samples.mean(axis=0), truth,
                                    samples=samples)
    print(f"\na closer look at scenario {case}:")
    print(report.to_text())

    print("\npushing 200 posterior draws back through the solver ...")
    _, bands = posterior_predictive(samples[:200], grid, forward)
    bands_to_csv(out / "bands.csv", bands, dt=forward.dt)
    np.save(out / "samples.npy", samples)
    print(f"wrote {out / 'bands.csv'} and {out / 'samples.npy'}")

    mean_field = np.full(grid.active.shape, np.nan)
    mean_field[grid.active] = samples.mean(axis=0)
    print("\nposterior-mean log-conductivity field (rows x cols):")
    for row in mean_field:
        print("  " + " ".join(f"{v:6.2f}" for v in row))


if __name__ == "__main__":
    main()
