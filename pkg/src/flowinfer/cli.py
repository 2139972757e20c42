"""Command-line surface: generate | train | infer | predict | evaluate
| selfcheck.

Every command reads a flat key-value config (see :mod:`.config`),
writes its outputs plus the fully-resolved config into ``--out``, and
is deterministic given that config and seed.  Exit codes: 0 success,
1 runtime or numerical failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, RngState, Tape, Tensor, backward
from .config import ConfigError, RunConfig
from .flow import ConditionalFlow, SplineCouplingLayer
from .diagnose import MetricsReport, bands_to_csv, posterior_predictive
from .model import CheckpointError, PosteriorModel
from .nets import ParameterStore
from .simulate import (
    DATASET_MAGIC,
    GPPrior,
    GridSpec,
    ForwardConfig,
    SimulationDataset,
    SimulationError,
    generate_dataset,
    read_observation_csv,
    sample_prior,
    solve_groundwater,
)
from .train import TrainState, TrainingDivergedError, train


def _load_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return RunConfig.from_file(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    m = cfg["data.m"]
    n_val, n_test = cfg.split(m)
    dataset = generate_dataset(
        cfg.grid(), cfg.prior(), cfg.forward(), cfg.noise(), m=m,
        seed=cfg["seed"], workers=args.workers,
        max_retries=cfg["data.max_retries"], n_val=n_val, n_test=n_test)
    path = out / "dataset.lfi"
    dataset.save(path)
    cfg.write_resolved(out)
    print(f"wrote {path}: M={dataset.m} N={dataset.theta.shape[1]} "
          f"k={dataset.obs.shape[1]} N_u={dataset.obs.shape[2]} "
          f"seed={cfg['seed']}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    dataset = SimulationDataset.load(args.dataset)
    model = PosteriorModel.build(
        dim=dataset.theta.shape[1], n_sensors=dataset.obs.shape[2],
        summary=cfg.summary_descriptor(), seed=cfg["seed"],
        **cfg.flow_kwargs())
    resume = TrainState.load(out / "state.nfts") if args.resume else None

    def periodic(state, _history):
        state.save(out / "state.nfts")

    history = train(model, dataset, cfg.training(), resume=resume,
                    checkpoint_callback=periodic,
                    log_every=args.log_every)
    model.save(out / "model.nfck")
    history.final_state.save(out / "state.nfts")
    history.to_csv(out / "history.csv", append=args.resume)
    cfg.write_resolved(out)
    print(f"trained {len(history.rows)} epoch(s); best validation loss "
          f"{history.best_val:.6f} at epoch {history.best_epoch}")
    return 0


def _load_observations(path, index: int) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == DATASET_MAGIC:
        return SimulationDataset.load(path).obs[index]
    return read_observation_csv(path)


def cmd_infer(args) -> int:
    model = PosteriorModel.load(args.model)
    obs = _load_observations(args.obs, args.index)
    out = _out_dir(args)
    tic = time.perf_counter()
    samples = model.sample(obs, args.n, RngState(args.seed))
    elapsed = time.perf_counter() - tic
    np.save(out / "samples.npy", samples)
    np.savetxt(out / "samples.csv", samples, delimiter=",", fmt="%.17g")
    lo, hi = (np.quantile(samples, q, axis=0) for q in (0.025, 0.975))
    with open(out / "stats.csv", "w", encoding="utf-8") as fh:
        fh.write("dimension,mean,std,q2.5,q97.5\n")
        mean, std = samples.mean(axis=0), samples.std(axis=0)
        for i in range(samples.shape[1]):
            fh.write(f"{i},{mean[i]!r},{std[i]!r},{lo[i]!r},{hi[i]!r}\n")
    print(f"drew {args.n} posterior samples in {elapsed:.3f} s")
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    if args.samples:
        samples = np.load(args.samples)
    else:
        if not (args.model and args.obs):
            raise ConfigError("predict needs --samples, or --model with --obs")
        model = PosteriorModel.load(args.model)
        obs = _load_observations(args.obs, args.index)
        samples = model.sample(obs, args.n, RngState(cfg["seed"]))
    _, bands = posterior_predictive(samples, cfg.grid(), cfg.forward(),
                                    workers=args.workers)
    bands_to_csv(out / "bands.csv", bands, dt=cfg["forward.dt"])
    cfg.write_resolved(out)
    print(f"wrote predictive bands for {samples.shape[0]} draw(s) to "
          f"{out / 'bands.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    samples = np.load(args.samples)
    reference = np.loadtxt(args.reference, delimiter=",").ravel()
    out = _out_dir(args)
    with_coverage = samples.shape[0] >= 40
    report = MetricsReport.evaluate(samples.mean(axis=0), reference,
                                    samples=samples if with_coverage else None)
    report.to_csv(out / "metrics.csv")
    (out / "metrics.txt").write_text(report.to_text() + "\n",
                                     encoding="utf-8")
    if with_coverage:
        lo, hi = (np.quantile(samples, q, axis=0) for q in (0.025, 0.975))
        with open(out / "coverage.csv", "w", encoding="utf-8") as fh:
            fh.write("parameter,covered,lo95,hi95,reference\n")
            for i, flag in enumerate(report.coverage_flags):
                fh.write(f"{i},{int(flag)},{lo[i]!r},{hi[i]!r},"
                         f"{reference[i]!r}\n")
    print(report.to_text())
    return 0


# ---------------------------------------------------------------------------
# numerical self-checks
# ---------------------------------------------------------------------------

def _perturbed_flow(dim, cond_dim, n_affine, n_spline, seed):
    store = ParameterStore()
    flow = ConditionalFlow(store, dim, cond_dim, n_affine=n_affine,
                           n_spline=n_spline, hidden=(32,), dropout=0.0,
                           init_seed=seed, perm_seed=seed)
    flat = store.flatten()
    store.load_flat(flat + 0.2 * RngState(seed + 50).normal(flat.shape))
    return store, flow


def _check_invertibility(corrupt: bool) -> float:
    store, flow = _perturbed_flow(16, 8, 3, 3, seed=5)
    x = RngState(7).normal((200, 16))
    cond = Tensor(RngState(8).normal((200, 8)))
    z, _ = flow.forward(Tensor(x), cond)
    if corrupt:
        bad = store.flatten()
        bad[bad.size // 2] += 0.5
        store.load_flat(bad)
    back, _ = flow.inverse(Tensor(z.data), cond)
    return float(np.max(np.abs(back.data - x)))


def _check_logdet() -> float:
    store, flow = _perturbed_flow(4, 3, 1, 1, seed=9)
    x = RngState(10).normal((20, 4))
    cond = Tensor(RngState(11).normal((20, 3)))
    _, ld = flow.forward(Tensor(x), cond)
    h, worst = 1e-5, 0.0
    for i in range(x.shape[0]):
        J = np.empty((4, 4))
        for j in range(4):
            up, dn = x[i].copy(), x[i].copy()
            up[j] += h
            dn[j] -= h
            pair = Tensor(np.stack([up, dn]))
            crow = Tensor(np.tile(cond.data[i], (2, 1)))
            zs, _ = flow.forward(pair, crow)
            J[:, j] = (zs.data[0] - zs.data[1]) / (2.0 * h)
        worst = max(worst, abs(ld.data[i] - np.linalg.slogdet(J)[1]))
    return worst


def _check_gradient() -> float:
    store, flow = _perturbed_flow(4, 3, 1, 1, seed=12)
    x = RngState(13).normal((12, 4))
    cond = Tensor(RngState(14).normal((12, 3)))

    def loss_fn():
        z, ld = flow.forward(Tensor(x), cond)
        half = ad.mul(ad.reduce_sum(ad.mul(z, z), axis=-1), Tensor(0.5))
        return ad.reduce_mean(ad.sub(half, ld))

    h = 1e-5
    with Tape(watch=store) as tape:
        loss = loss_fn()
    grads = backward(tape, loss)
    worst = 0.0
    # per tensor, compare the largest-magnitude gradient entry against
    # a central difference
    for name in store:
        base = store[name].data.copy()
        g = grads[name].data
        idx = np.unravel_index(np.argmax(np.abs(g)), base.shape)
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        store[name] = Tensor(plus)
        up = loss_fn().item()
        store[name] = Tensor(minus)
        down = loss_fn().item()
        store[name] = Tensor(base)
        fd = (up - down) / (2.0 * h)
        worst = max(worst, abs(g[idx] - fd) / (abs(fd) + 1e-12))
    return worst


def _check_spline_continuity() -> float:
    store = ParameterStore()
    layer = SplineCouplingLayer(store, "l", 2, 2, (16,), RngState(15), bins=8)
    flat = store.flatten()
    store.load_flat(flat + 0.5 * RngState(16).normal(flat.shape))
    first = Tensor(np.zeros((1, 1)))
    cond = Tensor(RngState(17).normal((1, 2)))
    xk, widths, zk, heights, slopes = layer._spline_params(first, cond)
    get = lambda t, j: float(t.data[0, 0, j])
    worst = 0.0
    for j in range(1, layer.bins):
        vals = []
        for b, xi in ((j - 1, 1.0), (j, 0.0)):
            phi = get(heights, b) / get(widths, b)
            v, ldv = SplineCouplingLayer._evaluate(
                Tensor(np.full((1, 1), xi)),
                Tensor(np.full((1, 1), get(zk, b))),
                Tensor(np.full((1, 1), get(heights, b))),
                Tensor(np.full((1, 1), phi)),
                Tensor(np.full((1, 1), get(slopes, b))),
                Tensor(np.full((1, 1), get(slopes, b + 1))))
            vals.append((v.item(), float(np.exp(ldv.item()))))
        worst = max(worst, abs(vals[0][0] - vals[1][0]),
                    abs(vals[0][1] - vals[1][1]))
    return worst


def _check_mass_balance() -> float:
    grid = GridSpec(rows=3, cols=3, sensors=((1, 1),))
    initial = RngState(18).uniform((grid.n_cells,), low=8.0, high=12.0)
    fc = ForwardConfig(n_steps=25, initial_head=initial)
    log_k = sample_prior(GPPrior(), grid, 1, RngState(19))[0]
    _, details = solve_groundwater(log_k, grid, fc, return_details=True)
    volumes = fc.specific_yield * grid.cell_size ** 2 \
        * details["heads"].sum(axis=1)
    return float(np.max(np.abs(volumes - volumes[0])) / volumes[0])


def run_selfchecks(corrupt: bool = False) -> list[tuple[str, float, float]]:
    """(name, max observed error, tolerance) for each numerical suite.

    ``corrupt`` injects a weight perturbation between the forward and
    inverse flow passes; the invertibility check must then fail, which
    proves the suite can detect broken round trips.
    """
    return [
        ("invertibility", _check_invertibility(corrupt), 1e-6),
        ("log-determinant", _check_logdet(), 1e-4),
        ("gradient", _check_gradient(), 1e-4),
        ("spline-continuity", _check_spline_continuity(), 1e-8),
        ("mass-balance", _check_mass_balance(), 1e-8),
    ]


def cmd_selfcheck(args) -> int:
    failures = 0
    for name, err, tol in run_selfchecks(corrupt=args.corrupt):
        ok = err < tol
        failures += 0 if ok else 1
        print(f"{name:<18} max error {err:.3e}  (tol {tol:.0e})  "
              f"{'PASS' if ok else 'FAIL'}")
    if failures:
        print(f"{failures} check(s) failed")
        return 1
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowinfer",
        description="Amortized likelihood-free posterior inference for "
                    "groundwater models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True,
                           help="run configuration file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--workers", type=int, default=1,
                       help="parallelism cap (results do not depend on it)")

    p = sub.add_parser("generate", help="simulate a training dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit the posterior model on a dataset")
    common(p)
    p.add_argument("--dataset", required=True, help="LFI1 dataset file")
    p.add_argument("--resume", action="store_true",
                   help="continue from state.nfts in the output directory")
    p.add_argument("--log-every", type=int, default=0,
                   help="print progress every n epochs (0 = silent)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="draw posterior samples for one record")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--obs", required=True,
                   help="observations: k x N_u CSV or LFI1 dataset")
    p.add_argument("--index", type=int, default=0,
                   help="record index when --obs is a dataset")
    p.add_argument("--n", type=int, default=2000, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("predict", help="posterior-predictive head bands")
    common(p)
    p.add_argument("--samples", help="samples.npy from infer")
    p.add_argument("--model", help="model checkpoint (with --obs)")
    p.add_argument("--obs", help="observation record (with --model)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--n", type=int, default=2000)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="accuracy metrics against a reference")
    p.add_argument("--samples", required=True, help="samples.npy from infer")
    p.add_argument("--reference", required=True,
                   help="CSV of true parameter values")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selfcheck", help="run the numerical check suites")
    p.add_argument("--corrupt", action="store_true",
                   help="negative control: corrupt weights mid-check")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"missing file: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return 2
    except (SimulationError, TrainingDivergedError, NonFiniteError) as err:
        print(f"run failed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
