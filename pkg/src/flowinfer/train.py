"""Joint training of the summary network and the conditional flow.

The objective is the Monte Carlo KL surrogate: for each pair (theta, u)
push the standardized parameters through the flow conditioned on the
learned features of u, then minimize

    mean_b [ 0.5 * ||z_b||^2 - log |det J_b| ]

Constant terms (latent normalization, standardizer Jacobian) do not
affect the gradient and are left out; reported densities include them.
A freshly built model is the identity map on standardized parameters,
so its loss starts at dim/2.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, RngState, Tape, Tensor, backward
from .model import PosteriorModel
from .nets import ParameterStore


@dataclass
class TrainingConfig:
    epochs: int = 4000
    batch_size: int = 120
    lr: float = 1e-3
    lr_decay: float = 0.95
    # epochs between decay events; None spreads ~100 events over the run
    decay_every: int | None = None
    clip_norm: float = 10.0
    patience: int = 200
    val_every: int = 1
    # epochs between checkpoint callbacks; 0 disables them
    checkpoint_every: int = 0
    seed: int = 0

    def decay_interval(self) -> int:
        if self.decay_every is not None:
            return max(1, int(self.decay_every))
        return max(1, round(self.epochs / 100))

    def lr_at(self, epoch: int) -> float:
        """Staircase schedule: lr after j decay events is lr * decay**j."""
        return self.lr * self.lr_decay ** (epoch // self.decay_interval())


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)  # (epoch, train, val, lr, seconds)
    best_epoch: int = -1
    best_val: float = np.inf
    stopped_early: bool = False
    final_state: "TrainState | None" = None

    def append(self, epoch, train_loss, val_loss, lr, seconds):
        self.rows.append((epoch, train_loss, val_loss, lr, seconds))

    def to_csv(self, path, append: bool = False) -> None:
        with open(path, "a" if append else "w", encoding="utf-8") as fh:
            if not append:
                fh.write("epoch,train_loss,val_loss,lr,seconds\n")
            for e, tr, va, lr, sec in self.rows:
                fh.write(f"{e},{tr!r},{va!r},{lr!r},{sec!r}\n")


@dataclass
class TrainState:
    """Optimizer and progress snapshot for exact run continuation.

    Resuming from a snapshot replays the remaining epochs with the same
    per-epoch random streams, so the continued run matches an
    uninterrupted one step for step.
    """

    next_epoch: int
    adam_t: int
    adam_m: np.ndarray
    adam_v: np.ndarray
    last_params: np.ndarray
    best_params: np.ndarray | None
    best_epoch: int
    best_val: float

    MAGIC = b"NFTS"
    VERSION = 1

    def save(self, path) -> None:
        best = self.best_params if self.best_params is not None \
            else np.empty(0)
        head = json.dumps(
            {"next_epoch": self.next_epoch, "adam_t": self.adam_t,
             "best_epoch": self.best_epoch, "best_val": self.best_val,
             "n_params": int(self.last_params.size),
             "has_best": self.best_params is not None},
            sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<HI", self.VERSION, len(head)))
            fh.write(head)
            for arr in (self.last_params, best, self.adam_m, self.adam_v):
                fh.write(np.asarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TrainState":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != cls.MAGIC:
            raise ValueError(f"{path}: not a training-state file")
        version, hlen = struct.unpack_from("<HI", blob, 4)
        if version != cls.VERSION:
            raise ValueError(f"{path}: unsupported training-state version "
                             f"{version}")
        head = json.loads(blob[10:10 + hlen].decode("utf-8"))
        n = head["n_params"]
        n_best = n if head["has_best"] else 0
        body = np.frombuffer(blob[10 + hlen:], dtype="<f8")
        if body.size != 3 * n + n_best:
            raise ValueError(f"{path}: truncated training-state body")
        last, best, m, v = np.split(body, [n, n + n_best, 2 * n + n_best])
        return cls(next_epoch=head["next_epoch"], adam_t=head["adam_t"],
                   adam_m=m.copy(), adam_v=v.copy(),
                   last_params=last.copy(),
                   best_params=best.copy() if head["has_best"] else None,
                   best_epoch=head["best_epoch"], best_val=head["best_val"])


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; carries the best state seen so far."""

    def __init__(self, message: str, best_params: np.ndarray | None,
                 best_epoch: int, history: TrainingHistory):
        super().__init__(message)
        self.best_params = best_params
        self.best_epoch = best_epoch
        self.history = history


class Adam:
    """Adam with bias correction; every step rebinds fresh tensors."""

    def __init__(self, store: ParameterStore, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(t.shape) for k, t in store.items()}
        self.v = {k: np.zeros(t.shape) for k, t in store.items()}

    def step(self, grads: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            gd = g.data
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * gd
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * gd * gd
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.store[name] = Tensor(self.store[name].data - update)

    def flat_state(self) -> tuple[np.ndarray, np.ndarray]:
        """Moment estimates flattened in parameter-store order."""
        names = list(self.store)
        return (np.concatenate([self.m[k].ravel() for k in names]),
                np.concatenate([self.v[k].ravel() for k in names]))

    def load_flat_state(self, m: np.ndarray, v: np.ndarray, t: int) -> None:
        offset = 0
        for name, tensor in self.store.items():
            size = tensor.data.size
            self.m[name] = m[offset:offset + size].reshape(tensor.shape).copy()
            self.v[name] = v[offset:offset + size].reshape(tensor.shape).copy()
            offset += size
        if offset != m.size or offset != v.size:
            raise ValueError("optimizer state size does not match the store")
        self.t = int(t)


def clip_gradients(grads: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients in place to a global norm cap; returns the raw norm."""
    total = np.sqrt(sum(float(np.sum(g.data ** 2)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for name in grads:
            grads[name] = Tensor(grads[name].data * factor)
    return total


def joint_loss(model: PosteriorModel, theta: np.ndarray, obs: np.ndarray,
               return_per_sample: bool = False):
    """Batch loss tying the summary network and the flow together."""
    z, logdet = model.forward(theta, obs)
    half_sq = ad.mul(ad.reduce_sum(ad.mul(z, z), axis=-1), Tensor(0.5))
    per = ad.sub(half_sq, logdet)
    if not np.all(np.isfinite(per.data)):
        bad = np.flatnonzero(~np.isfinite(per.data))
        raise NonFiniteError(
            f"non-finite loss for batch sample(s) {bad.tolist()}")
    loss = ad.reduce_mean(per)
    if return_per_sample:
        return loss, per.data
    return loss


def evaluate_loss(model: PosteriorModel, theta: np.ndarray, obs: np.ndarray,
                  batch_size: int = 512) -> float:
    """Sample-averaged loss without dropout or recording."""
    total, count = 0.0, 0
    for start in range(0, theta.shape[0], batch_size):
        tb = theta[start:start + batch_size]
        ob = obs[start:start + batch_size]
        _, per = joint_loss(model, tb, ob, return_per_sample=True)
        total += float(per.sum())
        count += tb.shape[0]
    return total / count


def _snapshot(opt: Adam, model: PosteriorModel, history: TrainingHistory,
              best_params: np.ndarray | None, epoch: int) -> TrainState:
    m, v = opt.flat_state()
    return TrainState(
        next_epoch=epoch + 1, adam_t=opt.t, adam_m=m, adam_v=v,
        last_params=model.store.flatten(),
        best_params=None if best_params is None else best_params.copy(),
        best_epoch=history.best_epoch, best_val=history.best_val)


def train(model: PosteriorModel, dataset, config: TrainingConfig,
          log_every: int = 0, resume: TrainState | None = None,
          checkpoint_callback=None) -> TrainingHistory:
    """Optimize ``model`` on ``dataset`` and leave it at the best epoch.

    ``dataset`` must expose ``train_theta``, ``train_obs``, ``val_theta``
    and ``val_obs`` arrays.  Validation runs without dropout every
    ``val_every`` epochs; the parameters with the lowest validation loss
    are restored before returning, and the end-of-run optimizer snapshot
    is left in ``history.final_state``.  Passing a snapshot as
    ``resume`` continues that run exactly: shuffling and dropout streams
    are keyed by the absolute epoch number, so the remaining epochs
    match an uninterrupted run.  A non-finite training or validation
    loss raises :class:`TrainingDivergedError` with the best state
    attached.
    """
    model.fit_standardizers(dataset.train_theta, dataset.train_obs)
    theta = np.asarray(dataset.train_theta, dtype=np.float64)
    obs = np.asarray(dataset.train_obs, dtype=np.float64)
    n = theta.shape[0]
    root = RngState(config.seed)
    opt = Adam(model.store)
    history = TrainingHistory()
    best_params: np.ndarray | None = None
    start_epoch = 0
    if resume is not None:
        model.store.load_flat(resume.last_params)
        opt.load_flat_state(resume.adam_m, resume.adam_v, resume.adam_t)
        start_epoch = resume.next_epoch
        history.best_epoch = resume.best_epoch
        history.best_val = resume.best_val
        best_params = resume.best_params

    last_epoch = start_epoch - 1
    for epoch in range(start_epoch, config.epochs):
        tic = time.perf_counter()
        lr = config.lr_at(epoch)
        order = np.arange(n)
        root.spawn(2 * epoch).shuffle(order)
        drop_rng = root.spawn(2 * epoch + 1)
        running, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                with Tape(watch=model.store, rng=drop_rng, train=True) as tape:
                    loss = joint_loss(model, theta[idx], obs[idx])
                grads = backward(tape, loss)
            except NonFiniteError as err:
                raise TrainingDivergedError(
                    f"epoch {epoch}: {err}; best epoch so far is "
                    f"{history.best_epoch}", best_params, history.best_epoch,
                    history)
            clip_gradients(grads, config.clip_norm)
            opt.step(grads, lr)
            running += loss.item() * idx.size
            seen += idx.size
        train_loss = running / seen
        last_epoch = epoch

        validate = ((epoch + 1) % max(1, config.val_every) == 0
                    or epoch == config.epochs - 1)
        val_loss = np.nan  # recorded for epochs skipped by val_every
        if validate:
            try:
                val_loss = evaluate_loss(model, dataset.val_theta,
                                         dataset.val_obs)
            except NonFiniteError:
                val_loss = np.nan
            if not np.isfinite(val_loss):
                raise TrainingDivergedError(
                    f"epoch {epoch}: validation loss is not finite; best "
                    f"epoch so far is {history.best_epoch}", best_params,
                    history.best_epoch, history)

        history.append(epoch, train_loss, val_loss, lr,
                       time.perf_counter() - tic)
        if validate and val_loss < history.best_val:
            history.best_val = val_loss
            history.best_epoch = epoch
            best_params = model.store.flatten()
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch:5d}  train {train_loss:10.4f}  "
                  f"val {val_loss:10.4f}  lr {lr:.2e}")
        if (checkpoint_callback is not None and config.checkpoint_every
                and (epoch + 1) % config.checkpoint_every == 0):
            checkpoint_callback(
                _snapshot(opt, model, history, best_params, epoch), history)
        if epoch - history.best_epoch >= config.patience:
            history.stopped_early = True
            break

    history.final_state = _snapshot(opt, model, history, best_params,
                                    last_epoch)
    if best_params is not None:
        model.store.load_flat(best_params)
    model.meta.update({
        "trained_epochs": last_epoch + 1,
        "best_epoch": history.best_epoch,
        "best_val_loss": history.best_val,
        "train_seed": config.seed,
    })
    return history
