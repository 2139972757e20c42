"""Flat key-value run configuration shared by all CLI commands.

A config file is UTF-8 text of ``key = value`` lines; ``#`` starts a
comment and blank lines are ignored.  Every key has a typed schema
entry, unknown keys are rejected by name, and ``seed`` is the one key
without a default.  ``resolved_text`` renders the full configuration,
defaults included, in canonical form: re-parsing it yields the same
values and re-rendering yields identical bytes, which is what lets a
run directory reproduce itself.
"""

from __future__ import annotations

from pathlib import Path

from .simulate import (
    ForwardConfig,
    GPPrior,
    GridSpec,
    NoiseModel,
    default_split,
    edge_fixed_heads,
)
from .train import TrainingConfig


class ConfigError(Exception):
    """A malformed, unknown, or missing configuration entry."""


# key -> (kind, default); a None default marks the key as required
_SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", None),
    "grid.rows": ("int", 8),
    "grid.cols": ("int", 4),
    "grid.cell_size": ("float", 10.0),
    "grid.sensors": ("pairs", ((1, 1), (3, 2), (5, 1), (6, 2))),
    "prior.variance": ("float", 1.0),
    "prior.length_scale": ("float", 20.0),
    "prior.jitter": ("float", 1e-10),
    "forward.dt": ("float", 0.5),
    "forward.n_steps": ("int", 25),
    "forward.initial_head": ("float", 10.0),
    "forward.specific_yield": ("float", 0.2),
    "forward.recharge": ("float", 0.0),
    "forward.boundary.north": ("boundary", ("fixed", 11.0)),
    "forward.boundary.south": ("boundary", ("fixed", 9.0)),
    "forward.boundary.west": ("boundary", "noflux"),
    "forward.boundary.east": ("boundary", "noflux"),
    "forward.picard_tol": ("float", 1e-8),
    "forward.picard_max_iter": ("int", 50),
    "noise.sigma": ("float", 0.01),
    "data.m": ("int", 2000),
    "data.n_val": ("int", -1),   # -1 scales the reference split
    "data.n_test": ("int", -1),
    "data.max_retries": ("int", 5),
    "flow.n_affine": ("int", 5),
    "flow.n_spline": ("int", 5),
    "flow.hidden": ("ints", (128, 128)),
    "flow.bins": ("int", 16),
    "flow.bound": ("float", 3.0),
    "flow.clamp": ("float", 2.0),
    "flow.dropout": ("float", 0.0),
    "summary.channels": ("ints", (64, 128)),
    "summary.kernel": ("int", 3),
    "summary.features": ("int", 256),
    "summary.dropout": ("float", 0.0),
    "train.epochs": ("int", 4000),
    "train.batch_size": ("int", 120),
    "train.lr": ("float", 1e-3),
    "train.lr_decay": ("float", 0.95),
    "train.decay_every": ("int", 0),  # 0 spreads ~100 decays over the run
    "train.clip_norm": ("float", 10.0),
    "train.patience": ("int", 200),
    "train.val_every": ("int", 1),
    "train.checkpoint_every": ("int", 0),
    "infer.n": ("int", 2000),
}

_BOUNDARY_KEYS = {"forward.boundary.north": "N", "forward.boundary.south": "S",
                  "forward.boundary.west": "W", "forward.boundary.east": "E"}


def _parse_value(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if kind == "pairs":
            pairs = []
            for chunk in raw.split(";"):
                r, c = chunk.split(",")
                pairs.append((int(r), int(c)))
            return tuple(pairs)
        if kind == "boundary":
            parts = raw.split()
            if parts == ["noflux"]:
                return "noflux"
            if len(parts) == 2 and parts[0] == "fixed":
                return ("fixed", float(parts[1]))
            raise ValueError("expected 'noflux' or 'fixed <head>'")
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(f"config key '{key}': cannot parse '{raw}' "
                          f"as {kind} ({err})")
    raise ConfigError(f"config key '{key}': unhandled kind {kind}")


def _render_value(kind: str, value) -> str:
    if kind == "int":
        return str(value)
    if kind == "float":
        return repr(float(value))
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "pairs":
        return ";".join(f"{r},{c}" for r, c in value)
    if kind == "boundary":
        if value == "noflux":
            return "noflux"
        return f"fixed {value[1]!r}"
    raise ConfigError(f"unhandled kind {kind}")


class RunConfig:
    """Typed view of one parsed configuration."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def parse(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"line {lineno}: expected 'key = value', "
                                  f"got '{body}'")
            key, raw = (part.strip() for part in body.split("=", 1))
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            if key in values:
                raise ConfigError(f"duplicate config key '{key}'")
            values[key] = _parse_value(key, _SCHEMA[key][0], raw)
        for key, value in (overrides or {}).items():
            values[key] = value
        for key, (kind, default) in _SCHEMA.items():
            if key in values:
                continue
            if default is None:
                raise ConfigError(f"missing required config key '{key}'")
            values[key] = default
        return cls(values)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read(), overrides)

    def resolved_text(self) -> str:
        lines = [f"{key} = {_render_value(kind, self.values[key])}"
                 for key, (kind, _) in _SCHEMA.items()]
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory) -> None:
        path = Path(directory) / "resolved.cfg"
        path.write_text(self.resolved_text(), encoding="utf-8")

    # ---- typed views onto the domain objects ----

    def grid(self) -> GridSpec:
        return GridSpec(rows=self["grid.rows"], cols=self["grid.cols"],
                        cell_size=self["grid.cell_size"],
                        sensors=self["grid.sensors"])

    def prior(self) -> GPPrior:
        return GPPrior(variance=self["prior.variance"],
                       length_scale=self["prior.length_scale"],
                       jitter=self["prior.jitter"])

    def forward(self) -> ForwardConfig:
        heads = {}
        for key, side in _BOUNDARY_KEYS.items():
            if self[key] != "noflux":
                heads[side] = self[key][1]
        return ForwardConfig(
            dt=self["forward.dt"], n_steps=self["forward.n_steps"],
            initial_head=self["forward.initial_head"],
            specific_yield=self["forward.specific_yield"],
            recharge=self["forward.recharge"],
            fixed_heads=edge_fixed_heads(self.grid(), heads),
            picard_tol=self["forward.picard_tol"],
            picard_max_iter=self["forward.picard_max_iter"])

    def noise(self) -> NoiseModel:
        return NoiseModel(sigma=self["noise.sigma"])

    def training(self) -> TrainingConfig:
        decay = self["train.decay_every"]
        return TrainingConfig(
            epochs=self["train.epochs"], batch_size=self["train.batch_size"],
            lr=self["train.lr"], lr_decay=self["train.lr_decay"],
            decay_every=decay if decay > 0 else None,
            clip_norm=self["train.clip_norm"],
            patience=self["train.patience"],
            val_every=self["train.val_every"],
            checkpoint_every=self["train.checkpoint_every"],
            seed=self["seed"])

    def summary_descriptor(self) -> dict:
        return {"type": "conv", "n_sensors": len(self["grid.sensors"]),
                "channels": list(self["summary.channels"]),
                "kernel": self["summary.kernel"],
                "features": self["summary.features"],
                "dropout": self["summary.dropout"]}

    def flow_kwargs(self) -> dict:
        return {"n_affine": self["flow.n_affine"],
                "n_spline": self["flow.n_spline"],
                "hidden": self["flow.hidden"], "bins": self["flow.bins"],
                "bound": self["flow.bound"], "clamp": self["flow.clamp"],
                "dropout": self["flow.dropout"]}

    def split(self, m: int) -> tuple[int, int]:
        n_val, n_test = self["data.n_val"], self["data.n_test"]
        auto = default_split(m)
        if n_val < 0:
            n_val = auto[0]
        if n_test < 0:
            n_test = auto[1]
        return n_val, n_test
