"""Named model presets read from the packaged YAML file."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional

import numpy as np
import yaml

from pmsmooth.core import SsmDefinition
from pmsmooth.errors import ConfigError
from pmsmooth.models.linear_gaussian import LinearGaussianSpec, lg_family, lg_model, simulate_lg
from pmsmooth.models.lotka_volterra import LotkaVolterraSpec, lotka_volterra_model, simulate_lv
from pmsmooth.models.rnn import RnnSsmSpec, rnn_model, simulate_rnn_ssm
from pmsmooth.models.sine import SineSpec, simulate_sine, sine_family, sine_model


def load_presets(path=None) -> dict:
    """Parse the preset file; ``path=None`` reads the packaged defaults."""
    if path is None:
        text = resources.files("pmsmooth").joinpath("data/presets.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError("preset file must map names to entries")
    return data


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class Preset:
    """A model preset with uniform simulate/model/family entry points.

    ``simulate(n, rng)`` returns ``(times, X, Y)`` with 2-D ``X`` and ``Y``.
    ``model(Y)`` and ``family(Y)`` build the particle model (or the map from
    parameter to particle model) for an observation record; some models need
    the record because their transition depends on past observations.
    """

    name: str
    kind: str
    spec: object
    n: int
    simulate: Callable
    model: Callable[[np.ndarray], SsmDefinition]
    family: Optional[Callable] = None
    smoother: dict = field(default_factory=dict)
    rml: dict = field(default_factory=dict)


def build_preset(name: str, overrides: dict | None = None, presets: dict | None = None) -> Preset:
    """Instantiate preset ``name`` with optional nested overrides.

    Raises:
        ConfigError: unknown preset or model kind, or invalid spec values.
    """
    presets = load_presets() if presets is None else presets
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(presets)}")
    entry = _merge(presets[name], overrides or {})
    kind = entry.get("model")
    sp = dict(entry.get("spec", {}))
    n = int(entry.get("n", 10))
    common = dict(name=name, kind=kind, n=n, smoother=entry.get("smoother", {}), rml=entry.get("rml", {}))
    try:
        if kind == "linear_gaussian":
            proposal = sp.pop("proposal", "bootstrap")
            spec = LinearGaussianSpec.scalar(**sp)

            def sim(n, rng):
                x, y = simulate_lg(spec, n, rng)
                return np.arange(n + 1, dtype=float), x, y

            return Preset(
                spec=spec,
                simulate=sim,
                model=lambda y: lg_model(spec, proposal),
                family=lambda y: lg_family(spec, proposal),
                **common,
            )
        if kind == "sine":
            method = sp.pop("simulation", "exact")
            spec = SineSpec(**sp)

            def sim(n, rng):
                t, x, y = simulate_sine(spec, n, rng, method=method)
                return t, x[:, None], y[:, None]

            return Preset(
                spec=spec,
                simulate=sim,
                model=lambda y: sine_model(spec),
                family=lambda y: sine_family(spec),
                **common,
            )
        if kind == "rnn":
            spec = RnnSsmSpec.synthetic(**sp)

            def sim(n, rng):
                x, y = simulate_rnn_ssm(spec, n, rng)
                return np.arange(n + 1, dtype=float), x, y

            return Preset(spec=spec, simulate=sim, model=lambda y: rnn_model(spec, y), **common)
        if kind == "lotka_volterra":
            spec = LotkaVolterraSpec(**sp)
            return Preset(
                spec=spec,
                simulate=lambda n, rng: simulate_lv(spec, n, rng),
                model=lambda y: lotka_volterra_model(spec),
                **common,
            )
    except TypeError as exc:
        raise ConfigError(f"invalid spec for preset {name!r}: {exc}") from exc
    raise ConfigError(f"unknown model kind {kind!r} in preset {name!r}")
