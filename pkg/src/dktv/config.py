"""Experiment configuration: JSON files validated into frozen dataclasses.

A configuration file holds one JSON object::

    {
      "experiment": "mpc-cartpole",
      "system": {"kind": "cartpole", "friction_law": "monotone"},
      "net": {"hidden": [32], "output_dim": 6},
      "beta": 12,
      "train": {"epochs": 100, "lambda_A": 0.1},
      "seeds": [0, 1, 2],
      "duration": "75s",
      "mpc": {"Q": [1, 0.1, 10, 0.1], "R": [0.01], "horizon": 10},
      "thresholds": {"max_abs_theta": "0:0.2"}
    }

Unknown keys and values of the wrong type raise :class:`~dktv.ConfigError`
naming the offending key.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import re
import types
import typing
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np

from dktv import ConfigError, DktvError
from dktv.bounds import MatrixNorm
from dktv.core import TrainConfig
from dktv.mpc import MpcProblem
from dktv.observable import NetSpec
from dktv.systems import (
    Cartpole,
    CartpoleConfig,
    DynamicalSystem,
    QuadConfig,
    Quadcopter,
    SimpleNtvs,
    SimpleNtvsConfig,
)

log: logging.Logger = logging.getLogger(__name__)

EXPERIMENTS: tuple[str, ...] = (
    "simple-ntvs",
    "quad-predict",
    "nh-sweep",
    "mpc-cartpole",
    "bound-report",
)

SystemKind = typing.Literal["simple_ntvs", "quadcopter", "cartpole"]

SystemConfig = typing.Union[SimpleNtvsConfig, QuadConfig, CartpoleConfig]

_SYSTEM_CONFIGS: dict[str, type] = {
    "simple_ntvs": SimpleNtvsConfig,
    "quadcopter": QuadConfig,
    "cartpole": CartpoleConfig,
}

_INPUT_DIMS: dict[str, int] = {"simple_ntvs": 0, "quadcopter": 4, "cartpole": 1}


# Durations ##################################################################

_UNIT_ALIASES: list[tuple[list[str], str]] = [
    (["milliseconds", "millisecond", "msec"], "ms"),
    (["hours", "hour", "hr"], "h"),
    (["minutes", "minute", "min"], "m"),
    (["seconds", "second", "sec"], "s"),
]

_UNIT_SECONDS: dict[str, float] = {"h": 3600.0, "m": 60.0, "s": 1.0, "ms": 0.001}


def parse_duration(spec: typing.Union[str, int, float]) -> float:
    """Seconds in a duration like ``75``, ``"75s"``, ``"2min"`` or ``"1min 15s"``.

    Bare numbers are seconds. Understood units are ``h`` (``hours``,
    ``hour``, ``hr``), ``m`` (``minutes``, ``minute``, ``min``), ``s``
    (``seconds``, ``second``, ``sec``) and ``ms``.

    Usable as ``type`` of an :mod:`argparse` option.

    :raises ConfigError: For anything else, and for negative durations.
    """
    if isinstance(spec, bool):
        raise ConfigError(f"not a duration: {spec!r}")
    if isinstance(spec, (int, float)):
        seconds = float(spec)
    else:
        text = re.sub(r"\s+", "", spec)
        try:
            seconds = float(text)
        except ValueError:
            for aliases, unit in _UNIT_ALIASES:
                for alias in aliases:
                    text = text.replace(alias, unit)
            spans = re.findall(r"(\d+(?:\.\d*)?|\.\d+)([a-z]+)", text)
            if not spans or "".join(v + u for v, u in spans) != text:
                raise ConfigError(f"not a duration: {spec!r}") from None
            seconds = 0.0
            for value, unit in spans:
                if unit not in _UNIT_SECONDS:
                    raise ConfigError(f"unknown time unit {unit!r} in {spec!r}")
                seconds += float(value) * _UNIT_SECONDS[unit]
    if seconds < 0.0:
        raise ConfigError(f"durations must not be negative: {spec!r}")
    return seconds


# Schema #####################################################################


@dataclasses.dataclass(frozen=True)
class MpcConfig:
    Q: tuple[float, ...] = (1.0, 0.1, 10.0, 0.1)
    """Diagonal of the state weight over ``(x, ẋ, θ̄, θ̄̇)``."""

    R: tuple[float, ...] = (0.01,)
    horizon: int = 10
    u_min: typing.Optional[float] = -10.0
    u_max: typing.Optional[float] = 10.0
    x_min: typing.Optional[tuple[float, ...]] = None
    x_max: typing.Optional[tuple[float, ...]] = None
    terminal_weight: float = 1.0
    penalty_weight: float = 1e4
    max_iterations: int = 200
    tolerance: float = 1e-8
    pretrain_steps: int = 240
    """Samples of the excitation run used to pre-train the model."""

    excitation_noise: float = 1.0

    def problem(self, n: int, m: int) -> MpcProblem:
        if len(self.Q) != n or len(self.R) != m:
            raise ConfigError(
                f"mpc.Q needs {n} and mpc.R needs {m} diagonal entries, "
                f"got {len(self.Q)} and {len(self.R)}"
            )
        try:
            return MpcProblem(
                Q=np.diag(self.Q),
                R=np.diag(self.R),
                horizon=self.horizon,
                u_min=None if self.u_min is None else np.full(m, self.u_min),
                u_max=None if self.u_max is None else np.full(m, self.u_max),
                x_min=None if self.x_min is None else np.asarray(self.x_min),
                x_max=None if self.x_max is None else np.asarray(self.x_max),
                terminal_weight=self.terminal_weight,
                penalty_weight=self.penalty_weight,
                max_iterations=self.max_iterations,
                tolerance=self.tolerance,
            )
        except DktvError as e:
            raise ConfigError(f"mpc: {e}") from e


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    system_kind: SystemKind = "simple_ntvs"
    system: SystemConfig = SimpleNtvsConfig()
    net: NetSpec = NetSpec()
    beta: typing.Union[int, tuple[int, ...]] = 10
    """Constant batch size or the schedule ``β_0, β_1, …``."""

    train: TrainConfig = TrainConfig()
    seeds: tuple[int, ...] = (0,)
    duration: float = dataclasses.field(default=20.0, metadata={"duration": True})
    x0: typing.Optional[tuple[float, ...]] = None
    gammas: tuple[float, ...] = (0.8, 6.0)
    """Settings of ``γ`` for the simple time-varying system."""

    widths: tuple[int, ...] = (8, 16, 32, 64)
    """Hidden widths ``n_h`` of the sweep."""

    dnn_hidden: tuple[int, ...] = (64,)
    norm: MatrixNorm = "spectral"
    lipschitz_pairs: typing.Optional[int] = 2000
    mpc: MpcConfig = MpcConfig()
    thresholds: Mapping[str, str] = dataclasses.field(default_factory=dict)
    """Range expression per assertion name, e.g. ``{"max_abs_theta": "0:0.2"}``."""

    oracle: typing.Optional[str] = None
    """JSON file holding recorded reference errors, relative to the config."""

    oracle_slack: float = 2.0
    oracle_epochs_factor: int = 10
    """Multiplies ``train.epochs`` for a ``--write-oracle`` run."""

    snapshots: typing.Optional[str] = None
    """Snapshot directory a ``bound-report`` reads."""

    save_snapshots: bool = True
    out: str = "runs"
    plots: bool = False
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment: unknown experiment {self.experiment!r}, "
                f"expected one of {', '.join(EXPERIMENTS)}"
            )
        if not isinstance(self.system, _SYSTEM_CONFIGS[self.system_kind]):
            raise ConfigError(f"system: does not describe a {self.system_kind} system")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is needed")
        if self.jobs < 1:
            raise ConfigError("jobs: must be at least 1")
        if self.oracle_epochs_factor < 1:
            raise ConfigError("oracle_epochs_factor: must be at least 1")
        check_full_row_rank(self.beta, self.net.output_dim, self.m)
        if self.experiment == "nh-sweep" and len(self.widths) < 2:
            raise ConfigError("widths: the sweep needs at least two widths")

    @property
    def m(self) -> int:
        return _INPUT_DIMS[self.system_kind]

    def build_system(self, **changes: typing.Any) -> DynamicalSystem:
        system = dataclasses.replace(self.system, **changes) if changes else self.system
        if isinstance(system, QuadConfig):
            return Quadcopter(system)
        if isinstance(system, CartpoleConfig):
            return Cartpole(system)
        return SimpleNtvs(system)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / 0.1))

    def to_dict(self) -> dict[str, typing.Any]:
        data = dataclasses.asdict(self)
        data["system"] = {"kind": self.system_kind, **data["system"]}
        del data["system_kind"]
        data["thresholds"] = dict(self.thresholds)
        return data


EXPERIMENT_DEFAULTS: dict[str, dict[str, typing.Any]] = {
    "simple-ntvs": {
        "system": {"kind": "simple_ntvs"},
        "net": {"hidden": [32], "output_dim": 6},
        "beta": 10,
        "train": {"lambda_A": 0.1},
        "seeds": [0, 1, 2, 3, 4],
        "duration": 20.0,
        "gammas": [0.8, 6.0],
    },
    "quad-predict": {
        "system": {"kind": "quadcopter"},
        "net": {
            "hidden": [64],
            "output_dim": 16,
            "hidden_activation": "gaussian",
            "output_activation": "gaussian",
        },
        "beta": 30,
        "seeds": [0, 1, 2],
        "duration": 21.0,
        "dnn_hidden": [64],
    },
    "nh-sweep": {
        "system": {"kind": "simple_ntvs", "gamma": 6.0},
        "net": {"hidden": [32], "output_dim": 6},
        "beta": 10,
        "duration": 20.0,
        "widths": [8, 16, 32, 64],
    },
    "mpc-cartpole": {
        "system": {"kind": "cartpole"},
        "net": {"hidden": [32], "output_dim": 6},
        "beta": 12,
        "train": {"epochs": 100, "lambda_A": 0.1},
        "seeds": [0, 1, 2],
        "duration": 75.0,
    },
    "bound-report": {
        "system": {"kind": "simple_ntvs"},
        "net": {"hidden": [32], "output_dim": 6},
        "beta": 10,
        "gammas": [0.8],
    },
}
"""Settings an experiment runs with when neither the file nor the command line sets them."""


def check_full_row_rank(
    beta: typing.Union[int, Sequence[int]], r: int, m: int
) -> None:
    """:raises ConfigError: If a batch is too small for a full-row-rank ``[G; U]``."""
    sizes = [beta] if isinstance(beta, int) else list(beta)
    if not sizes:
        raise ConfigError("beta: the batch size schedule is empty")
    for size in sizes:
        if size < r + m:
            raise ConfigError(
                f"beta: batch size {size} < r+m = {r + m}; every lifted batch [G; U] "
                "must have full row rank r+m, which needs at least r+m transitions"
            )


# Loading ####################################################################


def _type_name(hint: typing.Any) -> str:
    return getattr(hint, "__name__", None) or str(hint).replace("typing.", "")


def _coerce(value: typing.Any, hint: typing.Any, key: str) -> typing.Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is typing.Any:
        return value
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        errors = []
        for option in args:
            if option is type(None):
                continue
            try:
                return _coerce(value, option, key)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError(errors[-1] if len(errors) == 1 else f"{key}: invalid value {value!r}")
    if origin is typing.Literal:
        if value not in args:
            raise ConfigError(
                f"{key}: expected one of {', '.join(map(repr, args))}, got {value!r}"
            )
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin in (Mapping, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object, got {value!r}")
        return {
            _coerce(k, args[0], key): _coerce(v, args[1], f"{key}.{k}")
            for k, v in value.items()
        }
    if dataclasses.is_dataclass(hint) and isinstance(hint, type):
        return _build(hint, value, key)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: cannot read values of type {_type_name(hint)}")


def _field_values(
    cls: type, data: typing.Any, prefix: str, skip: typing.Collection[str] = ()
) -> dict[str, typing.Any]:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {data!r}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init and f.name not in skip}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        dotted = ", ".join(f"{prefix}.{k}" if prefix else k for k in unknown)
        raise ConfigError(f"unknown key(s): {dotted}")
    kwargs = {}
    for name, value in data.items():
        key = f"{prefix}.{name}" if prefix else name
        if fields[name].metadata.get("duration") and isinstance(value, (str, int, float)):
            kwargs[name] = parse_duration(value)
        else:
            kwargs[name] = _coerce(value, hints[name], key)
    return kwargs


def _construct(cls: type, kwargs: dict[str, typing.Any], prefix: str) -> typing.Any:
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from e
    except ConfigError:
        raise
    except DktvError as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from e


def _build(cls: type, data: typing.Any, prefix: str) -> typing.Any:
    return _construct(cls, _field_values(cls, data, prefix), prefix)


def config_from_dict(data: Mapping[str, typing.Any]) -> ExperimentConfig:
    """Validate a parsed configuration object.

    ``system.kind`` selects the system, the remaining ``system`` keys are
    its parameters.
    """
    data = dict(data)
    system = data.pop("system", {})
    if not isinstance(system, dict):
        raise ConfigError(f"system: expected an object, got {system!r}")
    system = dict(system)
    kind = system.pop("kind", "simple_ntvs")
    if kind not in _SYSTEM_CONFIGS:
        raise ConfigError(
            f"system.kind: expected one of {', '.join(map(repr, _SYSTEM_CONFIGS))}, got {kind!r}"
        )
    if "experiment" not in data:
        raise ConfigError("experiment: missing")
    kwargs = _field_values(ExperimentConfig, data, "", skip=("system", "system_kind"))
    kwargs["system_kind"] = kind
    kwargs["system"] = _build(_SYSTEM_CONFIGS[kind], system, "system")
    return _construct(ExperimentConfig, kwargs, "")


def apply_overrides(
    data: dict[str, typing.Any], overrides: Sequence[str]
) -> dict[str, typing.Any]:
    """Apply ``dotted.key=JSON`` assignments to a raw configuration object.

    Values that are not valid JSON are taken as strings, so
    ``--set duration=75s`` works without quotes.

    :raises ConfigError: If an assignment has no ``=``.
    """
    for override in overrides:
        key, sep, raw = override.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects dotted.key=value, got {override!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        *parents, leaf = key.split(".")
        node = data
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{key}: {part} is not an object")
            node = child
        node[leaf] = value
    return data


def read_config_file(path: typing.Union[str, Path]) -> dict[str, typing.Any]:
    """:raises ConfigError: If the file is missing or not a JSON object."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} does not exist") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} does not contain an object")
    return data


def load_config(
    path: typing.Optional[typing.Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    experiment: typing.Optional[str] = None,
) -> ExperimentConfig:
    """Read, override and validate a configuration.

    Top-level keys of the file replace those of :data:`EXPERIMENT_DEFAULTS`.

    :param path: JSON file, or :obj:`None` to run with the defaults.
    :param overrides: ``dotted.key=JSON`` assignments, applied last.
    :param experiment: The experiment to run. A file naming another
        experiment is rejected.
    :raises ConfigError: For invalid files, keys and values.
    """
    raw = read_config_file(path) if path is not None else {}
    name = experiment or raw.get("experiment")
    if name is not None and raw.get("experiment", name) != name:
        raise ConfigError(f"{path} configures {raw['experiment']!r}, not {name!r}")
    data: dict[str, typing.Any] = {"experiment": name} if name else {}
    data.update(copy.deepcopy(EXPERIMENT_DEFAULTS.get(name or "", {})))
    data.update(raw)
    data = apply_overrides(data, overrides)
    config = config_from_dict(data)
    if config.oracle is not None and path is not None:
        oracle = Path(config.oracle)
        if not oracle.is_absolute():
            config = dataclasses.replace(config, oracle=str(Path(path).parent / oracle))
    log.debug("loaded %s configuration", config.experiment)
    return config
