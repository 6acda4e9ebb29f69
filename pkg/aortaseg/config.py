"""aortaseg: Run configuration.

Settings live in YAML files. The packaged ``default.yaml`` provides every key;
a user file overrides a subset, written either as nested sections or as
dotted keys such as ``train.iterations: 250000``.
"""

from __future__ import annotations

import dataclasses
import logging
import pathlib
from typing import Any

import yaml

from .errors import ConfigError
from .phantom import ANISOTROPIC_SPACING, PhantomSpec
from .trainer import TrainConfig

logger = logging.getLogger("aortaseg:config")


def load_yaml(path: str | pathlib.Path) -> dict:
    """Load a YAML mapping."""
    logger.debug("path: %s", path)
    with open(path, encoding="utf-8") as handle:
        content = yaml.load(handle, Loader=yaml.loader.SafeLoader)
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ConfigError(f"{path}: configuration must be a mapping")
    return content


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    """Turn nested sections into dotted keys."""
    flat: dict[str, Any] = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError(f"expected true or false, got {value!r}")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError(f"expected an integer, got {value!r}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, list) or len(value) != len(default):
                raise TypeError(
                    f"expected a list of {len(default)} values, got {value!r}"
                )
            return [_coerce(key, v, d) for v, d in zip(value, default)]
        return str(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid value for {key}: {err}") from err


class RunConfig:
    """Merged default and user settings.

    Attributes
    ----------
    values : dict[str, Any]
        Settings by dotted key.
    base_dir : pathlib.Path
        Directory against which ``paths.*`` entries are resolved.
    """

    def __init__(
        self, path: str | pathlib.Path | None = None, config: str = "default"
    ) -> None:
        """Load the packaged defaults and apply an optional user file.

        Parameters
        ----------
        path : str | Path | None, default None
            User configuration file.
        config : str, default "default"
            Name of the packaged YAML file holding the defaults.
        """
        defaults = pathlib.Path(__file__).with_name(config + ".yaml")
        self.values: dict[str, Any] = flatten(load_yaml(defaults))
        self.base_dir: pathlib.Path = pathlib.Path.cwd()
        if path is not None:
            self.base_dir = pathlib.Path(path).resolve().parent
            self.update(flatten(load_yaml(path)))
        logger.debug("config: %s", self.values)

    def update(self, values: dict[str, Any]) -> None:
        """Override settings by dotted key.

        Raises
        ------
        ConfigError
            For unknown keys or values of the wrong type.
        """
        unknown = sorted(set(values) - set(self.values))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        for key, value in values.items():
            self.values[key] = _coerce(key, value, self.values[key])

    def get(self, key: str) -> Any:
        """Value of a dotted key."""
        if key not in self.values:
            raise ConfigError(f"unknown configuration key: {key}")
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        """Settings of one section with the prefix removed."""
        prefix = name + "."
        return {
            k[len(prefix) :]: v for k, v in self.values.items() if k.startswith(prefix)
        }

    def train_config(self) -> TrainConfig:
        """Training hyper-parameters."""
        return TrainConfig(**self.section("train"))

    def phantom_spec(self) -> PhantomSpec:
        """Base phantom spec.

        ``phantom.count`` and ``phantom.anisotropic`` are read separately.
        """
        names = {f.name for f in dataclasses.fields(PhantomSpec)}
        values = {k: v for k, v in self.section("phantom").items() if k in names}
        for key, value in values.items():
            if isinstance(value, list):
                values[key] = tuple(value)
        return PhantomSpec(**values)

    def phantom_spacing(self) -> tuple[float, float, float] | None:
        """Voxel size of the anisotropic variant, None for the base grid."""
        return ANISOTROPIC_SPACING if self.get("phantom.anisotropic") else None

    def split(self) -> tuple[int, int, int]:
        """Numbers of training, validation and test cases."""
        split = self.section("split")
        return split["train"], split["validation"], split["test"]

    def path(self, name: str) -> pathlib.Path:
        """A ``paths.*`` entry resolved against the configuration file."""
        path = pathlib.Path(self.get(f"paths.{name}"))
        return path if path.is_absolute() else self.base_dir / path

    def as_dict(self) -> dict[str, Any]:
        """Copy of all settings by dotted key."""
        return dict(self.values)
