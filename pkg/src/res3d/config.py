"""Strict TOML run configuration.

A run file has two top-level keys and three tables::

    dataset = "data/manifest.json"
    output_dir = "runs/mini"

    [architecture]
    name = "miniature"       # a named architecture, optionally with overrides
    num_classes = 5

    [train]
    max_epochs = 200

    [augment]
    clip_len = 8
    output_size = 32

Unknown keys anywhere are errors. Relative paths resolve against the file's
directory. ``num_classes`` defaults to the dataset's class count, and the
architecture's clip shape follows ``clip_len`` and ``output_size``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from res3d.blocks import ArchitectureSpec, _NAMED, named_spec
from res3d.datapipe import AugmentConfig
from res3d.errors import ConfigurationError
from res3d.trainer import TrainConfig

_TOP_KEYS = {"dataset", "output_dir", "architecture", "train", "augment"}


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(section, table, allowed):
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")


@dataclass
class RunConfig:
    architecture: ArchitectureSpec
    train: TrainConfig
    augment: AugmentConfig
    dataset: Path | None = None
    output_dir: Path | None = None

    def to_dict(self):
        arch = self.architecture.to_dict()
        return {
            "dataset": str(self.dataset) if self.dataset is not None else None,
            "output_dir": str(self.output_dir) if self.output_dir is not None else None,
            "architecture": {k: v for k, v in arch.items() if v is not None},
            "train": dataclasses.asdict(self.train),
            "augment": dataclasses.asdict(self.augment),
        }

    def to_toml(self):
        return dumps_toml(self.to_dict())


def _build_architecture(table, augment_table, num_classes_default):
    table = dict(table)
    _reject_unknown("[architecture]", table, _field_names(ArchitectureSpec))
    name = table.get("name")
    if name is None:
        raise ConfigurationError("[architecture] requires 'name'")
    clip_len = augment_table.get("clip_len")
    size = augment_table.get("output_size")
    if "clip_shape" not in table and (clip_len is not None or size is not None):
        named = name.lower() in _NAMED and "genre" not in table
        base = named_spec(name).clip_shape if named else ArchitectureSpec.clip_shape
        table["clip_shape"] = (base[0], clip_len or base[1], size or base[2], size or base[3])
    if "num_classes" not in table and num_classes_default is not None:
        table["num_classes"] = num_classes_default
    try:
        if "genre" in table or name.lower() not in _NAMED:
            if "genre" not in table:
                raise ConfigurationError(f"custom architecture {name!r} requires 'genre'")
            if "stage_depths" not in table:
                raise ConfigurationError(f"custom architecture {name!r} requires 'stage_depths'")
            return ArchitectureSpec(**table)
        overrides = {k: v for k, v in table.items() if k != "name"}
        return named_spec(name, **overrides)
    except TypeError as e:
        raise ConfigurationError(f"[architecture]: {e}") from e


def _manifest_classes(path):
    try:
        with open(path) as f:
            return len(json.load(f)["class_names"])
    except (OSError, ValueError, KeyError, TypeError):
        return None


def build_run_config(doc, base_dir=Path("."), check_paths=True):
    """Validate a parsed document and resolve it into a :class:`RunConfig`."""
    if not isinstance(doc, dict):
        raise ConfigurationError("configuration must be a table")
    _reject_unknown("configuration", doc, _TOP_KEYS)
    for key in ("architecture", "train", "augment"):
        if key in doc and not isinstance(doc[key], dict):
            raise ConfigurationError(f"{key!r} must be a table")
    base_dir = Path(base_dir)

    dataset = doc.get("dataset")
    if dataset is not None:
        dataset = Path(dataset)
        if not dataset.is_absolute():
            dataset = base_dir / dataset
        if dataset.is_dir():
            dataset = dataset / "manifest.json"
        if check_paths and not dataset.is_file():
            raise ConfigurationError(f"dataset manifest not found: {dataset}")
    output_dir = doc.get("output_dir")
    if output_dir is not None:
        output_dir = Path(output_dir)
        if not output_dir.is_absolute():
            output_dir = base_dir / output_dir

    train_table = doc.get("train", {})
    _reject_unknown("[train]", train_table, _field_names(TrainConfig))
    aug_table = doc.get("augment", {})
    _reject_unknown("[augment]", aug_table, _field_names(AugmentConfig))
    try:
        train = TrainConfig(**train_table)
        arch = _build_architecture(doc.get("architecture", {"name": "miniature"}), aug_table,
                                   _manifest_classes(dataset) if dataset is not None else None)
        aug_fields = dict(aug_table)
        aug_fields.setdefault("clip_len", arch.clip_shape[1])
        aug_fields.setdefault("output_size", arch.clip_shape[2])
        augment = AugmentConfig(**aug_fields)
    except TypeError as e:
        raise ConfigurationError(str(e)) from e
    if arch.clip_shape[1:] != (augment.clip_len, augment.output_size, augment.output_size):
        raise ConfigurationError(
            f"architecture clip_shape {arch.clip_shape} disagrees with augment "
            f"clip_len={augment.clip_len}, output_size={augment.output_size}"
        )
    return RunConfig(arch, train, augment, dataset, output_dir)


def read_toml(path):
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"{path}: invalid TOML: {e}") from e


def load_config(path, overrides=None, check_paths=True):
    """Read a TOML run file and apply ``overrides`` (a nested dict) on top.

    An ``architecture`` table in ``overrides`` replaces the file's table
    rather than merging into it.
    """
    path = Path(path)
    doc = read_toml(path)
    overrides = dict(overrides or {})
    if "architecture" in overrides:
        doc["architecture"] = overrides.pop("architecture")
    return build_run_config(merge(doc, overrides), path.parent, check_paths)


def merge(doc, overrides):
    out = dict(doc)
    for k, v in overrides.items():
        if isinstance(v, dict):
            out[k] = merge(out.get(k, {}), v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dumps_toml(doc):
    """Serialize a two-level dict of scalars and arrays; ``None`` values are skipped."""
    lines = [f"{k} = {_toml_value(v)}" for k, v in doc.items()
             if v is not None and not isinstance(v, dict)]
    for k, v in doc.items():
        if isinstance(v, dict):
            lines.append("")
            lines.append(f"[{k}]")
            lines.extend(f"{kk} = {_toml_value(vv)}" for kk, vv in v.items() if vv is not None)
    return "\n".join(lines) + "\n"
