"""Layered run configuration: defaults < desk preset < JSON file < flags."""

import copy
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from config import settings
from .logger import logger, ConfigurationError
from .models import TrainConfig, desk_preset

ModelT = TypeVar("ModelT", bound=BaseModel)


def deep_merge(base: Mapping[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(dict(base))
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(item: str) -> Dict[str, Any]:
    """Turn ``a.b=value`` into ``{"a": {"b": value}}``; values are JSON when possible."""
    if "=" not in item:
        raise ConfigurationError(f"Override must look like key=value, got {item!r}", field=item)
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"Override has an empty key: {item!r}", field=item)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: Dict[str, Any] = {}
    cursor = nested
    parts = key.split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return nested


def _check_keys(model: Type[BaseModel], document: Mapping[str, Any], prefix: str = "") -> None:
    for key, value in document.items():
        path = f"{prefix}{key}"
        field = model.model_fields.get(key)
        if field is None:
            raise ConfigurationError(f"Unknown config key: {path}", field=path)
        annotation = field.annotation
        if isinstance(value, Mapping) and isinstance(annotation, type) and issubclass(annotation, BaseModel):
            _check_keys(annotation, value, prefix=f"{path}.")


def build_config(
    model: Type[ModelT],
    document: Mapping[str, Any],
) -> ModelT:
    _check_keys(model, document)
    try:
        return model.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigurationError(
            f"Invalid config value for {location or '<root>'}: {first['msg']}", field=location
        ) from e


def read_config_file(path: Optional[Union[str, Path]]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}", field="config")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {e}", field="config") from e
    if not isinstance(document, dict):
        raise ConfigurationError(f"Config file {path} must hold a JSON object", field="config")
    return document


def load_train_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    desk: Optional[bool] = None,
    base: Optional[Mapping[str, Any]] = None,
) -> TrainConfig:
    """Resolve the effective training config; ``base`` sits between the presets and the file."""
    file_doc = read_config_file(path)
    flag_doc: Dict[str, Any] = {}
    for item in overrides:
        flag_doc = deep_merge(flag_doc, parse_override(item))
    if seed is not None:
        flag_doc["seed"] = seed

    use_desk = desk
    if use_desk is None:
        use_desk = bool(flag_doc.get("desk_scale", file_doc.get("desk_scale", settings.DESK_SCALE)))

    document = desk_preset() if use_desk else {}
    for layer in (base or {}, file_doc, flag_doc):
        document = deep_merge(document, layer)
    config = build_config(TrainConfig, document)
    if config.vgg_weights is None and settings.VGG_WEIGHTS:
        config = config.model_copy(update={"vgg_weights": settings.VGG_WEIGHTS})
    logger.debug("Effective training config resolved", desk_scale=config.desk_scale, source=str(path))
    return config


def write_effective_config(out_dir: Union[str, Path], config: BaseModel, run: Optional[BaseModel] = None) -> Path:
    """Echo the effective config so it can be fed back through --config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "effective_config.json"
    target.write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True))
    if run is not None:
        (out_dir / "run.json").write_text(json.dumps(run.model_dump(mode="json"), indent=2, sort_keys=True))
    return target
