"""
Central configuration for the ownership system.

Values are resolved with the precedence explicit arguments > environment
(``OWNERSHIP_`` prefix, ``__`` for nested keys) > JSON config file > defaults.
"""

import json
from contextvars import ContextVar
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic.fields import FieldInfo
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from .crypto import KeyPair
from .errors import ConfigurationError

# Load environment variables from .env file
load_dotenv()

_config_path: ContextVar[Optional[Path]] = ContextVar("ownership_config_path", default=None)

DEFAULT_IDENTIFYING_FIELDS = [
    "name",
    "contact",
    "email",
    "phone",
    "address",
    "date_of_birth",
    "insurance_number",
    "student_number",
]

DEFAULT_SCHEMA_TAGS = ["mark", "course", "degree", "diagnosis", "prescription"]


class CustodianConfig(BaseModel):
    """One custodian institution: node key seed and identifying-store endpoint."""

    name: str
    seed: str
    endpoint_url: str
    kind: str = "custodian"

    @property
    def address(self) -> str:
        return KeyPair.from_seed(self.seed).address


class Ports(BaseModel):
    api: int = Field(8000, ge=0, le=65535)


def _default_custodians() -> List[CustodianConfig]:
    return [
        CustodianConfig(name="custodian-a", seed="custodian-a", endpoint_url="ids://custodian-a"),
        CustodianConfig(name="custodian-b", seed="custodian-b", endpoint_url="ids://custodian-b"),
    ]


def read_json_config(path: Path) -> Dict[str, Any]:
    """Read a JSON config file, reporting the line of any syntax error."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc.strerror}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(
            f"{path}: line {exc.lineno}: {exc.msg}", line=exc.lineno
        )
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return data


class JsonFileSettingsSource(PydanticBaseSettingsSource):
    """Settings source backed by the JSON file passed to ``load_settings``."""

    def __init__(self, settings_cls: Type[BaseSettings]):
        super().__init__(settings_cls)
        path = _config_path.get()
        self._data: Dict[str, Any] = read_json_config(path) if path else {}
        unknown = sorted(set(self._data) - set(settings_cls.model_fields))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")

    def get_field_value(self, field: FieldInfo, field_name: str) -> Tuple[Any, str, bool]:
        return self._data.get(field_name), field_name, False

    def __call__(self) -> Dict[str, Any]:
        return dict(self._data)


class Settings(BaseSettings):
    """Deployment settings with validation."""

    model_config = SettingsConfigDict(
        env_prefix="OWNERSHIP_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    env: str = "development"
    host: str = "127.0.0.1"
    ports: Ports = Field(default_factory=Ports)
    seed: int = Field(0, ge=0, lt=2**64)
    admin_seed: str = "admin"

    # Custodians and schema
    custodians: List[CustodianConfig] = Field(default_factory=_default_custodians)
    identifying_fields: List[str] = Field(default_factory=lambda: list(DEFAULT_IDENTIFYING_FIELDS))
    schema_tags: List[str] = Field(default_factory=lambda: list(DEFAULT_SCHEMA_TAGS))
    dedup_key: str = "insurance_number"

    # Tumbling and chaff
    chaff_ratio: float = 0.5
    k_default: int = Field(9, ge=0)
    chaff_generator: Literal["distributional", "constant"] = "distributional"
    shuffle_tumble_batches: bool = True
    chaff_tumble_every_ms: int = Field(0, ge=0)

    # Consent
    consent_delay_ms: int = Field(0, ge=0)

    # Logging and monitoring
    log_level: str = "INFO"
    log_format: Literal["json", "console"] = "json"
    enable_metrics: bool = True
    audit_log_path: Optional[str] = None

    @field_validator("chaff_ratio")
    @classmethod
    def validate_chaff_ratio(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("chaff_ratio must be in [0, 1)")
        return v

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {v}")
        return level

    @model_validator(mode="after")
    def validate_custodians(self) -> "Settings":
        if not self.custodians:
            raise ValueError("at least one custodian is required")
        names = [c.name for c in self.custodians]
        if len(set(names)) != len(names):
            raise ValueError("custodian names must be unique")
        if self.dedup_key not in self.identifying_fields:
            raise ValueError("dedup_key must be an identifying field")
        return self

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return (
            init_settings,
            env_settings,
            dotenv_settings,
            JsonFileSettingsSource(settings_cls),
        )

    @property
    def custodian_addresses(self) -> List[str]:
        return [c.address for c in self.custodians]

    def custodian(self, name: str) -> CustodianConfig:
        for custodian in self.custodians:
            if custodian.name == name:
                return custodian
        raise ConfigurationError(f"unknown custodian '{name}'")


def load_settings(config_path: Optional[str | Path] = None, **overrides: Any) -> Settings:
    """Build settings from an optional JSON file, the environment and overrides."""
    token = _config_path.set(Path(config_path) if config_path else None)
    try:
        return Settings(**{k: v for k, v in overrides.items() if v is not None})
    except ValidationError as exc:
        raise ConfigurationError(
            f"invalid configuration: {exc.errors()[0]['msg']}",
            errors=exc.errors(include_url=False, include_context=False, include_input=False),
        )
    finally:
        _config_path.reset(token)
