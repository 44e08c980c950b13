import os
from dataclasses import dataclass, field, fields
from typing import Any, Optional

from dotenv import dotenv_values, load_dotenv

from constants import ErrorMsg
from crl.encoders import TrainConfig
from crl.errors import ValidationError
from crl.flow_expert import FlowConfig
from crl.masking import BenchConfig
from crl.testbed import CorpusConfig
from crl.verify import VerifyConfig

load_dotenv()

# Where timestamped run directories are created
OUTPUT_DIR = os.getenv("CRL_OUTPUT_DIR", "runs")

# Default seed when neither --seed nor a config file sets one
DEFAULT_SEED = int(os.getenv("CRL_SEED", "0"))

# Logging level for the CLI
LOG_LEVEL = os.getenv("CRL_LOG_LEVEL", "INFO").upper()

# Run-config file used when --config is not given
DEFAULT_CONFIG_FILE = os.getenv("CRL_CONFIG", "")

# Every run-config section; a key present in several sections sets all of them
SECTIONS = {
    "corpus": CorpusConfig,
    "train": TrainConfig,
    "flow": FlowConfig,
    "verify": VerifyConfig,
    "bench": BenchConfig,
}

TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    """Effective settings for one CLI invocation."""
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def sections(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in SECTIONS}

    def set(self, key: str, raw: str) -> None:
        """Coerce raw by the field's default type and apply it to every section that has key."""
        matched = False
        for section in self.sections().values():
            for f in fields(section):
                if f.name == key:
                    setattr(section, key, coerce(raw, getattr(section, key), key))
                    matched = True
        if not matched:
            raise ValidationError(f"{ErrorMsg.UNKNOWN_KEY}: {key}")

    def flat(self) -> dict[str, str]:
        """key -> string value, first section wins for shared keys."""
        values: dict[str, str] = {}
        for section in self.sections().values():
            for f in fields(section):
                values.setdefault(f.name, render(getattr(section, f.name)))
        return values


def known_keys() -> set[str]:
    return {f.name for cls in SECTIONS.values() for f in fields(cls)}


def coerce(raw: str, default: Any, key: str) -> Any:
    """Parse raw into the type of default."""
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in TRUE_WORDS:
                return True
            if lowered in FALSE_WORDS:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ValidationError(f"{ErrorMsg.BAD_VALUE} for {key}: '{raw}'") from None
    return text


def render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ValidationError(f"{ErrorMsg.BAD_OVERRIDE}: '{text}'")
    return key.strip(), value


def load_run_config(path: Optional[str] = None, overrides: Optional[list[str]] = None,
                    seed: Optional[int] = None) -> RunConfig:
    """Defaults, then the config file, then --set overrides, then --seed."""
    config = RunConfig()
    config.set("seed", str(DEFAULT_SEED))
    path = path or DEFAULT_CONFIG_FILE
    if path:
        if not os.path.exists(path):
            raise ValidationError(f"config file not found: {path}")
        for key, value in dotenv_values(path).items():
            config.set(key, value or "")
    for item in overrides or []:
        config.set(*parse_override(item))
    if seed is not None:
        for key in ("seed", "flow_seed", "verify_seed", "bench_seed"):
            config.set(key, str(seed))
    return config


def write_config_echo(config: RunConfig, path: str) -> None:
    """Dotenv-format copy of the effective configuration."""
    with open(path, "w") as handle:
        for key, value in sorted(config.flat().items()):
            handle.write(f"{key}={value}\n")
