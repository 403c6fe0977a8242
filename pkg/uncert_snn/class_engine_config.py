import toml
import voluptuous as vol

from .custom_logging import setup_logging
from .errors import ConfigurationError
from .presets import (
    AV_COUNTING_CHOICES,
    DEFAULT_MODEL_CONFIG,
    DEFAULT_RIDGE_CONFIG,
    DEFAULT_SWEEP_CONFIG,
    DEFAULT_SYNTHETIC_SPEC,
    SCORE_MODE_CHOICES,
    STRATEGY_CHOICES,
)

# Set up logging
log = setup_logging()


def _strategy_name(value):
    name = str(value).replace("_", "-")
    if name not in STRATEGY_CHOICES:
        raise vol.Invalid(f"unknown strategy '{value}', choose from {STRATEGY_CHOICES}")
    return name


_positive_int = vol.All(int, vol.Range(min=1))
_probability = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))

SETTINGS_SCHEMA = vol.Schema(
    {
        # sweep grid
        vol.Optional("strategies"): vol.All([_strategy_name], vol.Length(min=1)),
        vol.Optional("keep_ratios"): vol.All(
            [vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False))], vol.Length(min=1)
        ),
        vol.Optional("seeds"): vol.All([int], vol.Length(min=1)),
        vol.Optional("lambda"): vol.All(vol.Coerce(float), vol.Range(min=0.0)),
        vol.Optional("insert_block"): vol.All(str, vol.Match(r"^\d+\.\d+$")),
        vol.Optional("score_mode"): vol.In(SCORE_MODE_CHOICES),
        vol.Optional("workers"): _positive_int,
        vol.Optional("batch_size"): _positive_int,
        # model
        vol.Optional("steps"): _positive_int,
        vol.Optional("tau"): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False, max_included=False)),
        vol.Optional("vth"): vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False)),
        vol.Optional("stage_channels"): vol.All([_positive_int], vol.Length(min=1)),
        vol.Optional("stage_blocks"): vol.All([_positive_int], vol.Length(min=1)),
        vol.Optional("stage_downsample"): vol.All([vol.In([1, 2])], vol.Length(min=1)),
        vol.Optional("patch"): _positive_int,
        vol.Optional("init_rate"): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False)),
        vol.Optional("residual_scale"): vol.All(vol.Coerce(float), vol.Range(min=0.0)),
        vol.Optional("model_seed"): int,
        vol.Optional("av_counting"): vol.In(AV_COUNTING_CHOICES),
        # synthetic task
        vol.Optional("grid"): _positive_int,
        vol.Optional("classes"): vol.All(int, vol.Range(min=2)),
        vol.Optional("signature_tokens"): _positive_int,
        vol.Optional("p_signal"): _probability,
        vol.Optional("p_background"): _probability,
        vol.Optional("channels"): _positive_int,
        vol.Optional("train_samples"): _positive_int,
        vol.Optional("test_samples"): _positive_int,
        # head
        vol.Optional("l2"): vol.All(vol.Coerce(float), vol.Range(min=0.0)),
    },
    extra=vol.PREVENT_EXTRA,
)

DEFAULT_SETTINGS = {
    **DEFAULT_MODEL_CONFIG,
    **DEFAULT_SYNTHETIC_SPEC,
    **DEFAULT_RIDGE_CONFIG,
    **DEFAULT_SWEEP_CONFIG,
}


def validate_settings(values: dict, source: str = "settings") -> dict:
    """
    Check a flat settings dictionary against SETTINGS_SCHEMA.

    Raises:
    ConfigurationError: naming the offending key.
    """
    try:
        return SETTINGS_SCHEMA(dict(values))
    except vol.MultipleInvalid as e:
        raise ConfigurationError(f"invalid {source}: {e}") from e


class EngineConfig:
    """
    A class to handle the TOML configuration of sweeps and runs.
    """

    def __init__(self, config_file_path: str = None):
        """
        Initialize the EngineConfig class; no path means an empty configuration.
        """
        self.config_file_path = config_file_path
        self.config = self.load_config(config_file_path=config_file_path) if config_file_path else {}

    def load_config(self, config_file_path: str) -> dict:
        """
        Loads the engine configuration from a TOML file.

        Returns:
        dict: The configuration data loaded from the TOML file.
        """
        try:
            config = toml.load(f"{config_file_path}")
            log.debug(f"Loaded configuration from {config_file_path}")
        except FileNotFoundError:
            config = {}
            log.debug(f"No configuration file found at {config_file_path}. Initializing empty configuration.")
        except toml.TomlDecodeError as e:
            raise ConfigurationError(f"{config_file_path} is not valid TOML: {e}") from e

        return config

    def save_config(self, config: dict, config_file_path: str):
        """
        Saves a configuration to a TOML file.

        Parameters:
        - config (dict): The configuration data to save.
        """
        with open(f"{config_file_path}", "w", encoding="utf-8", newline="\n") as f:
            toml.dump(config, f)

    def get(self, key: str, default=None):
        """
        Retrieves the value of a specified key from the configuration data.

        Parameters:
        - key (str): The key to retrieve, dotted for nested tables.
        - default: The default value to return if the key is not found.

        Returns:
        The value associated with the key, or the default value if the key is not found.
        """
        data = self.config
        for k in key.split("."):
            if not isinstance(data, dict) or k not in data:
                log.debug(f"Key '{key}' not found in configuration. Returning default value.")
                return default
            data = data.get(k)
        return data

    def is_config_loaded(self) -> bool:
        """
        Checks if the configuration was loaded from a file.

        Returns:
        bool: True if the configuration was loaded from a file, False otherwise.
        """
        is_loaded = self.config != {}
        log.debug(f"Configuration was loaded from file: {is_loaded}")
        return is_loaded

    def settings(self, overrides: dict = None) -> dict:
        """
        Presets, then this file, then overrides (command-line flags); None overrides are ignored.

        Returns:
        dict: The validated flat settings.
        """
        merged = dict(DEFAULT_SETTINGS)
        merged.update(validate_settings(self.config, source=self.config_file_path or "configuration"))
        flags = {k: v for k, v in (overrides or {}).items() if v is not None}
        merged.update(validate_settings(flags, source="command-line flags"))
        return validate_settings(merged)
