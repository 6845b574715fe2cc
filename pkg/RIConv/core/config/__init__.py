from .run_config import CONFIG_ENV_VAR, ConfigError, RunConfig

__all__ = ["CONFIG_ENV_VAR", "ConfigError", "RunConfig"]
