from typing import Optional

from app.constants import EXIT_CONFIG_ERROR

class ConfigError(Exception):
    """Base exception for configuration errors"""
    def __init__(self, message: str, exit_code: int = EXIT_CONFIG_ERROR):
        self.message = message
        self.exit_code = exit_code
        super().__init__(self.message)

class MissingEnvironmentVariable(ConfigError):
    """Exception raised for a missing environment variable"""
    def __init__(self, variable_name, message: Optional[str] = None):
        self.variable_name = variable_name
        self.message = message or f"Required environment variable '{variable_name}' is missing"
        super().__init__(self.message)

class InvalidConfigField(ConfigError):
    """Exception raised for a missing or malformed experiment config field"""
    def __init__(self, field: str, message: Optional[str] = None):
        self.field = field
        self.message = message or f"Invalid value for config field '{field}'"
        super().__init__(self.message)

class OutputExistsError(ConfigError):
    """Exception raised when an output would be overwritten without permission"""
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"Output '{path}' already exists; pass --overwrite to replace it")
