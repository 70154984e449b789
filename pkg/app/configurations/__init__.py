import os

from app.exceptions.config_errors import MissingEnvironmentVariable

class Config:
    """Central configuration management"""

    @staticmethod
    def get_required(name: str) -> str:
        """Get a variable that has no default"""
        value = os.getenv(name)
        if not value:
            raise MissingEnvironmentVariable(name)
        return value

    @staticmethod
    def get_output_root():
        """Get the directory experiment outputs are written under"""
        return os.getenv('SEER_OUTPUT_ROOT') or 'runs'

    @staticmethod
    def get_log_dir():
        """Get the log directory"""
        return os.getenv('SEER_LOG_DIR') or 'logs'

    @staticmethod
    def get_device():
        """Get the torch device name"""
        return os.getenv('SEER_DEVICE') or 'cpu'

config = Config()
