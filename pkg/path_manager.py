import os
from pathlib import Path


class PathManager:
    """
    Centralized path management.
    The writable data root is PEACOCK_LAB_HOME when set, else the working directory.
    """

    APP_NAME = "PeacockLab"
    HOME_ENV = "PEACOCK_LAB_HOME"

    @staticmethod
    def get_data_dir():
        """Writable root for config, logs and default outputs"""
        home = os.environ.get(PathManager.HOME_ENV)
        path = Path(home) if home else Path.cwd()
        path.mkdir(parents=True, exist_ok=True)
        return path

    @staticmethod
    def get_config_path():
        return PathManager.get_data_dir() / "configs" / "peacock_lab.json"

    @staticmethod
    def get_logs_dir():
        return PathManager.get_data_dir() / "logs"

    @staticmethod
    def get_runs_dir():
        return PathManager.get_data_dir() / "runs"
