"""
日志系统模块 (Logger Setup)

Every lab module logs through logging.getLogger(__name__). The CLI calls
setup_logging once per run so the run directory gets its own log file.

处理器：
1. 运行日志 - <log_dir>/PeacockLab.log，10MB 轮转，5 个备份
2. 控制台 - stderr（stdout 不写日志）
"""
import logging
import logging.handlers
import sys
from pathlib import Path

from path_manager import PathManager

LOG_FORMAT = '[%(asctime)s] [%(levelname)s] [%(name)s] %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
MAX_BYTES = 10 * 1024 * 1024
BACKUP_COUNT = 5


class LoggerSetup:
    """日志配置管理器 (Logger Setup Manager)"""

    _handlers = []
    _log_file = None

    @staticmethod
    def get_logger(name):
        return logging.getLogger(name)

    @staticmethod
    def _formatter():
        return logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    @staticmethod
    def _file_handler(log_file: Path):
        handler = logging.handlers.RotatingFileHandler(
            log_file, maxBytes=MAX_BYTES, backupCount=BACKUP_COUNT, encoding='utf-8')
        handler.setFormatter(LoggerSetup._formatter())
        return handler

    @staticmethod
    def setup_logging(app_name="PeacockLab", log_dir=None, level=logging.INFO):
        """
        初始化日志系统 (Setup Logging)

        The console handler is attached once. The file handler follows the
        requested directory: a later call with another log_dir closes the
        old file and opens <log_dir>/<app_name>.log.

        Args:
            app_name (str): 日志文件名
            log_dir: Directory for the log file (default: logs/ under the data root)
            level (int): 根日志级别
        """
        root = logging.getLogger()
        root.setLevel(level)

        log_path = Path(log_dir) if log_dir is not None else PathManager.get_logs_dir()
        log_file = log_path / f"{app_name}.log"
        if LoggerSetup._handlers and LoggerSetup._log_file == log_file:
            return

        log_path.mkdir(parents=True, exist_ok=True)
        run_file = LoggerSetup._file_handler(log_file)
        if LoggerSetup._handlers:
            old = LoggerSetup._handlers[0]
            root.removeHandler(old)
            old.close()
            LoggerSetup._handlers[0] = run_file
        else:
            console = logging.StreamHandler(sys.stderr)
            console.setFormatter(LoggerSetup._formatter())
            LoggerSetup._handlers = [run_file, console]
            root.addHandler(console)
        root.addHandler(run_file)
        LoggerSetup._log_file = log_file
        logging.getLogger(__name__).info(f"日志已写入 {log_file}")

    @staticmethod
    def reset():
        """Detach and close the handlers installed by setup_logging"""
        root = logging.getLogger()
        while LoggerSetup._handlers:
            handler = LoggerSetup._handlers.pop()
            root.removeHandler(handler)
            handler.close()
        LoggerSetup._log_file = None
