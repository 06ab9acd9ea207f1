"""
配置管理模块 (Configuration Manager)

负责实验参数的持久化存储和加载。
所有容差、网格、种子、路径数都通过此模块从 JSON 文件读取。

主要功能：
1. 加载配置 - 从 peacock_lab.json 或 --config 指定的文件读取
2. 保存配置 - 将当前设置写入文件
3. 配置指纹 - config_hash 写入每次运行的 manifest
"""
import hashlib
import json
import logging
from pathlib import Path

from core.exceptions import ValidationError
from path_manager import PathManager

logger = logging.getLogger(__name__)


class ConfigManager:
    """
    配置管理器 (Configuration Manager)

    Flat key space shared by every module; the typed configs
    (DupireConfig, FpSolveConfig, CouplingConfig) pick their own keys.
    """

    DEFAULT_CONFIG = {
        "seed": 0,                       # 随机种子
        "n_paths": 100000,               # 蒙特卡洛路径数
        "steps_per_interval": 4,         # 每个时间区间的欧拉步数
        "threads": None,                 # 线程上限（None = PEACOCK_LAB_THREADS 或 4）
        # Dupire
        "cxx_floor": None,               # C_xx 下限（None = 自动）
        "sigma_min": 0.0,
        "sigma_max": None,               # None = 10 倍全局波动率尺度
        "ct_tol": 1e-10,                 # 相邻时间行价格允许的下降量
        "time_stencil": "central",       # central | forward
        # Forward PDE
        "scheme": "crank_nicolson",      # crank_nicolson | explicit | implicit
        "substeps": None,
        "boundary": "zero_flux",
        "pad_std": 6.0,
        "cfl_limit": 0.5,
        "negative_tol": 1e-12,
        "price_floor": 1e-2,             # 相对价格下限（往返误差比较）
        "interior_margin": 2,
        "roundtrip_threshold": 0.01,
        # Martingale transport
        "objective": "feasible_only",
        "mean_tol_rel": 1e-8,
        "lp_method": "highs-ds",
        "lp_tolerance": 1e-10,
        "max_grid": 512,
        "lipschitz_tol": 1e-9,
        # Statistics
        "alpha": 0.05,
        "kernel_bins": 20,
        "min_count": 50,
    }

    @staticmethod
    def get_config_file():
        return PathManager.get_config_path()

    @staticmethod
    def load(path=None):
        """
        加载配置 (Load Configuration)

        Merges the JSON file over DEFAULT_CONFIG (unknown keys are kept,
        missing keys filled). Without `path` the default file is optional
        and a broken one falls back to defaults; an explicit path must exist
        and parse.

        Returns:
            dict: 完整的配置字典
        """
        merged = ConfigManager.DEFAULT_CONFIG.copy()
        if path is not None:
            config_file = Path(path)
            if not config_file.exists():
                raise ValidationError(f"config file not found: {config_file}")
            try:
                with open(config_file, 'r', encoding='utf-8') as f:
                    merged.update(json.load(f))
            except json.JSONDecodeError as e:
                raise ValidationError(f"config file is not valid JSON: {e}")
            return merged
        try:
            config_file = ConfigManager.get_config_file()
            if config_file.exists():
                with open(config_file, 'r', encoding='utf-8') as f:
                    merged.update(json.load(f))
        except Exception as e:
            logger.error(f"配置加载失败: {e}")
            return ConfigManager.DEFAULT_CONFIG.copy()
        return merged

    @staticmethod
    def save(config, path=None):
        """
        保存配置 (Save Configuration)

        Args:
            config (dict): 要保存的配置字典
            path: Target file, default peacock_lab.json under the data root

        Returns:
            bool: 保存成功返回 True，失败返回 False
        """
        try:
            config_file = Path(path) if path is not None else ConfigManager.get_config_file()
            config_file.parent.mkdir(parents=True, exist_ok=True)
            with open(config_file, 'w', encoding='utf-8') as f:
                json.dump(config, f, indent=4, ensure_ascii=False)
            logger.info(f"配置已保存: {config_file}")
            return True
        except Exception as e:
            logger.error(f"配置保存失败: {e}")
            return False

    @staticmethod
    def config_hash(config):
        """sha256 of the canonical (sorted-key) JSON encoding"""
        canonical = json.dumps(config, sort_keys=True, default=str, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
