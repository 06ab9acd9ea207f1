"""
Storage Manager Module
Handles every on-disk format of the lab: measures, families, surfaces,
local-vol surfaces, path ensembles, kernels and JSON reports.
"""
import json
import logging
import math
import threading
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from core.exceptions import ValidationError
from core.io_schema import (CallSurface, ClampRecord, GridMeasure, LocalVolSurface, MartingaleKernel,
                            PathEnsemble, PeacockFamily)
from path_manager import PathManager

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def sanitize(obj):
    """Recursively turn numpy values, dataclasses and non-finite floats into plain JSON"""
    if is_dataclass(obj) and not isinstance(obj, type):
        if hasattr(obj, "to_dict"):
            return sanitize(obj.to_dict())
        return sanitize(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if hasattr(obj, 'tolist'):  # Numpy array / scalar
        return sanitize(obj.tolist())
    if hasattr(obj, 'isoformat'):  # Datetime
        return obj.isoformat()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


class StorageManager:
    """
    存储管理器 (Storage Manager)

    负责所有文件读写，包括：
    1. 测度 CSV (x,w) 与测度族 JSON 清单
    2. 价格曲面 / 局部波动率 CSV（首行行权价，首列时间）+ JSON 附属文件
    3. 路径集合二进制（列主序 float64）+ JSON 头
    4. 转移核 JSON 头 + CSV 矩阵，JSON 报告
    """

    def __init__(self, root: Optional[str] = None):
        """
        Args:
            root: Output directory (default: runs/ under the data root)
        """
        self.root = Path(root) if root else PathManager.get_runs_dir()
        self.root.mkdir(parents=True, exist_ok=True)
        self.lock = threading.Lock()

    def _path(self, name: str) -> Path:
        path = Path(name)
        return path if path.is_absolute() else self.root / path

    # ------------------------------ JSON ------------------------------ #

    def write_json(self, name: str, data: Dict[str, Any], report: bool = True) -> Path:
        """Write sanitized JSON; reports carry schema_version"""
        path = self._path(name)
        payload = sanitize(data)
        if report and isinstance(payload, dict):
            payload = {"schema_version": SCHEMA_VERSION, **payload}
        with self.lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(payload, f, indent=2, ensure_ascii=False)
        logger.debug(f"Wrote {path}")
        return path

    @staticmethod
    def read_json(path) -> Dict[str, Any]:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path} is not valid JSON: {e}")

    # ------------------------------ Measures --------------------------- #

    def save_measure(self, m: GridMeasure, name: str) -> Path:
        path = self._path(name)
        with self.lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame({"x": m.grid, "w": m.weights}).to_csv(path, index=False, float_format="%.17g")
        return path

    @staticmethod
    def load_measure(path, label: str = "") -> GridMeasure:
        """Read an x,w CSV; weights within 1e-6 of unit mass are renormalized"""
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"measure file not found: {path}")
        df = pd.read_csv(path, float_precision="round_trip")
        if not {"x", "w"}.issubset(df.columns):
            raise ValidationError(f"{path} must have columns x,w")
        df = df.sort_values("x")
        weights = df["w"].to_numpy(dtype=np.float64)
        total = weights.sum()
        if abs(total - 1.0) > 1e-6:
            raise ValidationError(f"weights in {path} sum to {total}", witness=float(total))
        return GridMeasure(df["x"].to_numpy(dtype=np.float64), weights / total, label or path.stem)

    def save_family(self, fam: PeacockFamily, name: str) -> Path:
        """One CSV per member next to a JSON manifest {times, files, label}"""
        manifest = self._path(name)
        stem = manifest.stem
        files = []
        for i, m in enumerate(fam.measures):
            file = f"{stem}_{i:03d}.csv"
            self.save_measure(m, str(manifest.parent / file))
            files.append(file)
        self.write_json(str(manifest), {"times": fam.times, "files": files, "label": fam.label}, report=False)
        return manifest

    @staticmethod
    def load_family(path) -> PeacockFamily:
        path = Path(path)
        data = StorageManager.read_json(path)
        if "times" not in data or "files" not in data:
            raise ValidationError(f"{path} must list times and files")
        measures = tuple(StorageManager.load_measure(path.parent / f) for f in data["files"])
        return PeacockFamily(np.asarray(data["times"], dtype=np.float64), measures, data.get("label", path.stem))

    # ------------------------------ Surfaces --------------------------- #

    def save_grid(self, name, times, strikes, values) -> Path:
        """Time-by-strike table: first row strikes, first column times"""
        path = self._path(str(name))
        df = pd.DataFrame(values, index=pd.Index(times, name="t"), columns=[repr(float(k)) for k in strikes])
        with self.lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            df.to_csv(path, float_format="%.17g")
        return path

    @staticmethod
    def load_grid(path):
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"grid file not found: {path}")
        df = pd.read_csv(path, index_col=0, float_precision="round_trip")
        try:
            strikes = np.array([float(c) for c in df.columns])
        except ValueError as e:
            raise ValidationError(f"{path}: header must hold numeric strikes ({e})")
        return df.index.to_numpy(dtype=np.float64), strikes, df.to_numpy(dtype=np.float64)

    def save_surface(self, s: CallSurface, name: str) -> Path:
        path = self._path(name)
        self.save_grid(path, s.times, s.strikes, s.prices)
        self.write_json(str(path.with_suffix(".json")),
                        {"convention": s.convention, "forward": s.forward, "meta": s.meta}, report=False)
        return path

    @staticmethod
    def load_surface(path, convention: Optional[str] = None) -> CallSurface:
        """CSV grid plus optional JSON sidecar; `convention` overrides the sidecar"""
        path = Path(path)
        times, strikes, prices = StorageManager.load_grid(path)
        sidecar = path.with_suffix(".json")
        meta = StorageManager.read_json(sidecar) if sidecar.exists() else {}
        return CallSurface(times, strikes, prices, convention or meta.get("convention", "additive"),
                           meta.get("forward"), meta.get("meta", {}))

    def save_local_vol(self, lv: LocalVolSurface, name: str) -> Path:
        path = self._path(name)
        self.save_grid(path, lv.times, lv.strikes, lv.sigma)
        self.write_json(str(path.with_suffix(".json")),
                        {"convention": lv.convention, "sigma_min": lv.sigma_min, "sigma_max": lv.sigma_max},
                        report=False)
        self.write_json(str(path.with_name(path.stem + "_clamps.json")),
                        [[c.i, c.j, c.reason] for c in lv.clamp_report], report=False)
        return path

    @staticmethod
    def load_local_vol(path) -> LocalVolSurface:
        path = Path(path)
        times, strikes, sigma = StorageManager.load_grid(path)
        meta = StorageManager.read_json(path.with_suffix(".json"))
        clamps_file = path.with_name(path.stem + "_clamps.json")
        clamps = StorageManager.read_json(clamps_file) if clamps_file.exists() else []
        sigma_max = meta.get("sigma_max")
        return LocalVolSurface(times, strikes, sigma, meta.get("convention", "additive"),
                               tuple(ClampRecord(int(i), int(j), r) for i, j, r in clamps),
                               float(meta.get("sigma_min", 0.0)),
                               float("inf") if sigma_max is None else float(sigma_max))

    # ------------------------------ Ensembles -------------------------- #

    def save_ensemble(self, ens: PathEnsemble, name: str) -> Path:
        """Column-major float64 matrix (one column per time) plus JSON header"""
        header = self._path(name).with_suffix(".json")
        binary = header.with_suffix(".bin")
        with self.lock:
            header.parent.mkdir(parents=True, exist_ok=True)
            np.ascontiguousarray(ens.paths.T, dtype="<f8").tofile(binary)
        self.write_json(str(header), {"times": ens.times, "seed": ens.seed, "generator_id": ens.generator_id,
                                      "n_paths": ens.n_paths, "dtype": "<f8", "order": "column-major",
                                      "data": binary.name, "meta": ens.meta}, report=False)
        return header

    @staticmethod
    def load_ensemble(path) -> PathEnsemble:
        header_path = Path(path).with_suffix(".json")
        header = StorageManager.read_json(header_path)
        times = np.asarray(header["times"], dtype=np.float64)
        raw = np.fromfile(header_path.parent / header["data"], dtype=header.get("dtype", "<f8"))
        if raw.size != times.size * header["n_paths"]:
            raise ValidationError(f"{header['data']} holds {raw.size} values, expected "
                                  f"{times.size * header['n_paths']}")
        paths = raw.reshape(times.size, header["n_paths"]).T
        return PathEnsemble(times, paths, int(header["seed"]), header["generator_id"], header.get("meta", {}))

    # ------------------------------ Kernels ---------------------------- #

    def save_kernel(self, k: MartingaleKernel, name: str) -> Path:
        """JSON header with both grids, CSV matrix with one row per source point"""
        header = self._path(name).with_suffix(".json")
        matrix = header.with_suffix(".csv")
        with self.lock:
            header.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(k.rows).to_csv(matrix, index=False, header=False, float_format="%.17g")
        self.write_json(str(header), {"source_grid": k.source_grid, "target_grid": k.target_grid,
                                      "source_weights": k.source_weights, "counts": k.counts,
                                      "sparse_rows": list(k.sparse_rows), "rows": matrix.name}, report=False)
        return header

    @staticmethod
    def load_kernel(path) -> MartingaleKernel:
        header_path = Path(path).with_suffix(".json")
        header = StorageManager.read_json(header_path)
        rows = pd.read_csv(header_path.parent / header["rows"], header=None,
                           float_precision="round_trip").to_numpy(dtype=np.float64)
        return MartingaleKernel(np.asarray(header["source_grid"]), np.asarray(header["target_grid"]), rows,
                                header.get("source_weights"), header.get("counts"),
                                tuple(header.get("sparse_rows", ())))
