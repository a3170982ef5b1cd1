"""运行配置（LafsConfig）

本模块的职责：
- 一个扁平的 LafsConfig dataclass，覆盖数据、自举、预训练、微调、评估的全部可调项
- 读取配置文件：扁平 key=value 文本（值按 YAML 标量解析），或 .yaml / .yml
- 优先级：默认值 < .env / 环境变量（LAFS_SEED）< 配置文件 < 命令行参数
- config_hash：对全部配置项排序后做 sha256，写入 checkpoint 元数据
- 把扁平配置转换成各引擎模块的配置对象

配置文件示例（key=value）：
    # 注释
    seed = 3
    method = lafs
    alpha = 2
    subset = 36
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml
from dotenv import load_dotenv

from lafs_local.bootstrap import BootstrapConfig
from lafs_local.finetune import FinetuneConfig, epochs_for_fraction
from lafs_local.localizer import LocalizerConfig
from lafs_local.part_fvit import ViTConfig
from lafs_local.pretrain import HeadConfig, PretrainConfig
from lafs_local.tensor import ConfigError

logger = logging.getLogger(__name__)

__all__ = ["ConfigError", "LafsConfig", "load_config", "resolve_config", "config_hash", "parse_key_values"]


@dataclass
class LafsConfig:
    """扁平运行配置；字段名即配置文件中的 key"""

    # ---------- 通用 ----------
    seed: int = 0
    data_dir: str = "data/synth"
    out_dir: str = "runs/default"
    metrics_file: str = "metrics.csv"
    channels: int = 1
    canvas: int = 112

    # ---------- 合成数据 ----------
    n_identities: int = 400
    images_per_identity: int = 5
    train_identities: int = 200

    # ---------- 模型 ----------
    n_landmarks: int = 196
    patch_size: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    head_out_dim: int = 1024

    # ---------- 自举 ----------
    bootstrap_epochs: int = 20
    bootstrap_lr: float = 1e-3

    # ---------- 预训练 ----------
    method: str = "lafs"
    teacher_views: str = "landmark"
    alpha: Optional[float] = None  # None：part 骨干 2 像素，grid 骨干 0
    subset: int = 36
    shuffle: Optional[bool] = None  # None：part 骨干打开，grid 骨干关闭
    augment_teacher: bool = True
    n_local: int = 8
    local_size: int = 48
    pretrain_steps: int = 200
    pretrain_batch: int = 8
    pretrain_lr: float = 5e-4
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    ema_momentum: float = 0.996

    # ---------- 微调 ----------
    mode: str = "c"
    objective: str = "cosface"
    beta: float = 0.1
    reference: str = ""
    shots: str = "all"
    fraction: float = 1.0
    finetune_epochs: int = 34
    finetune_lr: float = 1e-4
    finetune_batch: int = 32
    layer_decay: float = 0.58
    scale: float = 16.0
    margin: float = 0.2

    # ---------- 评估 ----------
    pairs: str = ""
    n_pairs: int = 3000
    folds: int = 10
    far: str = "1e-4,1e-3,1e-2,1e-1"

    # ---------- 视图与模块配置 ----------

    def localizer_config(self) -> LocalizerConfig:
        return LocalizerConfig(n_landmarks=self.n_landmarks, in_channels=self.channels)

    def vit_config(self) -> ViTConfig:
        tokens = max(self.n_landmarks, (self.canvas // self.patch_size) ** 2)
        return ViTConfig(
            patch_size=self.patch_size,
            in_channels=self.channels,
            dim=self.dim,
            depth=self.depth,
            heads=self.heads,
            max_tokens=tokens,
        )

    def head_config(self) -> HeadConfig:
        return HeadConfig(in_dim=self.dim, out_dim=self.head_out_dim)

    def bootstrap_config(self) -> BootstrapConfig:
        return BootstrapConfig(
            epochs=self.bootstrap_epochs,
            lr=self.bootstrap_lr,
            batch_size=self.finetune_batch,
            scale=self.scale,
            margin=self.margin,
            seed=self.seed,
        )

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            method=self.method,
            teacher_view_mode=self.teacher_views,
            subset=self.subset,
            alpha=self.alpha,
            shuffle=self.shuffle,
            augment_teacher=self.augment_teacher,
            n_local=self.n_local,
            global_size=self.canvas,
            local_size=self.local_size,
            teacher_temp=self.teacher_temp,
            student_temp=self.student_temp,
            ema_momentum=self.ema_momentum,
            lr=self.pretrain_lr,
            steps=self.pretrain_steps,
            batch_size=self.pretrain_batch,
            seed=self.seed,
        )

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(
            mode=self.mode,
            objective=self.objective,
            beta=self.beta,
            lr=self.finetune_lr,
            layer_decay=self.layer_decay,
            epochs=epochs_for_fraction(self.fraction, self.finetune_epochs),
            batch_size=self.finetune_batch,
            scale=self.scale,
            margin=self.margin,
            seed=self.seed,
        )

    def shots_value(self):
        """"all" → None，其余转为正整数"""
        if str(self.shots).lower() == "all":
            return None
        try:
            shots = int(self.shots)
        except ValueError as exc:
            raise ConfigError(f"shots 必须是正整数或 all，当前 {self.shots!r}") from exc
        if shots < 1:
            raise ConfigError(f"shots 必须 >= 1，当前 {shots}")
        return shots

    def far_values(self) -> Tuple[float, ...]:
        try:
            values = tuple(float(v) for v in str(self.far).split(",") if v.strip())
        except ValueError as exc:
            raise ConfigError(f"far 列表格式错误: {self.far!r}") from exc
        if not values or any(not 0.0 < v <= 1.0 for v in values):
            raise ConfigError(f"far 取值必须在 (0,1]，当前 {self.far!r}")
        return values

    def validate(self) -> "LafsConfig":
        """构造一遍各模块配置，把非法组合尽早暴露为 ConfigError"""
        self.localizer_config()
        self.vit_config()
        self.pretrain_config()
        self.finetune_config()
        self.shots_value()
        self.far_values()
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction 必须在 (0,1]，当前 {self.fraction}")
        return self


# ============================================================
# 解析
# ============================================================

_FIELD_TYPES = {f.name: f.type for f in fields(LafsConfig)}


def _coerce(key: str, value: Any) -> Any:
    if key not in _FIELD_TYPES:
        raise ConfigError(f"未知配置项: {key}")
    kind = _FIELD_TYPES[key]
    if kind.startswith("Optional["):
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
            return None
        kind = kind[len("Optional["):-1]
    try:
        if kind == "bool":
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("true", "1", "yes")
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return "" if value is None else str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"配置项 {key} 的取值 {value!r} 无法转换为 {kind}") from exc


def parse_key_values(text: str, source: str = "<text>") -> Dict[str, Any]:
    """解析扁平 key=value 文本；# 开头为注释，空行忽略，不支持嵌套"""
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno} 缺少 '='：{raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno} key 为空")
        try:
            parsed = yaml.safe_load(value) if value else ""
        except yaml.YAMLError:
            parsed = value
        if isinstance(parsed, (dict, list)):
            parsed = value
        out[key] = _coerce(key, parsed)
    return out


def load_config(path) -> Dict[str, Any]:
    """读取配置文件，返回已做类型转换的 {key: value}"""
    path = Path(path)
    if not path.exists():
        logger.error(f"[config] 配置文件不存在: {path}")
        raise ConfigError(f"配置文件不存在: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path} 顶层必须是映射")
        return {k: _coerce(k, v) for k, v in data.items()}
    return parse_key_values(text, str(path))


def env_overrides(env_file: Optional[Path] = None) -> Dict[str, Any]:
    """.env 与环境变量：目前只读取 LAFS_SEED"""
    env_path = env_file or Path(__file__).parent / ".env"
    if env_path.exists():
        load_dotenv(env_path)
    seed = os.getenv("LAFS_SEED")
    return {"seed": _coerce("seed", seed)} if seed not in (None, "") else {}


def resolve_config(
    path: Optional[str] = None,
    flags: Optional[Mapping[str, Any]] = None,
    env_file: Optional[Path] = None,
) -> LafsConfig:
    """默认值 < 环境变量 < 配置文件 < 命令行参数（值为 None 的参数视为未指定）"""
    merged: Dict[str, Any] = {}
    merged.update(env_overrides(env_file))
    if path:
        merged.update(load_config(path))
    for key, value in (flags or {}).items():
        if value is not None:
            merged[key] = _coerce(key, value)
    cfg = replace(LafsConfig(), **merged)
    return cfg.validate()


def config_hash(cfg: LafsConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def changed_keys(cfg: LafsConfig) -> List[str]:
    base = asdict(LafsConfig())
    return sorted(k for k, v in asdict(cfg).items() if base[k] != v)
