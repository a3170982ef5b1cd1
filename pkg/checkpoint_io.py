"""Checkpoint 读写

二进制格式（全部小端）：
    "LAFS" | u32 版本 | u32 条目数
    每个条目: u16 名称字节数 | UTF-8 名称 | u8 ndim | ndim × u32 维度 | float32 数据

元数据（模块版本、配置哈希、步数等）写在同名 .json 旁路文件中。

错误码：
- bad_magic：文件头不是 "LAFS"
- bad_version：版本号不受支持
- truncated：条目中途遇到文件结束
- corrupt：条目数与文件头不符、名称重复、名称不是合法 UTF-8
"""
from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from lafs_local.nn import ParamSet

logger = logging.getLogger(__name__)

MAGIC = b"LAFS"
VERSION = 1
FORMAT_VERSION = "lafs-ckpt-1"


class CheckpointError(ValueError):
    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"[{code}] {message}")
        self.code = code


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError("corrupt", f"参数名过长: {name[:40]}...")
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        if arr.ndim > 0xFF:
            raise CheckpointError("corrupt", f"{name} 维数过多: {arr.ndim}")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    @property
    def at_end(self) -> bool:
        return self.pos >= len(self.buf)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated", f"读取 {what} 时文件提前结束（偏移 {self.pos}，需要 {n} 字节）")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk


def decode_checkpoint(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < 4:
        raise CheckpointError("truncated", "文件长度不足 4 字节")
    if buf[:4] != MAGIC:
        raise CheckpointError("bad_magic", f"文件头 {buf[:4]!r} 不是 {MAGIC!r}")
    r = _Reader(buf)
    r.take(4, "magic")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise CheckpointError("bad_version", f"版本 {version} 不受支持（期望 {VERSION}）")
    (count,) = struct.unpack("<I", r.take(4, "entry count"))

    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for i in range(count):
        if r.at_end:
            raise CheckpointError("corrupt", f"文件头声明 {count} 个条目，实际只有 {i} 个")
        (n_name,) = struct.unpack("<H", r.take(2, "name length"))
        try:
            name = r.take(n_name, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt", f"第 {i} 个条目名称不是合法 UTF-8") from exc
        if name in params:
            raise CheckpointError("corrupt", f"参数名重复: {name}")
        (ndim,) = struct.unpack("<B", r.take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "dims"))
        n_values = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = r.take(4 * n_values, f"{name} 数据")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if not r.at_end:
        raise CheckpointError("corrupt", f"文件头声明 {count} 个条目，之后仍有 {len(buf) - r.pos} 字节")
    return params


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(params: Mapping[str, np.ndarray], meta: Optional[Dict], path) -> Path:
    """写出二进制参数文件 + JSON 元数据旁路文件"""
    path = Path(path)
    data = encode_checkpoint(params)
    meta = dict(meta or {})
    meta.setdefault("format", FORMAT_VERSION)
    meta["n_params"] = int(sum(np.asarray(v).size for v in params.values()))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        _meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2, ensure_ascii=False), encoding="utf-8")
    except OSError as exc:
        logger.error(f"[checkpoint] 写入失败 {path}: {exc}")
        raise OSError(f"写入 checkpoint 失败 {path}: {exc}") from exc
    logger.info(f"[checkpoint] 已保存 {len(params)} 个条目 → {path}")
    return path


def load_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", Dict]:
    """返回 (参数, 元数据)；元数据文件缺失时返回空字典"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint 不存在: {path}")
    params = decode_checkpoint(path.read_bytes())
    meta_file = _meta_path(path)
    meta = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.exists() else {}
    return params, meta


# ============================================================
# ParamSet 辅助
# ============================================================

def collect_state(*sets: Optional[ParamSet]) -> "OrderedDict[str, np.ndarray]":
    """合并多个 ParamSet 的带前缀参数；重名时报错"""
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for ps in sets:
        if ps is None:
            continue
        for name, value in ps.state_dict().items():
            if name in state:
                raise CheckpointError("corrupt", f"参数名重复: {name}")
            state[name] = value
    return state


def has_prefix(params: Mapping[str, np.ndarray], prefix: str) -> bool:
    return any(k.startswith(prefix) for k in params)


def restore(ps: ParamSet, params: Mapping[str, np.ndarray]) -> ParamSet:
    """严格回填：缺少条目时报 corrupt"""
    try:
        ps.load_state_dict(dict(params), strict=True)
    except KeyError as exc:
        raise CheckpointError("corrupt", str(exc)) from exc
    return ps
