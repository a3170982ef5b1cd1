"""张量与自动微分引擎（tensor）

本模块的职责：
- 提供稠密张量 Tensor（默认 float32 存储，归约运算用 float64 累加）
- 提供 Tape：前向时按执行顺序记录算子（define-by-run，每一步重新构建）
- 提供 Function 基类与全部可微算子（matmul / conv2d / softmax_t / layer_norm / GELU ...）
- 提供 backward：从标量根节点逆序回放 Tape，把梯度累加到叶子张量
- 提供 AdamW（解耦权重衰减 + 偏差校正）、学习率/动量调度、gradcheck

本模块不会做的事情：
- 不做 GPU / 混合精度 / 图优化
- 不做序列化（checkpoint 交给 checkpoint_io.py）

约定：
- 只有在某个 Tape 处于激活状态、且至少一个输入 requires_grad=True 时，算子才会被记录
- 冻结参数（requires_grad=False）永远不会出现在任何 Tape 中
- Tape 栈是线程局部的：一个 Tape 及其张量只属于一个工作线程
"""
from __future__ import annotations

import contextlib
import itertools
import logging
import math
import os
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


# ============================================================
# 异常类型
# ============================================================

class DimensionError(ValueError):
    """形状不匹配"""


class ParameterError(ValueError):
    """参数取值非法（如温度 <= 0）"""


class ContractError(RuntimeError):
    """调用约定被破坏（如对非标量调用 backward）"""


class NumericalError(RuntimeError):
    """出现 NaN / Inf（梯度或损失）"""


class ConfigError(ValueError):
    """配置不合法（如关键点数 < 2、图像尺寸不能被网格整除）"""


# ============================================================
# 全局状态（线程局部）
# ============================================================

_state = threading.local()
_uid_counter = itertools.count()

# 设置 LAFS_DEBUG=1 时，每个前向算子都会检查输出是否有限
CHECK_FINITE = os.getenv("LAFS_DEBUG", "0") == "1"


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


def _tape_stack() -> List[Optional["Tape"]]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def current_tape() -> Optional["Tape"]:
    """返回当前激活的 Tape（no_grad 区域内返回 None）"""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """临时切换新建张量的存储精度（gradcheck 用 float64 消除截断噪声）"""
    previous = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """在此区域内不记录任何算子（教师分支、EMA、评估都走这里）"""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


# ============================================================
# Tensor
# ============================================================

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class Tensor:
    """稠密张量

    字段：
    - data:          numpy 数组（行优先），形状即 shape
    - requires_grad: 是否参与梯度计算
    - grad:          与 data 同形状的梯度缓冲（backward 之后才有）
    - name:          可选名称（参数张量用于 checkpoint / EMA 对齐）
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        self.data = np.asarray(data, dtype=_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.uid = next(_uid_counter)

    # ---------- 基本属性 ----------

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() 只能用于单元素张量，当前形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """返回共享数值、但不参与任何 Tape 的张量"""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __deepcopy__(self, memo: Dict[int, Any]) -> "Tensor":
        # 复制出的张量必须拿到新的 uid，否则 backward 会把两者的梯度混在一起
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)
        t.grad = None if self.grad is None else self.grad.copy()
        memo[id(self)] = t
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" name={self.name}" if self.name else ""
        return f"<Tensor shape={self.shape}{label}{flag}>"

    # ---------- 运算符重载 ----------

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other: Any) -> "Tensor":
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other: Any) -> "Tensor":
        return Div.apply(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # ---------- 常用方法 ----------

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=tuple(axes) if axes else None)

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def as_tensor(value: Any) -> Tensor:
    """把常量包装成不需要梯度的 Tensor"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    """创建一个需要梯度的叶子参数"""
    return Tensor(data, requires_grad=True, name=name)


# ============================================================
# Tape
# ============================================================

@dataclass
class TapeEntry:
    """Tape 中的一条记录：算子名 + 输入 + 输出 + 保存了激活值的 Function 实例"""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    fn: "Function"


class Tape:
    """前向操作记录器

    用法：
        with Tape() as tape:
            loss = model(x)
        backward(loss, tape)

    不变量：
    - entries 按执行顺序追加，因此每个输入都先于其消费者出现（拓扑序）
    - backward 逆序访问每条记录恰好一次
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def ops(self) -> List[str]:
        return [e.op for e in self.entries]


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播产生的梯度按维度求和，恢复成输入形状"""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad.reshape(shape)


def backward(root: Tensor, tape: Optional[Tape] = None) -> None:
    """从标量 root 逆序回放 tape，把梯度累加到叶子张量的 .grad

    参数：
    - root: 标量张量（单元素）
    - tape: 记录了 root 计算过程的 Tape；默认取当前激活的 Tape

    保证：
    - 每个 requires_grad 的叶子得到累加梯度（多次 backward 会累加）
    - 未参与计算的张量 .grad 保持不变
    """
    if root.size != 1:
        raise ContractError(f"backward 的根节点必须是标量，当前形状 {root.shape}")
    if tape is None:
        tape = current_tape()
    if tape is None:
        raise ContractError("backward 需要一个 Tape，但当前没有激活的 Tape")

    produced = {entry.output.uid for entry in tape.entries}
    grads: Dict[int, np.ndarray] = {root.uid: np.ones(root.shape, dtype=np.float64)}
    leaves: Dict[int, Tensor] = {}
    if root.uid not in produced and root.requires_grad:
        leaves[root.uid] = root

    for entry in reversed(tape.entries):
        out_grad = grads.pop(entry.output.uid, None)
        if out_grad is None:
            continue
        in_grads = entry.fn.backward(out_grad)
        for inp, g in zip(entry.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            g = unbroadcast(np.asarray(g, dtype=np.float64), inp.shape)
            if inp.uid in grads:
                grads[inp.uid] = grads[inp.uid] + g
            else:
                grads[inp.uid] = g
            if inp.uid not in produced:
                leaves[inp.uid] = inp

    for uid, leaf in leaves.items():
        g = grads.get(uid)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = g.astype(leaf.data.dtype)
        else:
            leaf.grad = (leaf.grad.astype(np.float64) + g).astype(leaf.data.dtype)


# ============================================================
# Function 基类
# ============================================================

class Function:
    """可微算子基类

    子类实现：
    - forward(*arrays, **kwargs) -> np.ndarray，可以把反向需要的激活值存到 self
    - backward(grad) -> 每个输入对应一个梯度数组（不需要时返回 None）
    """

    op_name = "function"

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        tape = current_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            tape.record(TapeEntry(cls.op_name, tuple(tensors), out, fn))
        if CHECK_FINITE and not np.all(np.isfinite(out.data)):
            if all(np.all(np.isfinite(t.data)) for t in tensors):
                raise NumericalError(f"{cls.op_name} 在有限输入上产生了 NaN/Inf")
        return out


# ============================================================
# 逐元素与形状算子
# ============================================================

class Add(Function):
    op_name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    op_name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    op_name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    op_name = "div"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        b = self.b.astype(np.float64)
        return grad / b, -grad * self.a / (b * b)


class Neg(Function):
    op_name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    op_name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    op_name = "log"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sqrt(Function):
    op_name = "sqrt"

    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Tanh(Function):
    op_name = "tanh"

    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out.astype(np.float64) ** 2),)


class ReLU(Function):
    op_name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU(Function):
    """GELU（tanh 近似）：0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))"""

    op_name = "gelu"

    def forward(self, a):
        x = a.astype(np.float64)
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class Sum(Function):
    op_name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape),)


class Mean(Function):
    op_name = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.mean(a, axis=axis, keepdims=keepdims, dtype=np.float64)
        self.count = a.size // max(np.asarray(out).size, 1)
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape),)


class Reshape(Function):
    op_name = "reshape"

    def forward(self, a, shape=()):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    op_name = "transpose"

    def forward(self, a, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    op_name = "getitem"

    def forward(self, a, index=None):
        self.shape, self.index = a.shape, index
        return a[index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=np.float64)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    op_name = "concat"

    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


# ============================================================
# 线性代数 / 卷积
# ============================================================

class MatMul(Function):
    op_name = "matmul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """矩阵乘法（支持前导批维广播）

    抛出：
    - DimensionError: 内维不一致，报错信息包含两个形状
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul 形状不匹配: {a.shape} × {b.shape}")
    return MatMul.apply(a, b)


class Conv2d(Function):
    """二维互相关（valid padding），输入 [B, C_in, H, W]，核 [C_out, C_in, kh, kw]"""

    op_name = "conv2d"

    def forward(self, x, k, stride=1):
        kh, kw = k.shape[2], k.shape[3]
        windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride]
        self.x_shape, self.k, self.stride, self.windows = x.shape, k, stride, windows
        return np.einsum("bchwij,ocij->bohw", windows, k, optimize=True)

    def backward(self, grad):
        k, s = self.k, self.stride
        gk = np.einsum("bohw,bchwij->ocij", grad, self.windows, optimize=True)
        gx = np.zeros(self.x_shape, dtype=np.float64)
        h_out, w_out = grad.shape[2], grad.shape[3]
        for i in range(k.shape[2]):
            for j in range(k.shape[3]):
                gx[:, :, i:i + s * (h_out - 1) + 1:s, j:j + s * (w_out - 1) + 1:s] += np.einsum(
                    "bohw,oc->bchw", grad, k[:, :, i, j], optimize=True
                )
        return gx, gk


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """卷积：输入可为 [C, H, W] 或 [B, C, H, W]，输出相应为 [C_out, H', W'] 或 [B, C_out, H', W']"""
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d 需要 4 维输入与核，当前 {x.shape} / {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d 通道数不一致: 输入 {x.shape}，核 {kernel.shape}")
    if kernel.shape[2] > x.shape[2] or kernel.shape[3] > x.shape[3]:
        raise DimensionError(f"conv2d 核 {kernel.shape} 大于输入 {x.shape}")
    if stride < 1:
        raise ParameterError(f"conv2d stride 必须 >= 1，当前 {stride}")
    out = Conv2d.apply(x, kernel, stride=stride)
    if single:
        out = out.reshape(out.shape[1:])
    return out


# ============================================================
# 归一化 / softmax
# ============================================================

class SoftmaxT(Function):
    op_name = "softmax_t"

    def forward(self, z, temperature=1.0):
        s = z.astype(np.float64) / temperature
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        self.y = e / e.sum(axis=-1, keepdims=True)
        self.t = temperature
        return self.y

    def backward(self, grad):
        y = self.y
        return ((y * (grad - np.sum(grad * y, axis=-1, keepdims=True))) / self.t,)


class LogSoftmaxT(Function):
    op_name = "log_softmax_t"

    def forward(self, z, temperature=1.0):
        s = z.astype(np.float64) / temperature
        s = s - s.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
        out = s - lse
        self.p = np.exp(out)
        self.t = temperature
        return out

    def backward(self, grad):
        return ((grad - self.p * grad.sum(axis=-1, keepdims=True)) / self.t,)


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"温度必须为正数，当前 {temperature}")


def softmax_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """带温度的 softmax：softmax(logits / T)，先减最大值保证数值稳定"""
    _check_temperature(temperature)
    return SoftmaxT.apply(logits, temperature=temperature)


def log_softmax_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    return LogSoftmaxT.apply(logits, temperature=temperature)


class LayerNorm(Function):
    op_name = "layer_norm"

    def forward(self, x, gamma, beta, eps=1e-5):
        x64 = x.astype(np.float64)
        mu = x64.mean(axis=-1, keepdims=True)
        var = x64.var(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x64 - mu) * self.inv
        self.gamma = gamma.astype(np.float64)
        return self.xhat * self.gamma + beta

    def backward(self, grad):
        d = self.xhat.shape[-1]
        lead = tuple(range(grad.ndim - 1))
        g_gamma = np.sum(grad * self.xhat, axis=lead)
        g_beta = np.sum(grad, axis=lead)
        gx_hat = grad * self.gamma
        gx = (self.inv / d) * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - self.xhat * np.sum(gx_hat * self.xhat, axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """按最后一维做零均值、单位方差归一化，再做仿射变换"""
    d = x.shape[-1] if x.ndim else 0
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm 形状不匹配: x={x.shape}, gamma={gamma.shape}, beta={beta.shape}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class L2Normalize(Function):
    op_name = "l2_normalize"

    def forward(self, x, eps=1e-12):
        x64 = x.astype(np.float64)
        norm = np.sqrt(np.sum(x64 * x64, axis=-1, keepdims=True))
        self.small = norm <= eps
        self.norm = np.where(self.small, eps, norm)
        self.y = x64 / self.norm
        return self.y

    def backward(self, grad):
        proj = np.where(self.small, 0.0, np.sum(grad * self.y, axis=-1, keepdims=True))
        return ((grad - self.y * proj) / self.norm,)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """沿最后一维做 L2 归一化（范数过小时按 eps 截断，避免除零）"""
    return L2Normalize.apply(x, eps=eps)


class RowNorm(Function):
    """沿最后一维的欧氏范数；范数为 0 处取次梯度 0"""

    op_name = "row_norm"

    def forward(self, x):
        x64 = x.astype(np.float64)
        self.x = x64
        self.norm = np.sqrt(np.sum(x64 * x64, axis=-1))
        return self.norm

    def backward(self, grad):
        safe = np.where(self.norm > 0, self.norm, 1.0)
        scale = np.where(self.norm > 0, grad / safe, 0.0)
        return (self.x * scale[..., None],)


def row_norm(x: Tensor) -> Tensor:
    return RowNorm.apply(x)


class MinMaxScale(Function):
    """沿倒数第二维做 min-max 缩放：min → 0，max → 1（输入 [..., R, 2]）"""

    op_name = "min_max_scale"

    def forward(self, x, eps=1e-12):
        x64 = x.astype(np.float64)
        self.arg_min = np.argmin(x64, axis=-2)
        self.arg_max = np.argmax(x64, axis=-2)
        mn = np.min(x64, axis=-2, keepdims=True)
        mx = np.max(x64, axis=-2, keepdims=True)
        self.span = np.maximum(mx - mn, eps)
        self.y = (x64 - mn) / self.span
        self.shape = x.shape
        return self.y

    def backward(self, grad):
        d = self.span
        gx = grad / d
        g_min = np.sum(grad * (self.y - 1.0), axis=-2) / d[..., 0, :]
        g_max = -np.sum(grad * self.y, axis=-2) / d[..., 0, :]
        lead = np.indices(self.arg_min.shape)
        np.add.at(gx, (*lead[:-1], self.arg_min, lead[-1]), g_min)
        np.add.at(gx, (*lead[:-1], self.arg_max, lead[-1]), g_max)
        return (gx,)


def min_max_scale(x: Tensor) -> Tensor:
    if x.ndim < 2 or x.shape[-2] < 2:
        raise ParameterError(f"min-max 缩放至少需要 2 个点，当前形状 {x.shape}")
    return MinMaxScale.apply(x)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """逐行 softmax 交叉熵的均值，logits [B, K]"""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax_t(logits, 1.0)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


# ============================================================
# 优化器
# ============================================================

@dataclass
class OptimState:
    """单个参数的 AdamW 状态"""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_shape(cls, shape: Tuple[int, ...], **kwargs: Any) -> "OptimState":
        return cls(m=np.zeros(shape, dtype=np.float64), v=np.zeros(shape, dtype=np.float64), **kwargs)


def adamw_step(param: Tensor, grad: Optional[np.ndarray], state: OptimState) -> Tensor:
    """单参数 AdamW 更新（原地修改 param.data 与 state）

    规则：
    - 先做解耦权重衰减：p ← p − lr·wd·p
    - 再做偏差校正的自适应步：p ← p − lr·m̂ / (√v̂ + eps)
    - grad 为 None 视为零梯度
    - 梯度含 NaN/Inf 时拒绝更新并抛出 NumericalError
    """
    if grad is None:
        grad = np.zeros(param.shape, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise DimensionError(f"adamw 形状不一致: param={param.shape}, grad={grad.shape}, m={state.m.shape}")
    if not np.all(np.isfinite(grad)):
        logger.error(f"[adamw] 参数 {param.name} 的梯度含 NaN/Inf，拒绝本次更新")
        raise NumericalError(f"参数 {param.name or param.uid} 的梯度含 NaN/Inf")

    b1, b2 = state.betas
    state.step += 1
    g = grad.astype(np.float64)
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)

    p = param.data.astype(np.float64)
    p = p - state.lr * state.weight_decay * p
    p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param.data = p.astype(param.data.dtype)
    return param


class AdamW:
    """对一组具名参数做 AdamW 更新

    参数：
    - params:       名称 → 参数张量
    - lr:           基础学习率（每步可被调度覆盖）
    - weight_decay: 权重衰减；只作用于 ndim >= 2 的权重（偏置、归一化参数不衰减）
    - lr_scale:     名称 → 学习率倍率（用于逐层学习率衰减），缺省为 1
    """

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float = 1e-3,
        weight_decay: float = 0.0,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        lr_scale: Optional[Dict[str, float]] = None,
    ) -> None:
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_scale = lr_scale or {}
        self.states: Dict[str, OptimState] = {
            name: OptimState.for_shape(
                p.shape,
                lr=lr,
                weight_decay=weight_decay if p.ndim >= 2 else 0.0,
                betas=betas,
                eps=eps,
            )
            for name, p in params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: Optional[float] = None, weight_decay: Optional[float] = None) -> None:
        """执行一步更新；任一梯度非有限时整步拒绝，所有参数保持不变"""
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                logger.error(f"[adamw] 参数 {name} 的梯度含 NaN/Inf，整步拒绝")
                raise NumericalError(f"参数 {name} 的梯度含 NaN/Inf，本步未更新任何参数")
        base = self.lr if lr is None else lr
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            state = self.states[name]
            state.lr = base * self.lr_scale.get(name, 1.0)
            if weight_decay is not None and p.ndim >= 2:
                state.weight_decay = weight_decay
            adamw_step(p, p.grad, state)


def cosine_schedule(
    base_value: float,
    final_value: float,
    total_steps: int,
    warmup_steps: int = 0,
    start_warmup_value: float = 0.0,
) -> np.ndarray:
    """线性预热 + 余弦退火，返回长度为 total_steps 的数组"""
    total_steps = max(int(total_steps), 1)
    warmup_steps = min(max(int(warmup_steps), 0), total_steps)
    warmup = np.linspace(start_warmup_value, base_value, warmup_steps, endpoint=False)
    rest = total_steps - warmup_steps
    iters = np.arange(rest)
    cosine = final_value + 0.5 * (base_value - final_value) * (1 + np.cos(np.pi * iters / max(rest, 1)))
    return np.concatenate([warmup, cosine])


# ============================================================
# 梯度检验
# ============================================================

def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    floor: float = 1e-2,
) -> float:
    """比较 Tape 梯度与中心差分 (f(x+h) − f(x−h)) / 2h，返回最大相对误差

    参数：
    - f:      标量值可微函数，参数顺序与 inputs 一致
    - inputs: 输入张量（数值会被复制并提升到 float64 计算）
    - h:      差分步长，取值 [1e-4, 1e-2]
    - floor:  相对误差分母下限，避免梯度接近 0 时放大噪声

    相对误差：|a − n| / max(|a|, |n|, floor)
    """
    if not 1e-4 <= h <= 1e-2:
        raise ParameterError(f"gradcheck 步长 h 必须在 [1e-4, 1e-2] 内，当前 {h}")

    with precision(np.float64):
        xs = [Tensor(np.array(x.data, dtype=np.float64), requires_grad=True) for x in inputs]
        with Tape() as tape:
            out = f(*xs)
        backward(out, tape)
        analytic = [x.grad if x.grad is not None else np.zeros(x.shape) for x in xs]

        worst = 0.0
        with no_grad():
            for x, ga in zip(xs, analytic):
                flat = x.data.reshape(-1)
                ga_flat = np.asarray(ga, dtype=np.float64).reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = f(*xs).item()
                    flat[i] = orig - h
                    fm = f(*xs).item()
                    flat[i] = orig
                    numeric = (fp - fm) / (2.0 * h)
                    denom = max(abs(ga_flat[i]), abs(numeric), floor)
                    worst = max(worst, abs(ga_flat[i] - numeric) / denom)
    return worst
