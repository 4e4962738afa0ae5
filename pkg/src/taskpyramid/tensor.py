"""Dense rank-4 tensors, learnable parameters and reverse-mode differentiation.

A :class:`Tensor` always has shape ``(batch, channels, height, width)`` with
every component >= 1; scalars are carried as ``(1, 1, 1, 1)``.  Element order
is row-major with batch outermost, i.e. the flat index of element
``(b, c, y, x)`` is ``((b*C + c)*H + y)*W + x``.  That layout is frozen so the
binary serialization below is bit-exact across platforms.

Differentiation is a tape: every operation records its parents and a
vector-Jacobian-product closure; :meth:`Tensor.backward` walks the graph in
reverse topological order and accumulates gradients into leaves that require
them.  Gradient correctness is certified against central differences by
:mod:`taskpyramid.gradcheck`.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterator, Sequence

import numpy as np

from .errors import ContractViolation, DataError

TENSOR_MAGIC = b"MTIT"
TENSOR_VERSION = 1

_HEADER = struct.Struct("<4sIIIII")  # magic, version, n, c, h, w


def _as_rank4(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 4:
        raise ContractViolation(
            f"tensor data must be rank 4 (batch, channels, height, width), got shape {arr.shape}"
        )
    if min(arr.shape) < 1:
        raise ContractViolation(f"all shape components must be >= 1, got {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A rank-4 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.data = _as_rank4(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # only keep the graph alive where a gradient can flow
        self._parents = parents if self.requires_grad else ()
        self._vjp = vjp if self.requires_grad else None

    # -- convenience -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() requires a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def scalar(value: float) -> "Tensor":
        return Tensor(np.full((1, 1, 1, 1), value, dtype=np.float64))

    @staticmethod
    def from_spatial(arr, dtype=np.float64) -> "Tensor":
        """Lift a (H,W), (C,H,W) or (N,C,H,W) array to a rank-4 tensor."""
        a = np.asarray(arr, dtype=dtype)
        if a.ndim == 2:
            a = a[None, None]
        elif a.ndim == 3:
            a = a[None]
        return Tensor(a)

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every grad-requiring leaf.

        ``self`` must be a single-element tensor (a scalar objective).
        Existing ``grad`` buffers are accumulated into, matching the usual
        zero-then-step optimizer protocol.
        """
        if self.data.size != 1:
            raise ContractViolation("backward() may only be called on a scalar tensor")
        order = self._topo_order()
        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = adjoint.get(id(parent))
                if acc is None:
                    # private copy: a vjp may hand the same array to several
                    # parents (add returns (g, g)), and a shared buffer would
                    # be corrupted by the in-place accumulation below
                    adjoint[id(parent)] = np.array(pg)
                else:
                    acc += pg

    def _topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        order.reverse()
        return order


class Parameter(Tensor):
    """A named leaf tensor with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParamStore:
    """Ordered, uniquely named parameter registry with deterministic init.

    Initial values come from a Philox counter-based generator keyed by
    ``(rng_seed, creation_index)``, so a store rebuilt with the same seed and
    the same construction sequence is bit-identical on any platform.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._params: dict[str, Parameter] = {}
        self._counter = 0

    def _rng(self) -> np.random.Generator:
        key = np.array([self.rng_seed, self._counter], dtype=np.uint64)
        self._counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def _register(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise ContractViolation(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def conv_weight(self, name: str, out_c: int, in_c: int, kh: int, kw: int) -> Parameter:
        """Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = self._rng()
        bound = 1.0 / np.sqrt(in_c * kh * kw)
        data = rng.uniform(-bound, bound, size=(out_c, in_c, kh, kw))
        return self._register(Parameter(name, data))

    def zeros(self, name: str, shape: tuple[int, int, int, int]) -> Parameter:
        self._counter += 1  # keep creation indices aligned with mixed init kinds
        return self._register(Parameter(name, np.zeros(shape)))

    def ones(self, name: str, shape: tuple[int, int, int, int]) -> Parameter:
        self._counter += 1
        return self._register(Parameter(name, np.ones(shape)))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())


# -- binary serialization ----------------------------------------------------
#
# Tensor file: little-endian, magic "MTIT", u32 version=1, u32 n,c,h,w, then
# n*c*h*w float64 values in the documented (batch-outermost) row-major order.


def write_tensor(t: Tensor, fh: BinaryIO) -> None:
    n, c, h, w = t.shape
    fh.write(_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, n, c, h, w))
    fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO, context: str = "tensor") -> Tensor:
    at = fh.tell()
    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise DataError(f"{context}: truncated header at byte offset {at}")
    magic, version, n, c, h, w = _HEADER.unpack(head)
    if magic != TENSOR_MAGIC:
        raise DataError(f"{context}: bad magic {magic!r} at byte offset {at}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise DataError(f"{context}: unsupported version {version}")
    count = n * c * h * w
    payload = fh.read(8 * count)
    if len(payload) < 8 * count:
        raise DataError(f"{context}: truncated payload at byte offset {at + _HEADER.size + len(payload)}")
    data = np.frombuffer(payload, dtype="<f8").reshape(n, c, h, w)
    return Tensor(data.astype(np.float64))


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        write_tensor(t, fh)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh, context=str(path))
