"""Tensor kernel shared by the model and the reasoner.

Dense tensors and reverse-mode differentiation come from torch. This module
adds what torch does not give us in the required form: a boolean CSR
relation matrix with a differentiable vector product, a max-shifted softmax,
a functional Adam update, a central-difference gradient checker, and the
``rf1`` checkpoint container.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

warnings.filterwarnings("ignore", message="Sparse CSR tensor support is in beta")
warnings.filterwarnings("ignore", message="Sparse invariant checks")


class NonFiniteError(FloatingPointError):
    """Raised when a forward value contains NaN or Inf."""


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


class SparseRelationMatrix:
    """Square boolean matrix in compressed-row form.

    Every stored cell has the implicit value 1. Column indices are sorted
    within each row and never repeat.
    """

    __slots__ = ("n", "indptr", "indices", "_torch_cache")

    def __init__(self, n: int, indptr: np.ndarray, indices: np.ndarray):
        self.n = int(n)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self._torch_cache: dict = {}
        if self.indptr.shape != (self.n + 1,):
            raise ValueError("indptr must have n + 1 entries")

    @classmethod
    def from_pairs(cls, n: int, rows: Iterable[int], cols: Iterable[int]) -> "SparseRelationMatrix":
        rows = np.asarray(list(rows) if not isinstance(rows, np.ndarray) else rows, dtype=np.int64)
        cols = np.asarray(list(cols) if not isinstance(cols, np.ndarray) else cols, dtype=np.int64)
        if rows.size:
            if rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n:
                raise IndexError("cell index outside matrix bounds")
            keys = np.unique(rows * n + cols)
            rows, cols = keys // n, keys % n
        counts = np.bincount(rows, minlength=n)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(n, indptr, cols)

    @classmethod
    def identity(cls, n: int) -> "SparseRelationMatrix":
        return cls(n, np.arange(n + 1), np.arange(n))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def __contains__(self, cell: tuple[int, int]) -> bool:
        i, j = cell
        r = self.row(i)
        k = np.searchsorted(r, j)
        return bool(k < r.size and r[k] == j)

    def rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return self.rows(), self.indices.copy()

    def transpose(self) -> "SparseRelationMatrix":
        r, c = self.pairs()
        return SparseRelationMatrix.from_pairs(self.n, c, r)

    def without(self, i: int, j: int) -> "SparseRelationMatrix":
        """Copy with cell (i, j) cleared; returns self if the cell is empty."""
        start, stop = self.indptr[i], self.indptr[i + 1]
        k = start + np.searchsorted(self.indices[start:stop], j)
        if k >= stop or self.indices[k] != j:
            return self
        indices = np.delete(self.indices, k)
        indptr = self.indptr.copy()
        indptr[i + 1:] -= 1
        return SparseRelationMatrix(self.n, indptr, indices)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float64)
        r, c = self.pairs()
        out[r, c] = 1.0
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseRelationMatrix):
            return NotImplemented
        return (self.n == other.n and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    def __repr__(self) -> str:
        return f"SparseRelationMatrix(n={self.n}, nnz={self.nnz})"

    def torch_csr(self, dtype: torch.dtype, transpose: bool = False) -> torch.Tensor:
        key = (dtype, transpose)
        if key not in self._torch_cache:
            m = self.transpose() if transpose else self
            self._torch_cache[key] = torch.sparse_csr_tensor(
                torch.from_numpy(m.indptr), torch.from_numpy(m.indices),
                torch.ones(m.nnz, dtype=dtype), size=m.shape)
        return self._torch_cache[key]


def hstack(mats: list[SparseRelationMatrix]) -> "StackedRelations":
    return StackedRelations(mats)


class StackedRelations:
    """Several relation matrices side by side, so one product serves them all."""

    def __init__(self, mats: list[SparseRelationMatrix]):
        if not mats:
            raise ValueError("need at least one matrix")
        self.n = mats[0].n
        self.count = len(mats)
        rows, cols = [], []
        for k, m in enumerate(mats):
            r, c = m.pairs()
            rows.append(r)
            cols.append(c + k * self.n)
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)
        self._cache: dict = {}

    def _csr(self, dtype: torch.dtype, transpose: bool) -> torch.Tensor:
        key = (dtype, transpose)
        if key not in self._cache:
            if transpose:
                r, c, shape = self._cols, self._rows, (self.n * self.count, self.n)
            else:
                r, c, shape = self._rows, self._cols, (self.n, self.n * self.count)
            order = np.lexsort((c, r))
            r, c = r[order], c[order]
            indptr = np.zeros(shape[0] + 1, dtype=np.int64)
            np.cumsum(np.bincount(r, minlength=shape[0]), out=indptr[1:])
            self._cache[key] = torch.sparse_csr_tensor(
                torch.from_numpy(indptr), torch.from_numpy(c),
                torch.ones(c.size, dtype=dtype), size=shape)
        return self._cache[key]


class _SpVM(torch.autograd.Function):
    # out = z @ M computed as (M^T z^T)^T; the adjacency is a constant.
    @staticmethod
    def forward(ctx, z, mt, m):
        ctx.m = m
        return torch.sparse.mm(mt, z.t()).t()

    @staticmethod
    def backward(ctx, grad_out):
        grad_z = torch.sparse.mm(ctx.m, grad_out.t()).t()
        return grad_z, None, None


def spvm(z: torch.Tensor, m: SparseRelationMatrix | StackedRelations) -> torch.Tensor:
    """Row-vector times sparse matrix: ``out[..., j] = sum_i z[..., i] * M[i, j]``.

    Accepts a single vector or a batch of row vectors. For a
    :class:`StackedRelations` the result holds one block of ``n`` columns per
    stacked relation.
    """
    if z.shape[-1] != m.n:
        raise ValueError(f"vector length {z.shape[-1]} does not match matrix size {m.n}")
    squeeze = z.dim() == 1
    z2 = z.unsqueeze(0) if squeeze else z
    if isinstance(m, StackedRelations):
        mt, mm = m._csr(z.dtype, True), m._csr(z.dtype, False)
    else:
        mt, mm = m.torch_csr(z.dtype, transpose=True), m.torch_csr(z.dtype)
    out = _SpVM.apply(z2.contiguous(), mt, mm)
    return out.squeeze(0) if squeeze else out


class _ConstSparseMM(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, a, at):
        ctx.at = at
        return torch.sparse.mm(a, x)

    @staticmethod
    def backward(ctx, grad_out):
        return torch.sparse.mm(ctx.at, grad_out), None, None


def _csr_from(rows, cols, shape, dtype):
    """CSR with repeated cells summed, built from one sort of the flat keys."""
    keys, counts = torch.unique(rows.long() * shape[1] + cols.long(), return_counts=True)
    r, c = keys // shape[1], keys % shape[1]
    crow = torch.zeros(shape[0] + 1, dtype=torch.long)
    crow[1:] = torch.cumsum(torch.bincount(r, minlength=shape[0]), 0)
    return torch.sparse_csr_tensor(crow, c, counts.to(dtype), shape)


class ConstantSparse:
    """A constant sparse matrix ``A`` kept in CSR form alongside ``A^T``."""

    def __init__(self, rows: torch.Tensor, cols: torch.Tensor, shape: tuple[int, int],
                 dtype: torch.dtype = torch.float32):
        self.shape = shape
        self.a = _csr_from(rows, cols, shape, dtype)
        self.at = _csr_from(cols, rows, shape[::-1], dtype)

    def mm(self, x: torch.Tensor) -> torch.Tensor:
        """``A @ x`` differentiable in ``x``."""
        return _ConstSparseMM.apply(x.contiguous(), self.a, self.at)

    def tmm(self, x: torch.Tensor) -> torch.Tensor:
        """``A^T @ x`` differentiable in ``x``."""
        return _ConstSparseMM.apply(x.contiguous(), self.at, self.a)


def softmax(v: torch.Tensor, dim: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Max-shifted softmax. ``mask`` marks the entries allowed to carry mass."""
    if mask is not None:
        v = v.masked_fill(~mask, float("-inf"))
    shift = v.amax(dim=dim, keepdim=True).detach()
    if not torch.isfinite(shift).all():
        raise NonFiniteError("softmax over a fully masked slice")
    e = torch.exp(v - shift)
    return e / e.sum(dim=dim, keepdim=True)


def dropout(x: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    return torch.nn.functional.dropout(x, p=p, training=True)


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None],
              state: OptimizerState) -> OptimizerState:
    """Bias-corrected adaptive-moment update, applied to ``params`` in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if state.lr == 0.0:
            continue
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)
    return state


class NondeterministicLossError(RuntimeError):
    pass


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
               eps: float = 1e-6, samples_per_param: int | None = 8, seed: int = 0,
               floor: float = 1e-8) -> dict[str, float]:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` closes over ``params`` and must be deterministic; it is
    evaluated twice up front to confirm that. Returns the maximum relative
    error per parameter name; ``max(result.values())`` is the overall error.
    Coordinates are sampled (``samples_per_param`` per tensor, ``None`` for
    all) with a fixed generator.

    Central differences carry a roundoff of about ``|loss| * macheps / eps``.
    Relative errors are taken against at least ``1e4`` times that, so a
    gradient too small for the difference quotient to resolve is judged on
    absolute agreement instead of amplified noise.
    """
    for p in params.values():
        if p.dtype != torch.float64:
            raise TypeError("gradient checking requires float64 parameters")
    with torch.no_grad():
        a, b = loss_fn().item(), loss_fn().item()
    if a != b:
        raise NondeterministicLossError(f"loss changed between identical calls: {a} vs {b}")

    for p in params.values():
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)

    scale = max(floor, 1e4 * abs(a) * np.finfo(np.float64).eps / eps)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        flat, gflat = p.data.view(-1), g.reshape(-1)
        n = flat.numel()
        if samples_per_param is None or samples_per_param >= n:
            coords = np.arange(n)
        else:
            # favour resolvable gradients so sparse blocks are really exercised
            live = torch.nonzero(gflat.abs() > scale).flatten().numpy()
            if live.size < samples_per_param:
                live = torch.nonzero(gflat).flatten().numpy()
            pool = live if live.size >= samples_per_param else np.arange(n)
            coords = rng.choice(pool, size=samples_per_param, replace=False)
        worst = 0.0
        for c in coords:
            old = flat[c].item()
            with torch.no_grad():
                flat[c] = old + eps
                up = loss_fn().item()
                flat[c] = old - eps
                down = loss_fn().item()
                flat[c] = old
            numeric = (up - down) / (2 * eps)
            analytic = gflat[c].item()
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), scale)
            worst = max(worst, err)
        errors[name] = worst
    return errors


# --- checkpoint container -------------------------------------------------
#
# layout (little endian):
#   b"rf1\0"  u32 count
#   per tensor: u32 name_len, name utf-8, u32 ndim, u32 dims[ndim], f32 data[prod(dims)]

MAGIC = b"rf1\0"


def save_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            raw = name.encode("utf-8")
            arr = t.detach().cpu().numpy().astype("<f4", copy=False)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an rf1 checkpoint")
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return out
