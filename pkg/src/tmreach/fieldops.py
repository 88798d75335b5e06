"""Type-dispatching math helpers so one field definition serves numpy arrays,
torch tensors and Taylor models.  State components are addressed as
``x[..., rows]`` in all three cases."""

from __future__ import annotations

import numpy as np
import torch

from .interval import as_tensor
from .taylor_model import TaylorModel


def _is_tm(x) -> bool:
    return isinstance(x, TaylorModel)


def sin(x):
    if _is_tm(x):
        return x.sin()
    return torch.sin(x) if isinstance(x, torch.Tensor) else np.sin(x)


def cos(x):
    if _is_tm(x):
        return x.cos()
    return torch.cos(x) if isinstance(x, torch.Tensor) else np.cos(x)


def tan(x):
    if _is_tm(x):
        return x.tan()
    return torch.tan(x) if isinstance(x, torch.Tensor) else np.tan(x)


def sec(x):
    if _is_tm(x):
        return x.sec()
    return 1.0 / (torch.cos(x) if isinstance(x, torch.Tensor) else np.cos(x))


def cat(parts):
    if any(_is_tm(p) for p in parts):
        return TaylorModel.cat(parts)
    if any(isinstance(p, torch.Tensor) for p in parts):
        return torch.cat(parts, dim=-1)
    return np.concatenate(parts, axis=-1)


def rows(x, idx):
    if _is_tm(x):
        return x.rows(idx)
    return x[..., idx]


def lin(x, M):
    """Apply a constant matrix to the state rows: M @ x."""
    if _is_tm(x):
        return x.linear_map(M)
    if isinstance(x, torch.Tensor):
        M = as_tensor(M)
        return x @ M.transpose(-1, -2)
    return x @ np.asarray(M).T


def zeros_rows(x, k: int):
    """A block of k zero rows shaped like x (TM, tensor or array)."""
    if _is_tm(x):
        return TaylorModel.constant(torch.zeros(x.batch_shape + (k,), dtype=x.c.dtype), x.nz, x.h)
    if isinstance(x, torch.Tensor):
        return torch.zeros(x.shape[:-1] + (k,), dtype=x.dtype)
    return np.zeros(np.shape(x)[:-1] + (k,))


def mul(a, b):
    """Product where either side may be a Taylor model, tensor or array."""
    if _is_tm(b) and not _is_tm(a):
        return b * a
    return a * b


def add(a, b):
    if _is_tm(b) and not _is_tm(a):
        return b + a
    return a + b


def const_like(x, value):
    """A constant in the numeric type matching x (tensor for tensors and TMs)."""
    if _is_tm(x) or isinstance(x, torch.Tensor):
        return as_tensor(value)
    return np.asarray(value, dtype=float)
