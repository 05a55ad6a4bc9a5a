"""Differentiable building blocks, losses, optimizer and gradient verification.

Forward/backward passes run on torch autograd in float64. The gradient
checker evaluates central differences with plain forward calls, so it never
relies on the autograd path it verifies.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from abdtrauma.errors import ContractError, NumericError, StorageError
from abdtrauma.schema import LabelSchema

DTYPE = torch.float64
DICE_EPS = 1e-6


def resolve_dtype(name) -> torch.dtype:
    if isinstance(name, torch.dtype):
        return name
    try:
        return {"float64": torch.float64, "float32": torch.float32}[name]
    except KeyError:
        raise ContractError(f"unsupported dtype {name!r}") from None


def as_tensor(x, requires_grad: bool = False, dtype=DTYPE) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=resolve_dtype(dtype))
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


# ---------------------------------------------------------------------------
# primitives


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv3d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    return F.conv3d(x, weight, bias, stride=stride, padding=padding)


def max_pool2d(x, k: int = 2):
    return F.max_pool2d(x, k)


def max_pool3d(x, k: int = 2):
    return F.max_pool3d(x, k)


def dense(x, weight, bias=None):
    return F.linear(x, weight, bias)


def relu(x):
    return torch.relu(x)


def sigmoid(x):
    return torch.sigmoid(x)


def softmax(x, axis: int = -1):
    return torch.softmax(x, dim=axis)


def upsample2(x):
    """Nearest-neighbour upsampling by 2 on every spatial axis (2D or 3D)."""
    return F.interpolate(x, scale_factor=2, mode="nearest")


def reduce(x, how: str = "sum", axis=None):
    if how == "sum":
        return x.sum() if axis is None else x.sum(dim=axis)
    if how == "mean":
        return x.mean() if axis is None else x.mean(dim=axis)
    if how == "max":
        return x.max() if axis is None else x.amax(dim=axis)
    raise ValueError(f"unknown reduction {how!r}")


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh):
    """One GRU step. Gate order in the stacked weights: reset, update, candidate."""
    gi = F.linear(x, w_ih, b_ih)
    gh = F.linear(h, w_hh, b_hh)
    i_r, i_z, i_n = gi.chunk(3, dim=-1)
    h_r, h_z, h_n = gh.chunk(3, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1 - z) * n + z * h


def gru_unroll(xs, h0, w_ih, w_hh, b_ih, b_hh, reverse: bool = False):
    """Run ``gru_cell`` over axis 1 of ``xs`` (B, T, F); returns (B, T, H)."""
    steps = range(xs.shape[1] - 1, -1, -1) if reverse else range(xs.shape[1])
    h = h0
    out = [None] * xs.shape[1]
    for t in steps:
        h = gru_cell(xs[:, t], h, w_ih, w_hh, b_ih, b_hh)
        out[t] = h
    return torch.stack(out, dim=1)


class GRU(nn.Module):
    """Single-layer GRU, optionally bidirectional (outputs concatenated)."""

    def __init__(self, input_size: int, hidden_size: int, bidirectional: bool = True):
        super().__init__()
        self.hidden_size = hidden_size
        self.bidirectional = bidirectional
        bound = 1.0 / hidden_size**0.5
        dirs = 2 if bidirectional else 1
        self.w_ih = nn.ParameterList()
        self.w_hh = nn.ParameterList()
        self.b_ih = nn.ParameterList()
        self.b_hh = nn.ParameterList()
        for _ in range(dirs):
            self.w_ih.append(nn.Parameter(torch.empty(3 * hidden_size, input_size, dtype=DTYPE).uniform_(-bound, bound)))
            self.w_hh.append(nn.Parameter(torch.empty(3 * hidden_size, hidden_size, dtype=DTYPE).uniform_(-bound, bound)))
            self.b_ih.append(nn.Parameter(torch.empty(3 * hidden_size, dtype=DTYPE).uniform_(-bound, bound)))
            self.b_hh.append(nn.Parameter(torch.empty(3 * hidden_size, dtype=DTYPE).uniform_(-bound, bound)))

    @property
    def output_size(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)

    def forward(self, xs):
        h0 = xs.new_zeros(xs.shape[0], self.hidden_size)
        outs = [gru_unroll(xs, h0, self.w_ih[0], self.w_hh[0], self.b_ih[0], self.b_hh[0])]
        if self.bidirectional:
            outs.append(gru_unroll(xs, h0, self.w_ih[1], self.w_hh[1], self.b_ih[1], self.b_hh[1], reverse=True))
        return torch.cat(outs, dim=-1)


# ---------------------------------------------------------------------------
# losses


def dice_loss(pred, true, eps: float = DICE_EPS):
    """Soft Dice: 1 - (2 sum(pred*true) + eps) / (sum(pred) + sum(true) + eps)."""
    pred = as_tensor(pred) if not isinstance(pred, torch.Tensor) else pred
    true = as_tensor(true) if not isinstance(true, torch.Tensor) else true
    if pred.shape != true.shape:
        raise ContractError(f"dice_loss shape mismatch: {tuple(pred.shape)} vs {tuple(true.shape)}")
    inter = (pred * true).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + true.sum() + eps)


def aux_seg_loss(preds: Sequence, trues: Sequence, eps: float = DICE_EPS):
    """Sum (not mean) of ``dice_loss`` over aligned prediction/target pairs."""
    if len(preds) != len(trues):
        raise ContractError(f"{len(preds)} predictions but {len(trues)} targets")
    total = torch.zeros((), dtype=preds[0].dtype if len(preds) and isinstance(preds[0], torch.Tensor) else DTYPE)
    for p, t in zip(preds, trues):
        total = total + dice_loss(p, t, eps)
    return total


def _group_layout(schema: LabelSchema | Sequence[int]):
    if isinstance(schema, LabelSchema):
        sizes = [g.n_states for g in schema.groups]
        weights = [list(g.weights) for g in schema.groups]
    else:
        sizes = [int(s) for s in schema]
        weights = [[1.0] * s for s in sizes]
    return sizes, weights


def weighted_ce_loss(logits, target, schema: LabelSchema | Sequence[int]):
    """Per-group softmax cross-entropy weighted by the target state's weight.

    ``logits`` is (..., n_classes) with groups laid out contiguously.
    ``target`` is either integer states (..., n_groups) or soft
    distributions (..., n_classes). Group losses are summed; the result is
    averaged over all leading (batch, sequence) positions.
    """
    sizes, weights = _group_layout(schema)
    n_classes = sum(sizes)
    if logits.shape[-1] != n_classes:
        raise ContractError(f"logits have {logits.shape[-1]} classes, schema expects {n_classes}")
    target = torch.as_tensor(target)
    lead = logits.shape[:-1]
    hard = not torch.is_floating_point(target)
    if hard and target.shape != (*lead, len(sizes)):
        raise ContractError(f"state targets shape {tuple(target.shape)} != {(*lead, len(sizes))}")
    if not hard and target.shape != logits.shape:
        raise ContractError(f"soft targets shape {tuple(target.shape)} != {tuple(logits.shape)}")
    total = logits.new_zeros(lead)
    start = 0
    for g, (size, w) in enumerate(zip(sizes, weights)):
        logp = torch.log_softmax(logits[..., start : start + size], dim=-1)
        wt = logits.new_tensor(w)
        if hard:
            idx = target[..., g].long()
            if torch.any((idx < 0) | (idx >= size)):
                raise ContractError(f"state index out of range for group {g}")
            total = total - wt[idx] * logp.gather(-1, idx.unsqueeze(-1)).squeeze(-1)
        else:
            q = target[..., start : start + size].to(logits.dtype)
            total = total - (q * wt * logp).sum(dim=-1)
        start += size
    return total.mean()


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float,
             momentum: float = 0.9, velocity: list | None = None,
             weight_decay: float = 0.0) -> list[torch.Tensor]:
    """Classical momentum: v <- momentum * v + g + weight_decay * p; p <- p - lr * v.

    Parameters are processed in list order and updated in place. The
    velocity list is created on first use and must be passed back in.
    """
    if lr < 0 or weight_decay < 0:
        raise ContractError("learning rate and weight decay must be non-negative")
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if velocity is None:
        velocity = []
    if not velocity:
        velocity.extend(torch.zeros_like(p) for p in params)
    with torch.no_grad():
        for p, g, v in zip(params, grads, velocity):
            if g is None:
                continue
            if p.shape != g.shape:
                raise ContractError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            v.mul_(momentum).add_(g)
            if weight_decay:
                v.add_(p, alpha=weight_decay)
            p.sub_(lr * v)
    return list(params)


def clip_grad_norm(grads: Sequence[torch.Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the old norm."""
    sq = torch.zeros((), dtype=torch.float64)
    for g in grads:
        sq = sq + (g.detach().double() ** 2).sum()
    norm = float(sq.sqrt())
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


class SGD:
    """Stateful wrapper over ``sgd_step``; optional global gradient-norm clipping."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float, momentum: float = 0.9,
                 clip_norm: float | None = None, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity: list[torch.Tensor] = []

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        if self.clip_norm:
            clip_grad_norm(grads, self.clip_norm)
        sgd_step(self.params, grads, self.lr, self.momentum, self.velocity, self.weight_decay)


# ---------------------------------------------------------------------------
# verification


def gradient_check(f: Callable[[torch.Tensor], torch.Tensor], x, h: float = 1e-5,
                   coords: Sequence[int] | None = None, floor: float = 1e-8) -> float:
    """Max relative error between the autograd gradient and central differences.

    Per coordinate: |a - n| / max(floor, |a| + |n|). ``coords`` restricts the
    check to a subset of flat indices. Central differences carry roughly
    eps * |f| / h of rounding noise, so gradients far below ``floor`` are
    compared in absolute terms instead.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = as_tensor(x).detach().clone()
    xg = x0.clone().requires_grad_(True)
    y = f(xg)
    if not torch.isfinite(y):
        raise NumericError("function value is not finite")
    (grad,) = torch.autograd.grad(y, xg, allow_unused=True)
    analytic = torch.zeros_like(x0) if grad is None else grad.detach()
    if not torch.all(torch.isfinite(analytic)):
        raise NumericError("analytic gradient is not finite")

    flat = x0.reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += h
            xm[i] -= h
            fp = float(f(xp.reshape(x0.shape)))
            fm = float(f(xm.reshape(x0.shape)))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite value at perturbed coordinate {i}")
            n = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - n) / max(floor, abs(a) + abs(n)))
    return worst


def module_gradient_check(module: nn.Module, loss_fn: Callable[[], torch.Tensor], name: str,
                          h: float = 1e-5, coords: Sequence[int] | None = None, floor: float = 1e-8) -> float:
    """Same error measure as ``gradient_check``, taken over one named parameter of ``module``.

    ``loss_fn`` recomputes the scalar loss from the module's current state.
    """
    param = dict(module.named_parameters())[name]
    original = param.detach().clone()
    try:
        module.zero_grad(set_to_none=True)
        (grad,) = torch.autograd.grad(loss_fn(), param)
        analytic = grad.detach().reshape(-1)
        flat = original.reshape(-1)
        idx = range(flat.numel()) if coords is None else coords
        worst = 0.0
        with torch.no_grad():
            for i in idx:
                vals = []
                for sign in (1, -1):
                    pert = flat.clone()
                    pert[i] += sign * h
                    param.copy_(pert.reshape(original.shape))
                    vals.append(float(loss_fn()))
                if not all(np.isfinite(vals)):
                    raise NumericError(f"non-finite loss at coordinate {i} of {name}")
                n = (vals[0] - vals[1]) / (2 * h)
                a = float(analytic[i])
                worst = max(worst, abs(a - n) / max(floor, abs(a) + abs(n)))
        return worst
    finally:
        with torch.no_grad():
            param.copy_(original)


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path, named: Iterable[tuple[str, torch.Tensor]]) -> None:
    """Records of (u32 name length, name bytes, u32 rank, u32 dims..., f32 payload), little-endian."""
    chunks = []
    for name, t in named:
        arr = t.detach().cpu().numpy().astype("<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load_params(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    out, pos = {}, 0
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    return out


def save_checkpoint(directory, module: nn.Module, manifest: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(directory / "params.bin", module.state_dict().items())
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_into(module: nn.Module, path) -> nn.Module:
    params = load_params(path)
    state = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in params.items()}
    module.load_state_dict(state)
    return module
