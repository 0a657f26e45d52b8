"""Guided multi-head cross-attention.

Correlations and attention maps are kept head-major: a batch of correlation
rows is ``[N×h×L]`` and a full map over ``T`` queries is ``[N×h×T×L]``. One
row is refined by :func:`refine_step` in a fixed order: coverage subtraction
(ARM), the guidance residuals in the configured order, then a masked softmax.
Training and inference run exactly the same per-row code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, StateError, UsageError
from .layers import BatchNorm, Conv2d, Module
from .tensor import MASK_VALUE, Tensor


class FusionOrder(str, Enum):
    """Which guidance residual is applied first in a middle layer."""

    SELF_FIRST = "self-first"
    NEIGHBOR_FIRST = "neighbor-first"


# ----------------------------------------------------------------------
# Head plumbing
# ----------------------------------------------------------------------
def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[N×S×d]`` → ``[N×h×S×d_k]``."""

    n, s, d = x.shape
    if d % heads:
        raise ConfigError(f"Model dimension {d} is not divisible by {heads} heads.")
    return T.transpose(x.reshape(n, s, heads, d // heads), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """``[N×h×S×d_k]`` → ``[N×S×h·d_k]``."""

    n, h, s, dk = x.shape
    return T.transpose(x, (0, 2, 1, 3)).reshape(n, s, h * dk)


def _rows_to_grid(rows: Tensor, grid_hw: Tuple[int, int]) -> Tensor:
    n, c, length = rows.shape
    h0, w0 = grid_hw
    if h0 * w0 != length:
        raise DimensionError(f"Cannot reshape rows {rows.shape} onto a {h0}×{w0} grid.")
    return rows.reshape(n, c, h0, w0)


# ----------------------------------------------------------------------
# Learned map φ
# ----------------------------------------------------------------------
class PhiNet(Module):
    """φ: 5×5 conv (in→d_c) → ReLU → batch-norm → 1×1 linear (d_c→out) on ``(h₀, w₀)`` maps."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        *,
        kernel_size: int = 5,
        hidden: int = 32,
    ) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv = Conv2d(in_channels, hidden, kernel_size, rng)
        self.norm = BatchNorm(hidden)
        self.proj = Conv2d(hidden, out_channels, 1, rng)

    @classmethod
    def identity(cls, channels: int, *, kernel_size: int = 5) -> "PhiNet":
        """An exact pass-through for nonnegative inputs (centre tap 1, eval-mode unit norm)."""

        phi = cls(channels, channels, np.random.default_rng(0), kernel_size=kernel_size, hidden=channels)
        centre = kernel_size // 2
        phi.conv.weight.data[...] = 0.0
        phi.conv.bias.data[...] = 0.0
        phi.proj.weight.data[...] = 0.0
        phi.proj.bias.data[...] = 0.0
        for c in range(channels):
            phi.conv.weight.data[c, c, centre, centre] = 1.0
            phi.proj.weight.data[c, c, 0, 0] = 1.0
        phi.norm.eps = 0.0
        return phi.eval()

    def forward(self, maps: Tensor) -> Tensor:
        return self.proj(self.norm(T.relu(self.conv(maps))))

    def on_rows(self, rows: Tensor, grid_hw: Tuple[int, int]) -> Tensor:
        """Apply φ to ``[N×C×L]`` rows reshaped onto the grid; returns ``[N×out×L]``."""

        out = self(_rows_to_grid(rows, grid_hw))
        return out.reshape(out.shape[0], self.out_channels, grid_hw[0] * grid_hw[1])


class SelfGuideParams(Module):
    """Head-mixing matrix ``W^G`` (``h×h``) and a single-output φ.

    ``W^G`` starts at zero, so a fresh module is an exact identity on
    correlations.
    """

    def __init__(self, heads: int, rng: np.random.Generator, *, kernel_size: int = 5, hidden: int = 32) -> None:
        super().__init__()
        self.w_g = T.parameter(np.zeros((heads, heads)))
        self.phi = PhiNet(heads, 1, rng, kernel_size=kernel_size, hidden=hidden)


# ----------------------------------------------------------------------
# Equations
# ----------------------------------------------------------------------
def correlate(q: Tensor, keys: Tensor, key_mask: np.ndarray, w_q: Tensor, w_k: Tensor, heads: int) -> Tensor:
    """Scaled dot products ``E_i = (QW_iᵠ)(KW_iᴷ)ᵀ/√d_k`` as ``[N×h×T×L]``.

    Invalid key positions hold the finite sentinel :data:`MASK_VALUE`.

    Raises
    ------
    ConfigError
        If the model dimension is not divisible by ``heads``.
    """

    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"Model dimension {d} is not divisible by {heads} heads.")
    queries = split_heads(T.matmul(q, w_q), heads)
    projected = split_heads(T.matmul(keys, w_k), heads)
    scores = T.scale(T.matmul(queries, T.transpose(projected, (0, 1, 3, 2))), 1.0 / math.sqrt(d // heads))
    invalid = ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
    return T.masked_fill(scores, invalid, MASK_VALUE)


def arm_refine(e_t: Tensor, coverage: Tensor, phi: PhiNet, grid_hw: Tuple[int, int]) -> Tensor:
    """Coverage refinement ``E_t − φ(C_t)`` on ``[N×h×L]`` rows.

    Raises
    ------
    StateError
        If the coverage accumulator does not match the correlation rows.
    """

    if coverage.shape != e_t.shape:
        raise StateError(f"Coverage of shape {coverage.shape} does not match correlations {e_t.shape}.")
    return T.sub(e_t, phi.on_rows(coverage, grid_hw))


def self_guidance_map(e: Tensor, mask: np.ndarray, params: SelfGuideParams, grid_hw: Tuple[int, int]) -> Tensor:
    """``G = softmax_L(φ([A_1;…;A_h]))`` with ``A_i = softmax(E_i)``; ``[N×L]``, zero where invalid."""

    rows_mask = np.asarray(mask, dtype=bool)
    attention = T.softmax_lastdim(e, rows_mask[:, None, :])
    logits = params.phi.on_rows(attention, grid_hw)
    return T.softmax_lastdim(logits.reshape(logits.shape[0], logits.shape[-1]), rows_mask)


def self_guide(
    e: Tensor,
    mask: np.ndarray,
    params: SelfGuideParams,
    grid_hw: Tuple[int, int],
) -> Tuple[Tensor, Tensor]:
    """Self-guidance ``Ê = E + (E⊙G)W^G`` on ``[N×h×L]`` rows; returns ``(Ê, G)``."""

    guide = self_guidance_map(e, mask, params, grid_hw)
    gated = T.mul(e, guide.reshape(guide.shape[0], 1, guide.shape[1]))
    mixed = T.transpose(T.matmul(T.transpose(gated, (0, 2, 1)), params.w_g), (0, 2, 1))
    return T.add(e, mixed), guide


def neighbor_guidance_map(prev_final, mask: np.ndarray | None = None) -> np.ndarray:
    """Head mean of the previous step's final-layer attention ``[N×h×L]`` → ``[N×L]``."""

    data = prev_final.data if isinstance(prev_final, Tensor) else np.asarray(prev_final)
    guide = data.mean(axis=1)
    if mask is not None:
        guide = np.where(np.asarray(mask, dtype=bool), guide, 0.0)
    return guide


def neighbor_guide(
    e_t: Tensor,
    prev_final,
    alpha: float,
    *,
    layer_idx: int,
    num_layers: int,
    mask: np.ndarray | None = None,
) -> Tuple[Tensor, Optional[np.ndarray]]:
    """Neighbor-guidance ``Ê = E + α(E⊙G)`` for a middle layer; returns ``(Ê, G)``.

    ``G`` is the head mean of the final layer's refined attention at the
    previous step; without a previous step the rows pass through unchanged.
    No trainable parameter is involved.

    Raises
    ------
    UsageError
        When called for the last decoder layer.
    """

    if layer_idx >= num_layers:
        raise UsageError(f"Neighbor-guidance cannot run in the last decoder layer ({layer_idx}).")
    if prev_final is None:
        return e_t, None
    guide = neighbor_guidance_map(prev_final, mask).astype(e_t.dtype)
    gated = T.mul(e_t, guide[:, None, :])
    return T.add(e_t, T.scale(gated, alpha)), guide


@dataclass(slots=True)
class StepAttention:
    """The refined attention of one row plus the guidance maps used to get it."""

    attention: Tensor
    self_map: Optional[np.ndarray] = None
    neighbor_map: Optional[np.ndarray] = None


def fuse_guidance(
    e_t: Tensor,
    mask: np.ndarray,
    grid_hw: Tuple[int, int],
    *,
    self_params: SelfGuideParams | None,
    prev_final=None,
    alpha: float = 0.0,
    order: FusionOrder = FusionOrder.SELF_FIRST,
    layer_idx: int = 1,
    num_layers: int = 2,
) -> StepAttention:
    """Apply the enabled guidance residuals in ``order`` and normalise.

    With ``SELF_FIRST`` this computes
    ``softmax(Ê_self + NeighborGuide(Ê_self, G_neighbor))``.
    """

    refined = e_t
    self_map = neighbor_map = None
    use_neighbor = prev_final is not None
    steps = ("self", "neighbor") if FusionOrder(order) is FusionOrder.SELF_FIRST else ("neighbor", "self")
    for step in steps:
        if step == "self" and self_params is not None:
            refined, guide = self_guide(refined, mask, self_params, grid_hw)
            self_map = guide.data
        elif step == "neighbor" and use_neighbor:
            refined, neighbor_map = neighbor_guide(
                refined, prev_final, alpha, layer_idx=layer_idx, num_layers=num_layers, mask=mask
            )
    attention = T.softmax_lastdim(refined, np.asarray(mask, dtype=bool)[:, None, :])
    return StepAttention(attention, self_map, neighbor_map)


def refine_step(
    e_t: Tensor,
    mask: np.ndarray,
    grid_hw: Tuple[int, int],
    *,
    coverage: Tensor | None = None,
    arm: PhiNet | None = None,
    self_params: SelfGuideParams | None = None,
    prev_final=None,
    alpha: float = 0.0,
    order: FusionOrder = FusionOrder.SELF_FIRST,
    layer_idx: int = 1,
    num_layers: int = 2,
) -> StepAttention:
    """Refine one ``[N×h×L]`` correlation row: ARM, guidance residuals, softmax."""

    if arm is not None:
        if coverage is None:
            coverage = T.Tensor(np.zeros(e_t.shape, dtype=e_t.dtype))
        e_t = arm_refine(e_t, coverage, arm, grid_hw)
    return fuse_guidance(
        e_t,
        mask,
        grid_hw,
        self_params=self_params,
        prev_final=prev_final,
        alpha=alpha,
        order=order,
        layer_idx=layer_idx,
        num_layers=num_layers,
    )


def attend(attention: Tensor, values: Tensor, w_v: Tensor, w_o: Tensor) -> Tensor:
    """``Head_i = A_i V_i`` and ``[Head_1;…;Head_h]W^O``; ``[N×h×T×L]`` → ``[N×T×d]``."""

    heads = attention.shape[1]
    projected = split_heads(T.matmul(values, w_v), heads)
    return T.matmul(merge_heads(T.matmul(attention, projected)), w_o)


# ----------------------------------------------------------------------
# Module
# ----------------------------------------------------------------------
@dataclass(slots=True)
class CrossAttentionResult:
    output: Tensor
    attention: Tensor
    coverage: Tensor | None
    self_maps: List[Optional[np.ndarray]] = field(default_factory=list)
    neighbor_maps: List[Optional[np.ndarray]] = field(default_factory=list)


class GuidedCrossAttention(Module):
    """Cross-attention of one decoder layer with optional ARM and self-guidance."""

    def __init__(
        self,
        d_model: int,
        heads: int,
        rng: np.random.Generator,
        *,
        use_arm: bool = True,
        self_guidance: bool = False,
        phi_kernel: int = 5,
        phi_channels: int = 32,
    ) -> None:
        super().__init__()
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}.")
        limit = math.sqrt(6.0 / (2 * d_model))
        self.heads = heads
        self.w_q = T.parameter(rng.uniform(-limit, limit, (d_model, d_model)))
        self.w_k = T.parameter(rng.uniform(-limit, limit, (d_model, d_model)))
        self.w_v = T.parameter(rng.uniform(-limit, limit, (d_model, d_model)))
        self.w_o = T.parameter(rng.uniform(-limit, limit, (d_model, d_model)))
        self.arm = PhiNet(heads, heads, rng, kernel_size=phi_kernel, hidden=phi_channels) if use_arm else None
        self.self_params = (
            SelfGuideParams(heads, rng, kernel_size=phi_kernel, hidden=phi_channels) if self_guidance else None
        )

    def forward(
        self,
        x: Tensor,
        memory: Tensor,
        memory_mask: np.ndarray,
        grid_hw: Tuple[int, int],
        *,
        coverage: Tensor | None = None,
        prev_final=None,
        use_self: bool = True,
        use_arm: bool = True,
        alpha: float = 0.0,
        order: FusionOrder = FusionOrder.SELF_FIRST,
        layer_idx: int = 1,
        num_layers: int = 2,
    ) -> CrossAttentionResult:
        """Attend ``x`` (``[N×T×d]``) over ``memory`` (``[N×L×d]``) row by row.

        ``coverage`` carries the sum of this layer's earlier refined rows and
        is returned updated. ``prev_final`` (neighbor guidance) is only
        meaningful for a single query row.
        """

        if prev_final is not None and x.shape[1] != 1:
            raise UsageError("Neighbor-guidance needs step-by-step decoding (one query row).")
        scores = correlate(x, memory, memory_mask, self.w_q, self.w_k, self.heads)
        arm = self.arm if use_arm else None
        self_params = self.self_params if use_self else None
        if coverage is None:
            coverage = T.Tensor(np.zeros(scores.shape[:2] + scores.shape[3:], dtype=scores.dtype))

        rows: List[Tensor] = []
        result = CrossAttentionResult(output=None, attention=None, coverage=coverage)  # type: ignore[arg-type]
        for t in range(scores.shape[2]):
            step = refine_step(
                scores[:, :, t, :],
                memory_mask,
                grid_hw,
                coverage=coverage,
                arm=arm,
                self_params=self_params,
                prev_final=prev_final,
                alpha=alpha,
                order=order,
                layer_idx=layer_idx,
                num_layers=num_layers,
            )
            rows.append(step.attention)
            result.self_maps.append(step.self_map)
            result.neighbor_maps.append(step.neighbor_map)
            coverage = T.add(coverage, step.attention)

        attention = T.stack(rows, axis=2)
        result.output = attend(attention, memory, self.w_v, self.w_o)
        result.attention = attention
        result.coverage = coverage
        return result
