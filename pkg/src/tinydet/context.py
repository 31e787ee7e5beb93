"""Global-context injection: pool a high-level map to a vector, project it,
and broadcast-add it onto a low-level map.

The high-level input is expected to be already spatially aligned with the
low-level map (the pyramid module shares one bilinear alignment step between
this module and the gating module).
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import (
    ParamStore,
    Tensor,
    adaptive_max_pool_1x1,
    broadcast_add_channel,
    conv2d,
    relu,
    reshape,
)

__all__ = ["CemParams", "global_context", "cem_forward"]


@dataclass
class CemParams:
    """1x1 projection from high-level channels C_h down to low-level C_l."""

    weight: Tensor  # [C_l, C_h, 1, 1]
    bias: Tensor    # [C_l]

    @classmethod
    def create(cls, store: ParamStore, c_high: int, c_low: int, prefix: str = "cem.proj"):
        w, b = store.register_conv(prefix, c_low, c_high, 1)
        return cls(weight=w, bias=b)


def global_context(p_high: Tensor, params: CemParams) -> Tensor:
    """Max-pool a [C_h,H,W] map to 1x1 and project: relu(W * amp(P_h) + b) -> [C_l]."""
    if p_high.data.ndim != 3:
        raise ValueError(f"global_context expects [C,H,W], got {p_high.data.shape}")
    c_h = params.weight.data.shape[1]
    if p_high.data.shape[0] != c_h:
        raise ValueError(
            f"global_context: input has {p_high.data.shape[0]} channels, projection expects {c_h}"
        )
    pooled = adaptive_max_pool_1x1(p_high)               # [C_h]
    pooled = reshape(pooled, (c_h, 1, 1))
    projected = conv2d(pooled, params.weight, params.bias)  # [C_l,1,1]
    return reshape(relu(projected), (params.weight.data.shape[0],))


def cem_forward(p_high_aligned: Tensor, p_low: Tensor, params: CemParams) -> Tensor:
    """Enhance P_l with the global context of P_h: P_l + broadcast(C_g).

    Both inputs must share spatial dims; output has P_l's shape exactly.
    """
    if p_high_aligned.data.shape[1:] != p_low.data.shape[1:]:
        raise ValueError(
            f"cem_forward: spatial mismatch {p_high_aligned.data.shape} vs {p_low.data.shape}"
        )
    ctx = global_context(p_high_aligned, params)
    if ctx.data.shape[0] != p_low.data.shape[0]:
        raise ValueError(
            f"cem_forward: projection yields {ctx.data.shape[0]} channels, P_l has {p_low.data.shape[0]}"
        )
    return broadcast_add_channel(p_low, ctx)
