"""Foreground/background gating: dual sigmoid gates from the high-level and
the context-enhanced low-level map, fused into one spatial mask that
multiplies the enhanced features before a 3x3 refinement.

Masks are single-channel by default ("spatial" gating, broadcast across
feature channels at the Hadamard step); per-channel masks are available via
``mask_channels``.  The refinement is plain relu(conv(.)); an optional skip
connection around it is off by default.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import (
    ParamStore,
    Tensor,
    add,
    conv2d,
    mul_mask,
    relu,
    sigmoid,
)

__all__ = ["FbsmParams", "gate", "fuse_gates", "fbsm_forward"]


@dataclass
class FbsmParams:
    """Conv parameters for the two gate branches, the fusion conv, and the
    refinement conv.  ``gate_width`` is the hidden width G of each branch."""

    psi_h1_w: Tensor
    psi_h1_b: Tensor
    psi_h2_w: Tensor
    psi_h2_b: Tensor
    psi_l1_w: Tensor
    psi_l1_b: Tensor
    psi_l2_w: Tensor
    psi_l2_b: Tensor
    phi_f_w: Tensor
    phi_f_b: Tensor
    phi_r_w: Tensor
    phi_r_b: Tensor
    gate_width: int
    mask_channels: int = 1
    residual_refine: bool = False

    @classmethod
    def create(cls, store: ParamStore, c_high: int, c_low: int,
               gate_width: int | None = None, mask_channels: int = 1,
               residual_refine: bool = False, prefix: str = "fbsm"):
        g = gate_width if gate_width is not None else max(4, c_low // 4)
        h1 = store.register_conv(f"{prefix}.psi_h1", g, c_high, 3)
        h2 = store.register_conv(f"{prefix}.psi_h2", mask_channels, g, 1)
        l1 = store.register_conv(f"{prefix}.psi_l1", g, c_low, 3)
        l2 = store.register_conv(f"{prefix}.psi_l2", mask_channels, g, 1)
        ff = store.register_conv(f"{prefix}.phi_f", mask_channels, mask_channels, 3)
        fr = store.register_conv(f"{prefix}.phi_r", c_low, c_low, 3)
        return cls(h1[0], h1[1], h2[0], h2[1], l1[0], l1[1], l2[0], l2[1],
                   ff[0], ff[1], fr[0], fr[1], gate_width=g,
                   mask_channels=mask_channels, residual_refine=residual_refine)


def gate(x: Tensor, psi1_w: Tensor, psi1_b: Tensor, psi2_w: Tensor, psi2_b: Tensor) -> Tensor:
    """One gate branch: sigmoid(psi2(relu(psi1(x)))), entries strictly in (0,1)."""
    hidden = relu(conv2d(x, psi1_w, psi1_b))
    return sigmoid(conv2d(hidden, psi2_w, psi2_b))


def fuse_gates(m_high: Tensor, m_low: Tensor, phi_f_w: Tensor, phi_f_b: Tensor) -> Tensor:
    """Fuse two masks: sigmoid(phi_f(M_h + M_l)); no activation between the
    fusion conv and the outer sigmoid."""
    if m_high.data.shape != m_low.data.shape:
        raise ValueError(
            f"fuse_gates: shape mismatch {m_high.data.shape} vs {m_low.data.shape}"
        )
    return sigmoid(conv2d(add(m_high, m_low), phi_f_w, phi_f_b))


def fbsm_forward(p_high_aligned: Tensor, c_enhanced: Tensor, params: FbsmParams) -> Tensor:
    """Mask the enhanced features and refine: relu(phi_r(C_enh * mask)).

    Output matches C_enh's shape and is non-negative (final ReLU).
    """
    if p_high_aligned.data.shape[1:] != c_enhanced.data.shape[1:]:
        raise ValueError(
            f"fbsm_forward: spatial mismatch {p_high_aligned.data.shape} vs {c_enhanced.data.shape}"
        )
    m_high = gate(p_high_aligned, params.psi_h1_w, params.psi_h1_b,
                  params.psi_h2_w, params.psi_h2_b)
    m_low = gate(c_enhanced, params.psi_l1_w, params.psi_l1_b,
                 params.psi_l2_w, params.psi_l2_b)
    mask = fuse_gates(m_high, m_low, params.phi_f_w, params.phi_f_b)
    gated = mul_mask(c_enhanced, mask)
    refined = conv2d(gated, params.phi_r_w, params.phi_r_b)
    if params.residual_refine:
        refined = add(refined, c_enhanced)
    return relu(refined)
