"""Walkthrough: the adaptive regression loss and its numeric audit.

Prints the loss surface at a few key error magnitudes, the closed-form
gradient limits, the slope bound implied by a 2-Lipschitz gradient, and the
full verifier report (including any discrepancies with the usual
quadratic-small / linear-large phase narrative).
"""

import numpy as np

from tinydet.balanced_loss import (
    DCLossParams,
    alpha,
    dcloss_grad,
    dcloss_value,
    lipschitz_bound,
    verify_theorem1,
)

params = DCLossParams(k=10.0, delta=0.15)

print("loss L(eps) = a*eps^2 + (1-a)*eps with a = sigmoid(k*(eps - delta))")
print(f"defaults: k = {params.k}, delta = {params.delta}\n")

for eps in (0.01, 0.15, 0.5, 1.0, 10.0):
    e = np.array([eps])
    a = alpha(e, params)[0]
    val = dcloss_value(e, np.zeros(1), params)
    g, _, _ = dcloss_grad(eps, params)
    print(f"eps = {eps:6.2f}  alpha = {a:.4f}  L = {val:10.4f}  dL/deps = {g:10.4f}")

g_small, _, _ = dcloss_grad(1e-9, params)
g_large, _, _ = dcloss_grad(100.0, params)
print(f"\nsmall-error gradient limit: {g_small:.6f} (= sigmoid(k*delta))")
print(f"large-error gradient at eps=100: {g_large:.4f} (= 2*eps)")
print(f"2-Lipschitz slope bound at delta=0.15: {lipschitz_bound(0.15):.5f}")

print("\nfull verifier report:")
print(verify_theorem1(params).to_json())
