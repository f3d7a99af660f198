"""
Reverse-mode differentiation on numpy arrays
============================================

The codec trains its shared network through the modulation-fitting loop,
which needs gradients of gradients. This demo shows the small engine that
provides them.
"""

# %%
# An expression is an ordinary Python function of named leaves.
import numpy as np

from modcodec import diffcore as dc


def expr(W, x):
    return dc.mean_squares(dc.sin(dc.matmul(W, x)))


leaves = {"W": np.array([[1.0, -0.5], [0.25, 2.0]]), "x": np.array([0.3, -0.7])}
print("value     ", dc.evaluate(expr, leaves))
print("d/dW      ", dc.gradient(expr, leaves, "W").tolist())

# %%
# Compare with central finite differences.
h = 1e-6
fd = np.zeros((2, 2))
for i in np.ndindex(2, 2):
    up, down = leaves["W"].copy(), leaves["W"].copy()
    up[i] += h
    down[i] -= h
    fd[i] = (dc.evaluate(expr, {**leaves, "W": up}) - dc.evaluate(expr, {**leaves, "W": down})) / (2 * h)
print("finite diff", fd.tolist())

# %%
# Second order: how the gradient with respect to ``x`` changes with ``W``.
# The inner gradient is reduced to a scalar (here, its sum) first.
gg = dc.gradient_of_gradient(expr, leaves, inner_wrt="x", outer_wrt="W")
print("d/dW sum(d/dx)", gg.tolist())

# %%
# The lower-level API works on ``Var`` nodes directly. ``create_graph=True``
# keeps the gradient differentiable.
x = dc.leaf(np.array([0.4, -1.1]))
with dc.grad_enabled():
    (g,) = dc.grad(dc.mean_squares(dc.sin(x)), [x], create_graph=True)
(hess_diag,) = dc.grad(dc.sum_to(g, ()), [x])
print("d/dx sum(sin x cos x) =", hess_diag.value, "expected", np.cos(2 * x.value))
