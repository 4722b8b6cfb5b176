"""Optimal transport building blocks on toy point clouds.

Run with ``python demos/transport_basics.py``.
"""
import numpy as np

from raid import Histogram, cost_matrix, exact_ot_oracle, sinkhorn, solve_barycenter, w2_squared

rng = np.random.default_rng(0)

# Two small weighted clouds in the plane
P = Histogram(rng.normal(-1, 0.3, size=(4, 2)), rng.dirichlet(np.ones(4)))
Q = Histogram(rng.normal(+1, 0.3, size=(5, 2)), rng.dirichlet(np.ones(5)))
C = cost_matrix(P.atoms, Q.atoms)

# Entropic plan versus the exact linear program
T = sinkhorn(P.weights, Q.weights, C)
_, exact = exact_ot_oracle(P.weights, Q.weights, C)
print(f"sinkhorn cost {T.cost(C):.4f}  exact {exact:.4f}  converged={T.converged}")
print("row sums", T.plan.sum(axis=1).round(4), "target", P.weights.round(4))

# Smaller epsilon gives a sharper, cheaper plan
for scale in (1e-1, 1e-2, 1e-3):
    cost = sinkhorn(P.weights, Q.weights, C, epsilon=scale * C.mean()).cost(C)
    print(f"eps = {scale:g} * mean(C): cost {cost:.4f}")

# A fixed-support barycenter of the two clouds, on a grid between them
xs = np.linspace(-1.5, 1.5, 7)
support = np.array([(x, y) for x in xs for y in xs])
bary = solve_barycenter([P, Q], support, tau=0.05, steps=1000)
centre = bary.alpha @ bary.support
print("barycenter mean", centre.round(3), "mass on", int(np.sum(bary.alpha > 1e-3)), "atoms")
# the support is too large for the exact solver, so use the entropic estimate
w2 = [w2_squared(bary.histogram(), h, method="sinkhorn") for h in (P, Q)]
print(f"W2^2 to each input: {w2[0]:.3f}, {w2[1]:.3f}")
