"""Regenerate concentrating_beta.field (isotropic background for the positive drive).

The background is beta(x) I with beta chosen so that the anchored bubble

    u*(x) = -1/2 log(1 + gamma (2 lam / (lam^2 + rho^2))^2),
    rho^2 = sum_i sin^2(pi (x_i - 1/2)) / pi^2,

solves F(W(u*) + beta I) = kappa e^{-2u*} on the unit torus.  Small lam
concentrates u* at the torus centre.
"""

import sys
from pathlib import Path

import numpy as np

from conformal_wp.fieldfile import write_field
from conformal_wp.fields import ScalarField, make_grid, schouten_array
from conformal_wp.operators import gp_exact, op_value


def concentrating_beta(n=3, N=16, lam=0.12, gamma=2.0):
    grid = make_grid(n, [N] * n, 1.0)
    spec = gp_exact(n, 1)
    x = grid.coords()
    rho2 = sum(np.sin(np.pi * (c - 0.5)) ** 2 for c in x) / np.pi**2
    us = -0.5 * np.log(1 + gamma * (2 * lam / (lam**2 + rho2)) ** 2)
    us = np.broadcast_to(us, grid.shape)
    kappa = float(op_value(spec, 0.5 * np.eye(n)))
    beta = (kappa * np.exp(-2 * us) - op_value(spec, schouten_array(us, grid))) / op_value(spec, np.eye(n))
    return ScalarField(grid, beta)


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).with_name("concentrating_beta.field")
    write_field(out, concentrating_beta())
