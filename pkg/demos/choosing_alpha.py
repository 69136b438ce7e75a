"""Picking the risk parameter for a given relative-entropy budget.

For standard normal costs the robust objective is alpha/2 + R/alpha, so the
optimum sits at alpha = sqrt(2 R).  The optimiser should find it from the
samples alone, and the exponentially tilted law at that alpha should spend
exactly the budget.
"""

import numpy as np

from riskcouple import optimize_alpha, psi_curve


def main():
    costs = np.random.default_rng(0).standard_normal(50_000)
    for budget in (0.125, 0.5, 2.0):
        cert = optimize_alpha(costs, budget)
        print(f"R = {budget:5.3f}: alpha* = {cert.alpha_star:.4f} "
              f"(exact {np.sqrt(2 * budget):.4f}), psi = {cert.psi.value:.4f}, "
              f"tilted KL = {cert.tilted_kl:.4f}")

    curve = psi_curve(costs, 0.5, 2.0 ** np.arange(-3, 4))
    print("\nalpha     F(alpha)  psi(alpha)")
    for a, f, _, p, _ in curve.rows():
        print(f"{a:7.3f}  {f:8.4f}  {p:9.4f}")


if __name__ == "__main__":
    main()
