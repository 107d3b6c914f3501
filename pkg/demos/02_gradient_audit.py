#!/usr/bin/env python3
"""The reverse-mode tape, checked against a finite-difference oracle.

First differentiates a small hand-built expression and compares each
gradient entry with central differences; then runs the packaged audit
that does the same for every loss group in the objective.

Run:  python3 demos/02_gradient_audit.py
"""

from __future__ import annotations

import numpy as np

from partloc import tensor as T
from partloc.audit import format_audit_report, run_gradient_audit
from partloc.tensor import Tensor


def tiny_expression(x: Tensor) -> Tensor:
    """A scalar crossing several op kinds: mean(softmax(Wx) · (Wx)²)."""
    w = Tensor(np.arange(12.0).reshape(4, 3) / 10.0)
    wx = T.matmul(w, T.reshape(x, (3, 1)))
    return T.mean(T.mul(T.softmax(wx, axis=0), T.mul(wx, wx)))


def main() -> None:
    print("== hand-rolled check on one expression ==")
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=3)

    x = Tensor(x0.copy(), requires_grad=True)
    y = tiny_expression(x)
    y.backward()
    analytic = x.grad.copy()

    h = 1e-6
    fd = np.zeros_like(x0)
    for i in range(x0.size):
        bumped = x0.copy(); bumped[i] += h
        dipped = x0.copy(); dipped[i] -= h
        fd[i] = (float(tiny_expression(Tensor(bumped)).data)
                 - float(tiny_expression(Tensor(dipped)).data)) / (2 * h)
    rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-12)
    print(f"analytic grad: {np.array2string(analytic, precision=6)}")
    print(f"numeric  grad: {np.array2string(fd, precision=6)}")
    print(f"max relative error: {rel.max():.3e}")

    print("\n== packaged audit: every loss group vs the same oracle ==")
    report = run_gradient_audit(seed=0, coords_per_leaf=24)
    print(format_audit_report(report))


if __name__ == "__main__":
    main()
