#!/usr/bin/env python3
"""Smoke test for the blochbands_py extension module.

Builds nothing itself: expects `cargo build --release -p blochbands-py`
to have produced target/release/libblochbands_py.so. The shared object is
copied next to a temporary directory under the importable name and then
exercised end to end.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    candidates = [
        REPO / "target" / "release" / "libblochbands_py.so",
        REPO / "target" / "debug" / "libblochbands_py.so",
    ]
    built = next((c for c in candidates if c.exists()), None)
    if built is None:
        sys.exit(
            "libblochbands_py.so not found; run `cargo build --release -p blochbands-py` first"
        )
    staging = Path(tempfile.mkdtemp(prefix="blochbands_py_"))
    shutil.copy2(built, staging / "blochbands_py.so")
    sys.path.insert(0, str(staging))
    import blochbands_py

    return blochbands_py


def main():
    bb = import_module()

    # 1. Built-in checks.
    reports = bb.selftest()
    for name, passed, detail in reports:
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    assert all(passed for _, passed, _ in reports), "selftest failed"

    # 2. Homogeneous medium at the zone corner: the four smallest non-zero
    # eigenvalues all approximate 2*pi^2.
    eigenvalues, iterations, converged, residuals = bb.solve_at(
        math.pi, math.pi, n0=8, m0=8, levels=1, p=4, tol=1e-6
    )
    assert converged, "corner solve did not converge"
    target = 2.0 * math.pi**2
    for lam in eigenvalues:
        assert abs(lam - target) < 0.05 * target, (lam, target)
    assert max(residuals) <= 1e-6
    print(
        f"solve_at(pi, pi): eigenvalues {['%.4f' % v for v in eigenvalues]} "
        f"~ 2*pi^2 = {target:.4f} in {iterations} iterations"
    )

    # 3. A small scan: grid shape, convergence, time-reversal symmetry and
    # CSV rendering.
    surface = bb.band_scan(3, n0=8, m0=8, levels=1, p=3, tol=1e-3)
    assert surface.kappa == 3 and surface.bands == 3
    assert surface.k_point(0, 0) == (-math.pi, -math.pi)
    for i in range(3):
        for j in range(3):
            assert surface.converged(i, j)
            lam = surface.eigenvalues(i, j)
            mirrored = surface.eigenvalues(2 - i, 2 - j)
            assert all(
                abs(x - y) <= 1e-2 * max(1.0, abs(x)) for x, y in zip(lam, mirrored)
            )
    csv = surface.to_csv()
    assert csv.splitlines()[0] == "i,j,k1,k2,iters,converged,lambda_1,lambda_2,lambda_3"
    assert len(csv.splitlines()) == 10
    print(f"band_scan(3): {surface!r}, CSV has {len(csv.splitlines())} lines")

    print("smoke test OK")


if __name__ == "__main__":
    main()
