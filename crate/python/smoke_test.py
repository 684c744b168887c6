#!/usr/bin/env python3
"""Smoke test for the eschains_py extension module.

Builds the extension with cargo, copies the shared library next to this
script under the importable name, and exercises the bound API.
"""

import math
import pathlib
import shutil
import subprocess
import sys

ROOT = pathlib.Path(__file__).resolve().parents[1]


def build_extension() -> pathlib.Path:
    subprocess.run(
        ["cargo", "build", "-p", "eschains-py", "--release"], cwd=ROOT, check=True
    )
    src = ROOT / "target" / "release" / "libeschains_py.so"
    dst = pathlib.Path(__file__).parent / "eschains_py.so"
    shutil.copy2(src, dst)
    return dst


def main() -> None:
    build_extension()
    sys.path.insert(0, str(pathlib.Path(__file__).parent))
    import eschains_py as es

    p = es.Params(d=3, lambda_=6, mu=3, c=0.2, d_sigma=1.0)
    assert p.d == 3
    assert abs(sum(p.weights) - 1.0) < 1e-12

    # seeded runs are reproducible and converge on the sphere
    traj_a = es.run_chain("cma", p, "sphere", seed=7, steps=200)
    traj_b = es.run_chain("cma", p, "sphere", seed=7, steps=200)
    assert traj_a == traj_b
    assert len(traj_a) == 201 and len(traj_a[0]) == 3

    # steering reaches the attractor in 2d-1 steps
    path, err = es.steer("cma", p, [1.0, -2.0, 0.5])
    assert len(path) == 2 * p.d - 1
    assert err < 1e-6
    path, err = es.steer("csa", p, [1.0, -2.0, 0.5])
    assert len(path) == 1 and err < 1e-12

    # selection probability matches the chi-square law at the median
    q, se = es.selection_q("sphere", [1.0], samples=200_000, seed=3)
    exact = math.erf(1.0 / math.sqrt(2.0))  # P(|N(0,1)| < 1)
    assert abs(q - exact) < 0.01, (q, exact)

    # conjugacy of raw and normalized chains
    dev = es.conjugacy_deviation(p, "sphere", steps=100, seed=11)
    assert dev < 1e-8, dev

    # positive convergence rate on the sphere
    mean, se, lo, hi = es.cr("cma", p, "sphere", burn_in=50, steps=500, replicas=4, seed=5)
    assert lo > 0.0, (mean, se, lo, hi)

    print("smoke test: PASS")


if __name__ == "__main__":
    main()
