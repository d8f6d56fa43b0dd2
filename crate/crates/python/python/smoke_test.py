"""Smoke test for the inclusionkit_py extension module.

Build and run from the workspace root:

    cargo build --release -p inclusionkit-py --features extension-module
    cp target/release/libinclusionkit_py.so crates/python/python/inclusionkit_py.so
    python3 crates/python/python/smoke_test.py
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import inclusionkit_py as ik


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    mu, lip = ik.spectral_bounds([[2.0, 1.0], [-1.0, 2.0]])
    assert close(mu, 2.0) and close(lip, math.sqrt(5.0)), (mu, lip)

    # (I + gamma A) x = z + gamma b with A = 3, b = 1, gamma = 0.5, z = 1
    x = ik.resolve_affine([[3.0]], [1.0], 0.5, [1.0])
    assert close(x[0], 0.6), x

    assert ik.soft_threshold([2.0, -0.2], 0.5, 1.0) == [1.5, 0.0]
    assert ik.box_projection([2.0, -3.0], [-1.0, -1.0], [1.0, 1.0]) == [1.0, -1.0]

    h = ik.Schedule.harmonic(1)
    assert close(h.step_at(3), 0.25) and h.classify() == "satisfies"
    assert ik.Schedule.constant(0.1).classify() == "violates_square_summability"
    assert ik.Schedule.power(1.0, 2.0).classify() == "violates_divergent_sum"

    assert ik.iteration_bound_strong(7.0, 0.8, 1.7, 0.4, 1e-3) == 79
    assert ik.iteration_bound_coupled(3.5, 0.75, 2.0, 0.3, 1e-4) == 42
    assert close(ik.total_error_bound(1.0, 0.1, 0.04, 100), 0.4)
    try:
        ik.iteration_bound_strong(1.0, -1.0, 1.0, 0.1, 1e-3)
    except ValueError:
        pass
    else:
        raise AssertionError("negative mu accepted")

    r = ik.solve_dynamic([[2.0]], [1.0], [0.0], ik.Schedule.constant(0.2), 1e-10, 400)
    assert r.verdict == "converged", r
    assert close(r.final_iterate[0], 0.5, 1e-8), r.final_iterate
    assert r.to_csv().startswith("rho,iota,gamma,step_residual")

    c = ik.run_preset("coupled-svi")
    assert c.verdict == "converged" and c.final_partner is not None
    assert c.errors_to_reference()[-1] < 1e-6

    text = ik.preset_config("stochastic-svi")
    a, b = ik.run_config(text), ik.run_config(text)
    assert a.to_csv() == b.to_csv() and a.seed == 1

    pred = json.loads(ik.bounds(ik.preset_config("coupled-svi")))
    assert pred["iteration_bound_coupled"] == 45, pred

    curve = ik.mc_curve(text, 4)
    assert curve[0][0] == 0 and curve[-1][1] < curve[0][1]

    print("smoke test passed")


if __name__ == "__main__":
    main()
