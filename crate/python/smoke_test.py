#!/usr/bin/env python3
"""Smoke test for the ndsweep_py extension module.

Builds are expected to exist already:

    cargo build -p ndsweep-py

The script locates the cdylib under target/, makes it importable under
the module name, and exercises each exported function.
"""

import importlib.util
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = []
    for profile in ("debug", "release"):
        d = ROOT / "target" / profile
        candidates += list(d.glob("libndsweep_py.so"))
        candidates += list(d.glob("ndsweep_py.dll"))
        candidates += list(d.glob("libndsweep_py.dylib"))
    if not candidates:
        sys.exit("ndsweep_py cdylib not found; run: cargo build -p ndsweep-py")
    lib = max(candidates, key=lambda p: p.stat().st_mtime)
    tmp = pathlib.Path(tempfile.mkdtemp())
    target = tmp / ("ndsweep_py" + lib.suffix)
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("ndsweep_py", target)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    nd = load_module()

    # pmf sums to 1 over the support
    rho, s, n = 0.15, 3, 16
    total = sum(nd.truncated_geometric_pmf(rho, s, n, k) for k in range(s + 1, n + 1))
    assert math.isclose(total, 1.0, rel_tol=1e-12), total

    # keep probability (1-based unit index): swept units always kept,
    # tail decreasing
    probs = [nd.keep_probability(i, rho, s, n) for i in range(1, n + 1)]
    assert all(p == 1.0 for p in probs[: s + 1])
    assert all(a >= b for a, b in zip(probs, probs[1:]))

    # sampler: draws live in (s, n], deterministic under a fixed seed
    draws = nd.sample_kept_counts(rho, s, n, 1000, seed=7)
    assert all(s < k <= n for k in draws)
    assert draws == nd.sample_kept_counts(rho, s, n, 1000, seed=7)

    # masks are prefix indicators
    mask = nd.build_mask(8, [3, 8])
    assert mask[0] == [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    assert mask[1] == [1.0] * 8

    # capacity selection
    points = [(1, 0.4), (2, 0.7), (3, 0.785), (4, 0.787)]
    assert nd.select_capacity(points, 0.005) == 3
    assert nd.select_capacity(points, 0.0) == 4

    # CSV round trip
    rows = [(1, 0.5, "sweep_0001.ckpt"), (2, 0.75, "sweep_0002.ckpt")]
    text = nd.curve_to_csv(rows)
    assert text.splitlines()[0] == "k,accuracy,checkpoint"
    assert nd.curve_from_csv(text) == rows

    print("smoke test passed")


if __name__ == "__main__":
    main()
