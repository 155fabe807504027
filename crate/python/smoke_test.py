#!/usr/bin/env python3
"""Smoke test for the lss_py extension module.

Build the module first:

    cargo build -p lss-py --release

The script locates the resulting cdylib, exposes it under the importable
name lss_py and exercises the main entry points.
"""

import math
import os
import shutil
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_lss_py():
    candidates = [
        os.path.join(REPO, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("liblss_py.so", "lss_py.so", "liblss_py.dylib")
    ]
    src = next((p for p in candidates if os.path.exists(p)), None)
    if src is None:
        sys.exit("lss_py cdylib not found; run: cargo build -p lss-py --release")
    stage = tempfile.mkdtemp(prefix="lss_py_")
    shutil.copy(src, os.path.join(stage, "lss_py.so"))
    sys.path.insert(0, stage)
    import lss_py

    return lss_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    lss = import_lss_py()

    # budget arithmetic against a known full-scale configuration
    plan = lss.plan_budget(3, 32, 32, 10, 1, 4, 15, 22)
    assert plan["param_count"] == 30660, plan
    assert plan["budget"] == 30720
    assert plan["images"] == 330
    assert lss.param_count(3, 32, 32, 4, 15, 22, 10) == 30660
    print("ok: budget plan")

    # infeasible plans raise
    try:
        lss.plan_budget(3, 32, 32, 10, 1, 4, 100, 100)
    except ValueError:
        print("ok: infeasible budget rejected")
    else:
        sys.exit("infeasible plan was accepted")

    # SVD of a rank-1 image has one dominant singular value
    h = w = 8
    flat = [((i // w) + 1) * ((i % w) + 1) * 0.01 for i in range(h * w)]
    u, s, vt = lss.truncated_svd(flat, 1, h, w, 2)
    assert len(u) == h * 2 and len(s) == 4 and len(vt) == 2 * w
    assert s[0] > 1e-6 and abs(s[3]) < 1e-9 * s[0], s
    print("ok: truncated svd")

    # matching loss anchors
    approx(lss.matching_loss([1.0, 2.0], [1.0, 2.0], [0.0, 0.0]), 1.0)
    approx(lss.matching_loss([0.0, 0.0], [1.0, 2.0], [0.0, 0.0]), 0.0)
    try:
        lss.matching_loss([1.0], [2.0], [2.0])
    except ValueError:
        print("ok: matching loss")
    else:
        sys.exit("degenerate matching loss was accepted")

    # progressive schedule ramp and bounds
    approx(lss.max_start_at(0, 40, 2, 3.0, 100), 2.0)
    approx(lss.max_start_at(50, 40, 2, 3.0, 100), 22.0)
    approx(lss.max_start_at(100, 40, 2, 3.0, 100), 40.0)
    for seed in range(50):
        start = lss.sample_start(50, 40, 2, 3.0, 100, seed)
        assert 19 <= start <= 22, start
    print("ok: schedule")

    # label utilities
    probs = lss.softmax([0.0, 0.0, 0.0, 0.0])
    approx(sum(probs), 1.0)
    approx(probs[0], 0.25)
    ce = lss.soft_cross_entropy([0.0, 0.0], [0.5, 0.5])
    approx(ce, math.log(2.0))
    print("ok: labels")

    # dataset round-trip through the LSS1 container
    ds = lss.Dataset.random(1, 8, 8, 2, 2, 2, 2, 4, 7)
    meta = ds.meta
    assert meta["images"] == 8 and meta["r"] == 2, meta
    img, shape = ds.synthesize(0)
    assert shape == (1, 8, 8) and len(img) == 64
    dist = ds.label_distribution(3)
    approx(sum(dist), 1.0)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ds.lss1")
        ds.save(path)
        back = lss.Dataset.load(path)
        img2, _ = back.synthesize(0)
        for a, b in zip(img, img2):
            assert abs(a - b) < 1e-6, (a, b)
    print("ok: dataset container round-trip")

    # identity mapper makes synthesize return sigma itself
    eye = [1.0 if i % 9 == 0 else 0.0 for i in range(64)]
    ds2 = lss.Dataset.random(1, 8, 8, 2, 3, 8, 1, 2, 1)
    ds2.set_mapper(0, eye, eye)
    sigma = [0.25 * i for i in range(64)]
    ds2.set_sigma(0, sigma)
    out, _ = ds2.synthesize(0)
    for a, b in zip(out, sigma):
        approx(a, b, 1e-12)
    print("ok: identity mapper synthesis")

    print("smoke test passed")


if __name__ == "__main__":
    main()
