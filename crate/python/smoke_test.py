#!/usr/bin/env python3
"""Smoke test for the hypotube Python bindings.

Builds nothing itself: run `cargo build -p hypotube-py --release` (or debug)
first. The script locates the cdylib, exposes it as the module `hypotube`,
and exercises the main surface against closed forms.
"""

import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def locate_cdylib() -> pathlib.Path:
    for profile in ("release", "debug"):
        cand = ROOT / "target" / profile / "libhypotube_py.so"
        if cand.exists():
            return cand
    sys.exit("libhypotube_py.so not found; run `cargo build -p hypotube-py --release` first")


def main() -> None:
    so = locate_cdylib()
    tmp = tempfile.mkdtemp(prefix="hypotube-py-")
    shutil.copy(so, pathlib.Path(tmp) / "hypotube.so")
    sys.path.insert(0, tmp)
    import hypotube  # noqa: E402

    checks = 0

    def check(name: str, ok: bool) -> None:
        nonlocal checks
        checks += 1
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        if not ok:
            sys.exit(1)

    # expression DSL
    printed = hypotube.parse_expr("-x2/2", 3)
    check("parse_expr round-trips", hypotube.eval_expr(printed, [9.0, 2.0, 0.0]) == -1.0)
    check("eval_expr", hypotube.eval_expr("x1*x2", [3.0, 4.0]) == 12.0)

    # Grushin Gram closed form diag(R, R(x1^2 + 2R))
    grushin = hypotube.Model("grushin")
    x1, r = 0.7, 0.2
    gram = grushin.gram([x1, -1.0], r)
    want = [[r, 0.0], [0.0, r * (x1 * x1 + 2 * r)]]
    dev = max(abs(gram[i][j] - want[i][j]) for i in range(2) for j in range(2))
    check("Grushin Gram closed form", dev < 1e-12)

    # Heisenberg bracket and vertical quasi-distance (z^2/2)^(1/4)
    heis = hypotube.Model("heisenberg")
    check("Heisenberg bracket", heis.lie_bracket(1, 2, [0.3, -0.2, 1.0]) == [0.0, 0.0, 1.0])
    z = 0.1
    d = heis.quasi_distance([0.0, 0.0, 0.0], [0.0, 0.0, z])
    check("Heisenberg vertical d", abs(d - (z * z / 2) ** 0.25) < 1e-6)

    # identity-field distances agree with Euclidean
    ident = hypotube.Model("constant", {"n": "2"})
    d = ident.quasi_distance([0.1, 0.2], [0.4, -0.2])
    check("identity quasi-distance", abs(d - 0.5) < 1e-6)
    dc, gap, conv = ident.caratheodory_distance([0.1, 0.2], [0.4, -0.2])
    check("identity d_c", conv and abs(dc - 0.5) < 0.005)
    dstar, res = ident.nsw_distance([0.1, 0.2], [0.4, -0.2])
    check("identity d_*", res < 1e-10 and abs(dstar - 0.5) < 1e-6)

    # BM series vs an independently computed constant
    series = hypotube.bm_series(1.0, math.sqrt(0.2))
    direct = 4 / math.pi * sum(
        (-1) ** k / (2 * k + 1) * math.exp(-((2 * k + 1) ** 2) * math.pi**2 / (8 * 0.2))
        for k in range(10)
    )
    check("bm reflection series", abs(series - direct) < 1e-15)

    # Monte Carlo: deterministic given the seed, bracketed by the bounds
    est1 = grushin.tube_probability(0.3, 0.15, paths=2000, steps=300, seed=11)
    est2 = grushin.tube_probability(0.3, 0.15, paths=2000, steps=300, seed=11)
    check("MC determinism", est1 == est2)
    bounds = grushin.tube_bounds(0.3, 0.15)
    check(
        "bounds bracket the estimate",
        bounds["lower"] <= est1["p_hat"] <= bounds["upper"] and bounds["r_star_ok"],
    )

    # skeleton closed form: Grushin with phi = (1,0) moves along the x1 axis
    times, states = grushin.skeleton([0.0, 0.0], 1.0, steps=64, phi=[1.0, 0.0])
    check(
        "skeleton closed form",
        abs(states[-1][0] - 1.0) < 1e-12 and abs(states[-1][1]) < 1e-12,
    )

    print(f"smoke test passed ({checks} checks)")


if __name__ == "__main__":
    main()
