"""Smoke test for the tiee_py extension.

Build and install first, e.g. `pip install ./crates/python` or
`maturin develop -m crates/python/Cargo.toml`.
"""

import math
import sys

import tiee_py as t


def main():
    print("tiee_py", t.__version__)

    assert t.weighted_quantile([3.0, 1.0, 2.0], 0.5) == 2.0
    assert t.weighted_quantile([1.0, 2.0], 0.5, weights=[3.0, 1.0]) == 1.0
    q = t.gpd_tail_quantile(0.0, 0.9, 1.0, 0.2, 0.99)
    assert abs(t.gpd_tail_cdf(0.0, 0.9, 1.0, 0.2, q) - 0.99) < 1e-10

    ds = t.Dataset.simulate("M1H", 1000, 7)
    assert len(ds) == 1000 and ds.names == ["x"]
    fit = t.fit_propensity(ds, link="identity", basis="1,x^2")
    assert fit.converged and len(fit.coefficients) == 2

    r = t.estimate_eqte(ds, 0.995, propensity=fit)
    lo, hi = r.ci
    assert lo <= r.delta <= hi
    assert math.isclose(r.delta, r.theta1 - r.theta0)
    print(r, "xi", r.xi)

    for m in ("zhang_firpo", "causal_hill", "pickands"):
        b = t.baseline(m, ds, fit, 0.995)
        print(m, round(b["delta"], 4))

    own = t.Dataset(ds.y, ds.d, ds.x, names=["age"])
    assert len(own.x) == 1 and len(own.x[0]) == 1000
    fit2 = t.fit_propensity(own, link="identity", basis="1,age^2")
    assert fit2.coefficients == fit.coefficients

    delta, se = t.oracle("M1H", 0.995, n_mc=1_000_000, seed=1)
    assert se < 0.05 * delta
    rows = t.run_mc("M1H", "5_over_n", 5, 42, methods=["tiee", "causal_hill"], truth=delta)
    assert [row["method"] for row in rows] == ["tiee", "causal_hill"]
    print("mc", [(row["method"], round(row["mse"], 3)) for row in rows])

    try:
        t.Dataset.simulate("M9", 100, 1)
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("unknown scenario accepted")

    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
