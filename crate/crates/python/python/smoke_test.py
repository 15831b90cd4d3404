"""Smoke test for the fairot_py extension. Run after `maturin develop`."""

import json
import sys
import tempfile

import fairot_py as fp


def main() -> int:
    x, xl, y, yl = fp.generate("circles", 40, 10, seed=0)
    assert len(x) == 40 and len(y) == 10 and set(xl) == {0, 1}

    cost = fp.squared_euclidean(x, y)
    plan, report = fp.sinkhorn(cost, 1.0)
    assert report["converged"], report
    assert abs(sum(map(sum, plan)) - 1.0) < 1e-9

    target = [[0.25, 0.25], [0.25, 0.25]]
    fair, fair_report = fp.fair_sinkhorn(cost, target, xl, yl, 1.0, repair=True)
    assert fair_report["converged"], fair_report
    loss = fp.fairness_loss(fair, fp_repaired(fair, xl, yl), xl, yl)
    vanilla_loss = fp.fairness_loss(plan, target, xl, yl)
    print(f"fairness loss: vanilla {vanilla_loss:.3e}, fair_sinkhorn {loss:.3e}")

    pen, pen_report, trace = fp.penalized_gcg(cost, fp_repaired(fair, xl, yl), xl, yl, 100.0)
    assert trace and trace[-1]["objective"] <= trace[0]["objective"] + 1e-12
    print(f"penalized λ=100: loss {pen_report['fairness_loss']:.3e} in {pen_report['iterations']} iterations")

    out = fp.solve("costlearn_mahalanobis", 1000.0, x, xl, y, yl, config=json.dumps({"costlearn": {"outer_steps": 20}}))
    assert out["model"] is not None and len(out["history"]) == 21
    plan2, rep2 = fp.match_learned(json.dumps(out["model"]), x, xl, y, yl, target)
    print(f"learned Mahalanobis cost: loss {rep2['fairness_loss']:.3e}")

    with tempfile.TemporaryDirectory() as d:
        spec = {"method": "vanilla", "grid": [1.0, 10.0], "dataset": {"kind": "circles", "n_x": 20, "n_y": 8, "seed": 0}}
        records = fp.run_sweep(json.dumps(spec), d, jobs=2)
        assert [r["point"] for r in records] == [0, 1]

    gaps = fp.oracle_check(json.dumps({"sizes": [[3, 3]], "epsilons": [1.0], "instances": 2}))
    assert max(g["frobenius_gap"] for g in gaps) < 1e-5

    try:
        fp.solve("nope", 1.0, x, xl, y, yl)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown method accepted")

    print("smoke test passed")
    return 0


def fp_repaired(plan, xl, yl):
    """The group coupling of a fair plan, used as a target that fits the data exactly."""
    k_s, k_w = max(xl) + 1, max(yl) + 1
    f = [[0.0] * k_w for _ in range(k_s)]
    for i, row in enumerate(plan):
        for j, v in enumerate(row):
            f[xl[i]][yl[j]] += v
    return f


if __name__ == "__main__":
    sys.exit(main())
