"""Smoke test for the lifespan_lab extension.

Build first: pip install --no-build-isolation -e crates/python
"""

import math

import lifespan_lab as lab


def close(a, b, tol):
    return abs(a - b) <= tol * max(abs(b), 1e-300)


def main():
    assert lab.critical_exponent(3) == 2.0

    c = lab.sharp_constants(2, 2.0)
    assert close(c["c_tilde_crit"], 1 / 32, 1e-12)
    assert close(c["remark_sub_bound"], 230400.0, 1e-12)

    ladder = lab.odi_ladder("critical", 2.0, k_max=10)
    qs = [e["q"] for e in ladder["entries"]]
    assert all(b > a for a, b in zip(qs, qs[1:]))

    res = lab.ode_blowup("critical", 1.0, 2.0)
    assert res["status"] == "blew_up"
    assert math.log(res["t_blow"]) <= 35.2

    sweep = lab.ode_sweep("subcritical", [1.0, 0.5, 0.25, 0.125, 0.0625], 2.0)
    assert abs(sweep["fit"]["slope"] + 2.0) < 0.3

    cfg = lab.WaveConfig(2, 2.0, 0.8, dr=0.01, horizon=100.0, window=10.0)
    est = lab.pde_run(cfg)
    assert est["status"] == "blew_up", est
    later = lab.pde_run(cfg.with_epsilon(0.6))
    assert later["t_num"] > est["t_num"]

    af = lab.a_f(3)
    assert af["a_f"] > 0.0

    dr = 0.01
    u = [1.0 if i * dr <= 1.0 else 0.0 for i in range(120)]
    star = lab.star_transform(u, dr, 3, [0.0, 0.5])
    assert close(star[0], math.pi, 1e-2) and close(star[1], 0.75 * math.pi, 1e-2), star

    fit = lab.fit_line([0.0, 1.0, 2.0], [1.0, 3.0, 5.0])
    assert close(fit["slope"], 2.0, 1e-12)

    try:
        lab.WaveConfig(2, 5.0, 0.5)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid power accepted")

    print(f"smoke test passed: T(0.8) = {est['t_num']:.3f}, T(0.6) = {later['t_num']:.3f}")


if __name__ == "__main__":
    main()
