import numpy as np
import pytest
from scipy import integrate

from disorder_switch import model, solver
from disorder_switch.errors import InadmissibleParametersError, NoSolutionError
from disorder_switch.model import Formulation, ModelParams
from oracles import ShootingSolution

FORMS = ("f1", "f2")


def ode_q_pair(params, x):
    """(Q0, Q0', Q1, Q1') at x from direct integration; arbitrary normalisation."""
    dc = model.derive(params)
    drift = model.GENERATOR_DRIFTS["chain"]

    def rhs(p, y):
        return [y[1], (dc.r * y[0] - drift(dc.lam, p) * y[1]) / (0.5 * dc.rho * (p * (1 - p)) ** 2)]

    def bounded_at_one(p):
        s = integrate.solve_ivp(rhs, (1 - 1e-4, p), [1.0, 0.0], method="Radau",
                                rtol=1e-12, atol=1e-14)
        return s.y[0, -1], s.y[1, -1]

    q0, d0 = bounded_at_one(x)
    # mirror symmetry of the chain generator gives the solution bounded at 0
    q1, d1 = bounded_at_one(1 - x)
    return q0, d0, q1, -d1


class TestCoefficients:
    @pytest.mark.parametrize("form", FORMS)
    @pytest.mark.parametrize("x", [0.1, 0.3, 0.7])
    def test_linear_system_residual(self, form, x, baseline, baseline_dc):
        for side, fn in ((0, solver.coeffs_at_lower), (1, solver.coeffs_at_upper)):
            c0, c1 = fn(form, baseline_dc, baseline, x)
            if form == "f1":
                y0, d0, _ = model.q_eval(baseline_dc, 0, x)
                y1, d1, _ = model.q_eval(baseline_dc, 1, x)
                w, dw = model.r_fn(baseline, side, x), model.r_fn_deriv(baseline, side, x)
            else:
                y0, d0 = model.g_eval(baseline_dc, 0, 0, x)
                y1, d1 = model.g_eval(baseline_dc, 1, 1, x)
                w, dw = model.s_fn(baseline, side, x), model.s_fn_deriv(baseline, side, x)
            assert abs(c1 * y1 - c0 * y0 - w) <= 1e-10
            assert abs(c1 * d1 - c0 * d0 - dw) <= 1e-10

    @pytest.mark.parametrize("form", FORMS)
    def test_role_swap_symmetry(self, form, baseline, baseline_dc):
        g = 0.2
        lo = solver.coeffs_at_lower(form, baseline_dc, baseline, g)
        up = solver.coeffs_at_upper(form, baseline_dc, baseline, 1 - g)
        assert lo[0] == pytest.approx(up[1], rel=1e-10)
        assert lo[1] == pytest.approx(up[0], rel=1e-10)

    def test_against_ode_integrated_basis(self):
        params = ModelParams(lam=1, r=1, mu0=-1, mu1=1, sigma=1, a=1, b=1)
        dc = model.derive(params)
        g = 0.2
        c0, c1 = solver.coeffs_at_lower("f1", dc, params, g)
        q0, d0, q1, d1 = ode_q_pair(params, g)
        w, dw = model.r_fn(params, 0, g), model.r_fn_deriv(params, 0, g)
        ref0, ref1 = np.linalg.solve([[-q0, q1], [-d0, d1]], [w, dw])
        # normalisation-free comparison of c_j Q_j(g)
        assert c0 * model.q_fn(dc, 0, g) == pytest.approx(ref0 * q0, rel=1e-8)
        assert c1 * model.q_fn(dc, 1, g) == pytest.approx(ref1 * q1, rel=1e-8)


class TestBounds:
    def test_f1_closed_form(self, baseline, baseline_dc):
        assert solver.admissible_bounds("f1", baseline_dc, baseline) == pytest.approx((0.4, 0.6))

    def test_f2_composition(self, baseline, baseline_dc):
        p_term, q_term = solver._f2_bound_terms(baseline)
        assert p_term == pytest.approx(1 / 8)
        assert q_term == pytest.approx(7 / 8)
        bl, bu = solver.admissible_bounds("f2", baseline_dc, baseline)
        assert bl <= p_term and bu >= q_term

    @pytest.mark.parametrize("form", FORMS)
    def test_cheap_alarms_pass(self, form):
        # slacks move continuously as costs change; large costs certify F2 as well
        for a in (2.0, 5.0):
            p = ModelParams(a=a, b=a)
            assert solver.check_admissibility(form, None, p).passed

    def test_f2_failure_matches_grid_scan(self):
        p = ModelParams(a=0.1, b=0.1)
        rep = solver.check_admissibility("f2", None, p)
        assert not rep.passed and rep.slack_lower < 0
        with pytest.raises(InadmissibleParametersError) as exc:
            solver.solve_boundaries("f2", None, p)
        assert exc.value.slacks == (rep.slack_lower, rep.slack_upper)
        with pytest.raises(NoSolutionError) as exc:
            solver.solve_boundaries("f2", None, p, require_admissible=False)
        assert "-" not in exc.value.sign_pattern or "+" not in exc.value.sign_pattern


def grid_oracle(form, params, dc):
    """Minimise the matching residual on nested grids (1e-3, 1e-5, 1e-7)."""
    def c_lo(x):
        return np.array([solver.coeffs_at_lower(form, dc, params, v) for v in x])

    def c_up(y):
        return np.array([solver.coeffs_at_upper(form, dc, params, v) for v in y])

    bl, bu = solver.admissible_bounds(form, dc, params)
    xs = np.arange(0.002, bl, 1e-3)
    ys = np.arange(bu, 0.998, 1e-3)
    for step in (1e-5, 1e-7, None):
        A, B = c_lo(xs), c_up(ys)
        res = np.abs(A[:, None, 0] - B[None, :, 0]) + np.abs(A[:, None, 1] - B[None, :, 1])
        i, j = np.unravel_index(np.argmin(res), res.shape)
        g, h = xs[i], ys[j]
        if step is None:
            return g, h
        xs = g + np.arange(-150, 151) * step
        ys = h + np.arange(-150, 151) * step


class TestSolve:
    @pytest.mark.parametrize("form", FORMS)
    def test_symmetric_baseline(self, form, solved, baseline):
        sol = solved[form]
        assert sol.upper == pytest.approx(1 - sol.lower, abs=1e-8)
        assert 0 < sol.lower < sol.bar_lower < 0.5 < sol.bar_upper < sol.upper < 1
        assert abs(sol.residuals["match_c0"]) <= 1e-10
        assert abs(sol.residuals["match_c1"]) <= 1e-10
        for k in ("stop_lower", "fit_lower", "stop_upper", "fit_upper"):
            assert abs(sol.residuals[k]) <= 1e-8

    @pytest.mark.parametrize("form", FORMS)
    def test_matches_grid_oracle(self, form, solved, baseline, baseline_dc):
        g, h = grid_oracle(form, baseline, baseline_dc)
        assert solved[form].lower == pytest.approx(g, abs=1e-6)
        assert solved[form].upper == pytest.approx(h, abs=1e-6)

    def test_frozen_baseline_thresholds(self, solved):
        # pinned from the grid and shooting oracles
        assert solved["f1"].lower == pytest.approx(0.1351586491, abs=1e-9)
        assert solved["f2"].lower == pytest.approx(0.0830590731, abs=1e-9)

    @pytest.mark.parametrize("form", FORMS)
    def test_asymmetric_costs_match_shooting(self, form):
        p = ModelParams(a=0.5, b=2.0) if form == "f1" else ModelParams(a=2.0, b=3.0)
        sol = solver.solve_boundaries(form, None, p)
        ref = ShootingSolution(form, p.lam, p.r, p.mu0, p.mu1, p.sigma, p.a, p.b,
                               guess=(sol.lower * 1.05, sol.upper * 0.99), reach=0.03)
        assert sol.lower == pytest.approx(ref.lower, abs=1e-7)
        assert sol.upper == pytest.approx(ref.upper, abs=1e-7)
        dc = model.derive(p)
        for i in (0, 1):
            for x in np.linspace(0.05, 0.95, 31):
                assert solver.bayes_risk(form, sol, p, i, x, dc) == pytest.approx(
                    ref.risk(i, x), abs=1e-6)

    def test_monotone_in_alarm_cost(self, capsys):
        rows = []
        for a in (0.5, 0.75, 1.0, 1.5, 2.0):
            sol = solver.solve_boundaries("f1", None, ModelParams(a=a))
            rows.append((a, sol.lower, sol.upper))
        with capsys.disabled():
            print("\n  a      lower        upper")
            for a, lo, up in rows:
                print(f"  {a:<5}  {lo:.8f}  {up:.8f}")
        lowers = [r[1] for r in rows]
        assert all(x >= y for x, y in zip(lowers, lowers[1:]))

    def test_round_trip(self, solved):
        for sol in solved.values():
            assert solver.ThresholdSolution.from_dict(sol.to_dict()) == sol


class TestRisk:
    @pytest.mark.parametrize("form", FORMS)
    def test_continuity_and_kinks(self, form, solved, baseline, baseline_dc):
        sol, p = solved[form], baseline
        for x, i in ((sol.lower, 0), (sol.upper, 1)):
            left = solver.bayes_risk_eval(form, sol, p, i, x - 1e-9, baseline_dc)
            right = solver.bayes_risk_eval(form, sol, p, i, x + 1e-9, baseline_dc)
            assert left[0] == pytest.approx(right[0], abs=1e-8)
            assert left[1] == pytest.approx(right[1], abs=1e-6)
        # V_0' - V_1' = a at the lower threshold, V_1' - V_0' = -b at the upper one
        d0 = solver.bayes_risk_eval(form, sol, p, 0, sol.lower + 1e-9, baseline_dc)[1]
        d1 = solver.bayes_risk_eval(form, sol, p, 1, sol.lower + 1e-9, baseline_dc)[1]
        assert d0 - d1 == pytest.approx(p.a, abs=1e-6)
        d0 = solver.bayes_risk_eval(form, sol, p, 0, sol.upper - 1e-9, baseline_dc)[1]
        d1 = solver.bayes_risk_eval(form, sol, p, 1, sol.upper - 1e-9, baseline_dc)[1]
        assert d1 - d0 == pytest.approx(-p.b, abs=1e-6)

    @pytest.mark.parametrize("form", FORMS)
    def test_mirror_symmetry(self, form, solved, baseline):
        for x in (0.0, 0.1, 0.33, 0.5, 0.9, 1.0):
            v0 = solver.bayes_risk(form, solved[form], baseline, 0, x)
            v1 = solver.bayes_risk(form, solved[form], baseline, 1, 1 - x)
            assert v0 == pytest.approx(v1, rel=1e-10)

    @pytest.mark.parametrize("form", FORMS)
    def test_minimal_risk(self, form, solved, baseline):
        sol = solved[form]
        grid = np.linspace(0, 1, 201)
        m = np.array([solver.minimal_risk(form, sol, baseline, x) for x in grid])
        r0 = np.array([solver.bayes_risk(form, sol, baseline, 0, x) for x in grid])
        r1 = np.array([solver.bayes_risk(form, sol, baseline, 1, x) for x in grid])
        assert np.all(m <= r0) and np.all(m <= r1)
        assert np.allclose(m, m[::-1], rtol=1e-10)
        sign = np.sign(r0 - r1)
        assert np.count_nonzero(np.diff(sign[sign != 0])) == 1

    def test_rejects_bad_inputs(self, solved, baseline):
        with pytest.raises(ValueError):
            solver.bayes_risk("f1", solved["f1"], baseline, 0, 1.5)
        with pytest.raises(ValueError):
            solver.bayes_risk("f1", solved["f1"], baseline, 2, 0.5)
        with pytest.raises(ValueError):
            solver.bayes_risk("f2", solved["f1"], baseline, 0, 0.5)


class TestVariational:
    @pytest.mark.parametrize("form", FORMS)
    def test_baseline_passes(self, form, solved, baseline):
        rep = solver.verify_variational(form, solved[form], baseline, grid_n=401)
        assert rep.passed, rep.violations
        assert all(v > 0 for v in rep.min_slack.values())
        assert abs(rep.boundary_gaps["phase0_at_lower"]) < 1e-8
        assert abs(rep.boundary_gaps["phase1_at_upper"]) < 1e-8

    @pytest.mark.parametrize("form", FORMS)
    def test_perturbed_thresholds_fail(self, form, solved, baseline):
        bad = solver.ThresholdSolution.from_dict(solved[form].to_dict())
        bad.lower += 0.05
        rep = solver.verify_variational(form, bad, baseline)
        assert not rep.passed
        assert any(c.startswith("stop") or c.startswith("gap") for c, _, _ in rep.violations)
