import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shmnet import pmu


class TestRectify:
    def test_ideal_rectifier(self):
        model = pmu.RectifierModel(
            1.0, 300e3, conduction_loss_coeff=0.0, dynamic_loss_coeff=0.0,
            bias_flip=pmu.BiasFlipConfig(flip_efficiency=1.0))
        res = pmu.rectify(model, 10e3, 1e-3)
        assert res["pce"] == pytest.approx(1.0)
        assert res["vcr"] == pytest.approx(1.0)

    def test_calibrated_defaults(self):
        res = pmu.rectify(pmu.RectifierModel(1.0, 300e3), 10e3, 1e-3)
        assert res["pce"] > 0.85
        assert res["vcr"] > 0.90

    def test_pce_falls_with_frequency(self):
        lo = pmu.rectify(pmu.RectifierModel(1.0, 100e3), 10e3, 1e-3)["pce"]
        hi = pmu.rectify(pmu.RectifierModel(1.0, 1e6), 10e3, 1e-4)["pce"]
        assert hi < lo

    def test_bias_flip_power_ratio(self):
        on = pmu.RectifierModel(1.0, 300e3)
        off = pmu.RectifierModel(1.0, 300e3, bias_flip=None)
        _, p_on = pmu.matched_load_power(on)
        _, p_off = pmu.matched_load_power(off)
        assert p_on / p_off >= 2.0

    def test_nonpositive_load_rejected(self):
        with pytest.raises(ValueError):
            pmu.rectify(pmu.RectifierModel(1.0, 300e3), 0.0, 1e-3)

    def test_short_duration_rejected(self):
        with pytest.raises(ValueError):
            pmu.rectify(pmu.RectifierModel(1.0, 300e3), 1e3, 1e-6)


class TestBiasFlipTiming:
    def test_converges_to_lc_half_period(self):
        # analytic oracle: pi sqrt(L C) = 90 ns at 8.2 uH / 100 pF
        cfg = pmu.BiasFlipConfig()
        t_opt = np.pi * np.sqrt(8.2e-6 * 100e-12)
        assert t_opt == pytest.approx(90e-9, rel=0.01)
        code = 0
        for _ in range(300):
            code = pmu.bias_flip_timing(cfg, 100e-12, code)
        assert abs(code * pmu.TBP_LSB - t_opt) <= pmu.TBP_LSB

    def test_fixed_point(self):
        cfg = pmu.BiasFlipConfig()
        code = 90
        assert pmu.bias_flip_timing(cfg, 100e-12, code) == code

    def test_clamps_without_oscillation(self):
        cfg = pmu.BiasFlipConfig(L_flip=8.2e-3)  # optimum ~2.8 us >> range
        code = 250
        seen = []
        for _ in range(20):
            code = pmu.bias_flip_timing(cfg, 100e-12, code)
            seen.append(code)
        assert seen[-5:] == [255] * 5


class TestInputImpedance:
    def test_eq5_point(self):
        cfg = pmu.DcDcConfig()
        assert pmu.input_impedance(cfg, 2e-6, 0.0) == pytest.approx(1000.0)

    def test_eq4_point(self):
        cfg = pmu.DcDcConfig()
        assert pmu.input_impedance(cfg, 2e-6, 0.2e-6) == pytest.approx(1000.0 / 1.1)

    def test_t2_much_smaller_limit(self):
        cfg = pmu.DcDcConfig()
        approx = 2 * cfg.L_DC / (2e-6**2 * cfg.f_s)
        assert pmu.input_impedance(cfg, 2e-6, 1e-9) == pytest.approx(approx, rel=1e-3)

    def test_timing_exceeds_period(self):
        cfg = pmu.DcDcConfig()
        with pytest.raises(ValueError):
            pmu.input_impedance(cfg, 15e-6, 10e-6)

    def test_matches_waveform_simulation(self):
        # current-waveform oracle within 2 %
        cfg = pmu.DcDcConfig()
        for t1, t2 in [(2e-6, 0.0), (2e-6, 0.2e-6), (1e-6, 0.5e-6)]:
            sim = pmu.simulate_input_impedance(cfg, t1, t2, 1.0)
            formula = pmu.input_impedance(cfg, t1, t2)
            assert sim == pytest.approx(formula, rel=0.02)


class TestAverageInputImpedance:
    def test_alpha_independence_exact(self):
        cfg = pmu.DcDcConfig()
        r1 = pmu.average_input_impedance(cfg, 0.3, 2e-6)
        r2 = pmu.average_input_impedance(cfg, 0.9, 2e-6)
        assert r1 == r2

    def test_alpha_one_is_single_converter(self):
        cfg = pmu.DcDcConfig()
        assert pmu.average_input_impedance(cfg, 1.0, 2e-6) == \
            pytest.approx(pmu.input_impedance(cfg, 2e-6, 1e-12), rel=1e-6)

    def test_numeric_value(self):
        cfg = pmu.DcDcConfig()
        for alpha in (0.0, 0.25, 0.7, 1.0):
            assert pmu.average_input_impedance(cfg, alpha, 2e-6) == \
                pytest.approx(1000.0)


class TestDcDcStateMachine:
    def test_matched_harvest_stays_state2(self):
        cfg = pmu.DcDcConfig()
        st = pmu.PmuState(state=2, v_load=2.0, v_stor=3.3)
        p = cfg.v_load_nom * 2e-3 / st.eta1
        tel = pmu.run_dcdc(st, cfg, p, 2e-3, 20000)
        assert st.alpha == pytest.approx(1.0)
        assert set(np.unique(tel.state)) == {2}

    def test_surplus_ripple(self):
        cfg = pmu.DcDcConfig()
        st = pmu.PmuState(state=2, v_load=2.0, v_stor=3.3)
        p = 1.5 * cfg.v_load_nom * 2e-3 / st.eta1
        tel = pmu.run_dcdc(st, cfg, p, 2e-3, 100000)
        # one charge quantum of slack above V_H
        quantum = st.eta1 * p / cfg.f_s / (cfg.c_load * cfg.v_load_nom)
        assert tel.ripple_pp() == pytest.approx(0.2, abs=3 * quantum)
        assert set(np.unique(tel.state)) <= {2, 3}

    def test_heavy_load_state1_thresholds(self):
        cfg = pmu.DcDcConfig()
        st = pmu.PmuState(state=2, v_load=2.0, v_stor=3.3)
        tel = pmu.run_dcdc(st, cfg, 0.0, 5e-3, 50000)
        s, v = tel.state, tel.v_load
        first1 = int(np.argmax(s == 1))
        assert first1 > 0
        assert v[first1 - 1] <= 1.6 + 1e-3      # entered below the 1.6 V gate
        in1 = s == 1
        assert v[in1].max() <= 1.8 + 5e-3       # exits at the 1.8 V gate
        assert 2 in s[first1:]                  # BC recharges back to state 2

    def test_ledger_closes(self):
        cfg = pmu.DcDcConfig()
        st = pmu.PmuState(state=2, v_load=2.0, v_stor=3.3)
        rng = np.random.default_rng(0)
        harvest = np.abs(rng.normal(5e-3, 2e-3, 50000))
        load = np.abs(rng.normal(2e-3, 1e-3, 50000))
        pmu.run_dcdc(st, cfg, harvest, load, 50000)
        assert abs(st.ledger_residual()) <= 1e-12 * st.e_in
        assert st.e_loss >= 0.0

    def test_ledger_matches_capacitor_energy(self):
        cfg = pmu.DcDcConfig()
        st = pmu.PmuState(state=2, v_load=2.0, v_stor=3.3)
        e0 = 0.5 * st.c_stor * st.v_stor**2 + 0.5 * st.c_load * st.v_load**2
        pmu.run_dcdc(st, cfg, 6e-3, 2e-3, 30000)
        e1 = 0.5 * st.c_stor * st.v_stor**2 + 0.5 * st.c_load * st.v_load**2
        assert st.e_stor == pytest.approx(e1 - e0, rel=1e-9, abs=1e-12)

    def test_no_chattering(self):
        cfg = pmu.DcDcConfig()
        st = pmu.PmuState(state=2, v_load=2.0, v_stor=3.3)
        p = 1.2 * cfg.v_load_nom * 2e-3 / st.eta1
        tel = pmu.run_dcdc(st, cfg, p, 2e-3, 200000)
        edges = np.flatnonzero(np.diff(tel.state.astype(int)) != 0)
        assert len(edges) > 2
        assert not np.any(np.diff(edges) == 1)

    def test_recovery_keeps_band(self):
        # with >= 1.2x surplus the rail stays within the threshold band
        cfg = pmu.DcDcConfig()
        st = pmu.PmuState(state=1, v_load=1.65, v_stor=3.3)
        p = 1.2 * cfg.v_load_nom * 2e-3 / st.eta1
        tel = pmu.run_dcdc(st, cfg, p, 2e-3, 100000)
        settled = tel.v_load[20000:]
        assert settled.min() >= 1.6 - 0.01
        assert settled.max() <= 2.1 + 0.01


class TestMppt:
    def converge(self, cfg, v_oc, r_s, code0=5, iters=200):
        st = pmu.PmuState(t1_code=code0)
        for _ in range(iters):
            r_in = pmu.input_impedance(cfg, cfg.t1(st.t1_code), 0.0)
            st.v_rect = v_oc * r_in / (r_in + r_s)
            pmu.mppt_step(st, cfg, v_oc)
        return st

    def test_thevenin_convergence(self):
        # analytic maximum-power oracle for a Thevenin source
        cfg = pmu.DcDcConfig()
        v_oc, r_s = 2.0, 1000.0
        st = self.converge(cfg, v_oc, r_s)
        r_in = pmu.input_impedance(cfg, cfg.t1(st.t1_code), 0.0)
        v = v_oc * r_in / (r_in + r_s)
        lsb = v_oc * abs(
            pmu.input_impedance(cfg, cfg.t1(st.t1_code + 1), 0.0)
            / (pmu.input_impedance(cfg, cfg.t1(st.t1_code + 1), 0.0) + r_s)
            - r_in / (r_in + r_s))
        assert abs(v - 0.5 * v_oc) <= lsb + 1e-12
        p = v * v / r_in
        assert p >= 0.99 * v_oc**2 / (4 * r_s)

    def test_scale_invariance(self):
        # scaling V_oc scales power by the square, duty point unchanged
        cfg = pmu.DcDcConfig()
        st1 = self.converge(cfg, 1.0, 1000.0)
        st2 = self.converge(cfg, 3.0, 1000.0)
        assert abs(st1.t1_code - st2.t1_code) <= 1

    def test_fixed_point(self):
        cfg = pmu.DcDcConfig()
        st = pmu.PmuState(t1_code=30)
        st.v_rect = 0.5 * 2.0
        assert pmu.mppt_step(st, cfg, 2.0) == 30

    def test_disabled_freezes_code(self):
        from dataclasses import replace
        cfg = replace(pmu.DcDcConfig(), mppt_enabled=False)
        st = pmu.PmuState(t1_code=30)
        st.v_rect = 0.1
        assert pmu.mppt_step(st, cfg, 2.0) == 30


class TestZcs:
    def converge(self, cfg, t1, v_in, v_out, converter="lc", iters=100):
        st = pmu.PmuState()
        for _ in range(iters):
            code = st.t2_lc_code if converter == "lc" else st.t2_cc_code
            i_end = pmu.inductor_current_end(cfg, t1, cfg.t2(code), v_in, v_out)
            pmu.zcs_step(st, cfg, converter, i_end, v_in, v_out)
        return st.t2_lc_code if converter == "lc" else st.t2_cc_code

    @pytest.mark.parametrize("v_in,v_out", [(1.0, 3.3), (1.0, 2.0), (1.5, 3.3)])
    def test_volt_second_balance(self, v_in, v_out):
        cfg = pmu.DcDcConfig()
        t1 = 2.3e-6
        code = self.converge(cfg, t1, v_in, v_out)
        t2_star = t1 * v_in / (v_out - v_in)
        assert abs(cfg.t2(code) - t2_star) <= pmu.T2_LSB

    def test_independent_codes(self):
        cfg = pmu.DcDcConfig()
        lc = self.converge(cfg, 2.3e-6, 1.0, 2.0, "lc")
        cc = self.converge(cfg, 2.3e-6, 1.0, 3.3, "cc")
        assert lc != cc

    def test_converged_residual_below_lsb(self):
        cfg = pmu.DcDcConfig()
        t1 = 2.3e-6
        code = self.converge(cfg, t1, 1.0, 3.3)
        i_end = pmu.inductor_current_end(cfg, t1, cfg.t2(code), 1.0, 3.3)
        lsb_current = (3.3 - 1.0) * pmu.T2_LSB / cfg.L_DC
        assert abs(i_end) <= lsb_current

    def test_boost_precondition(self):
        cfg = pmu.DcDcConfig()
        with pytest.raises(ValueError):
            pmu.inductor_current_end(cfg, 1e-6, 1e-6, 2.0, 1.0)


class TestEndToEndPce:
    def test_alpha_one(self):
        assert pmu.end_to_end_pce(0.72, 0.8, 1.0) == pytest.approx(0.72)

    def test_alpha_zero_cascade(self):
        assert pmu.end_to_end_pce(0.72, 0.8, 0.0) == pytest.approx(0.72 * 0.8)

    def test_numeric_example(self):
        assert pmu.end_to_end_pce(0.7, 0.78, 0.5) == pytest.approx(0.6230, abs=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(e1=st.floats(0, 1), e2=st.floats(0, 1), a=st.floats(0, 1))
    def test_bounds_property(self, e1, e2, a):
        val = pmu.end_to_end_pce(e1, e2, a)
        assert min(e1 * e2, e1) - 1e-12 <= val <= max(e1, e1 * e2) + 1e-12

    def test_domain_checked(self):
        with pytest.raises(ValueError):
            pmu.end_to_end_pce(1.2, 0.5, 0.5)


class TestScConverter:
    def model(self, f_clk=2e6):
        return pmu.ScConverterModel(ratio=1 / 3, v_in=3.45, target_v=0.89,
                                    f_clk=f_clk)

    def test_idle_regulation(self):
        m = self.model()
        v, clocking = pmu.sc_converter_step(m, 0.89, False, 0.0, 1 / m.f_clk)
        assert v == 0.89 and clocking is False

    def test_rise_time_inverse_in_fclk(self):
        # doubling f_clk halves the rise time
        t1 = pmu.sc_rise_time(self.model(1e6))
        t2 = pmu.sc_rise_time(self.model(2e6))
        assert t1 / t2 == pytest.approx(2.0, rel=0.05)

    def test_rise_time_loglog_slope(self):
        fs = np.array([0.5e6, 1e6, 2e6, 4e6])
        ts = [pmu.sc_rise_time(self.model(f)) for f in fs]
        slope = np.polyfit(np.log(fs), np.log(ts), 1)[0]
        assert slope == pytest.approx(-1.0, abs=0.05)

    def test_steady_ripple_is_hysteresis(self):
        m = self.model()
        rip = pmu.sc_steady_ripple(m, i_draw=5e-6)
        dv_step = 5e-6 / (m.C_L * m.f_clk)
        assert rip == pytest.approx(0.05, abs=5 * dv_step + 2e-3)

    def test_dt_bounded(self):
        m = self.model()
        with pytest.raises(ValueError):
            pmu.sc_converter_step(m, 0.5, True, 0.0, 2.0 / m.f_clk)

    def test_ratio_validated(self):
        with pytest.raises(ValueError):
            pmu.ScConverterModel(ratio=0.4, v_in=3.3, target_v=0.9)
