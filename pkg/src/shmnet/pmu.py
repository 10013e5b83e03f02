"""Power chain behavioral models: rectifier, dual-path DC-DC, PFM
switched-capacitor converters.

Everything here is cycle-averaged bookkeeping, not circuit simulation:
one :func:`dcdc_step` per switching period, energy parcels moved
between capacitors with explicit efficiencies, and digital control
loops (MPPT, ZCS, bias-flip timing) stepping small accumulator
registers toward their analytic optima.

Rectifier model. The transducer is treated as the usual piezo current
source: it can source a charge 2 C_P V_P per half cycle (V_P is the
open-circuit amplitude). Without bias flipping, 2 C_P V_RECT of that
charge is wasted every half cycle re-slewing the transducer
capacitance; an active flip recovers a fraction ``flip_efficiency`` of
it. Balancing deliverable charge against the load current gives the
operating point; the output voltage is capped at V_P (a flip can at
best restore the full source swing) and reduced by the conduction drop
of the switches. PCE is referred to the chip terminals (the reactive
C_P exchange is not a terminal loss), matching how such converters are
characterized on the bench.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels

T1_LSB = 50e-9   # boost on-time per MPPT code step
T2_LSB = 50e-9   # boost off-time per ZCS code step
TBP_LSB = 1e-9   # bias-flip pulse width per code step


@dataclass(frozen=True)
class BiasFlipConfig:
    L_flip: float = 8.2e-6
    flip_efficiency: float = 0.8
    t_bp_code: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_efficiency <= 1.0:
            raise ValueError("flip_efficiency must be in [0, 1]")
        if not 0 <= self.t_bp_code <= 255:
            raise ValueError("t_bp_code is an 8-bit register")


@dataclass(frozen=True)
class RectifierModel:
    v_ac_amplitude: float
    f_in: float
    C_P: float = 100e-12
    conduction_loss_coeff: float = 30.0      # ohms
    dynamic_loss_coeff: float = 1.2e-11      # joules / (V^2 * cycle)
    bias_flip: BiasFlipConfig | None = field(default_factory=BiasFlipConfig)

    def __post_init__(self):
        if self.v_ac_amplitude <= 0 or self.f_in <= 0 or self.C_P <= 0:
            raise ValueError("amplitude, frequency and C_P must be positive")
        if self.conduction_loss_coeff < 0 or self.dynamic_loss_coeff < 0:
            raise ValueError("loss coefficients must be >= 0")


def rectify(model: RectifierModel, r_load: float, duration: float) -> dict:
    """Steady-state rectifier operating point into a resistive load.

    Returns v_rect, output power, PCE and VCR plus the individual loss
    terms. ``duration`` must cover at least 10 AC cycles (the model is
    a per-cycle balance, so shorter runs have no meaning); energies in
    the result are scaled to it.
    """
    if r_load <= 0:
        raise ValueError("load resistance must be positive")
    if duration < 10.0 / model.f_in:
        raise ValueError("duration must cover at least 10 AC cycles")
    v_p = model.v_ac_amplitude
    f = model.f_in
    c_p = model.C_P
    eta_flip = model.bias_flip.flip_efficiency if model.bias_flip else 0.0

    # charge balance per half cycle: v/(2 f R) = 2 C_P (v_p - (1-eta) v)
    denom = 1.0 / (2.0 * f * r_load) + 2.0 * c_p * (1.0 - eta_flip)
    v_raw = 2.0 * c_p * v_p / denom
    v_cap = min(v_raw, v_p)
    # conduction drop: peak switch current ~ (pi/2) * I_avg
    v_rect = v_cap / (1.0 + (math.pi / 2.0) * model.conduction_loss_coeff / r_load)

    i_avg = v_rect / r_load
    p_out = v_rect * i_avg
    p_cond = (math.pi**2 / 8.0) * i_avg**2 * model.conduction_loss_coeff
    p_dyn = model.dynamic_loss_coeff * v_rect**2 * f
    p_cp = 4.0 * f * c_p * v_rect**2 * (1.0 - eta_flip)
    p_in = p_out + p_cond + p_dyn
    return {
        "v_rect": v_rect,
        "p_out": p_out,
        "pce": p_out / p_in if p_in > 0 else 0.0,
        "vcr": v_rect / v_p,
        "p_cond": p_cond,
        "p_dyn": p_dyn,
        "p_cp": p_cp,
        "e_out": p_out * duration,
    }


def matched_load_power(model: RectifierModel,
                       r_grid=None) -> tuple[float, float]:
    """(best load, power at it) over a log grid of load resistances."""
    if r_grid is None:
        r_grid = np.logspace(2, 6, 401)
    best_r, best_p = 0.0, -1.0
    for r in r_grid:
        p = rectify(model, float(r), 20.0 / model.f_in)["p_out"]
        if p > best_p:
            best_r, best_p = float(r), p
    return best_r, best_p


def bias_flip_timing(cfg: BiasFlipConfig, c_p: float, code: int) -> int:
    """One step of the 8-bit zero-current-switching timing loop.

    The flip interval should equal the LC half period pi*sqrt(L C_P);
    the register walks one LSB toward it and clamps at 0/255 without
    oscillating when the optimum is out of range.
    """
    t_opt = math.pi * math.sqrt(cfg.L_flip * c_p)
    t_now = code * TBP_LSB
    if abs(t_now - t_opt) <= TBP_LSB / 2.0:
        return code
    step = 1 if t_now < t_opt else -1
    return min(255, max(0, code + step))


# --------------------------------------------------------------------------
# Dual-path DC-DC converter
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DcDcConfig:
    """Static configuration of the dual-path converter.

    The four thresholds implement the hysteretic state machine: normal
    operation cycles between states 2 and 3 across (s23_lo, s23_hi),
    heavy-load operation dips to state 1 across (s12_lo, s12_hi). Both
    windows are V_H wide.
    """

    L_DC: float = 100e-6
    f_s: float = 50e3
    s23_hi: float = 2.1
    s23_lo: float = 1.9
    s12_hi: float = 1.8
    s12_lo: float = 1.6
    v_hyst: float = 0.2
    v_stor_nom: float = 3.3
    v_load_nom: float = 2.0
    t1_code: int = 39
    t2_lc_code: int = 0
    t2_cc_code: int = 0
    mppt_enabled: bool = True
    bc_power: float = 20e-3         # backup converter refill rate, watts
    v_stor_floor: float = 2.5       # storage voltage the BC will not drain below
    uv_fraction: float = 0.4        # undervoltage lockout vs open-circuit v_rect

    def __post_init__(self):
        if abs((self.s23_hi - self.s23_lo) - self.v_hyst) > 1e-12:
            raise ValueError("s23 thresholds must differ by v_hyst")
        if abs((self.s12_hi - self.s12_lo) - self.v_hyst) > 1e-12:
            raise ValueError("s12 thresholds must differ by v_hyst")
        for c in (self.t1_code, self.t2_lc_code, self.t2_cc_code):
            if not 0 <= c <= 63:
                raise ValueError("timing codes are 6-bit registers")

    def t1(self, code: int | None = None) -> float:
        return ((self.t1_code if code is None else code) + 1) * T1_LSB

    def t2(self, code: int) -> float:
        return code * T2_LSB


@dataclass
class PmuState:
    """Evolving node power state: converter state, rails, registers,
    energy ledger. The ledger closes exactly:
    e_in = e_load + e_stor + e_loss (e_stor is the net energy parcel
    flow into the two capacitors)."""

    state: int = 1
    v_rect: float = 0.0
    v_stor: float = 0.0
    v_load: float = 0.0
    c_rect: float = 10e-6
    c_stor: float = 11e-3
    c_load: float = 22e-6
    eta1: float = 0.72
    eta2: float = 0.80
    e_in: float = 0.0
    e_load: float = 0.0
    e_stor: float = 0.0
    e_loss: float = 0.0
    n_steps: int = 0
    n_state2: int = 0
    n_transitions: int = 0
    n_brownout: int = 0
    t1_code: int = 39
    t2_lc_code: int = 0
    t2_cc_code: int = 0
    t_bp_code: int = 0

    @property
    def alpha(self) -> float:
        """Fraction of switching periods spent in state 2."""
        return self.n_state2 / self.n_steps if self.n_steps else 0.0

    def ledger_residual(self) -> float:
        return self.e_in - self.e_load - self.e_stor - self.e_loss

    def copy(self) -> "PmuState":
        return replace(self)


@dataclass
class PmuTelemetry:
    t: np.ndarray
    state: np.ndarray
    v_load: np.ndarray
    v_stor: np.ndarray
    v_rect: np.ndarray

    def ripple_pp(self, settle_fraction: float = 0.5) -> float:
        tail = self.v_load[int(len(self.v_load) * settle_fraction):]
        return float(tail.max() - tail.min())

    def write_csv(self, path, alpha: float, eta_tot: float) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,state,v_rect,v_stor,v_load,alpha,eta_tot\n")
            for k in range(len(self.t)):
                fh.write(f"{self.t[k]!r},{int(self.state[k])},"
                         f"{self.v_rect[k]!r},{self.v_stor[k]!r},"
                         f"{self.v_load[k]!r},{alpha!r},{eta_tot!r}\n")


def run_dcdc(state: PmuState, cfg: DcDcConfig, p_harvest, i_load,
             n_steps: int, t_start: float = 0.0) -> PmuTelemetry:
    """Advance ``n_steps`` switching periods; mutates ``state``.

    ``p_harvest``/``i_load`` may be scalars or length-``n_steps``
    arrays. Telemetry holds post-step values for every period.
    """
    def as_series(x):
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 0:
            return np.full(n_steps, float(arr))
        if arr.shape != (n_steps,):
            raise ValueError(f"profile length {arr.shape} != {n_steps}")
        out = np.ascontiguousarray(arr)
        return out.copy() if not out.flags.writeable else out

    harvest = as_series(p_harvest)
    load = as_series(i_load)
    rec_state = np.empty(n_steps, dtype=np.int8)
    rec_v_load = np.empty(n_steps, dtype=np.float64)
    rec_v_stor = np.empty(n_steps, dtype=np.float64)

    (st, v_load, v_stor, n2, ntr, nbr, e_in, e_load, e_stor, e_loss) = \
        _kernels.dcdc_run(
            state.state, state.v_load, state.v_stor,
            harvest, load, 1.0 / cfg.f_s,
            state.eta1, state.eta2, state.c_load, state.c_stor,
            cfg.s23_hi, cfg.s23_lo, cfg.s12_hi, cfg.s12_lo,
            cfg.bc_power, cfg.v_stor_floor,
            rec_state, rec_v_load, rec_v_stor)

    state.state = int(st)
    state.v_load = v_load
    state.v_stor = v_stor
    state.n_state2 += n2
    state.n_transitions += ntr
    state.n_brownout += nbr
    state.n_steps += n_steps
    state.e_in += e_in
    state.e_load += e_load
    state.e_stor += e_stor
    state.e_loss += e_loss

    t = t_start + (np.arange(n_steps) + 1) / cfg.f_s
    v_rect = np.full(n_steps, state.v_rect)
    return PmuTelemetry(t, rec_state, rec_v_load, rec_v_stor, v_rect)


def dcdc_step(state: PmuState, cfg: DcDcConfig, p_harvest: float,
              i_load: float) -> PmuState:
    """One switching period; mutates and returns ``state``."""
    run_dcdc(state, cfg, p_harvest, i_load, 1)
    return state


# --------------------------------------------------------------------------
# Converter formulas and control loops
# --------------------------------------------------------------------------

def input_impedance(cfg: DcDcConfig, t1: float, t2: float) -> float:
    """DCM boost input impedance R_IN = 2 L / (t1^2 f_s) / (1 + t2/t1)."""
    if t1 <= 0 or t2 < 0:
        raise ValueError("need t1 > 0 and t2 >= 0")
    if t1 + t2 > 1.0 / cfg.f_s:
        raise ValueError("t1 + t2 exceeds the switching period")
    return (2.0 * cfg.L_DC / (t1**2 * cfg.f_s)) / (1.0 + t2 / t1)


def average_input_impedance(cfg: DcDcConfig, alpha: float, t1: float) -> float:
    """Duty-weighted harmonic mean of the LC and CC input impedances.

    Because both converters share t1, the composition collapses to
    2 L / (t1^2 f_s) independently of the duty split alpha.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if t1 <= 0:
        raise ValueError("t1 must be positive")
    r = 2.0 * cfg.L_DC / (t1**2 * cfg.f_s)
    return 1.0 / (alpha / r + (1.0 - alpha) / r)


def simulate_input_impedance(cfg: DcDcConfig, t1: float, t2: float,
                             v_rect: float, n_sub: int = 20000) -> float:
    """Oracle: R_IN from a finely sampled inductor current waveform.

    Integrates the DCM triangle numerically over one switching period
    and returns v_rect / mean(i_in). Used to cross-check
    :func:`input_impedance`.
    """
    period = 1.0 / cfg.f_s
    t = (np.arange(n_sub) + 0.5) * (period / n_sub)
    i = np.zeros(n_sub)
    rise = t < t1
    i[rise] = v_rect * t[rise] / cfg.L_DC
    i_pk = v_rect * t1 / cfg.L_DC
    fall = (t >= t1) & (t < t1 + t2)
    # discharge slope scaled so the current reaches zero at t1 + t2
    i[fall] = i_pk * (1.0 - (t[fall] - t1) / t2) if t2 > 0 else 0.0
    i_avg = float(np.mean(i))
    return v_rect / i_avg


def mppt_step(state: PmuState, cfg: DcDcConfig, v_rect_open: float) -> int:
    """One step of the 6-bit MPPT accumulator.

    Steps t1 so the loaded rectifier voltage approaches half the
    sampled open-circuit value (larger t1 -> lower input impedance ->
    lower v_rect). Disabled loops leave the code frozen.
    """
    if not cfg.mppt_enabled:
        return state.t1_code
    target = 0.5 * v_rect_open
    code = state.t1_code
    if state.v_rect > target:
        code = min(63, code + 1)
    elif state.v_rect < target:
        code = max(0, code - 1)
    state.t1_code = code
    return code


def undervoltage_lockout(cfg: DcDcConfig, v_rect: float,
                         v_rect_open: float) -> bool:
    return v_rect < cfg.uv_fraction * v_rect_open


def inductor_current_end(cfg: DcDcConfig, t1: float, t2: float,
                         v_in: float, v_out: float) -> float:
    """Inductor current remaining at the end of the discharge phase."""
    if v_out <= v_in:
        raise ValueError("boost requires v_out > v_in")
    return (v_in * t1 - (v_out - v_in) * t2) / cfg.L_DC


def zcs_step(state: PmuState, cfg: DcDcConfig, converter: str,
             i_l_end: float, v_in: float, v_out: float) -> int:
    """One step of a 6-bit ZCS accumulator for the LC or CC.

    Residual current at the end of the discharge phase means t2 is too
    short (step up); negative means the phase overran (step down). A
    residual within half a code step of zero is converged.
    """
    if converter == "lc":
        code = state.t2_lc_code
    elif converter == "cc":
        code = state.t2_cc_code
    else:
        raise ValueError("converter must be 'lc' or 'cc'")
    if v_out <= v_in:
        raise ValueError("boost requires v_out > v_in")
    half_lsb_current = (v_out - v_in) * T2_LSB / (2.0 * cfg.L_DC)
    if abs(i_l_end) > half_lsb_current:
        code = min(63, code + 1) if i_l_end > 0 else max(0, code - 1)
    if converter == "lc":
        state.t2_lc_code = code
    else:
        state.t2_cc_code = code
    return code


def end_to_end_pce(eta1: float, eta2: float, alpha: float) -> float:
    """Average end-to-end efficiency of the dual-path architecture."""
    for name, x in (("eta1", eta1), ("eta2", eta2), ("alpha", alpha)):
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"{name} must be in [0, 1]")
    return eta1 * alpha + eta1 * eta2 * (1.0 - alpha)


# --------------------------------------------------------------------------
# Switched-capacitor converters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScConverterModel:
    """PFM-regulated switched-capacitor rail.

    While clocking, the converter looks like an ideal ``ratio`` x
    ``v_in`` source behind the slow-switching-limit output resistance
    R_out = 1 / (gamma * f_clk * C_B); a hysteretic comparator gates
    the clock to hold ``target_v``.
    """

    ratio: float
    v_in: float
    target_v: float
    f_clk: float = 1e6
    C_B: float = 25e-12
    C_L: float = 50e-9
    hysteresis: float = 0.05
    gamma: float = 1.0

    def __post_init__(self):
        if self.ratio not in (1.0, 0.5, 1.0 / 3.0):
            raise ValueError("ratio must be 1/1, 1/2 or 1/3")
        if self.ratio * self.v_in <= self.target_v:
            raise ValueError("ratio * v_in must exceed the regulation target")
        if min(self.f_clk, self.C_B, self.C_L, self.hysteresis, self.gamma) <= 0:
            raise ValueError("converter parameters must be positive")

    @property
    def r_out(self) -> float:
        return 1.0 / (self.gamma * self.f_clk * self.C_B)

    @property
    def v_src(self) -> float:
        return self.ratio * self.v_in


def sc_converter_step(model: ScConverterModel, v_out: float, clocking: bool,
                      i_draw: float, dt: float) -> tuple[float, bool]:
    """One PFM regulation step; returns (new v_out, clocking flag)."""
    if dt > 1.0 / model.f_clk * (1 + 1e-9):
        raise ValueError("dt must not exceed one clock period")
    band = model.hysteresis / 2.0
    if clocking and v_out > model.target_v + band:
        clocking = False
    elif not clocking and v_out < model.target_v - band:
        clocking = True
    if clocking:
        i_chg = (model.v_src - v_out) / model.r_out
        v_out += (i_chg - i_draw) * dt / model.C_L
    else:
        v_out -= i_draw * dt / model.C_L
    return v_out, clocking


def sc_rise_time(model: ScConverterModel, frac: float = 0.9,
                 max_steps: int = 2_000_000) -> float:
    """Cold-start time for the rail to reach ``frac`` of its target."""
    dt = 1.0 / model.f_clk
    v, clocking = 0.0, False
    for k in range(max_steps):
        v, clocking = sc_converter_step(model, v, clocking, 0.0, dt)
        if v >= frac * model.target_v:
            return (k + 1) * dt
    raise RuntimeError("rail did not reach the target fraction")


def sc_steady_ripple(model: ScConverterModel, i_draw: float,
                     n_steps: int = 200_000) -> float:
    """Peak-to-peak output ripple under a constant draw."""
    dt = 1.0 / model.f_clk
    v, clocking = model.target_v, False
    hist = np.empty(n_steps)
    for k in range(n_steps):
        v, clocking = sc_converter_step(model, v, clocking, i_draw, dt)
        hist[k] = v
    tail = hist[n_steps // 2:]
    return float(tail.max() - tail.min())
