"""Pure-Python reference implementation of the hot kernels.

This module is the behavioral reference; the Cython twin in
``_native.pyx`` mirrors the arithmetic expression for expression so the
two backends produce bit-identical results.
"""

import math

import numpy as np


def dcdc_run(state, v_load, v_stor,
             harvest, i_load, t_s,
             eta1, eta2, c_load, c_stor,
             s23_hi, s23_lo, s12_hi, s12_lo,
             bc_power, v_stor_floor,
             rec_state, rec_v_load, rec_v_stor):
    """Advance the dual-path converter state machine one switching
    period per element of ``harvest``/``i_load``.

    Per step: (1) the state is updated from the load voltage against
    the hysteretic thresholds; (2) the harvested energy parcel is
    routed (state 2: to the load rail, state 3: to storage, state 1:
    to the load rail while the backup converter also refills it from
    storage); (3) the load current sink drains the load rail. Energy
    parcels are moved with exact-square-root capacitor updates so the
    ledger closes to rounding error.

    Records post-step (state, v_load, v_stor) into the provided arrays
    and returns the final state plus ledger totals.
    """
    n = len(harvest)
    e_in = 0.0
    e_load = 0.0
    e_stor = 0.0
    e_loss = 0.0
    n_state2 = 0
    n_transitions = 0
    n_brownout = 0

    for i in range(n):
        v = v_load
        s = state
        if s == 2:
            if v >= s23_hi:
                s = 3
            elif v <= s12_lo:
                s = 1
        elif s == 3:
            if v <= s12_lo:
                s = 1
            elif v <= s23_lo:
                s = 2
        else:
            if v >= s12_hi:
                s = 2
        if s != state:
            n_transitions += 1
        state = s

        e_h = harvest[i] * t_s
        e_in += e_h
        routed = eta1 * e_h
        e_loss += e_h - routed
        e_stor += routed
        if state == 3:
            v_stor = math.sqrt(v_stor * v_stor + 2.0 * routed / c_stor)
        else:
            v_load = math.sqrt(v_load * v_load + 2.0 * routed / c_load)

        if state == 1:
            avail = 0.5 * c_stor * (v_stor * v_stor - v_stor_floor * v_stor_floor)
            if avail < 0.0:
                avail = 0.0
            draw = bc_power * t_s
            if draw > avail:
                draw = avail
            if draw > 0.0:
                v_stor = math.sqrt(v_stor * v_stor - 2.0 * draw / c_stor)
                delivered = eta2 * draw
                v_load = math.sqrt(v_load * v_load + 2.0 * delivered / c_load)
                e_loss += draw - delivered
                e_stor += delivered - draw

        e_l = v_load * i_load[i] * t_s
        e_cap = 0.5 * c_load * v_load * v_load
        if e_l >= e_cap:
            e_l = e_cap
            v_load = 0.0
            n_brownout += 1
        else:
            v_load = math.sqrt(v_load * v_load - 2.0 * e_l / c_load)
        e_load += e_l
        e_stor -= e_l

        if state == 2:
            n_state2 += 1
        rec_state[i] = state
        rec_v_load[i] = v_load
        rec_v_stor[i] = v_stor

    return (state, v_load, v_stor, n_state2, n_transitions, n_brownout,
            e_in, e_load, e_stor, e_loss)


def das_accumulate(envelopes, tau_samples, out):
    """Sum linearly interpolated envelope values into the image grid.

    ``envelopes`` is (n_pairs, n_t); ``tau_samples`` is (n_pairs, n_px)
    holding the arrival delay of each pixel in fractional samples. Out
    of range delays contribute nothing and are counted. ``out`` must be
    a zeroed (n_px,) array; pairs are accumulated in order so the
    reduction is deterministic.
    """
    n_pairs, n_t = envelopes.shape
    n_clipped = 0
    for p in range(n_pairs):
        env = envelopes[p]
        ti = tau_samples[p]
        idx = np.floor(ti).astype(np.int64)
        valid = (ti >= 0.0) & (ti < n_t - 1)
        n_clipped += int(np.count_nonzero(~valid))
        idx_c = np.where(valid, idx, 0)
        frac = ti - idx_c
        val = env[idx_c] * (1.0 - frac) + env[idx_c + 1] * frac
        out += np.where(valid, val, 0.0)
    return n_clipped
