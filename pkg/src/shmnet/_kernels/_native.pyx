# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of ``_fallback``; same arithmetic, same order.

Keep every floating-point expression identical to the reference so the
backends stay bit-for-bit interchangeable (the build disables FP
contraction for the same reason).
"""

from libc.math cimport floor, sqrt

import numpy as np

cimport numpy as cnp

cnp.import_array()


def dcdc_run(int state, double v_load, double v_stor,
             double[::1] harvest, double[::1] i_load, double t_s,
             double eta1, double eta2, double c_load, double c_stor,
             double s23_hi, double s23_lo, double s12_hi, double s12_lo,
             double bc_power, double v_stor_floor,
             signed char[::1] rec_state, double[::1] rec_v_load,
             double[::1] rec_v_stor):
    cdef Py_ssize_t n = harvest.shape[0]
    cdef Py_ssize_t i
    cdef double e_in = 0.0, e_load = 0.0, e_stor = 0.0, e_loss = 0.0
    cdef long n_state2 = 0, n_transitions = 0, n_brownout = 0
    cdef int s
    cdef double v, e_h, routed, avail, draw, delivered, e_l, e_cap

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
            v_stor = sqrt(v_stor * v_stor + 2.0 * routed / c_stor)
        else:
            v_load = sqrt(v_load * v_load + 2.0 * routed / c_load)

        if state == 1:
            avail = 0.5 * c_stor * (v_stor * v_stor - v_stor_floor * v_stor_floor)
            if avail < 0.0:
                avail = 0.0
            draw = bc_power * t_s
            if draw > avail:
                draw = avail
            if draw > 0.0:
                v_stor = sqrt(v_stor * v_stor - 2.0 * draw / c_stor)
                delivered = eta2 * draw
                v_load = sqrt(v_load * v_load + 2.0 * delivered / c_load)
                e_loss += draw - delivered
                e_stor += delivered - draw

        e_l = v_load * i_load[i] * t_s
        e_cap = 0.5 * c_load * v_load * v_load
        if e_l >= e_cap:
            e_l = e_cap
            v_load = 0.0
            n_brownout += 1
        else:
            v_load = sqrt(v_load * v_load - 2.0 * e_l / c_load)
        e_load += e_l
        e_stor -= e_l

        if state == 2:
            n_state2 += 1
        rec_state[i] = <signed char> state
        rec_v_load[i] = v_load
        rec_v_stor[i] = v_stor

    return (state, v_load, v_stor, int(n_state2), int(n_transitions),
            int(n_brownout), e_in, e_load, e_stor, e_loss)


def das_accumulate(double[:, ::1] envelopes, double[:, ::1] tau_samples,
                   double[::1] out):
    cdef Py_ssize_t n_pairs = envelopes.shape[0]
    cdef Py_ssize_t n_t = envelopes.shape[1]
    cdef Py_ssize_t n_px = tau_samples.shape[1]
    cdef Py_ssize_t p, j
    cdef long n_clipped = 0
    cdef double ti, frac, val
    cdef Py_ssize_t idx

    for p in range(n_pairs):
        for j in range(n_px):
            ti = tau_samples[p, j]
            if ti >= 0.0 and ti < n_t - 1:
                idx = <Py_ssize_t> floor(ti)
                frac = ti - idx
                val = envelopes[p, idx] * (1.0 - frac) \
                    + envelopes[p, idx + 1] * frac
                out[j] += val
            else:
                n_clipped += 1
    return int(n_clipped)
