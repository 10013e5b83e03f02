"""Hub/node measurement-cycle orchestration.

One cycle walks a node through power-up (with frequency tracking on
the hub side), an acknowledge on the uplink, a command on the
downlink, the actual guided-wave measurement, and the data upload.
Every phase advances a simulated clock and draws energy through the
node's PMU, so the resulting log carries both timing and an exact
energy ledger.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import channel, datalink, pmu, transceiver
from .scenario import PlateScenario
from .waveform import Waveform, read_binary, write_binary

PHASES = ("POWERING", "ACK", "COMMAND", "MEASURING", "UPLOADING", "SLEEP")

CMD_MAGIC = 0xA5
_MODES = ("pitch_catch", "pulse_echo")
F0_WIRE_UNIT = 500.0        # f0 encoded in 500 Hz steps
RECORD_WIRE_UNIT = 1e-6     # record length encoded in microseconds
F0_MIN, F0_MAX = 50e3, 2.5e6


class ProtocolError(RuntimeError):
    """A cycle failed; ``phase`` names where."""

    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase


@dataclass(frozen=True)
class HubCommand:
    node_id: str
    mode: str = "pitch_catch"
    f0: float = 300e3
    n_cycles: int = 5
    rx_gain_code: int = 8
    record_length: float = 400e-6

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        if not F0_MIN <= self.f0 <= F0_MAX:
            raise ValueError(f"f0 outside the transmitter band "
                             f"[{F0_MIN:g}, {F0_MAX:g}] Hz")
        if not 1 <= self.n_cycles <= 255:
            raise ValueError("n_cycles must fit one byte")
        if not 0 <= self.rx_gain_code <= 15:
            raise ValueError("rx_gain_code is a 4-bit value")
        if not 0 < self.record_length <= 65535e-6:
            raise ValueError("record_length must be in (0, 65.535 ms]")


def crc8(data: bytes, poly: int = 0x07, init: int = 0x00) -> int:
    crc = init
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = ((crc << 1) ^ poly) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
    return crc


def _bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8)).astype(np.int64)


def _bits_to_bytes(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def encode_command(cmd: HubCommand, scenario: PlateScenario) -> np.ndarray:
    """Fixed 10-byte frame, MSB first: magic, node index, mode, f0
    (uint16, 500 Hz units), n_cycles, gain code, record length (uint16,
    microseconds), CRC-8 (poly 0x07) over the first 9 bytes."""
    ids = [n.id for n in scenario.nodes]
    if cmd.node_id not in ids:
        raise ValueError(f"unknown node id {cmd.node_id!r}")
    idx = ids.index(cmd.node_id)
    f0_units = int(round(cmd.f0 / F0_WIRE_UNIT))
    rec_units = int(round(cmd.record_length / RECORD_WIRE_UNIT))
    if not 0 < f0_units <= 0xFFFF:
        raise ValueError("f0 not representable on the wire")
    if not 0 < rec_units <= 0xFFFF:
        raise ValueError("record_length not representable on the wire")
    body = bytes([
        CMD_MAGIC, idx, _MODES.index(cmd.mode),
        f0_units >> 8, f0_units & 0xFF,
        cmd.n_cycles, cmd.rx_gain_code,
        rec_units >> 8, rec_units & 0xFF,
    ])
    return _bytes_to_bits(body + bytes([crc8(body)]))


def decode_command(bits, scenario: PlateScenario) -> HubCommand:
    bits = np.asarray(bits, dtype=np.int64)
    if len(bits) != 80:
        raise ValueError(f"command frame must be 80 bits, got {len(bits)}")
    frame = _bits_to_bytes(bits)
    body, crc = frame[:9], frame[9]
    if crc8(body) != crc:
        raise ValueError("command CRC mismatch")
    if body[0] != CMD_MAGIC:
        raise ValueError("bad command magic")
    ids = [n.id for n in scenario.nodes]
    if body[1] >= len(ids):
        raise ValueError("node index out of range")
    return HubCommand(
        node_id=ids[body[1]],
        mode=_MODES[body[2]],
        f0=((body[3] << 8) | body[4]) * F0_WIRE_UNIT,
        n_cycles=body[5],
        rx_gain_code=body[6],
        record_length=((body[7] << 8) | body[8]) * RECORD_WIRE_UNIT,
    )


# --------------------------------------------------------------------------
# Data matrix
# --------------------------------------------------------------------------

@dataclass
class DataMatrix:
    """Pairwise record matrix: records[(tx, rx)] -> Waveform."""

    node_ids: tuple[str, ...]
    records: dict
    f0: float
    sample_rate: float
    timestamps: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def record(self, tx: str, rx: str) -> Waveform:
        return self.records[(tx, rx)]

    def off_diagonal_count(self) -> int:
        return sum(1 for (a, b) in self.records if a != b)

    def relabeled(self, mapping: dict) -> "DataMatrix":
        return DataMatrix(
            tuple(mapping[i] for i in self.node_ids),
            {(mapping[a], mapping[b]): w for (a, b), w in self.records.items()},
            self.f0, self.sample_rate,
            {mapping.get(k, k): v for k, v in self.timestamps.items()},
        )

    def save(self, directory) -> None:
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        index = {"node_ids": list(self.node_ids), "f0": self.f0,
                 "sample_rate": self.sample_rate,
                 "timestamps": {k: v for k, v in sorted(self.timestamps.items())},
                 "records": []}
        for (tx, rx) in sorted(self.records):
            fname = f"rec_{tx}_{rx}.shmw"
            write_binary(self.records[(tx, rx)], d / fname)
            index["records"].append({"tx": tx, "rx": rx, "file": fname})
        with open(d / "index.json", "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory) -> "DataMatrix":
        from pathlib import Path
        d = Path(directory)
        with open(d / "index.json", "r", encoding="utf-8") as fh:
            index = json.load(fh)
        records = {(r["tx"], r["rx"]): read_binary(d / r["file"])
                   for r in index["records"]}
        return cls(tuple(index["node_ids"]), records, index["f0"],
                   index["sample_rate"], index.get("timestamps", {}))


# --------------------------------------------------------------------------
# Frequency tracking
# --------------------------------------------------------------------------

def nmppt_search(scenario: PlateScenario, tx: str, rx: str,
                 f_lo: float, f_hi: float, coarse_points: int = 64,
                 refine_steps: int = 6, mode: str = "A0") -> float:
    """Coarse sweep plus local hill climb for the best power frequency."""
    sweep = channel.power_vs_frequency(scenario, tx, rx, f_lo, f_hi,
                                       coarse_points, mode)
    power = sweep[:, 1]
    if np.max(power) <= 0.0:
        raise ProtocolError("POWERING", "band yields zero power everywhere")
    f_best = float(sweep[int(np.argmax(power)), 0])
    p_best = float(np.max(power))
    step = (f_hi - f_lo) / (coarse_points - 1)

    def probe(f):
        if not f_lo <= f <= f_hi:
            return -1.0
        resp = channel.transfer_function(scenario, tx, rx, np.array([f]), mode)
        return float(np.abs(resp.H[0]) ** 2)

    for _ in range(refine_steps):
        step /= 2.0
        for cand in (f_best - step, f_best + step):
            p = probe(cand)
            if p > p_best:
                f_best, p_best = cand, p
    return f_best


def select_fsk_tone(scenario: PlateScenario, hub: str, node: str,
                    f_opt: float, spacing: float, mode: str = "A0",
                    max_steps: int = 8) -> float:
    """Pick the bit-0 tone for the downlink.

    Bit 1 rides the tracked optimum; bit 0 goes to the most attenuated
    neighbor tone within a few spacing steps, so the channel's own
    selectivity provides the AM depth for the envelope detector.
    """
    steps = np.arange(1, max_steps + 1)
    probe = np.concatenate([f_opt - steps * spacing, f_opt + steps * spacing])
    probe = np.sort(probe[probe > 0])
    resp = channel.transfer_function(scenario, hub, node, probe, mode)
    return float(resp.freqs[int(np.argmin(np.abs(resp.H)))])


# --------------------------------------------------------------------------
# Measurement cycle
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolParams:
    """Tunable constants of the cycle simulation (invented plumbing:
    the timing budget is not normative)."""

    carrier_amplitude: float = 30.0
    band: tuple[float, float] = (300e3, 500e3)
    mode: str = "A0"
    downlink_rate: float = 200.0
    fsk_spacing: float = 1e3
    uplink_rate: float = 10e3
    uplink_f0: float = 300e3
    powerup_timeout: float = 5.0
    ack_timeout: float = 0.5
    decode_retries: int = 3
    mppt_period_cycles: int = 64
    probe_time: float = 2e-3          # hub dwell per nMPPT probe
    i_idle: float = 20e-6             # node load current while powered
    i_measure: float = 2e-3           # load current during measurement
    adc_bits: int = 12
    ack_pattern: tuple[int, ...] = (1, 0, 1, 0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0)
    preamble: tuple[int, ...] = (1, 0, 1, 0, 1, 0, 1, 0)
    snr_db: float | None = None
    lrc_q: float = 5.0


@dataclass
class CycleEvent:
    t: float
    phase: str
    event: str
    energy_j: float = 0.0

    def as_dict(self) -> dict:
        return {"t": self.t, "phase": self.phase, "event": self.event,
                "energy_j": self.energy_j}


@dataclass
class MeasurementCycleLog:
    node_id: str
    f_opt: float
    events: list
    records: dict
    pmu_state: pmu.PmuState

    def phases(self) -> list[str]:
        seen = []
        for ev in self.events:
            if ev.event == "enter":
                seen.append(ev.phase)
        return seen

    def phase_energy(self, phase: str) -> float:
        return sum(ev.energy_j for ev in self.events
                   if ev.phase == phase and ev.event == "exit")

    def write_json(self, path) -> None:
        doc = {"node_id": self.node_id, "f_opt": self.f_opt,
               "events": [ev.as_dict() for ev in self.events],
               "ledger": {"e_in": self.pmu_state.e_in,
                          "e_load": self.pmu_state.e_load,
                          "e_stor": self.pmu_state.e_stor,
                          "e_loss": self.pmu_state.e_loss}}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


class NodeFsm:
    """Node-side state machine; transitions only along the cycle graph."""

    STATES = ("COLD", "POWERING", "READY", "ACK_SENT", "CONFIGURED",
              "MEASURING", "UPLOADING", "SLEEP")
    _EDGES = {
        ("COLD", "carrier"): "POWERING",
        ("POWERING", "regulated"): "READY",
        ("POWERING", "timeout"): "COLD",
        ("READY", "ack"): "ACK_SENT",
        ("READY", "timeout"): "COLD",
        ("ACK_SENT", "command"): "CONFIGURED",
        ("ACK_SENT", "timeout"): "COLD",
        ("CONFIGURED", "budget_ok"): "MEASURING",
        ("CONFIGURED", "defer"): "CONFIGURED",
        ("MEASURING", "done"): "UPLOADING",
        ("UPLOADING", "done"): "SLEEP",
        ("SLEEP", "carrier"): "POWERING",
    }

    def __init__(self):
        self.state = "COLD"
        self.history = ["COLD"]

    def fire(self, event: str) -> str:
        key = (self.state, event)
        if key not in self._EDGES:
            raise ProtocolError(self.state, f"undefined event {event!r}")
        self.state = self._EDGES[key]
        self.history.append(self.state)
        return self.state


def _quantize_record(w: Waveform, bits: int) -> tuple[np.ndarray, float]:
    """Uniform mid-rise quantization to the ADC resolution."""
    peak = float(np.max(np.abs(w.samples)))
    scale = peak if peak > 0 else 1.0
    q = np.round(w.samples / scale * (2 ** (bits - 1) - 1)).astype(np.int64)
    return q, scale


def _dequantize(q: np.ndarray, scale: float, bits: int, fs: float) -> Waveform:
    return Waveform(q / (2 ** (bits - 1) - 1) * scale, fs)


def _record_to_bits(q: np.ndarray, bits: int) -> np.ndarray:
    offset = q + 2 ** (bits - 1)
    out = np.zeros(len(q) * bits, dtype=np.int64)
    for b in range(bits):
        out[b::bits] = (offset >> (bits - 1 - b)) & 1
    return out


def _bits_to_record(stream: np.ndarray, bits: int) -> np.ndarray:
    n = len(stream) // bits
    vals = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        vals = (vals << 1) | stream[b::bits][:n]
    return vals - 2 ** (bits - 1)


class CycleRunner:
    """Simulates measurement cycles on one scenario."""

    def __init__(self, scenario: PlateScenario,
                 params: ProtocolParams | None = None,
                 dcdc: pmu.DcDcConfig | None = None):
        self.scenario = scenario
        self.params = params or ProtocolParams()
        self.dcdc = dcdc or pmu.DcDcConfig()
        self.hub_id = scenario.hub.id

    # -- link helpers ------------------------------------------------------

    def _downlink(self, bits: np.ndarray, f_opt: float, node_id: str,
                  tag: int) -> np.ndarray:
        p = self.params
        f_bit0 = select_fsk_tone(self.scenario, self.hub_id, node_id, f_opt,
                                 p.fsk_spacing, p.mode)
        cfg = datalink.DownlinkConfig(f_bit0=f_bit0,
                                      f_bit1=f_opt, bit_rate=p.downlink_rate,
                                      amplitude=p.carrier_amplitude)
        fs = 2.5 * max(cfg.f_bit0, cfg.f_bit1)
        tx_wave = datalink.bfsk_modulate(bits, cfg, fs)
        rx_wave = channel.propagate(self.scenario, self.hub_id, node_id,
                                    tx_wave, p.mode, snr_db=p.snr_db,
                                    noise_tag=tag)
        cdr = datalink.CdrConfig.for_rate(p.downlink_rate, f_opt)
        return datalink.cdr_demodulate(rx_wave, cdr, p.downlink_rate,
                                       n_bits=len(bits))

    def _group_delay(self, a: str, b: str, f0: float) -> float:
        pa = np.asarray(self.scenario.node(a).position)
        pb = np.asarray(self.scenario.node(b).position)
        d = float(np.hypot(*(pa - pb)))
        theta = float(np.arctan2(pb[1] - pa[1], pb[0] - pa[0]))
        v_g = channel.group_velocity(self.scenario.material, f0, theta,
                                     self.params.mode)
        return d / v_g

    def _uplink(self, bits: np.ndarray, node_id: str, tag: int,
                f_up: float | None = None) -> np.ndarray:
        p = self.params
        # the node transmits on its tracked optimum so the pulse rides
        # a strong region of the frequency-selective channel
        f0 = p.uplink_f0 if f_up is None else f_up
        cfg = datalink.UplinkConfig(f0=f0, bit_rate=p.uplink_rate)
        framed = np.concatenate([np.asarray(p.preamble, dtype=np.int64), bits])
        fs = 3.0 * f0
        tx_wave = datalink.ook_modulate(framed, cfg, fs)
        rx_wave = channel.propagate(self.scenario, node_id, self.hub_id,
                                    tx_wave, p.mode, snr_db=p.snr_db,
                                    noise_tag=tag)
        # the hub knows the node geometry and strips the flight time,
        # which brings symbol timing within the demodulator's capture
        trim = int(round(self._group_delay(node_id, self.hub_id, f0) * fs))
        aligned = Waveform(rx_wave.samples[trim:], fs)
        out = datalink.ook_demodulate(aligned, cfg, n_bits=len(framed))
        return out[len(p.preamble):]

    def _uplink_energy(self, n_bits: int, node_id: str,
                       f_up: float | None = None) -> float:
        # single-cycle pulse energy into the bridge load, per '1' symbol
        f0 = self.params.uplink_f0 if f_up is None else f_up
        load = transceiver.LrcLoad.for_resonance(
            f0, self.scenario.node(node_id).transducer.capacitance,
            self.params.lrc_q)
        v = transceiver.DEFAULT_LEVELS[-1]
        return n_bits * 0.5 * v**2 / load.R_eff / f0

    # -- power helpers -----------------------------------------------------

    def _harvest_power(self, node_id: str, f_opt: float,
                       state: pmu.PmuState) -> tuple[float, float]:
        """(harvest watts, loaded v_rect) at the node for the carrier."""
        p = self.params
        resp = channel.transfer_function(self.scenario, self.hub_id, node_id,
                                         np.array([f_opt]), p.mode)
        v_p = p.carrier_amplitude * float(np.abs(resp.H[0]))
        if v_p <= 0.0:
            return 0.0, 0.0
        node = self.scenario.node(node_id)
        model = pmu.RectifierModel(v_p, f_opt, C_P=node.transducer.capacitance)
        r_in = pmu.input_impedance(self.dcdc, self.dcdc.t1(state.t1_code),
                                   self.dcdc.t2(state.t2_lc_code))
        res = pmu.rectify(model, r_in, 20.0 / f_opt)
        if pmu.undervoltage_lockout(self.dcdc, res["v_rect"], v_p):
            return 0.0, res["v_rect"]
        return res["p_out"], res["v_rect"]

    def _power_until(self, state: pmu.PmuState, node_id: str, f_opt: float,
                     i_load: float, t: float, condition, timeout: float,
                     chunk: int = 256) -> float:
        """Advance the PMU until ``condition(state)`` or timeout."""
        deadline = t + timeout
        while t < deadline:
            p_h, v_rect = self._harvest_power(node_id, f_opt, state)
            state.v_rect = v_rect
            pmu.run_dcdc(state, self.dcdc, p_h, i_load, chunk, t_start=t)
            if self.dcdc.mppt_enabled and state.n_steps % self.params.mppt_period_cycles == 0:
                resp = channel.transfer_function(
                    self.scenario, self.hub_id, node_id,
                    np.array([f_opt]), self.params.mode)
                v_open = self.params.carrier_amplitude * float(np.abs(resp.H[0]))
                pmu.mppt_step(state, self.dcdc, v_open)
            t += chunk / self.dcdc.f_s
            if condition(state):
                return t
        raise _Timeout()

    # -- the cycle ---------------------------------------------------------

    def run_cycle(self, node_id: str, command: HubCommand,
                  state: pmu.PmuState | None = None,
                  peers: list[str] | None = None) -> MeasurementCycleLog:
        if command.node_id != node_id:
            raise ValueError("command addressed to a different node")
        scenario = self.scenario
        p = self.params
        fsm = NodeFsm()
        events: list[CycleEvent] = []
        state = state or self.fresh_pmu_state()
        t = 0.0

        def enter(phase):
            events.append(CycleEvent(t, phase, "enter"))

        def exit_(phase, e0):
            events.append(CycleEvent(t, phase, "exit", state.e_load - e0))

        # --- nMPPT + power-up ---
        fsm.fire("carrier")
        enter("POWERING")
        e0 = state.e_load
        f_opt = nmppt_search(scenario, self.hub_id, node_id, p.band[0],
                             p.band[1], mode=p.mode)
        t += p.probe_time * 64
        try:
            t = self._power_until(
                state, node_id, f_opt, p.i_idle, t,
                lambda s: s.v_load >= self.dcdc.s12_hi, p.powerup_timeout)
        except _Timeout:
            fsm.fire("timeout")
            raise ProtocolError("POWERING", f"power-up timeout for {node_id!r}")
        fsm.fire("regulated")
        exit_("POWERING", e0)

        # --- ACK uplink ---
        enter("ACK")
        e0 = state.e_load
        ack_bits = np.asarray(p.ack_pattern, dtype=np.int64)
        t_ack = (len(ack_bits) + len(p.preamble)) / p.uplink_rate
        if t_ack > p.ack_timeout:
            raise ProtocolError("ACK", "ack longer than its timeout")
        rx_ack = self._uplink(ack_bits, node_id, tag=1, f_up=f_opt)
        if not np.array_equal(rx_ack, ack_bits):
            fsm.fire("timeout")
            raise ProtocolError("ACK", f"hub did not decode ACK from {node_id!r}")
        self._drain(state, node_id, f_opt, self._uplink_energy(
            int(ack_bits.sum()) + sum(p.preamble), node_id), t_ack)
        t += t_ack
        fsm.fire("ack")
        exit_("ACK", e0)

        # --- command downlink ---
        enter("COMMAND")
        e0 = state.e_load
        cmd_bits = encode_command(command, scenario)
        framed = np.concatenate([np.asarray(p.preamble, dtype=np.int64),
                                 cmd_bits])
        decoded = None
        for attempt in range(p.decode_retries):
            rx_bits = self._downlink(framed, f_opt, node_id, tag=2 + attempt)
            try:
                decoded = decode_command(rx_bits[len(p.preamble):], scenario)
                break
            except ValueError:
                continue
        if decoded is None:
            fsm.fire("timeout")
            raise ProtocolError(
                "COMMAND", f"downlink decode failed after "
                f"{p.decode_retries} attempts")
        t_cmd = len(framed) / p.downlink_rate
        self._drain(state, node_id, f_opt, 0.0, t_cmd)
        t += t_cmd
        fsm.fire("command")
        exit_("COMMAND", e0)

        # --- measurement ---
        enter("MEASURING")
        e0 = state.e_load
        # drive synthesized finely; records decimate to the ADC rate
        decim = 3
        fs_meas = 8.0 * decoded.f0
        fs_drive = decim * fs_meas
        burst = transceiver.synthesize_burst(
            transceiver.PulseSpec(decoded.f0, decoded.n_cycles), fs_drive)
        load = transceiver.LrcLoad.for_resonance(
            decoded.f0, scenario.node(node_id).transducer.capacitance, p.lrc_q)
        drive = transceiver.apply_lrc(burst, load)
        e_burst = burst.energy() / load.R_eff
        e_meas = e_burst + p.i_measure * self.dcdc.v_load_nom * decoded.record_length

        # defer until the storage reserve covers the budget not met live
        p_h, _ = self._harvest_power(node_id, f_opt, state)
        needed = max(0.0, e_meas - p_h * decoded.record_length)
        if self._storage_reserve(state) < needed:
            fsm.fire("defer")
            try:
                t = self._power_until(
                    state, node_id, f_opt, p.i_idle, t,
                    lambda s: self._storage_reserve(s) >= needed,
                    p.powerup_timeout)
            except _Timeout:
                raise ProtocolError("MEASURING",
                                    "storage never reached the energy budget")
            events.append(CycleEvent(t, "MEASURING", "deferred"))
        fsm.fire("budget_ok")

        records = {}
        n_rec = max(int(round(decoded.record_length * fs_meas)), 8)
        if decoded.mode == "pitch_catch":
            rx_nodes = peers if peers is not None else \
                [n.id for n in scenario.nodes
                 if n.id not in (node_id, self.hub_id)]
            for rx in rx_nodes:
                rec = channel.propagate(scenario, node_id, rx, drive, p.mode,
                                        snr_db=p.snr_db, noise_tag=10)
                records[rx] = self._trim(
                    Waveform(rec.samples[::decim], fs_meas), n_rec)
        else:
            rec = channel.propagate(scenario, node_id, node_id, drive, p.mode,
                                    snr_db=p.snr_db, noise_tag=10)
            # duplexer dead time: skip two burst durations of ring-down
            dead = int(round(2 * burst.duration * fs_meas))
            samples = rec.samples[::decim][dead:dead + n_rec]
            records[node_id] = Waveform(samples, fs_meas,
                                        t0=dead / fs_meas)
        t_meas = decoded.record_length + 2 * burst.duration
        self._drain(state, node_id, f_opt, e_burst,
                    max(t_meas, 1.0 / self.dcdc.f_s), i_extra=p.i_measure)
        t += t_meas
        if state.v_load < self.dcdc.s12_lo:
            raise ProtocolError("MEASURING", "load rail collapsed during "
                                             "the measurement")
        fsm.fire("done")
        exit_("MEASURING", e0)

        # --- upload ---
        enter("UPLOADING")
        e0 = state.e_load
        uploaded = {}
        for rx in sorted(records):
            q, scale = _quantize_record(records[rx], p.adc_bits)
            payload = _record_to_bits(q, p.adc_bits)
            rx_payload = self._uplink(payload, node_id, tag=20, f_up=f_opt)
            if not np.array_equal(rx_payload, payload):
                raise ProtocolError("UPLOADING",
                                    f"bit errors uploading record for {rx!r}")
            vals = _bits_to_record(rx_payload, p.adc_bits)
            uploaded[(node_id, rx)] = _dequantize(vals, scale, p.adc_bits,
                                                  records[rx].sample_rate)
            t_up = (len(payload) + len(p.preamble)) / p.uplink_rate
            self._drain(state, node_id, f_opt, self._uplink_energy(
                int(payload.sum()) + sum(p.preamble), node_id), t_up)
            t += t_up
        fsm.fire("done")
        exit_("UPLOADING", e0)

        enter("SLEEP")
        return MeasurementCycleLog(node_id, f_opt, events, uploaded, state)

    # -- small helpers -------------------------------------------------

    def fresh_pmu_state(self) -> pmu.PmuState:
        return pmu.PmuState(state=1, v_load=0.0,
                            v_stor=self.dcdc.v_stor_floor,
                            t1_code=self.dcdc.t1_code,
                            t2_lc_code=self.dcdc.t2_lc_code,
                            t2_cc_code=self.dcdc.t2_cc_code)

    def _storage_reserve(self, state: pmu.PmuState) -> float:
        return 0.5 * state.c_stor * max(
            0.0, state.v_stor**2 - self.dcdc.v_stor_floor**2)

    def _trim(self, w: Waveform, n: int) -> Waveform:
        samples = w.samples[:n]
        if len(samples) < n:
            samples = np.concatenate([samples, np.zeros(n - len(samples))])
        return Waveform(samples, w.sample_rate, w.t0)

    def _drain(self, state: pmu.PmuState, node_id: str, f_opt: float,
               energy: float, duration: float, i_extra: float = 0.0) -> None:
        """Run the PMU across a phase, drawing phase energy + currents."""
        steps = max(int(round(duration * self.dcdc.f_s)), 1)
        i_eq = (self.params.i_idle + i_extra
                + energy / max(self.dcdc.v_load_nom, 1e-9) / (steps / self.dcdc.f_s))
        p_h, v_rect = self._harvest_power(node_id, f_opt, state)
        state.v_rect = v_rect
        pmu.run_dcdc(state, self.dcdc, p_h, i_eq, steps)


class _Timeout(Exception):
    pass


def collect_data_matrix(scenario: PlateScenario, command_template: HubCommand,
                        params: ProtocolParams | None = None,
                        node_ids: list[str] | None = None) -> DataMatrix:
    """Round-robin collection: every sensor transmits once, all other
    sensors record. Any cycle failure aborts with the partial matrix
    attached to the error."""
    runner = CycleRunner(scenario, params)
    ids = node_ids or [n.id for n in scenario.sensors]
    if len(ids) < 2:
        raise ValueError("need at least two sensor nodes")
    records: dict = {}
    timestamps: dict = {}
    for tx in ids:
        cmd = replace(command_template, node_id=tx)
        try:
            log = runner.run_cycle(tx, cmd,
                                   peers=[i for i in ids if i != tx])
        except ProtocolError as exc:
            exc.partial = DataMatrix(tuple(ids), records, command_template.f0,
                                     8.0 * command_template.f0, timestamps)
            raise
        records.update(log.records)
        timestamps[tx] = log.events[-1].t
    return DataMatrix(tuple(ids), records, command_template.f0,
                      8.0 * command_template.f0, timestamps)
