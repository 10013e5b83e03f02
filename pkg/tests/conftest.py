import numpy as np
import pytest

import shmnet
from shmnet import channel, localization, protocol, transceiver


@pytest.fixture(scope="session")
def testbed():
    return shmnet.load_builtin("testbed")


@pytest.fixture(scope="session")
def testbed_damage():
    return shmnet.load_builtin("testbed_damage")


@pytest.fixture(scope="session")
def testbed_aniso():
    return shmnet.load_builtin("testbed_aniso")


@pytest.fixture(scope="session")
def minimal():
    return shmnet.load_builtin("minimal")


F0 = 300e3
FS_MEAS = 8 * F0
DECIM = 3
N_REC = 960


@pytest.fixture(scope="session")
def measurement_drive():
    """The transmit waveform used for direct-channel record generation."""
    burst = transceiver.synthesize_burst(transceiver.PulseSpec(F0, 5),
                                         DECIM * FS_MEAS)
    load = transceiver.LrcLoad.for_resonance(F0, 100e-12, 5.0)
    return transceiver.apply_lrc(burst, load)


def collect_records(scenario, drive):
    """Pairwise sensor records via the channel (no protocol overhead)."""
    ids = [n.id for n in scenario.sensors]
    recs = {}
    for i in ids:
        for j in ids:
            if i == j:
                continue
            r = channel.propagate(scenario, i, j, drive, "A0")
            recs[(i, j)] = shmnet.Waveform(r.samples[::DECIM][:N_REC], FS_MEAS)
    return recs


@pytest.fixture(scope="session")
def records_baseline(testbed, measurement_drive):
    return collect_records(testbed, measurement_drive)


@pytest.fixture(scope="session")
def records_damaged(testbed_damage, measurement_drive):
    return collect_records(testbed_damage, measurement_drive)


@pytest.fixture(scope="session")
def records_aniso_baseline(testbed_aniso, measurement_drive):
    return collect_records(testbed_aniso.without_damage(), measurement_drive)


@pytest.fixture(scope="session")
def records_aniso_damaged(testbed_aniso, measurement_drive):
    return collect_records(testbed_aniso, measurement_drive)


@pytest.fixture(scope="session")
def protocol_matrices(testbed, testbed_damage):
    """Baseline and damaged matrices collected through the full protocol."""
    cmd = protocol.HubCommand(node_id="n1", f0=F0, record_length=400e-6)
    baseline = protocol.collect_data_matrix(testbed, cmd)
    current = protocol.collect_data_matrix(testbed_damage, cmd)
    return baseline, current
