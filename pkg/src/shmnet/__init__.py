"""shmnet: signal-level simulator for ultrasonically coupled SHM networks.

Subpackages follow the processing chain: ``scenario`` describes the
plate world, ``channel`` propagates guided waves across it,
``transceiver`` synthesizes and receives measurement bursts, ``pmu``
models the harvesting power chain, ``datalink`` carries bits over the
acoustic links, ``protocol`` orchestrates full measurement cycles, and
``localization`` turns record matrices into damage maps.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend  # noqa: F401
from .scenario import (  # noqa: F401
    DamageSpec,
    MaterialModel,
    NodeSpec,
    PlateScenario,
    TransducerSpec,
    load_builtin,
    load_scenario,
    spatial_grid,
    validate,
)
from .waveform import Waveform  # noqa: F401
