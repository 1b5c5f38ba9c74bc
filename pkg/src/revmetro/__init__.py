"""Time-reversal NOON-state phase estimation with Krotov-optimized state synthesis."""
from .hilbert import Space, fock_state, noon_state
from .dynamics import ControlledSystem, Drift, PulseSet, read_pulse, write_pulse
from .krotov import ControlProblem, KrotovConfig, optimize
from .metrology import ProtocolSpec, exact_protocol, sweep
from .loss import LossSpec, exact_adapted_protocol, loss_sweep

__version__ = "0.1.0"

__all__ = [
    "Space", "fock_state", "noon_state",
    "ControlledSystem", "Drift", "PulseSet", "read_pulse", "write_pulse",
    "ControlProblem", "KrotovConfig", "optimize",
    "ProtocolSpec", "exact_protocol", "sweep",
    "LossSpec", "exact_adapted_protocol", "loss_sweep",
]
