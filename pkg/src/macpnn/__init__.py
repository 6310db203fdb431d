"""Progressive LSTM columns with INT8-frozen history, and mutual assisted
learning across a small network of devices facing drifting streams."""

from .cpnn import CpnnModel
from .errors import ConfigurationError, ContractError, NumericalError, UndefinedMetricError
from .mal import CommLedger, DeviceState, MalConfig, run_network, run_standalone
from .metrics import balanced_accuracy, cohen_kappa, prequential_curves, start_end_summary
from .quantize import model_size_bytes, quantize_tensor
from .streams import Hyperparameters, ScenarioConfig, build_scenario

__version__ = "0.1.0"
