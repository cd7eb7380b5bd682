"""Two-station Bell experiment simulator and offline coincidence analysis."""
from .analysis import (ChshEstimator, ChshResult, CorrelationResult, SinusoidFit, SinusoidFitter, chsh,
                       correlation, fit_sinusoid, no_signaling_check)
from .coincidence import (ClockOffsetEstimator, CoincidenceCounter, CoincidenceTable, NoPeakError,
                          OffsetEstimate, match_coincidences, offset_histogram, recover_offset)
from .experiment import ExperimentConfig, analyze_streams, load_config, run_scan, simulate
from .locality import Geometry, LocalityReport, MeasurementBudget, audit, audit_streams
from .models import DeterministicLHV, DetectionLoopholeLHV, QuantumModel, get_model, sample_ensemble
from .source import EmissionConfig, EntangledStateParams, emit_pairs, outcome_probabilities, sample_joint_outcome
from .station import ClockModel, Station, StationConfig
from .tagstream import StreamHeader, TagStream, load_stream, read_stream, write_stream

__version__ = "0.1.0"
