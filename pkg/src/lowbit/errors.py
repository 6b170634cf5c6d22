"""Exception types raised across the toolkit."""


class LowbitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(LowbitError):
    """Tensor shapes are incompatible for the requested operation."""


class GeometryError(LowbitError):
    """Convolution/pooling geometry is invalid (bad stride/pad/output dims)."""


class LabelError(LowbitError):
    """A class label lies outside [0, num_classes)."""


class GraphError(LowbitError):
    """Invalid backward call: non-scalar loss or a cyclic computation graph."""


class OptimizerStateError(LowbitError):
    """Optimizer invoked with missing gradients or mismatched buffers."""


class InputError(LowbitError):
    """An input value violates an operation's domain (e.g. empty batch)."""


class DegenerateScaleError(LowbitError):
    """Weight quantizer scale collapsed to zero (all-zero weight tensor)."""


class SpecError(LowbitError):
    """Inconsistent model specification."""


class MaskError(LowbitError):
    """Precision mask does not match the model's fragment list."""


class ExclusionError(LowbitError):
    """Attempt to quantize a fragment that is pinned to full precision."""


class TapError(LowbitError):
    """Hint tap position does not index an existing fragment."""


class ScheduleError(LowbitError):
    """Invalid bit-width schedule (non-decreasing sequence, k >= K, ...)."""


class HintError(LowbitError):
    """Teacher/student hint feature maps cannot be paired."""


class DistributionError(LowbitError):
    """A probability-vector argument is not a valid distribution."""


class PairingError(LowbitError):
    """Two inputs that must correspond do not (counts, class dims)."""


class CorruptFileError(LowbitError):
    """A dataset file has an impossible size or structure."""


class CorruptLabelError(LowbitError):
    """A dataset record carries an out-of-range label byte."""


class FormatError(LowbitError):
    """A dataset file has a wrong magic number or header."""


class ConfigError(LowbitError):
    """Experiment config contains an unknown key or a bad value."""


class CheckpointError(LowbitError):
    """Checkpoint file is truncated, corrupt, or of an unknown version."""


class ReportParseError(LowbitError):
    """A metrics CSV handed to the report generator is malformed."""
