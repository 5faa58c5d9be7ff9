"""Exception hierarchy shared across the package."""


class PsgDetectError(Exception):
    """Base class for all package errors."""


# --- EDF / annotations -------------------------------------------------------
class EdfError(PsgDetectError):
    pass


class MalformedHeader(EdfError):
    pass


class UnsupportedVariant(EdfError):
    pass


class UnknownLabel(EdfError):
    pass


class TruncatedData(EdfError):
    pass


class MissingChannel(EdfError):
    pass


class RateMismatch(EdfError):
    pass


class LengthMismatch(EdfError):
    pass


class AnnotationError(PsgDetectError):
    pass


class UnknownClassLabel(AnnotationError):
    pass


class NegativeDuration(AnnotationError):
    pass


# --- DSP ---------------------------------------------------------------------
class DspError(PsgDetectError):
    pass


class InvalidCutoff(DspError):
    pass


class SignalTooShort(DspError):
    pass


class ZeroRate(DspError):
    pass


class ConstantChannel(DspError):
    pass


# --- autodiff ----------------------------------------------------------------
class ShapeMismatch(PsgDetectError, ValueError):
    pass


class DegenerateVariance(PsgDetectError):
    pass


class EmptyTargetSet(PsgDetectError):
    pass


class CheckpointError(PsgDetectError):
    pass


# --- model / detection -------------------------------------------------------
class InvalidConfig(PsgDetectError, ValueError):
    pass


class NonDividing(PsgDetectError, ValueError):
    pass


class EmptyInterval(PsgDetectError, ValueError):
    pass


class RecordTooShort(PsgDetectError):
    pass


# --- sampling / training -----------------------------------------------------
class NoEventOfClass(PsgDetectError):
    def __init__(self, k: int, record_ids=()):
        self.k = k
        self.record_ids = list(record_ids)
        ids = ", ".join(map(str, self.record_ids)) or "<none>"
        super().__init__(f"no events of class {k} in records: {ids}")


class ExhaustedAttempts(PsgDetectError):
    pass


class NonFiniteGradient(PsgDetectError, FloatingPointError):
    pass


class NonFiniteLoss(PsgDetectError, FloatingPointError):
    pass


# --- synthetic data ----------------------------------------------------------
class InfeasibleRates(PsgDetectError, ValueError):
    pass
