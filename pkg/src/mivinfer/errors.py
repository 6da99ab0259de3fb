"""Exception hierarchy shared by every module.

Each error carries the CLI exit code it maps to and a short remediation hint.
"""

from __future__ import annotations


class MivError(Exception):
    exit_code = 4
    module = "mivinfer"
    hint = ""

    def __init__(self, message: str = "", **context):
        super().__init__(message)
        self.context = context

    def to_dict(self) -> dict:
        out = {
            "error": type(self).__name__,
            "module": self.module,
            "message": str(self),
            "hint": self.hint,
        }
        if self.context:
            out["context"] = {k: _jsonable(v) for k, v in self.context.items()}
        return out


def _jsonable(v):
    if isinstance(v, (str, int, float, bool)) or v is None:
        return v
    return str(v)


class ConfigError(MivError):
    exit_code = 2
    module = "cli"
    hint = "check the JSON config and command-line flags"


class DataError(MivError):
    exit_code = 3
    module = "dataset"
    hint = "check the input CSV"


class NumericalError(MivError):
    exit_code = 4


# dataset
class MissingColumn(DataError):
    hint = "add the column to the CSV or fix the schema mapping"


class NonBinaryColumn(DataError):
    hint = "treatment and instrument columns must contain only 0 and 1"


class NonFiniteValue(DataError):
    hint = "remove rows with missing, NaN or infinite values; no imputation is done"


class NegativeOutcomeForLog1p(DataError):
    hint = "log1p transform needs nonnegative outcomes; use transform=none"


class NoTreatedUnits(DataError):
    hint = "the functional is defined on the treated; the data has no A=1 rows"


class InvalidFoldCount(ConfigError):
    module = "dataset"
    hint = "use 2 <= K <= n"


class EmptyFold(DataError):
    module = "eif"
    hint = "reduce K or supply more rows"


# moments
class UnboundedCustomMoment(NumericalError):
    module = "moments"
    hint = "raise the declared bound or rescale the moment function"


class NotDecomposable(ConfigError):
    module = "moments"
    hint = "custom and quantile moments are refit per grid point"


# nuisance
class DegenerateArm(DataError):
    module = "nuisance"
    hint = "each training split needs both instrument arms and both treatment values"


class LearnerDivergence(NumericalError):
    module = "nuisance"
    hint = "increase the L2 penalty or switch learner"


class BetaNotOnGrid(NumericalError):
    module = "nuisance"
    hint = "evaluate at a beta the nuisances were fitted for"


# eif
class ZeroDeltaA(NumericalError):
    module = "eif"
    hint = "the instrument has no effect on treatment at some covariate value"


# inference
class DegenerateVariance(NumericalError):
    module = "inference"
    hint = "the estimated variance is zero; check for constant data"


class SingularSigma(NumericalError):
    module = "inference"
    hint = "the covariance of the moment vector is not invertible at this beta"


class EmptyConfidenceSet(NumericalError):
    module = "inference"
    hint = "widen the grid or raise the level"


# sim
class InvalidGlim(ConfigError):
    module = "sim"
    hint = "g(z) * u must stay inside [0, 1] on the U support"


class WeakInstrumentWarning(UserWarning):
    """Raised through ``warnings`` when |lam1 - lam0| hits the clipping floor."""
