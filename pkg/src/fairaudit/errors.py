"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class FairAuditError(Exception):
    exit_code = 4


class ConfigError(FairAuditError):
    exit_code = 2


class CalibrationError(ConfigError):
    """Target budget is unreachable inside the noise bracket."""

    def __init__(self, message, eps_range=None):
        super().__init__(message)
        self.eps_range = eps_range


class DataError(FairAuditError):
    exit_code = 3


class FormatError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class ContractError(FairAuditError, ValueError):
    """Caller violated a shape or precondition contract."""

    exit_code = 4


class RoundFailure(FairAuditError):
    exit_code = 4

    def __init__(self, message, round_index, seed):
        super().__init__(message)
        self.round_index = round_index
        self.seed = seed


class TrainingDiverged(FairAuditError):
    exit_code = 4
