"""Exception types raised across the package."""


class SiamSearchError(Exception):
    """Base class for all package errors."""


class CorpusError(SiamSearchError, ValueError):
    pass


class NotFound(SiamSearchError, LookupError):
    pass


class Unsupported(SiamSearchError):
    pass


class DegenerateVector(SiamSearchError, ValueError):
    """Raised when a cosine is requested for a zero-norm vector."""


class EmptyQuery(SiamSearchError, ValueError):
    pass


class CheckpointError(SiamSearchError):
    pass


class IndexMismatch(SiamSearchError):
    """Index was built with a different model or layer than the one supplied."""


class TrainingDiverged(SiamSearchError, FloatingPointError):
    def __init__(self, message: str, batch_ids: list[str]):
        super().__init__(f"{message}; offending batch ids: {batch_ids}")
        self.batch_ids = batch_ids
