"""Exception types shared across the package."""


class SspoolError(Exception):
    """Base class for every error this package raises on purpose."""


class GraphBuildError(SspoolError):
    """Graph assembled with inconsistent shapes or bad arguments."""


class ContractError(SspoolError):
    """An operation was called outside its documented contract."""


class NumericError(SspoolError):
    """Evaluation produced non-finite values or degenerate numerics."""


class DataError(SspoolError):
    """Malformed external data: audio files, manifests, label files."""


class DegeneratePoolingError(NumericError):
    """An attention head has no frame close enough to carry any mass."""

    def __init__(self, head, max_log_kernel):
        self.head = head
        self.max_log_kernel = max_log_kernel
        super().__init__(
            f"attention head {head} is degenerate: max log-kernel over frames is "
            f"{max_log_kernel:.3f} (< -60); boundary mass never reaches this head"
        )
