"""Exception types shared across the package."""


class ShelfSearchError(Exception):
    """Base class for package errors."""


class SamplingExhausted(ShelfSearchError):
    """Scenario placement failed within the attempt budget."""


class EpisodeFinished(ShelfSearchError):
    """step() was called on an environment whose episode already ended."""


class DegenerateHeatmap(ShelfSearchError):
    """Heat-map has no usable mass (max value below threshold)."""


class RemoteUnavailable(ShelfSearchError):
    """The remote heuristic service cannot be reached or returned an error."""


class ProtocolError(ShelfSearchError):
    """Malformed or out-of-order message on the heuristic wire protocol."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {detail}" if detail else kind)


class ConfigError(ShelfSearchError):
    """Invalid experiment suite configuration."""
