"""Exception hierarchy.

Every failure the toolkit reports on purpose derives from :class:`DeskNASError`
and carries keyword context (node name, parameter, byte offset, ...) in
``.context`` so callers and the CLI can report it without string parsing.
"""


class DeskNASError(Exception):
    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def __str__(self):
        if not self.context:
            return self.message
        extra = ", ".join(f"{k}={v!r}" for k, v in sorted(self.context.items()))
        return f"{self.message} [{extra}]"


class ShapeError(DeskNASError):
    pass


class NonFiniteError(DeskNASError):
    pass


class GraphStateError(DeskNASError):
    pass


class SamplingError(DeskNASError):
    pass


class SearchSpaceError(DeskNASError):
    pass


class ConfigError(DeskNASError):
    pass


class DatasetError(DeskNASError):
    pass


class CheckpointError(DeskNASError):
    pass


class IntegrityError(CheckpointError):
    pass


class MetricError(DeskNASError):
    pass
