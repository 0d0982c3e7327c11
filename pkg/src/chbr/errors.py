"""Exception hierarchy. Exit codes: 2 precondition/config, 3 provider, 4 parse."""


class ChbrError(Exception):
    exit_code = 1


class PreconditionError(ChbrError):
    """Invalid input, config, or violated call contract."""

    exit_code = 2


class ShapeError(PreconditionError):
    pass


class TemplateError(PreconditionError):
    pass


class DegenerateInputError(PreconditionError):
    pass


class MissingEmbeddingError(PreconditionError):
    pass


class StoreLoadError(PreconditionError):
    pass


class BadMagicError(StoreLoadError):
    pass


class VersionMismatchError(StoreLoadError):
    pass


class TruncatedPayloadError(StoreLoadError):
    pass


class DuplicateIdError(StoreLoadError):
    pass


class ProviderError(ChbrError):
    """Transport or HTTP failure talking to an LLM or embedding service."""

    exit_code = 3

    def __init__(self, message, status=None, body=None, retries=0):
        super().__init__(message)
        self.status = status
        self.body = body
        self.retries = retries


class ParseError(ChbrError):
    """A model reply did not match the expected output contract."""

    exit_code = 4

    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw
