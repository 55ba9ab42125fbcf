"""Exception hierarchy shared by every dedupstore module."""


class DedupStoreError(Exception):
    """Base class for all errors raised by dedupstore."""


class ShapeError(DedupStoreError, ValueError):
    """A tensor, block or blocking does not have the expected shape."""


class UnknownBlockError(DedupStoreError, KeyError):
    """A block key is unknown to the dedup index."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown block key"


class OracleError(DedupStoreError):
    """The accuracy oracle failed while a model was being indexed."""


class StoreError(DedupStoreError):
    """The page store is missing data or a page is corrupt."""

    def __init__(self, message, page_id=None):
        super().__init__(message)
        self.page_id = page_id


class PoolFullError(DedupStoreError):
    """Every frame in the buffer pool is pinned; nothing can be evicted."""


class FormatError(DedupStoreError, ValueError):
    """A persisted file does not follow its documented layout."""
