"""Exception types shared across the package."""


class GeoBlocksError(Exception):
    """Base class for all errors raised by this package."""


class InvalidCellId(GeoBlocksError):
    """A 64-bit value does not decode to a cell (no sentinel bit, bad parity)."""


class PathTooDeep(GeoBlocksError):
    """A subdivision path exceeds the maximum depth of 31 levels."""


class LevelOutOfRange(GeoBlocksError):
    """A level argument is outside [0, 31] or incompatible with its cell."""


class OutOfDomain(GeoBlocksError):
    """A point lies outside the configured rectangular domain."""


class InvalidPolygon(GeoBlocksError):
    """Polygon input is degenerate, non-finite or self-intersecting."""


class Unsatisfiable(GeoBlocksError):
    """No level within the supported range meets the requested error bound."""


class MissingColumn(GeoBlocksError):
    """A filter or extract references a column the input does not provide."""


class UnknownColumn(GeoBlocksError):
    """An aggregate spec references a column absent from the block schema."""


class IoError(GeoBlocksError):
    """Underlying file could not be read or written."""


class FormatVersionMismatch(GeoBlocksError):
    """File magic or format version is not one this build understands."""


class ChecksumMismatch(GeoBlocksError):
    """Stored CRC32 does not match the payload (truncation or corruption)."""


class FilterViolation(GeoBlocksError):
    """Appended rows do not satisfy the block's filter predicate."""


class RequiresRebuild(GeoBlocksError):
    """Appended rows fall into cells the block has never seen.

    The set of offending block-level cells is carried in ``new_cells``.
    """

    def __init__(self, new_cells):
        self.new_cells = frozenset(new_cells)
        super().__init__(f"{len(self.new_cells)} new block-level cells require a rebuild")


class BudgetTooSmall(GeoBlocksError):
    """Cache budget cannot hold even the root child block."""


class CorruptRegion(GeoBlocksError):
    """A trie offset points outside its region or breaks alignment."""
