"""Exception hierarchy.

Each family maps onto one CLI exit code: domain errors exit 1, format and
I/O errors exit 2, configuration errors exit 3.
"""

from __future__ import annotations


class ParamineError(Exception):
    exit_code = 1


class DomainError(ParamineError):
    """Degenerate or inconsistent data."""

    exit_code = 1


class FormatError(ParamineError):
    """Malformed input file or binary artifact."""

    exit_code = 2


class ConfigError(ParamineError):
    exit_code = 3


class ZeroVector(DomainError):
    pass


class DimensionMismatch(DomainError):
    pass


class EmptyInput(DomainError):
    pass


class EmptyBatch(DomainError):
    pass


class EmptyResult(DomainError):
    pass


class DuplicateAnchor(DomainError):
    def __init__(self, anchor_id: str):
        super().__init__(f"anchor {anchor_id!r} appears twice in one mega-batch")
        self.anchor_id = anchor_id


class MissingEmbedding(DomainError):
    def __init__(self, sentence_id: str):
        super().__init__(f"no embedding for id {sentence_id!r}")
        self.sentence_id = sentence_id


class IndexMismatch(DomainError):
    pass


class DegenerateLabels(DomainError):
    pass


class MalformedLine(FormatError):
    def __init__(self, line_no: int, detail: str = ""):
        msg = f"malformed line {line_no}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.line_no = line_no


class UnknownId(FormatError):
    def __init__(self, sentence_id: str, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"unknown sentence id {sentence_id!r}{where}")
        self.sentence_id = sentence_id
        self.line_no = line_no


class DuplicateId(FormatError):
    def __init__(self, sentence_id: str, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"duplicate sentence id {sentence_id!r}{where}")
        self.sentence_id = sentence_id
        self.line_no = line_no
