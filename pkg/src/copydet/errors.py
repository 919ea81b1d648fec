"""Exception hierarchy.

Two families matter to callers: :class:`InputError` (bad files, bad ids, bad
arguments; CLI exit code 2) and :class:`ComputationError` (a numerically
ill-posed request such as a singular system; CLI exit code 3).
"""


class CopydetError(Exception):
    """Base class for every error raised by this package."""

    kind = "error"

    def to_dict(self):
        return {"error": self.kind, "message": str(self)}


class InputError(CopydetError):
    kind = "input_error"


class ComputationError(CopydetError):
    kind = "computation_error"


class LoadError(InputError):
    kind = "load_error"


class MalformedHeaderError(LoadError):
    kind = "malformed_header"


class NonFiniteValueError(LoadError):
    kind = "non_finite_value"


class DuplicateIdError(LoadError):
    kind = "duplicate_id"


class DimensionMismatchError(LoadError):
    kind = "dimension_mismatch"


class ParseError(LoadError):
    """A text file could not be parsed; ``line`` is 1-based."""

    kind = "parse_error"

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)

    def to_dict(self):
        d = super().to_dict()
        d["path"] = None if self.path is None else str(self.path)
        d["line"] = self.line
        return d


class MetadataError(LoadError):
    """One or more metadata records violate the provenance rules.

    ``problems`` is a list of ``(line, query_id, message)`` tuples, one per
    offending record.
    """

    kind = "metadata_invalid"

    def __init__(self, problems):
        self.problems = list(problems)
        head = "; ".join(f"line {ln} ({qid}): {msg}" for ln, qid, msg in self.problems[:5])
        more = "" if len(self.problems) <= 5 else f" (+{len(self.problems) - 5} more)"
        super().__init__(f"{len(self.problems)} invalid metadata record(s): {head}{more}")

    def to_dict(self):
        d = super().to_dict()
        d["problems"] = [
            {"line": ln, "query_id": qid, "message": msg} for ln, qid, msg in self.problems
        ]
        return d


class UnknownIdError(InputError):
    kind = "unknown_id"


class DuplicatePairError(InputError):
    kind = "duplicate_pair"


class EmptyInputError(InputError):
    kind = "empty_input"


class SingularSystemError(ComputationError):
    kind = "singular_system"
