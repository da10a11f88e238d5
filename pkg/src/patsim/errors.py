"""Exception types shared across the package."""


class PatsimError(Exception):
    """Base class for all errors raised by patsim."""


class ParseError(PatsimError, ValueError):
    """An input file does not conform to its declared format."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class FormatError(ParseError):
    """A serialized artifact (embeddings, matrices, checkpoint) is inconsistent."""


class ConfigError(PatsimError, ValueError):
    """Invalid configuration value."""


class UndefinedSimilarityError(PatsimError, ArithmeticError):
    """A similarity score has a zero denominator (degenerate input)."""


class DivergenceError(PatsimError, FloatingPointError):
    """Training produced non-finite parameters."""


class MissingArtifactError(PatsimError, FileNotFoundError):
    """A pipeline stage needs an artifact that an earlier stage has not produced."""


class OutOfVocabularyError(PatsimError, KeyError):
    """An event code has no vocabulary entry or embedding row."""

    def __init__(self, code, patient_id=None):
        self.code = code
        self.patient_id = patient_id
        who = f" of patient {patient_id}" if patient_id is not None else ""
        super().__init__(f"code {code!r}{who} is not in the vocabulary")

    def __str__(self):
        return self.args[0]
