"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process exit statuses without a lookup table.
"""


class CogestureError(Exception):
    exit_code = 1


class ValidationError(CogestureError, ValueError):
    exit_code = 2


class DegenerateRotationError(ValidationError):
    pass


class OutOfVocabularyError(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MotionParseError(ValidationError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(ValidationError):
    pass


class StateError(CogestureError, RuntimeError):
    exit_code = 2


class FrozenModelError(StateError):
    pass


class CheckpointMismatchError(CogestureError):
    exit_code = 3

    def __init__(self, key, expected, found):
        super().__init__(f"checkpoint mismatch on '{key}': expected {expected!r}, found {found!r}")
        self.key = key
        self.expected = expected
        self.found = found


class NumericalError(CogestureError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ShapeError(ValidationError):
    pass
