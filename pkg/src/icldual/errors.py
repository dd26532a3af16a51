"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` to exit code 1 and
:class:`NumericalError` to exit code 2.
"""


class ValidationError(ValueError):
    """Bad shapes, out-of-range parameters, malformed configuration."""


class NumericalError(ArithmeticError):
    """A computation could not produce a finite, well-defined result."""


class NonFiniteError(NumericalError):
    pass


class OverflowRangeError(NumericalError):
    """An exponent exceeds what float64 can represent."""


class SingularSystemError(NumericalError):
    pass


class DegenerateError(NumericalError):
    """A normalizer or minimizer is undefined (zero column sum, zero gradient)."""


class UnsupportedVariantError(ValidationError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"training diverged at step {step} (loss={value!r})")
