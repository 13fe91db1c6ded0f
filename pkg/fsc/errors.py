"""
Exception hierarchy for the few-point completion toolkit.

The CLI maps each family to an exit code: input problems exit 2,
configuration/compatibility problems exit 3, numeric failures exit 4.
"""


class FscError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code = 1


class InputError(FscError):
    """The caller handed us data we cannot work with"""

    exit_code = 2


class EmptyInput(InputError):
    """A cloud, mesh or file contained no points"""


class DegenerateExtent(InputError):
    """All points coincide, so the cloud has no scale"""


class InsufficientPoints(InputError):
    """Fewer points than the operation requires"""


class NotNormalized(InputError):
    """A histogram was expected to sum to one"""


class SizeMismatch(InputError):
    """Two clouds must have the same number of points"""


class EmptyReferenceSet(InputError):
    """A minimum over references was requested with no references"""


class EmptyView(InputError):
    """Rendering from a viewpoint produced no visible surface"""


class InvalidCloud(InputError):
    """Coordinates or normals violate the point cloud invariants"""


class PlyFormatError(InputError):
    """A PLY file could not be parsed"""


class ManifestNotFound(InputError):
    """A dataset directory has no manifest.json"""


class NumericError(FscError):
    """Training or evaluation produced a non-finite value"""

    exit_code = 4


class NonFiniteGradient(NumericError):
    """A gradient tensor contains NaN or infinity"""

    def __init__(self, tensor_name: str, message: str | None = None):
        self.tensor_name = tensor_name
        super().__init__(message or f"Non-finite gradient in {tensor_name}")


class NonFiniteLoss(NumericError):
    """A loss evaluated to NaN or infinity"""


class DegenerateHistogram(NumericError):
    """An entropy ratio was requested against a zero-entropy reference"""
