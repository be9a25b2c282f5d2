"""Exception hierarchy shared by every occlift module.

The CLI maps these onto exit codes, so each class carries the code it
should surface with.
"""


class OccliftError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(OccliftError, ValueError):
    exit_code = 2
    kind = "config"


class ShapeError(ConfigError):
    kind = "shape"


class ContractError(OccliftError, ValueError):
    exit_code = 2
    kind = "contract"


class GeometryError(OccliftError, ValueError):
    exit_code = 4
    kind = "geometry"


class TriangulationError(GeometryError):
    kind = "triangulation"


class NumericalError(OccliftError, ArithmeticError):
    exit_code = 4
    kind = "numerical"


class TrainingError(NumericalError):
    kind = "training"


class EvaluationError(OccliftError, ValueError):
    exit_code = 4
    kind = "evaluation"


class DatasetParseError(OccliftError, ValueError):
    exit_code = 3
    kind = "parse"


class UnsupportedVersionError(DatasetParseError):
    kind = "unsupported_version"
