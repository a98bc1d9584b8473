"""Domain errors raised by the simulation, planning and zonal services."""


class WildfireError(Exception):
    """Base class for every error the services raise on bad input."""


class InvalidCellError(WildfireError):
    pass


class InvalidActionError(WildfireError):
    pass


class DimensionMismatchError(WildfireError):
    pass


class TableParseError(WildfireError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row
        self.reason = reason


class GeometryParseError(WildfireError):
    pass


class IdMismatchError(WildfireError):
    def __init__(self, missing: dict):
        details = "; ".join(f"{layer}: {sorted(map(str, ids))}" for layer, ids in missing.items())
        super().__init__(f"polygon ids differ across layers ({details})")
        self.missing = missing


class ConfigurationError(WildfireError):
    pass


class OutputPathError(WildfireError):
    pass
