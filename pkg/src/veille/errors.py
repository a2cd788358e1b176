class VeilleError(Exception):
    category = "error"


class ConfigError(VeilleError):
    category = "configuration error"


class DimensionError(VeilleError):
    category = "dimension error"


class ContractError(VeilleError):
    category = "contract error"


class EmptyTapeError(ContractError):
    category = "empty-tape error"


class NumericalError(VeilleError):
    category = "numerical error"


class DataError(VeilleError):
    category = "data error"


class SchemaError(DataError):
    category = "schema error"


class ParseError(DataError):
    category = "parse error"

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class DegenerateWeightsError(DataError):
    category = "degenerate-weights error"
