class NumericalFailure(ArithmeticError):
    """A non-finite value appeared; ``term`` names where."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        msg = f"non-finite value in {term}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class ConfigError(ValueError):
    pass
