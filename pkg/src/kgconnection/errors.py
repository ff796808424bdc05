class KGError(Exception):
    """Base error carrying a short machine-readable code."""

    code = "KG_ERROR"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self):
        return f"[{self.code}] {self.args[0]}"


class ConfigError(KGError):
    code = "CFG_INVALID"


class AdmissibilityError(KGError):
    code = "INADMISSIBLE"


class CFLError(KGError):
    code = "CFL"


class StructureError(KGError):
    code = "STRUCTURE"


class PreconditionError(KGError):
    code = "PRECONDITION"
