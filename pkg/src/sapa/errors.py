"""Exception hierarchy shared by all simulator layers."""


class SapaError(Exception):
    """Base class for every error raised by the package."""


class MalformedConfig(SapaError):
    def __init__(self, message, line=None, path=None):
        self.message = message
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip() if where else message)


class InvalidValue(SapaError):
    def __init__(self, key, message=""):
        self.key = key
        super().__init__(key if not message else f"{key}: {message}")


class GoalSyntaxError(MalformedConfig):
    """Goal DSL line could not be parsed."""


class UnknownKey(SapaError):
    pass


class EmptyKnobRange(SapaError):
    pass


class MappingInfeasible(SapaError):
    pass


class UnknownMode(SapaError):
    pass


class DestinationBusy(SapaError):
    pass


class TaskNotResident(SapaError):
    pass


class CoverageGap(SapaError):
    pass


class UnknownObject(SapaError):
    pass


class NoReads(SapaError):
    pass


class Unreachable(SapaError):
    pass


class ZeroLengthPacket(SapaError):
    pass


class UnknownLink(SapaError):
    pass


class UnknownArm(SapaError):
    pass


class RehearsalUnavailable(SapaError):
    pass


class NoVacancy(SapaError):
    pass


class TemplateTooLarge(SapaError):
    pass


class OutOfBounds(SapaError):
    pass


class ZeroChains(SapaError):
    pass


class EmptyList(SapaError):
    pass
