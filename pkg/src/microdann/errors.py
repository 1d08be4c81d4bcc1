"""Exception types shared across the package."""


class MicroDannError(Exception):
    pass


class InvalidShape(MicroDannError, ValueError):
    pass


class InvalidConfig(MicroDannError, ValueError):
    pass


class InvalidLabel(MicroDannError, ValueError):
    pass


class InvalidData(MicroDannError, ValueError):
    pass


class IngestionError(MicroDannError, OSError):
    pass


class TrainingAborted(MicroDannError, RuntimeError):
    pass
