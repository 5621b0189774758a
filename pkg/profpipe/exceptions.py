class ProfpipeException(Exception):
    pass


class InvalidInputError(ProfpipeException, ValueError):
    pass


class CorruptContainerError(InvalidInputError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"Corrupt container {path}: {reason}")
        self.path = path
        self.reason = reason


class ViewCountError(InvalidInputError):
    def __init__(self, found: int, expected: int = 5):
        super().__init__(f"view count {found} ≠ {expected}")
        self.found = found
        self.expected = expected


class MissingFileError(InvalidInputError):
    def __init__(self, path: str, what: str = "File"):
        super().__init__(f"{what} not found: {path}")
        self.path = path


class MissingCheckpointError(MissingFileError):
    def __init__(self, path: str):
        super().__init__(path, what="Checkpoint")


class EmptyCellError(InvalidInputError):
    def __init__(self, scenario: str, view: str):
        super().__init__(f"No training clips for cell (scenario={scenario}, view={view})")
        self.scenario = scenario
        self.view = view


class StratumTooSmallError(InvalidInputError):
    def __init__(self, scenario: str, proficiency: str, size: int):
        super().__init__(
            f"Stratum (scenario={scenario}, proficiency={proficiency}) has {size} clip(s), too small to split"
        )
        self.scenario = scenario
        self.proficiency = proficiency
        self.size = size


class ShapeMismatchError(InvalidInputError):
    pass


class UnfitModelError(InvalidInputError):
    pass


class NonFiniteGradientError(ProfpipeException):
    pass


class TrainingDivergedError(ProfpipeException):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"Training diverged at epoch {epoch}, step {step}: loss={loss}")
        self.epoch = epoch
        self.step = step
        self.loss = loss
