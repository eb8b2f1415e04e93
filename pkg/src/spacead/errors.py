"""Exception types shared across the package."""


class SpaceError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SpaceError):
    """Bad configuration: missing directories, invalid keys or values.

    Mapped to exit code 2 by the CLI.
    """


class ItemError(SpaceError):
    """A single input item (file, image) could not be processed."""

    def __init__(self, path, reason=""):
        self.path = str(path)
        self.reason = reason
        msg = self.path if not reason else f"{self.path}: {reason}"
        super().__init__(msg)


class TrainingDiverged(SpaceError):
    """Training produced a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, iteration, losses):
        self.iteration = iteration
        self.losses = dict(losses)
        super().__init__(
            f"non-finite loss at iteration {iteration}: "
            + ", ".join(f"{k}={v}" for k, v in self.losses.items())
        )
