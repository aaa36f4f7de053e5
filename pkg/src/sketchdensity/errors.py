"""Exception types shared across the package."""


class InputError(ValueError):
    """An argument violates a shape, range or resolution precondition."""


class ConfigurationError(ValueError):
    """A configuration or dataset is inconsistent with what was requested."""


class DataError(ConfigurationError):
    """A dataset record is malformed or missing; carries the record id."""

    def __init__(self, record_id, message):
        super().__init__(f"{record_id}: {message}")
        self.record_id = record_id


class TrainingError(RuntimeError):
    """A training phase could not run to completion."""
