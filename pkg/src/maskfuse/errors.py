class ContractViolation(ValueError):
    """Inputs broke a documented precondition (resolution mismatch, bad range...)."""


class MalformedRLE(ContractViolation):
    """Run-length data that cannot describe a mask of the stated size."""


class SchemaError(ValueError):
    """A COCO-style JSON document does not match the expected layout.

    ``path`` locates the offending element, e.g. ``annotations[3].segmentation``.
    """

    def __init__(self, message, path="", source=None):
        self.path = path
        self.source = source
        where = f"{source}: " if source else ""
        at = f" at {path}" if path else ""
        super().__init__(f"{where}{message}{at}")
