class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented domain."""


class NonFiniteValue(ContractViolation):
    """A NaN or infinity reached an operation that requires finite input."""


class ShapeError(ContractViolation):
    def __init__(self, op, *shapes, detail=""):
        shapes_s = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shapes_s}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class DatasetFormatError(ValueError):
    """Malformed dataset or checkpoint file; ``offset`` is the byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, checkpoint=None):
        msg = f"non-finite loss at step {step}"
        if checkpoint is not None:
            msg += f"; last good parameters written to {checkpoint}"
        super().__init__(msg)
        self.step = step
        self.checkpoint = checkpoint
