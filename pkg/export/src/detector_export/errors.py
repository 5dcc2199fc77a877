class ExportError(Exception):
    """Checkpoint cannot be loaded or converted."""


class ParityError(Exception):
    """The two runtimes disagree structurally (shapes), not just numerically."""
