"""Exception types shared across the package.

The CLI maps these to distinct exit codes (see cli.py and README).
"""


class DendriteError(Exception):
    """Base class for all package errors."""


class GridError(DendriteError):
    """Invalid grid, range outside a grid, or incompatible grids."""


class EvaluationError(DendriteError):
    """Numeric evaluation failed (non-finite sample, degenerate step, ...)."""


class NodeBudgetError(EvaluationError):
    """A tree evaluation would exceed the node-count cap."""


class TopologyError(DendriteError):
    """Two trees that should share branch structure do not."""


class ExportError(DendriteError):
    """A serializer was handed input it cannot represent."""


class DslError(DendriteError):
    """Parse or compile failure; carries the collected diagnostics."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        first = self.diagnostics[0] if self.diagnostics else None
        msg = f"{len(self.diagnostics)} diagnostic(s)"
        if first is not None:
            msg += f"; first: {first}"
        super().__init__(msg)
