"""Exception hierarchy shared across the package."""


class TabsimError(Exception):
    """Base class for every error raised by tabsim."""


class ConfigError(TabsimError, ValueError):
    """Invalid hardware, model, task, or scenario configuration."""


class PresetNotFoundError(ConfigError, KeyError):
    def __init__(self, kind, name, available=()):
        self.kind = kind
        self.name = name
        self.available = tuple(available)
        msg = f"unknown {kind} preset {name!r}"
        if self.available:
            msg += f" (available: {', '.join(self.available)})"
        super().__init__(msg)

    def __str__(self):
        return self.args[0]


class FabricMismatchError(TabsimError, ValueError):
    """A cost model was asked to price an operation on the wrong fabric."""


class ShardingError(ConfigError):
    """The model cannot be split evenly across the requested xPU count."""


class GraphError(TabsimError, ValueError):
    """Structural problem in an operator graph."""


class CycleError(GraphError):
    def __init__(self, cycle):
        self.cycle = tuple(cycle)
        super().__init__("dependency cycle between ops " + " -> ".join(str(c) for c in self.cycle))


class DanglingDependencyError(GraphError):
    def __init__(self, op_id, missing):
        self.op_id = op_id
        self.missing = missing
        super().__init__(f"op {op_id} depends on unknown op {missing}")


class TraceFormatError(GraphError):
    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class DeadlockError(TabsimError, RuntimeError):
    """The simulation cannot make progress, usually because local memory is too small."""

    def __init__(self, message, op_id=None, op_name=None):
        self.op_id = op_id
        self.op_name = op_name
        super().__init__(message)
