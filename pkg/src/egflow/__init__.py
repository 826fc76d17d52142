"""Energy-guided flow matching and the FlowQ offline RL algorithm."""

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "checkpoint",
    "cli",
    "envs",
    "errors",
    "flow",
    "flowq",
    "guidance",
    "oracles",
    "rng",
    "tasks",
)


def __getattr__(name):
    # Lazy submodule access keeps `import egflow` cheap for the CLI entry,
    # which must set thread env vars before numpy loads.
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
