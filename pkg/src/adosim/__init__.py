"""adosim: data-driven multi-agent driving simulation and policy learning."""

__version__ = "0.1.0"
