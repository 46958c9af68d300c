"""Off-policy evaluation and optimization of token-level chain-of-thought
policies whose entity tokens are scored against a knowledge-graph preference
policy."""

import importlib

__version__ = "0.1.0"

# Attributes load lazily so the command-line entry point can set thread caps
# before numpy is imported.
_EXPORTS = {
    "BACKEND_NAME": "._kernels",
    "EstimatorConfig": ".estimator",
    "ValueEstimate": ".estimator",
    "kg_ips_estimate": ".estimator",
    "plain_ips_estimate": ".estimator",
    "snips_estimate": ".estimator",
    "KnowledgeGraph": ".graph",
    "chain_graph": ".graph",
    "generate_synthetic": ".graph",
    "load_triples": ".graph",
    "TokenPolicy": ".policy",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(_EXPORTS[name], __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
