"""Saturn: a desk-scale control plane for the foundation-model lifecycle.

Subpackages cover the registry (versioned models with lifecycle governance),
the embedding store, drift monitoring, pipeline orchestration, preference
feedback, fairness tooling, and a thin serving layer, all wired together by
:class:`saturn.platform.Platform` and exposed over HTTP by ``saturn.api``.
"""

__version__ = "0.1.0"
