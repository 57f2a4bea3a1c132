"""Few-shot tactile shape and material recognition on hand-crafted features.

Submodules are imported lazily by the CLI so that thread limits can be set
before numerical libraries load; import them directly, e.g.
``from tactile_fewshot.head import adapt``.
"""
__version__ = "0.1.0"
