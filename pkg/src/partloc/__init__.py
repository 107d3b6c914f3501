"""Part-prototype cross-view geo-localization.

A self-contained numpy stack: procedural scene-pair generation with a weather
corruption simulator, a reverse-mode autodiff core, a part-prototype embedding
head with altitude conditioning, a multi-group uncertainty-weighted training
objective, and a strictly single-pass retrieval evaluator.
"""

__version__ = "0.1.0"
