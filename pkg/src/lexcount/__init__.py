"""Language-guided exemplar regression and zero-shot object counting."""

__version__ = "0.1.0"

from .data import BBox, ExpressionAnnotation, PromptKind, SceneSample, SyntheticSpec  # noqa: F401
