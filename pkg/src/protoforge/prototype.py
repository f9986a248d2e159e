"""Building the initial prototype matrix V from class names and templates.

Each class name is expanded into T prompt strings, every prompt is embedded by
a pluggable source (toy encoder or a precomputed file) and the per-class
embedding mean becomes the prototype row.  Normalize-after-averaging is the
default since classification happens on the unit sphere; the raw mean remains
available for diagnostics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corelinalg import EmbeddingMatrix, normalize_rows
from .errors import BadTemplate, ShapeMismatch

EmbedFn = Callable[[Sequence[str]], np.ndarray]


@dataclass(frozen=True)
class TemplateSet:
    """Ordered prompt templates, each with exactly one ``{}`` placeholder."""

    templates: tuple[str, ...]

    def __post_init__(self):
        if len(self.templates) < 1:
            raise BadTemplate("need at least one template")
        for t in self.templates:
            if t.count("{}") != 1:
                raise BadTemplate(
                    f"template {t!r} must contain exactly one '{{}}' placeholder"
                )
        if len(set(self.templates)) != len(self.templates):
            warnings.warn("duplicate templates in TemplateSet", stacklevel=2)

    def __len__(self) -> int:
        return len(self.templates)


@dataclass(frozen=True)
class PrototypeSet:
    """Class prototypes plus their provenance."""

    class_names: tuple[str, ...]
    v: EmbeddingMatrix
    normalized: bool
    template_count: int

    def __post_init__(self):
        if len(self.class_names) != self.v.rows:
            raise ShapeMismatch(
                f"{len(self.class_names)} class names vs {self.v.rows} prototype rows"
            )
        if len(set(self.class_names)) != len(self.class_names):
            raise ShapeMismatch("class names must be unique")
        if any(not n for n in self.class_names):
            raise ShapeMismatch("class names must be nonempty")
        if self.normalized:
            norms = np.linalg.norm(self.v.data, axis=1)
            if np.abs(norms - 1.0).max() > 1e-9:
                raise ShapeMismatch("normalized flag set but rows are not unit norm")


def expand_templates(names: Sequence[str], tset: TemplateSet) -> list[str]:
    """All prompts, class-major: output[i*T + t] = template t filled with name i."""
    if not names:
        raise ShapeMismatch("names must be nonempty")
    if len(set(names)) != len(names):
        raise ShapeMismatch("names must be unique")
    return [t.replace("{}", name, 1) for name in names for t in tset.templates]


def average_prototypes(
    per_template_embeddings: EmbeddingMatrix,
    k: int,
    t: int,
    normalize: bool,
    class_names: Sequence[str] | None = None,
) -> PrototypeSet:
    """Average T consecutive embedding rows per class into one prototype row."""
    if t < 1:
        raise ShapeMismatch("template count must be >= 1")
    if per_template_embeddings.rows != k * t:
        raise ShapeMismatch(
            f"expected {k * t} rows (k={k}, t={t}), got {per_template_embeddings.rows}"
        )
    means = per_template_embeddings.data.reshape(k, t, -1).mean(axis=1)
    v = EmbeddingMatrix(means)
    if normalize:
        v = normalize_rows(v)
    if class_names is None:
        class_names = tuple(f"class_{i:03d}" for i in range(k))
    return PrototypeSet(
        class_names=tuple(class_names),
        v=v,
        normalized=normalize,
        template_count=t,
    )


def build_prototypes(
    names: Sequence[str],
    tset: TemplateSet,
    embed: EmbedFn,
    normalize: bool = True,
) -> PrototypeSet:
    """Expand, embed and average in one call; ``embed`` maps texts to a (n, d) array."""
    prompts = expand_templates(names, tset)
    emb = np.asarray(embed(prompts), dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != len(prompts):
        raise ShapeMismatch(
            f"embed() must return ({len(prompts)}, d), got {emb.shape}"
        )
    return average_prototypes(
        EmbeddingMatrix(emb), len(names), len(tset), normalize, class_names=names
    )


def load_templates(path: str | Path) -> TemplateSet:
    """One template per line; blank lines and ``#`` comments are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    templates = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    return TemplateSet(tuple(templates))


def load_class_names(path: str | Path) -> list[str]:
    """One class name per line; blank lines and ``#`` comments are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
