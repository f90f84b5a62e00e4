"""Prompt assembly for the program proposer.

A prompt is five ordered sections: instruction, dataset specification,
evaluation description, demonstrations, and the stub the model completes.
Rendering is deterministic given the dataset, the demonstrations, the
PromptSpec, and the RNG state (consumed once, for the instruction variant).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .dataset import Dataset, serialize_row
from .memory import ScoredProgram
from .sandbox import FUNCTION_STEM

logger = logging.getLogger(__name__)

INSTRUCTION_BASIC = "basic"
INSTRUCTION_COMPLEX = "complex_operators"
INSTRUCTION_VARIANTS = (INSTRUCTION_BASIC, INSTRUCTION_COMPLEX)

_VARIANT_TEMPLATES = {
    INSTRUCTION_BASIC: "instruction_basic.txt",
    INSTRUCTION_COMPLEX: "instruction_complex.txt",
}

SECTION_ORDER = ("instruction", "dataset_spec", "evaluation", "demonstrations", "stub")


class EmptyDemonstrations(ValueError):
    pass


class PromptTooLong(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    """Knobs for prompt construction; ablation switches live here."""

    k: int = 2
    n_example_rows: int = 10
    include_domain_knowledge: bool = True
    include_data_examples: bool = True
    max_chars: int | None = None
    template_dir: str | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.n_example_rows < 0:
            raise ValueError(f"n_example_rows must be >= 0, got {self.n_example_rows}")


@dataclass(frozen=True)
class PromptText:
    text: str
    sections: dict[str, tuple[int, int]]
    variant: str
    stub_name: str

    def section(self, name: str) -> str:
        start, end = self.sections[name]
        return self.text[start:end]


def load_template(name: str, template_dir: str | None = None) -> str:
    if template_dir is not None:
        return (Path(template_dir) / name).read_text()
    return resources.files("llmfe.templates").joinpath(name).read_text()


def select_instruction_variant(rng: np.random.Generator) -> str:
    """Pick the instruction flavor, each variant with probability 1/2."""
    return INSTRUCTION_BASIC if rng.random() < 0.5 else INSTRUCTION_COMPLEX


def example_row_positions(ds: Dataset, n: int) -> list[int]:
    """Deterministic row picks for the prompt's data examples.

    Classification: round-robin over classes in label order, taking each
    class's rows in dataset order, so every class shows up early.
    Regression: rows at evenly spaced positions of the label-sorted order.
    """
    n = min(n, ds.n_rows)
    if n == 0:
        return []
    labels = np.asarray(ds.labels)
    if ds.task.is_classification:
        by_class: dict[int, list[int]] = {}
        for pos, y in enumerate(labels):
            by_class.setdefault(int(y), []).append(pos)
        queues = [by_class[c] for c in sorted(by_class)]
        picks: list[int] = []
        round_idx = 0
        while len(picks) < n:
            added = False
            for queue in queues:
                if round_idx < len(queue):
                    picks.append(queue[round_idx])
                    added = True
                    if len(picks) == n:
                        break
            if not added:
                break
            round_idx += 1
        return picks
    order = np.argsort(labels, kind="stable")
    spots = np.unique(np.linspace(0, ds.n_rows - 1, num=n).round().astype(int))
    return [int(order[s]) for s in spots]


def serialize_examples(ds: Dataset, n: int) -> list[str]:
    names = ds.feature_names
    lines = []
    for pos in example_row_positions(ds, n):
        row = [ds.features.iloc[pos][c] for c in names]
        lines.append(serialize_row(row, ds.labels.iloc[pos], names))
    return lines


def render_dataset_spec(ds: Dataset, spec: PromptSpec) -> str:
    """The dataset section: task prose, feature list, serialized examples.

    Without domain knowledge only the bare column names remain; without
    data examples the serialized rows are dropped.
    """
    if spec.include_domain_knowledge:
        task_description = ds.metadata.task_description.strip()
        lines = []
        for name in ds.feature_names:
            desc = ds.metadata.feature_descriptions.get(name, "").strip()
            lines.append(f"- {name}: {desc}" if desc else f"- {name}")
        feature_block = "\n".join(lines)
    else:
        task_description = ""
        feature_block = "\n".join(f"- {name}" for name in ds.feature_names)
    if spec.include_data_examples and spec.n_example_rows > 0:
        rows = serialize_examples(ds, spec.n_example_rows)
        examples_block = "Example rows:\n" + "\n".join(rows)
    else:
        examples_block = ""
    text = load_template("dataset_spec.txt", spec.template_dir).format(
        task_description=task_description,
        feature_block=feature_block,
        examples_block=examples_block,
    )
    return re.sub(r"\n{3,}", "\n\n", text).strip()


def _renamed_source(source: str, old_name: str, new_name: str) -> str:
    if old_name == new_name:
        return source
    return re.sub(rf"\b{re.escape(old_name)}\b", new_name, source)


def _demo_block(demonstrations: list[ScoredProgram]) -> str:
    parts = []
    for i, entry in enumerate(demonstrations):
        name = f"{FUNCTION_STEM}{i}"
        parts.append(_renamed_source(entry.program.source, entry.program.function_name, name).strip())
    return "\n\n".join(parts)


def _stub(version: int) -> str:
    name = f"{FUNCTION_STEM}{version}"
    prev = f"{FUNCTION_STEM}{version - 1}"
    return f'def {name}(df):\n    """Improved version of {prev}."""\n'


def render_demonstrations(demonstrations: list[ScoredProgram], template_dir: str | None = None) -> str:
    """Demonstrations ascending by score as v0..v(k-1), then the v(k) stub."""
    if not demonstrations:
        raise EmptyDemonstrations("at least one demonstration is required")
    ordered = sorted(demonstrations, key=lambda e: (e.score.ordering, e.admission_seq))
    body = load_template("demonstrations.txt", template_dir).format(
        demonstrations=_demo_block(ordered)
    )
    return body.strip() + "\n\n" + _stub(len(ordered))


def build_prompt(
    ds: Dataset,
    demonstrations: list[ScoredProgram],
    spec: PromptSpec = PromptSpec(),
    rng: np.random.Generator | None = None,
) -> PromptText:
    """Assemble the full prompt and record where each section lives.

    If the rendered prompt exceeds spec.max_chars, example rows are dropped
    from the end until it fits; if it still does not fit, PromptTooLong.
    """
    if not demonstrations:
        raise EmptyDemonstrations("at least one demonstration is required")
    rng = rng if rng is not None else np.random.default_rng()
    variant = select_instruction_variant(rng)
    ordered = sorted(demonstrations, key=lambda e: (e.score.ordering, e.admission_seq))
    stub_version = len(ordered)
    stub_name = f"{FUNCTION_STEM}{stub_version}"

    n_rows = spec.n_example_rows if spec.include_data_examples else 0
    while True:
        row_spec = PromptSpec(
            k=spec.k,
            n_example_rows=n_rows,
            include_domain_knowledge=spec.include_domain_knowledge,
            include_data_examples=spec.include_data_examples and n_rows > 0,
            max_chars=spec.max_chars,
            template_dir=spec.template_dir,
        )
        sections = [
            ("instruction", load_template(_VARIANT_TEMPLATES[variant], spec.template_dir).strip()),
            ("dataset_spec", render_dataset_spec(ds, row_spec)),
            ("evaluation", load_template("evaluation_function.txt", spec.template_dir).strip()),
            (
                "demonstrations",
                load_template("demonstrations.txt", spec.template_dir)
                .format(demonstrations=_demo_block(ordered))
                .strip(),
            ),
            ("stub", _stub(stub_version).rstrip("\n")),
        ]
        text_parts: list[str] = []
        spans: dict[str, tuple[int, int]] = {}
        cursor = 0
        for name, part in sections:
            if text_parts:
                cursor += 2  # the "\n\n" joiner
            spans[name] = (cursor, cursor + len(part))
            cursor += len(part)
            text_parts.append(part)
        text = "\n\n".join(text_parts)
        if spec.max_chars is None or len(text) <= spec.max_chars:
            return PromptText(text=text, sections=spans, variant=variant, stub_name=stub_name)
        if n_rows > 0:
            n_rows -= 1
            continue
        raise PromptTooLong(f"{len(text)} chars exceeds cap {spec.max_chars}")
