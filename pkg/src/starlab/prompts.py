"""Prompt templating, spuriosity injection, and tokenization.

Turns class names into label captions, corrupts them with spurious
descriptors drawn from a concept bank, and maps captions to token ids for
the text encoder.  Whitespace tokenization with punctuation stripping is
deliberate: the text tower only needs class words and descriptor words to
be representable, not subword coverage.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PLACEHOLDER = "{class}"
PHOTO_PREFIX = "a photo of a "
DEFAULT_TEMPLATE = "a photo of a {class}"

# Accepted spellings of the class placeholder in external descriptor text.
_PLACEHOLDER_VARIANTS = re.compile(r"\[class\]|\{class\}", re.IGNORECASE)

BUNDLED_BANK_RESOURCE = "bundled_bank.json"


class BankValidationError(ValueError):
    """A descriptor or bank document violates the bank invariants."""


def normalize_placeholder(text: str) -> str:
    """Rewrite any accepted placeholder spelling to the canonical one."""
    return _PLACEHOLDER_VARIANTS.sub(PLACEHOLDER, text)


def _require_one_placeholder(template: str, what: str) -> None:
    n = template.count(PLACEHOLDER)
    if n != 1:
        raise BankValidationError(
            f"{what} must contain the {PLACEHOLDER} placeholder exactly once, "
            f"found {n} in {template!r}"
        )


@dataclass(frozen=True)
class PromptTemplate:
    """A caption template with exactly one class placeholder."""

    template: str

    def __post_init__(self) -> None:
        _require_one_placeholder(self.template, "prompt template")


@dataclass(frozen=True)
class DescriptorTemplate:
    """A spurious-descriptor fragment, tagged with its originating concept."""

    template: str
    concept: str

    def __post_init__(self) -> None:
        _require_one_placeholder(self.template, "descriptor template")
        if not self.concept:
            raise BankValidationError("descriptor concept name must be nonempty")


class ConceptBank:
    """Immutable map from spurious concept name to its descriptor templates."""

    def __init__(self, concepts: Mapping[str, Sequence[DescriptorTemplate]]):
        validated: dict[str, tuple[DescriptorTemplate, ...]] = {}
        for name, descs in concepts.items():
            if not descs:
                raise BankValidationError(f"concept {name!r} has no descriptors")
            seen: set[str] = set()
            for d in descs:
                if d.concept != name:
                    raise BankValidationError(
                        f"descriptor {d.template!r} tagged {d.concept!r} listed under {name!r}"
                    )
                if d.template in seen:
                    raise BankValidationError(
                        f"duplicate descriptor {d.template!r} in concept {name!r}"
                    )
                seen.add(d.template)
            validated[name] = tuple(descs)
        if not validated:
            raise BankValidationError("bank has no concepts")
        self._concepts = validated

    @property
    def concepts(self) -> tuple[str, ...]:
        return tuple(self._concepts)

    def descriptors(self, concept: str) -> tuple[DescriptorTemplate, ...]:
        if concept not in self._concepts:
            raise KeyError(
                f"unknown concept {concept!r}; bank has {sorted(self._concepts)}"
            )
        return self._concepts[concept]

    def counts(self) -> dict[str, int]:
        return {name: len(descs) for name, descs in self._concepts.items()}

    @staticmethod
    def from_strings(concepts: Mapping[str, Sequence[str]]) -> "ConceptBank":
        return ConceptBank(
            {
                name: [
                    DescriptorTemplate(normalize_placeholder(s), name) for s in descs
                ]
                for name, descs in concepts.items()
            }
        )

    def to_strings(self) -> dict[str, list[str]]:
        return {name: [d.template for d in descs] for name, descs in self._concepts.items()}


def save_bank(bank: ConceptBank, path: str | Path) -> None:
    Path(path).write_text(bank_document(bank))


def bank_document(bank: ConceptBank) -> str:
    """Canonical on-disk form; byte-stable for a given bank."""
    return json.dumps({"concepts": bank.to_strings()}, indent=2) + "\n"


def load_bank(path: str | Path) -> ConceptBank:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or "concepts" not in doc:
        raise BankValidationError(f"{path}: missing top-level 'concepts' object")
    return ConceptBank.from_strings(doc["concepts"])


def bundled_bank() -> ConceptBank:
    """The bank shipped with the package: 30 background, 15 texture, and
    15 resolution descriptors."""
    text = resources.files("starlab.data").joinpath(BUNDLED_BANK_RESOURCE).read_text()
    return ConceptBank.from_strings(json.loads(text)["concepts"])


# -- caption construction ----------------------------------------------------


def render_label_caption(tpl: PromptTemplate, class_name: str) -> str:
    """Substitute the class name into a template; captions are lowercase."""
    if not class_name:
        raise ValueError("class name must be nonempty")
    return tpl.template.replace(PLACEHOLDER, class_name).lower()


def inject_spuriosity(class_name: str, desc: DescriptorTemplate) -> str:
    """Build the spuriosity-augmented caption for one class and descriptor.

    Descriptors are fragments like "{class} on the beach" or "blurred
    {class}"; the photo prefix is prepended so both postfix- and
    prefix-style fragments yield a natural caption.
    """
    if not class_name:
        raise ValueError("class name must be nonempty")
    return (PHOTO_PREFIX + desc.template.replace(PLACEHOLDER, class_name)).lower()


def sample_descriptor(
    bank: ConceptBank, concept: str, rng: np.random.Generator
) -> DescriptorTemplate:
    """Uniform draw from one concept's descriptor list."""
    descs = bank.descriptors(concept)
    return descs[int(rng.integers(len(descs)))]


def random_suffix_caption(
    class_name: str, tokenizer: "Tokenizer", rng: np.random.Generator, k: int = 3
) -> str:
    """Label caption followed by k tokens drawn uniformly from the vocabulary."""
    if k < 1:
        raise ValueError(f"suffix length must be >= 1, got {k}")
    base = render_label_caption(PromptTemplate(DEFAULT_TEMPLATE), class_name)
    words = [tokenizer.word(int(i)) for i in rng.integers(tokenizer.size, size=k)]
    return base + " " + " ".join(words)


# -- tokenizer ---------------------------------------------------------------

_PUNCT_TABLE = str.maketrans("", "", string.punctuation.replace("'", ""))


def caption_words(caption: str) -> list[str]:
    """Lowercased, punctuation-stripped, whitespace-split words."""
    cleaned = caption.lower().translate(_PUNCT_TABLE)
    return [w for w in cleaned.split() if w]


class Tokenizer:
    """Bijective word-to-id map over a fixed vocabulary.

    Unknown words raise in "strict" mode (training-set construction) and
    map to the reserved UNK id in "unk" mode (free-form evaluation).
    """

    UNK = "<unk>"

    def __init__(self, words: Iterable[str]):
        vocab = [self.UNK]
        seen = {self.UNK}
        for w in words:
            for part in caption_words(w):
                if part not in seen:
                    seen.add(part)
                    vocab.append(part)
        self._word_to_id = {w: i for i, w in enumerate(vocab)}
        self._id_to_word = vocab

    @property
    def size(self) -> int:
        return len(self._id_to_word)

    @property
    def unk_id(self) -> int:
        return 0

    def word(self, token_id: int) -> str:
        return self._id_to_word[token_id]

    def tokenize(self, caption: str, policy: str = "strict") -> list[int]:
        if policy not in ("strict", "unk"):
            raise ValueError(f"unknown policy {policy!r}")
        words = caption_words(caption)
        if not words:
            raise ValueError(f"caption {caption!r} is empty after trimming")
        ids = []
        for w in words:
            tid = self._word_to_id.get(w)
            if tid is None:
                if policy == "strict":
                    raise KeyError(f"word {w!r} not in vocabulary")
                tid = self.unk_id
            ids.append(tid)
        return ids

    def detokenize(self, token_ids: Sequence[int]) -> str:
        return " ".join(self._id_to_word[i] for i in token_ids)


def build_tokenizer(
    class_names: Sequence[str],
    templates: Sequence[PromptTemplate],
    bank: ConceptBank | None = None,
    extra_words: Sequence[str] = (),
) -> Tokenizer:
    """Vocabulary from everything the pipeline may ever tokenize: class
    names, template words, descriptor words, and dataset attribute words."""
    sources: list[str] = list(class_names)
    for tpl in templates:
        sources.append(tpl.template.replace(PLACEHOLDER, " "))
    if bank is not None:
        for concept in bank.concepts:
            for desc in bank.descriptors(concept):
                sources.append(desc.template.replace(PLACEHOLDER, " "))
    sources.append(PHOTO_PREFIX)
    sources.extend(extra_words)
    return Tokenizer(sources)
