"""Synthetic group-shift benchmark: feature-vector images whose class signal
and spurious attribute signal live in separate blocks, with a controllable
train-time correlation between them.

The train and validation splits share the biased attribute distribution
(so model selection cannot peek at balance); the test split is group
balanced.  A teacher is pre-trained on a *balanced* dataset with captions
naming both the class and the attribute, which grounds the attribute words
in its text tower.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import DualEncoderParams
from .prompts import ConceptBank, DescriptorTemplate, inject_spuriosity

DATASET_FORMAT = "grouped-feature-dataset"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 2
    n_attributes: int = 2
    class_dim: int = 8
    attribute_dim: int = 8
    noise_dim: int = 16
    rho: float = 0.95
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 800
    noise_scale: float = 0.5
    class_scale: float = 1.0
    attribute_scale: float = 1.0
    class_names: tuple[str, ...] = ("waterbird", "landbird")
    attribute_names: tuple[str, ...] = ("wetland", "woodland")

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if len(self.class_names) != self.n_classes:
            raise ValueError("need one class name per class")
        if len(self.attribute_names) != self.n_attributes:
            raise ValueError("need one attribute name per attribute")
        names = list(self.class_names) + list(self.attribute_names)
        if len(set(names)) != len(names):
            raise ValueError("class and attribute names must be unique")
        if self.n_classes > self.class_dim or self.n_attributes > self.attribute_dim:
            raise ValueError("signal blocks must fit one-hot patterns")
        if min(self.n_classes, self.n_attributes) < 1:
            raise ValueError("need at least one class and one attribute")

    @property
    def input_dim(self) -> int:
        return self.class_dim + self.attribute_dim + self.noise_dim

    @property
    def n_groups(self) -> int:
        return self.n_classes * self.n_attributes

    def aligned_attribute(self, class_id: int) -> int:
        return class_id % self.n_attributes

    def balanced(self) -> "SynthSpec":
        """Same world with attribute independent of class (uniform)."""
        return replace(self, rho=1.0 / self.n_attributes)


def attribute_descriptor(spec: SynthSpec, attribute_id: int) -> DescriptorTemplate:
    name = spec.attribute_names[attribute_id]
    return DescriptorTemplate("{class} in the " + name, "background")


def synthetic_bank(spec: SynthSpec) -> ConceptBank:
    """Concept bank whose descriptors name exactly the dataset's confounders."""
    return ConceptBank(
        {
            "background": [
                attribute_descriptor(spec, a) for a in range(spec.n_attributes)
            ]
        }
    )


@dataclass
class DataSplit:
    features: np.ndarray
    class_ids: np.ndarray
    attribute_ids: np.ndarray
    group_ids: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class GroupedDataset:
    spec: SynthSpec
    features: np.ndarray
    class_ids: np.ndarray
    attribute_ids: np.ndarray
    group_ids: np.ndarray
    split_codes: np.ndarray  # index into SPLITS
    seed_note: str = ""

    def __post_init__(self) -> None:
        n = self.features.shape[0]
        for name in ("class_ids", "attribute_ids", "group_ids", "split_codes"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per sample")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.features.shape[1] != self.spec.input_dim:
            raise ValueError("feature width does not match the spec's input_dim")
        expected = self.class_ids * self.spec.n_attributes + self.attribute_ids
        if not np.array_equal(self.group_ids, expected):
            raise ValueError("group ids inconsistent with (class, attribute)")
        if self.split_codes.min() < 0 or self.split_codes.max() >= len(SPLITS):
            raise ValueError("unknown split code")

    def split(self, tag: str) -> DataSplit:
        if tag not in SPLITS:
            raise ValueError(f"unknown split {tag!r}")
        idx = self.split_codes == SPLITS.index(tag)
        return DataSplit(
            features=self.features[idx],
            class_ids=self.class_ids[idx],
            attribute_ids=self.attribute_ids[idx],
            group_ids=self.group_ids[idx],
        )


def _stratified_classes(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly-uniform class marginal: equal counts (+round-robin remainder),
    then shuffled."""
    per = n // n_classes
    ids = np.repeat(np.arange(n_classes), per)
    ids = np.concatenate([ids, np.arange(n % n_classes)])
    rng.shuffle(ids)
    return ids


def _sample_attributes(
    spec: SynthSpec, class_ids: np.ndarray, rho: float, rng: np.random.Generator
) -> np.ndarray:
    aligned = class_ids % spec.n_attributes
    if spec.n_attributes == 1:
        return aligned
    take_aligned = rng.random(class_ids.shape[0]) < rho
    offsets = rng.integers(1, spec.n_attributes, size=class_ids.shape[0])
    others = (aligned + offsets) % spec.n_attributes
    return np.where(take_aligned, aligned, others)


def _features(
    spec: SynthSpec,
    class_ids: np.ndarray,
    attribute_ids: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    n = class_ids.shape[0]
    x = rng.normal(0.0, spec.noise_scale, size=(n, spec.input_dim))
    x[np.arange(n), class_ids] += spec.class_scale
    x[np.arange(n), spec.class_dim + attribute_ids] += spec.attribute_scale
    return x


def _balanced_groups(spec: SynthSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    per = n // spec.n_groups
    classes, attrs = [], []
    for c in range(spec.n_classes):
        for a in range(spec.n_attributes):
            classes.extend([c] * per)
            attrs.extend([a] * per)
    for k in range(n - per * spec.n_groups):
        classes.append(k % spec.n_classes)
        attrs.append((k // spec.n_classes) % spec.n_attributes)
    return np.asarray(classes), np.asarray(attrs)


def generate(spec: SynthSpec, rng: np.random.Generator) -> GroupedDataset:
    """Draw a full dataset: biased train and val splits, balanced test split."""
    feats, cls, attr, codes = [], [], [], []
    for tag, n in (("train", spec.n_train), ("val", spec.n_val)):
        c = _stratified_classes(n, spec.n_classes, rng)
        a = _sample_attributes(spec, c, spec.rho, rng)
        feats.append(_features(spec, c, a, rng))
        cls.append(c)
        attr.append(a)
        codes.append(np.full(n, SPLITS.index(tag)))
    c, a = _balanced_groups(spec, spec.n_test)
    order = rng.permutation(spec.n_test)
    c, a = c[order], a[order]
    feats.append(_features(spec, c, a, rng))
    cls.append(c)
    attr.append(a)
    codes.append(np.full(spec.n_test, SPLITS.index("test")))

    class_ids = np.concatenate(cls)
    attribute_ids = np.concatenate(attr)
    return GroupedDataset(
        spec=spec,
        features=np.concatenate(feats),
        class_ids=class_ids,
        attribute_ids=attribute_ids,
        group_ids=class_ids * spec.n_attributes + attribute_ids,
        split_codes=np.concatenate(codes).astype(np.int64),
    )


def aligned_fraction(spec: SynthSpec, split: DataSplit) -> float:
    """Fraction of samples whose attribute is their class-aligned one."""
    aligned = split.class_ids % spec.n_attributes
    return float(np.mean(split.attribute_ids == aligned))


def pretrain_caption(spec: SynthSpec, class_id: int, attribute_id: int) -> str:
    """Caption naming both the class and the attribute, used to ground
    attribute words in the teacher's text tower."""
    return inject_spuriosity(
        spec.class_names[class_id], attribute_descriptor(spec, attribute_id)
    )


def pretrain_teacher(dataset: GroupedDataset, config) -> DualEncoderParams:
    """Contrastive pre-training of a fresh dual encoder on balanced data.

    This produces the frozen zero-shot reference model.  The dataset must be
    (approximately) group balanced; pre-training on biased data would bake
    the confounder into the reference itself.
    """
    from . import trainer  # deferred: trainer builds on this module's types

    spec = dataset.spec
    frac = aligned_fraction(spec, dataset.split("train"))
    limit = 1.0 / spec.n_attributes + 0.05
    if frac > limit:
        raise ValueError(
            f"teacher pre-training requires balanced data: aligned fraction "
            f"{frac:.3f} exceeds {limit:.3f}"
        )
    return trainer.run_pretraining(dataset, config)


# -- container ----------------------------------------------------------------


def save_dataset(dataset: GroupedDataset, path: str | Path) -> None:
    spec = dataset.spec
    doc = {
        "format": DATASET_FORMAT,
        "version": 1,
        "spec": {
            "n_classes": spec.n_classes,
            "n_attributes": spec.n_attributes,
            "class_dim": spec.class_dim,
            "attribute_dim": spec.attribute_dim,
            "noise_dim": spec.noise_dim,
            "rho": spec.rho,
            "n_train": spec.n_train,
            "n_val": spec.n_val,
            "n_test": spec.n_test,
            "noise_scale": spec.noise_scale,
            "class_scale": spec.class_scale,
            "attribute_scale": spec.attribute_scale,
            "class_names": list(spec.class_names),
            "attribute_names": list(spec.attribute_names),
        },
        "seed_note": dataset.seed_note,
        "features": dataset.features.tolist(),
        "class_ids": dataset.class_ids.tolist(),
        "attribute_ids": dataset.attribute_ids.tolist(),
        "group_ids": dataset.group_ids.tolist(),
        "split_tags": [SPLITS[i] for i in dataset.split_codes],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_dataset(path: str | Path) -> GroupedDataset:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: not a {DATASET_FORMAT} file")
    spec_doc = dict(doc["spec"])
    spec_doc["class_names"] = tuple(spec_doc["class_names"])
    spec_doc["attribute_names"] = tuple(spec_doc["attribute_names"])
    spec = SynthSpec(**spec_doc)
    tags = doc["split_tags"]
    for t in tags:
        if t not in SPLITS:
            raise ValueError(f"{path}: unknown split tag {t!r}")
    return GroupedDataset(
        spec=spec,
        features=np.asarray(doc["features"], dtype=np.float64),
        class_ids=np.asarray(doc["class_ids"], dtype=np.int64),
        attribute_ids=np.asarray(doc["attribute_ids"], dtype=np.int64),
        group_ids=np.asarray(doc["group_ids"], dtype=np.int64),
        split_codes=np.asarray([SPLITS.index(t) for t in tags], dtype=np.int64),
        seed_note=doc.get("seed_note", ""),
    )
