"""Toy dual encoder: an image tower over fixed-length feature vectors and a
bag-of-tokens text tower, both emitting unit-norm embeddings, plus the
trainable temperature.  Small enough for exhaustive finite-difference
checks, expressive enough that class tokens and spurious-descriptor tokens
get separate representations.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import Tape, Tensor, normalize_rows

CHECKPOINT_FORMAT = "dual-encoder-checkpoint"

# Canonical parameter ordering, used by the optimizer, the interpolator,
# and the digest.  Weight matrices first, then biases, then temperature.
ARRAY_FIELDS = (
    "img_w1",
    "img_b1",
    "img_w2",
    "img_b2",
    "tok_embed",
    "txt_proj",
    "txt_bias",
    "log_tau",
)

WEIGHT_FIELDS = frozenset({"img_w1", "img_w2", "tok_embed", "txt_proj"})


@dataclass(frozen=True)
class EncoderDims:
    input_dim: int
    hidden: int
    d: int
    vocab_size: int
    d_tok: int


def param_count(dims: EncoderDims) -> int:
    return (
        dims.input_dim * dims.hidden
        + dims.hidden
        + dims.hidden * dims.d
        + dims.d
        + dims.vocab_size * dims.d_tok
        + dims.d_tok * dims.d
        + dims.d
        + 1  # log-temperature
    )


@dataclass
class DualEncoderParams:
    """All trainable weights of both encoders and the log-temperature.

    Temperature is stored as ``log_tau`` (shape-() array) so tau = exp(log_tau)
    stays positive under any gradient update.
    """

    img_w1: np.ndarray
    img_b1: np.ndarray
    img_w2: np.ndarray
    img_b2: np.ndarray
    tok_embed: np.ndarray
    txt_proj: np.ndarray
    txt_bias: np.ndarray
    log_tau: np.ndarray
    seed_lineage: list[str] = field(default_factory=list)

    @property
    def dims(self) -> EncoderDims:
        return EncoderDims(
            input_dim=self.img_w1.shape[0],
            hidden=self.img_w1.shape[1],
            d=self.img_w2.shape[1],
            vocab_size=self.tok_embed.shape[0],
            d_tok=self.tok_embed.shape[1],
        )

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_FIELDS}

    def copy(self) -> "DualEncoderParams":
        return DualEncoderParams(
            **{name: getattr(self, name).copy() for name in ARRAY_FIELDS},
            seed_lineage=list(self.seed_lineage),
        )

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "DualEncoderParams":
        return DualEncoderParams(
            **{name: arrays[name] for name in ARRAY_FIELDS},
            seed_lineage=list(self.seed_lineage),
        )


def init_params(dims: EncoderDims, seed: int) -> DualEncoderParams:
    """Fresh parameters: uniform in +-1/sqrt(fan_in), log_tau = log(0.07)."""
    rng = np.random.default_rng(seed)

    def uniform(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return DualEncoderParams(
        img_w1=uniform((dims.input_dim, dims.hidden), dims.input_dim),
        img_b1=uniform((dims.hidden,), dims.input_dim),
        img_w2=uniform((dims.hidden, dims.d), dims.hidden),
        img_b2=uniform((dims.d,), dims.hidden),
        tok_embed=uniform((dims.vocab_size, dims.d_tok), dims.d_tok),
        txt_proj=uniform((dims.d_tok, dims.d), dims.d_tok),
        txt_bias=uniform((dims.d,), dims.d_tok),
        log_tau=np.asarray(math.log(0.07)),
        seed_lineage=[f"init:{seed}"],
    )


@dataclass
class ParamNodes:
    """The parameter arrays lifted onto one tape as gradient-bearing leaves."""

    img_w1: Tensor
    img_b1: Tensor
    img_w2: Tensor
    img_b2: Tensor
    tok_embed: Tensor
    txt_proj: Tensor
    txt_bias: Tensor
    log_tau: Tensor

    def as_dict(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in ARRAY_FIELDS}


def lift_params(tape: Tape, params: DualEncoderParams) -> ParamNodes:
    return ParamNodes(**{name: tape.param(arr) for name, arr in params.arrays().items()})


# -- forward passes (differentiable; plain wrappers below) ------------------


def image_embeddings(nodes: ParamNodes, features: np.ndarray) -> Tensor:
    """Encode a (N, input_dim) feature matrix to unit-norm rows of dim d."""
    x = nodes.img_w1.tape.constant(features)
    h = (x @ nodes.img_w1 + nodes.img_b1).tanh()
    return normalize_rows(h @ nodes.img_w2 + nodes.img_b2)


def _bag_weights(token_seqs: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    weights = np.zeros((len(token_seqs), vocab_size))
    for i, seq in enumerate(token_seqs):
        if len(seq) == 0:
            raise ValueError("cannot encode an empty token sequence")
        for tok in seq:
            if not 0 <= tok < vocab_size:
                raise ValueError(f"token id {tok} out of vocabulary (size {vocab_size})")
            weights[i, tok] += 1.0
        weights[i] /= len(seq)
    return weights


def text_embeddings(nodes: ParamNodes, token_seqs: Sequence[Sequence[int]]) -> Tensor:
    """Encode token-id sequences: mean token embedding, projected, normalized.

    The mean makes the encoder a bag of tokens: order and multiplicity of
    tokens do not affect the embedding.
    """
    weights = _bag_weights(token_seqs, nodes.tok_embed.value.shape[0])
    w = nodes.tok_embed.tape.constant(weights)
    pooled = w @ nodes.tok_embed
    return normalize_rows(pooled @ nodes.txt_proj + nodes.txt_bias)


def scaled_similarities(x_emb: Tensor, y_emb: Tensor, tau: Tensor) -> Tensor:
    """Temperature-scaled cosine logits (x_i . y_j) / tau as an (N, M) tensor."""
    return (x_emb @ y_emb.T) / tau


# -- plain (non-differentiating) API ----------------------------------------


def encode_image(params: DualEncoderParams, img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (params.dims.input_dim,):
        raise ValueError(
            f"image features have shape {img.shape}, expected ({params.dims.input_dim},)"
        )
    return encode_image_batch(params, img[None, :])[0]


def encode_image_batch(params: DualEncoderParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.dims.input_dim:
        raise ValueError(
            f"feature matrix has shape {features.shape}, expected (*, {params.dims.input_dim})"
        )
    tape = Tape()
    return image_embeddings(lift_params(tape, params), features).value


def encode_text(params: DualEncoderParams, toks: Sequence[int]) -> np.ndarray:
    return encode_text_batch(params, [toks])[0]


def encode_text_batch(
    params: DualEncoderParams, token_seqs: Sequence[Sequence[int]]
) -> np.ndarray:
    tape = Tape()
    return text_embeddings(lift_params(tape, params), token_seqs).value


def similarity_logits(X: np.ndarray, Y: np.ndarray, tau: float) -> np.ndarray:
    """Plain (N, M) logit matrix between unit-norm embedding rows."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    for name, M in (("X", X), ("Y", Y)):
        norms = np.linalg.norm(M, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError(f"{name} rows must be unit norm (max dev {np.max(np.abs(norms - 1.0)):.2e})")
    return (X @ Y.T) / tau


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params: DualEncoderParams, path: str | Path) -> None:
    """Write a self-describing JSON checkpoint; load() round-trips bitwise.

    Floats are serialized with Python repr, which is exact for float64.
    """
    dims = params.dims
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dims": {
            "input_dim": dims.input_dim,
            "hidden": dims.hidden,
            "d": dims.d,
            "vocab_size": dims.vocab_size,
            "d_tok": dims.d_tok,
        },
        "seed_lineage": params.seed_lineage,
        "arrays": {name: arr.tolist() for name, arr in params.arrays().items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> DualEncoderParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    arrays = {
        name: np.asarray(doc["arrays"][name], dtype=np.float64)
        for name in ARRAY_FIELDS
    }
    params = DualEncoderParams(**arrays, seed_lineage=list(doc["seed_lineage"]))
    d = doc["dims"]
    if params.dims != EncoderDims(**{k: int(v) for k, v in d.items()}):
        raise ValueError(f"{path}: declared dims do not match stored arrays")
    return params


def params_digest(params: DualEncoderParams) -> str:
    """SHA-256 over the raw float64 bytes of every array, in canonical order."""
    h = hashlib.sha256()
    for name in ARRAY_FIELDS:
        arr = np.ascontiguousarray(getattr(params, name), dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
