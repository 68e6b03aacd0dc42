"""Relevance scoring of reference visual tokens and the binary semantic mask.

The pipeline is: row-normalize visual and textual hidden states, take their
cosine-similarity matrix, average each visual token's similarities over the
text tokens, and threshold the result into a {0, -inf} additive attention
bias.  A fallback keeps the single highest-scoring token visible when nothing
clears the threshold, so downstream attention rows never degenerate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .numkit import ShapeError


class BridgeError(Exception):
    pass


class StreamError(BridgeError):
    """A required stream is missing from the activations."""


class EmptyTextError(BridgeError):
    pass


class UnnormalizedInputError(BridgeError):
    pass


@dataclass
class SemanticMask:
    """Per-reference-visual-token additive attention bias in {0, -inf}."""

    bias: np.ndarray  # float64[n], entries exactly 0.0 or -inf
    relevance: np.ndarray  # float64[n], mean cosine similarity per token
    threshold: float
    source_layer: int = -1
    fallback_applied: bool = False

    def __len__(self) -> int:
        return len(self.bias)

    @property
    def visible(self) -> np.ndarray:
        return self.bias == 0.0

    def to_json(self) -> dict:
        return {
            "relevance": [float(x) for x in self.relevance],
            "tau": self.threshold,
            "bias_visible": [bool(v) for v in self.visible],
            "fallback_applied": self.fallback_applied,
        }

    def dump(self, fh) -> None:
        fh.write(json.dumps(self.to_json(), sort_keys=True) + "\n")


def normalize_hidden(H: np.ndarray) -> np.ndarray:
    """Row-wise unit L2 normalization of hidden states."""
    return numkit.l2_normalize_rows(np.asarray(H, dtype=np.float64))


def similarity_matrix(Hv_hat: np.ndarray, Ht_hat: np.ndarray) -> np.ndarray:
    """Cosine similarities between normalized visual and text states."""
    Hv_hat = np.asarray(Hv_hat, dtype=np.float64)
    Ht_hat = np.asarray(Ht_hat, dtype=np.float64)
    if Hv_hat.ndim != 2 or Ht_hat.ndim != 2 or Hv_hat.shape[1] != Ht_hat.shape[1]:
        raise ShapeError(f"similarity_matrix: incompatible shapes {Hv_hat.shape} vs {Ht_hat.shape}")
    for name, m in (("visual", Hv_hat), ("text", Ht_hat)):
        if m.shape[0]:
            norms = np.linalg.norm(m, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-4:
                raise UnnormalizedInputError(f"similarity_matrix: {name} rows are not unit-norm")
    return Hv_hat @ Ht_hat.T


def relevance_scores(S: np.ndarray) -> np.ndarray:
    """Mean similarity of each visual token over all text tokens."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ShapeError("relevance_scores: input must be 2-D")
    if S.shape[1] == 0:
        raise EmptyTextError("relevance_scores: no text tokens")
    return S.mean(axis=1)


def build_mask(s: np.ndarray, tau: float, source_layer: int = -1) -> SemanticMask:
    """Threshold relevance into a binary bias; strictly-greater keeps a token.

    If nothing clears tau, the argmax token (lowest index on ties) stays
    visible and fallback_applied is set.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError("build_mask: scores must be 1-D")
    if s.size and (s.min() < -1 - 1e-6 or s.max() > 1 + 1e-6):
        raise BridgeError("build_mask: scores outside [-1, 1]")
    bias = np.where(s > tau, 0.0, -np.inf)
    fallback = False
    if s.size and not (s > tau).any():
        bias[int(np.argmax(s))] = 0.0
        fallback = True
    return SemanticMask(bias=bias, relevance=s.copy(), threshold=float(tau), source_layer=source_layer, fallback_applied=fallback)


def apply_mask_bias(A: np.ndarray, mask: SemanticMask) -> np.ndarray:
    """Add the bias to attention logits mapping target rows to reference columns."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[1] != len(mask):
        raise ShapeError(f"apply_mask_bias: logits {A.shape} vs mask length {len(mask)}")
    return A + mask.bias[None, :].astype(A.dtype)


def compute_mask_from_states(Hv: np.ndarray, Ht: np.ndarray, tau: float, source_layer: int = -1) -> SemanticMask:
    """Full pipeline on raw (unnormalized) hidden states."""
    if Hv.shape[0] == 0:
        return SemanticMask(
            bias=np.zeros(0), relevance=np.zeros(0), threshold=float(tau), source_layer=source_layer
        )
    if Ht.shape[0] == 0:
        raise EmptyTextError("compute_mask_from_states: no text states")
    s = relevance_scores(similarity_matrix(normalize_hidden(Hv), normalize_hidden(Ht)))
    return build_mask(s, tau, source_layer=source_layer)


def compute_mask_from_activations(acts, cfg, tau: float) -> SemanticMask:
    """Mask from a recorded forward pass at the configured source layer.

    ``acts`` is a model.LayerActivations; uses understanding-expert visual
    states vs. text states (sentinel tokens excluded).
    """
    layer = cfg.mask_source_layer
    Hv = acts.visual_und_states(layer)
    Ht = acts.text_content_states(layer)
    if Hv.shape[0] == 0:
        return SemanticMask(bias=np.zeros(0), relevance=np.zeros(0), threshold=float(tau), source_layer=layer)
    if Ht is None or Ht.shape[0] == 0:
        raise StreamError("compute_mask_from_activations: no text stream in activations")
    return compute_mask_from_states(Hv, Ht, tau, source_layer=layer)
