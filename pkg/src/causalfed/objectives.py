"""Training objectives over per-environment batches: ERM, the IRMv1
dummy-scale gradient penalty and the random-match (RMatch) representation
penalty, each returning analytic gradients w.r.t. logits / representations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from causalfed.errors import ConfigurationError, InputError, ShapeError
from causalfed.numerics import softmax, softmax_cross_entropy

OBJECTIVES = ("erm", "irm", "rmatch")


@dataclass
class EnvBatch:
    domain_id: int
    h: np.ndarray
    z: np.ndarray
    labels: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) < 1:
            raise InputError(f"empty batch for domain {self.domain_id}")
        if self.z is not None and self.z.shape[0] != len(self.labels):
            raise ShapeError("logit rows must match label count")
        if self.h is not None and self.h.shape[0] != len(self.labels):
            raise ShapeError("representation rows must match label count")


@dataclass(frozen=True)
class MatchPairing:
    """Cross-domain same-class pairs as (domain_a, j, domain_b, k)."""

    pairs: np.ndarray  # P x 4 int64
    seed: int | tuple = 0

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float = 100.0
    warmup_rounds: int = 0
    lambda_initial: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.lambda_initial < 0:
            raise ConfigurationError("penalty weights must be non-negative")
        if self.warmup_rounds < 0:
            raise ConfigurationError("warmup_rounds must be non-negative")

    def effective(self, round_idx: int) -> float:
        return self.lambda_initial if round_idx < self.warmup_rounds else self.lam

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "warmup_rounds": self.warmup_rounds, "lambda_initial": self.lambda_initial}

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        return cls(float(d.get("lambda", 100.0)), int(d.get("warmup_rounds", 0)), float(d.get("lambda_initial", 1.0)))


def erm_loss(batches: Sequence[EnvBatch]) -> tuple[float, list[np.ndarray]]:
    """Mean over environments of each environment's mean cross-entropy."""
    if not batches:
        raise InputError("erm_loss needs at least one batch")
    m = len(batches)
    total, grads = 0.0, []
    for b in batches:
        loss, g = softmax_cross_entropy(b.z, b.labels)
        total += loss
        grads.append(g / m)
    return total / m, grads


def irm_penalty(batch: EnvBatch) -> tuple[float, np.ndarray]:
    """Squared derivative of the batch risk w.r.t. a scalar logit scale at 1.

    With ``p = softmax(z)``, ``g = mean_i sum_k (p_ik - y_ik) z_ik`` and the
    penalty is ``g**2``. Its logit gradient is closed-form:
    ``2 g / N * [(p - y) + p * (z - sum_k p z)]``.
    """
    z = np.asarray(batch.z, dtype=np.float64)
    n, k = z.shape
    p = softmax(z)
    resid = p.copy()
    resid[np.arange(n), batch.labels] -= 1.0
    g = float((resid * z).sum() / n)
    centred = z - (p * z).sum(axis=1, keepdims=True)
    grad = 2.0 * g / n * (resid + p * centred)
    return g * g, grad


def rmatch_penalty(batches: Sequence[EnvBatch], pairing: MatchPairing) -> tuple[float, list[np.ndarray]]:
    """Mean squared Euclidean distance between paired representations."""
    sizes = [len(b.labels) for b in batches]
    offsets = dict(zip((b.domain_id for b in batches), np.cumsum([0] + sizes[:-1])))
    size_of = dict(zip((b.domain_id for b in batches), sizes))
    pairs = np.asarray(pairing.pairs, dtype=np.int64).reshape(-1, 4)
    if len(pairs) == 0:
        return 0.0, [np.zeros_like(b.h, dtype=np.float64) for b in batches]
    for da, j, db, k in pairs:
        if da not in offsets or db not in offsets:
            raise InputError(f"pair references unknown domain ({da}, {db})")
        if not (0 <= j < size_of[da] and 0 <= k < size_of[db]):
            raise InputError(f"pair index out of range: ({da}, {j}, {db}, {k})")
    h = np.concatenate([np.asarray(b.h, dtype=np.float64) for b in batches])
    ia = np.array([offsets[d] for d in pairs[:, 0]]) + pairs[:, 1]
    ib = np.array([offsets[d] for d in pairs[:, 2]]) + pairs[:, 3]
    diff = h[ia] - h[ib]
    n_pairs = len(pairs)
    grad = np.zeros_like(h)
    np.add.at(grad, ia, 2.0 * diff / n_pairs)
    np.add.at(grad, ib, -2.0 * diff / n_pairs)
    return float((diff * diff).sum() / n_pairs), np.split(grad, np.cumsum(sizes)[:-1])


def build_matches(envs: Sequence, pairs_per_class: int, seed) -> MatchPairing:
    """Samples same-class pairs for every class and every unordered domain pair.

    ``envs`` may be EnvBatches or Environments: anything with ``labels`` (or
    ``y``) and ``domain_id``. A class missing from either side of a domain
    pair is skipped.
    """
    if len(envs) < 2:
        raise ConfigurationError("random matching needs at least two environments")
    rng = np.random.default_rng(seed)
    labels = [np.asarray(e.labels if hasattr(e, "labels") else e.y) for e in envs]
    domains = [int(e.domain_id) for e in envs]
    classes = np.unique(np.concatenate(labels))
    out = []
    for c in classes:
        members = [np.flatnonzero(lab == c) for lab in labels]
        for a in range(len(envs)):
            for b in range(a + 1, len(envs)):
                if len(members[a]) == 0 or len(members[b]) == 0:
                    continue
                j = rng.choice(members[a], pairs_per_class)
                k = rng.choice(members[b], pairs_per_class)
                out.append(np.column_stack([np.full(pairs_per_class, domains[a]), j,
                                            np.full(pairs_per_class, domains[b]), k]))
    pairs = np.concatenate(out).astype(np.int64) if out else np.zeros((0, 4), dtype=np.int64)
    return MatchPairing(pairs, seed)


def server_loss(
    batches: Sequence[EnvBatch],
    config: PenaltyConfig,
    objective: str,
    round_idx: int,
    pairing: MatchPairing | None = None,
) -> tuple[float, list[np.ndarray], list[np.ndarray], dict]:
    """Composite objective ``ERM + lambda_eff * penalty``.

    Returns ``(L_s, grad_z, grad_h_direct, info)``. ``grad_h_direct`` holds
    the part of ``dL/dh`` that does not flow through the logits (non-zero
    only for rmatch); the total is ``grad_z @ W.T + grad_h_direct``.
    ``info`` carries the unweighted penalty and the lambda used.
    """
    if objective not in OBJECTIVES:
        raise ConfigurationError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    loss, grad_z = erm_loss(batches)
    grad_h = [np.zeros_like(b.h, dtype=np.float64) if b.h is not None else None for b in batches]
    lam = config.effective(round_idx)
    penalty = 0.0
    if objective == "irm":
        for i in np.argsort([b.domain_id for b in batches], kind="stable"):
            d, g = irm_penalty(batches[i])
            penalty += d
            if lam:
                grad_z[i] = grad_z[i] + lam * g
    elif objective == "rmatch":
        if pairing is None:
            raise ConfigurationError("rmatch objective needs a MatchPairing")
        penalty, gh = rmatch_penalty(batches, pairing)
        if lam:
            grad_h = [lam * g for g in gh]
    return loss + lam * penalty, grad_z, grad_h, {"penalty": penalty, "lambda": lam, "erm": loss}
