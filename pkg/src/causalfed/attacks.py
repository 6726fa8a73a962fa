"""Privacy and robustness evaluations.

Membership inference follows the shadow-model recipe: train ``k`` shadow
models exactly like the target, label their confidence vectors with the
known membership bit, fit a logistic-regression attacker and score it on the
target's balanced member / non-member sets. Property inference probes the
hidden representation with a linear softmax classifier. Backdoors are
single-pixel triggers or semantic (rotated source class) relabelling.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from causalfed.data import Environment, concat_envs
from causalfed.errors import ConfigurationError, InputError
from causalfed.numerics import ModelParams, featurize, per_example_loss, predict_logits, softmax

MIN_SAMPLES = 1


@dataclass(frozen=True)
class AttackFeatures:
    """Descending-sorted softmax vector plus per-example loss, with ground truth."""

    features: np.ndarray
    labels: np.ndarray
    membership: np.ndarray

    def __len__(self) -> int:
        return len(self.membership)

    @classmethod
    def concat(cls, parts: Sequence["AttackFeatures"]) -> "AttackFeatures":
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.membership for p in parts]),
        )


@dataclass(frozen=True)
class BackdoorSpec:
    kind: str = "single_pixel"
    target_label: int = 0
    poison_fraction: float = 0.5
    attacker_clients: tuple[int, ...] = (0,)
    pixel: tuple[int, int] = (0, 0)
    value: float = 1.0
    angle: int = 15
    source_label: int = 7

    def __post_init__(self):
        if self.kind not in ("single_pixel", "semantic"):
            raise ConfigurationError(f"unknown backdoor kind {self.kind!r}")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ConfigurationError("poison_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target_label": self.target_label,
            "poison_fraction": self.poison_fraction,
            "attacker_clients": list(self.attacker_clients),
            "pixel": list(self.pixel),
            "value": self.value,
            "angle": self.angle,
            "source_label": self.source_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackdoorSpec":
        d = dict(d)
        for key in ("attacker_clients", "pixel"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class AttackReport:
    attack: str
    accuracy: float
    dataset: str = ""
    algorithm: str = ""
    config_hash: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise InputError(f"attack accuracy {self.accuracy} outside [0, 1]")

    def to_row(self) -> dict:
        return {
            "attack": self.attack,
            "dataset": self.dataset,
            "algorithm": self.algorithm,
            "accuracy": self.accuracy,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }


# --- membership inference ----------------------------------------------------


@dataclass(frozen=True)
class AttackSplit:
    target_in: np.ndarray
    target_out: np.ndarray
    shadows: tuple[tuple[np.ndarray, np.ndarray], ...]

    def all_sets(self) -> list[np.ndarray]:
        out = [self.target_in, self.target_out]
        for a, b in self.shadows:
            out += [a, b]
        return out


def split_attack_data(pool, n_member: int, n_nonmember: int, seed: int, n_shadows: int = 4) -> AttackSplit:
    """Disjoint member / non-member index sets for the target and every shadow.

    ``pool`` is either a pool size or a sequence whose length is used.
    """
    size = pool if isinstance(pool, (int, np.integer)) else len(pool)
    need = (n_member + n_nonmember) * (n_shadows + 1)
    if need > size:
        raise InputError(f"attack split needs {need} pool samples, have {size}")
    perm = np.random.default_rng([seed, 0xA7]).permutation(size)
    sets, pos = [], 0
    for _ in range(n_shadows + 1):
        sets.append((np.sort(perm[pos:pos + n_member]), np.sort(perm[pos + n_member:pos + n_member + n_nonmember])))
        pos += n_member + n_nonmember
    return AttackSplit(sets[0][0], sets[0][1], tuple(sets[1:]))


@dataclass(frozen=True)
class ShadowPool:
    members: tuple[Environment, ...]
    nonmembers: tuple[Environment, ...]


def model_logits(model, x: np.ndarray) -> np.ndarray:
    """Logits from trained parameters or from any callable ``x -> logits``."""
    if isinstance(model, ModelParams):
        return predict_logits(model, x)
    return np.asarray(model(x), dtype=np.float64)


def attack_features(model, x: np.ndarray, y: np.ndarray, member: int) -> AttackFeatures:
    z = model_logits(model, x)
    probs = -np.sort(-softmax(z), axis=1)
    loss = per_example_loss(z, y)
    return AttackFeatures(
        np.column_stack([probs, loss]),
        np.asarray(y, dtype=np.int64),
        np.full(len(y), member, dtype=np.int64),
    )


def _pool_features(params, pool: ShadowPool) -> AttackFeatures:
    parts = [attack_features(params, e.x, e.y, 1) for e in pool.members]
    parts += [attack_features(params, e.x, e.y, 0) for e in pool.nonmembers]
    return AttackFeatures.concat(parts)


Recipe = Callable[[Sequence[Environment], int], "ModelParams | Callable"]


def train_shadows(k: int, pools: Sequence[ShadowPool], recipe: Recipe, seed: int = 0):
    """Trains ``k`` shadows with the target's recipe; returns (models, features)."""
    if k < 1:
        raise ConfigurationError("need at least one shadow model")
    if len(pools) < k:
        raise InputError(f"{k} shadows requested but only {len(pools)} pools given")
    models, feats = [], []
    for i in range(k):
        params = recipe(pools[i].members, seed + 1 + i)
        models.append(params)
        feats.append(_pool_features(params, pools[i]))
    return models, AttackFeatures.concat(feats)


@dataclass(frozen=True)
class LogisticAttacker:
    mean: np.ndarray
    scale: np.ndarray
    w: np.ndarray
    b: float
    epochs_run: int

    def decision(self, features: np.ndarray) -> np.ndarray:
        return ((np.asarray(features) - self.mean) / self.scale) @ self.w + self.b

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.decision(features) > 0).astype(np.int64)

    def accuracy(self, feats: AttackFeatures) -> float:
        return float(np.mean(self.predict(feats.features) == feats.membership))


def _standardize(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    return mean, np.where(scale > 1e-12, scale, 1.0)


def train_membership_attacker(
    feats: AttackFeatures, seed: int = 0, epochs: int = 500, tol: float = 1e-6, lr: float = 0.5
) -> LogisticAttacker:
    """Full-batch gradient descent on the logistic loss until the loss moves < tol."""
    bits = np.asarray(feats.membership)
    if len(np.unique(bits)) < 2:
        raise InputError("membership attacker needs both member and non-member rows")
    mean, scale = _standardize(feats.features)
    x = (feats.features - mean) / scale
    rng = np.random.default_rng([seed, 0xB1])
    w = rng.normal(0.0, 0.01, x.shape[1])
    b, prev, epoch = 0.0, np.inf, 0
    for epoch in range(1, epochs + 1):
        logits = x @ w + b
        p = 1.0 / (1.0 + np.exp(-logits))
        loss = float(np.mean(np.logaddexp(0.0, logits) - bits * logits))
        err = (p - bits) / len(bits)
        w = w - lr * (x.T @ err)
        b = b - lr * float(err.sum())
        if abs(prev - loss) < tol:
            break
        prev = loss
    return LogisticAttacker(mean, scale, w, b, epoch)


def membership_leakage(
    params,
    members: Sequence[Environment],
    nonmembers: Sequence[Environment],
    attacker,
    **report_fields,
) -> AttackReport:
    """Attacker accuracy on the target's balanced member / non-member sets."""
    feats = _pool_features(params, ShadowPool(tuple(members), tuple(nonmembers)))
    n_in = int(feats.membership.sum())
    n_out = len(feats) - n_in
    if n_in == 0 or n_out == 0 or abs(n_in - n_out) > 0.01 * len(feats):
        raise InputError(f"membership sets must be balanced within 1%, got {n_in} vs {n_out}")
    pred = attacker.predict(feats.features)
    acc = float(np.mean(pred == feats.membership))
    return AttackReport("membership", acc, extra={"n_member": n_in, "n_nonmember": n_out}, **report_fields)


def make_attack_pools(
    pool_envs_builder: Callable[[np.ndarray, int], list[Environment]],
    pool_size: int,
    n_member: int,
    n_nonmember: int,
    n_shadows: int,
    seed: int,
) -> tuple[ShadowPool, list[ShadowPool], AttackSplit]:
    """Builds target and shadow worlds from disjoint index sets of one pool.

    ``pool_envs_builder(indices, seed)`` turns base indices into client
    environments (e.g. rotated copies).
    """
    split = split_attack_data(pool_size, n_member, n_nonmember, seed, n_shadows)

    def world(pair, i):
        members = pool_envs_builder(pair[0], seed * 1000 + 2 * i)
        nonmembers = pool_envs_builder(pair[1], seed * 1000 + 2 * i + 1)
        return ShadowPool(tuple(members), tuple(nonmembers))

    target = world((split.target_in, split.target_out), 0)
    shadows = [world(pair, i + 1) for i, pair in enumerate(split.shadows)]
    return target, shadows, split


def run_membership_attack(
    target_params,
    target: ShadowPool,
    shadows: Sequence[ShadowPool],
    recipe: Recipe,
    seed: int = 0,
    **report_fields,
) -> AttackReport:
    _, feats = train_shadows(len(shadows), shadows, recipe, seed)
    attacker = train_membership_attacker(feats, seed)
    report = membership_leakage(target_params, target.members, target.nonmembers, attacker, seed=seed,
                                **report_fields)
    shadow_acc = attacker.accuracy(feats)
    return AttackReport(report.attack, report.accuracy, report.dataset, report.algorithm, report.config_hash,
                        report.seed, {**report.extra, "shadow_train_accuracy": shadow_acc})


# --- property inference ------------------------------------------------------


def _softmax_regression(x, y, n_classes, epochs=500, lr=0.5, tol=1e-7):
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    prev = np.inf
    for _ in range(epochs):
        p = softmax(x @ w + b)
        loss = float(-np.mean(np.log(np.maximum((p * onehot).sum(axis=1), 1e-300))))
        g = (p - onehot) / len(y)
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
        if abs(prev - loss) < tol:
            break
        prev = loss
    return w, b


def property_leakage(
    params: ModelParams,
    x: np.ndarray,
    attribute: np.ndarray,
    seed: int = 0,
    attribute_name: str = "domain",
    epochs: int = 500,
    **report_fields,
) -> AttackReport:
    """Linear probe ``h -> attribute``, trained on half the examples, scored on the rest.

    The split is stratified by attribute value.
    """
    attribute = np.asarray(attribute)
    values, codes = np.unique(attribute, return_inverse=True)
    if len(values) < 2:
        raise InputError("property inference needs at least two attribute values")
    rng = np.random.default_rng([seed, 0xB2])
    train_idx, test_idx = [], []
    for v in range(len(values)):
        idx = rng.permutation(np.flatnonzero(codes == v))
        half = len(idx) // 2
        train_idx.append(idx[:half])
        test_idx.append(idx[half:])
    train_idx, test_idx = np.concatenate(train_idx), np.concatenate(test_idx)
    h = np.concatenate([featurize(params, x[i:i + 2048])[0] for i in range(0, len(x), 2048)])
    mean, scale = _standardize(h[train_idx])
    hs = (h - mean) / scale
    w, b = _softmax_regression(hs[train_idx], codes[train_idx], len(values), epochs)
    pred = (hs[test_idx] @ w + b).argmax(axis=1)
    acc = float(np.mean(pred == codes[test_idx]))
    return AttackReport(f"property_{attribute_name}", acc, seed=seed, **report_fields)


# --- backdoors ---------------------------------------------------------------


def env_digest(env: Environment) -> str:
    h = hashlib.sha256()
    for arr in (env.x, env.y, env.color, env.angle, env.digit, env.domain):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def apply_trigger(x: np.ndarray, spec: BackdoorSpec) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    r, c = spec.pixel
    x[:, :, r, c] = spec.value
    return x


def poison(env: Environment, spec: BackdoorSpec, seed: int = 0) -> Environment:
    """Returns a poisoned copy of ``env``; the input is never modified."""
    n = len(env)
    rng = np.random.default_rng([seed, env.domain_id, 0xBD])
    if spec.kind == "single_pixel":
        if not 0 <= spec.target_label < env.n_classes:
            raise ConfigurationError("target_label outside the class range")
        k = int(round(spec.poison_fraction * n))
        if k == 0:
            return env
        idx = np.sort(rng.choice(n, size=k, replace=False))
        x = np.array(env.x)
        x[idx] = apply_trigger(x[idx], spec)
        y = np.array(env.y)
        y[idx] = spec.target_label
        return env.with_data(x=x, y=y)
    if env.shift_kind != "rotated":
        raise ConfigurationError("semantic backdoor needs a rotated-digit environment")
    cand = np.flatnonzero((env.digit == spec.source_label) & (env.angle == spec.angle))
    k = int(round(spec.poison_fraction * len(cand)))
    if k == 0:
        return env
    idx = np.sort(rng.choice(cand, size=k, replace=False))
    y = np.array(env.y)
    y[idx] = spec.target_label
    return env.with_data(y=y)


def attack_success_rate(
    params: ModelParams,
    clean_env: Environment,
    spec: BackdoorSpec,
    clean_reference: float | None = None,
    **report_fields,
) -> AttackReport:
    """Fraction of triggered inputs classified as the target label.

    ``extra`` carries clean accuracy and, given ``clean_reference`` (accuracy
    of an unpoisoned model), the clean-accuracy drop.
    """
    z_clean = model_logits(params, clean_env.x)
    clean_acc = float(np.mean(z_clean.argmax(axis=1) == clean_env.y))
    if spec.kind == "single_pixel":
        sel = np.flatnonzero(clean_env.y != spec.target_label)
        if len(sel) == 0:
            raise InputError("no test examples outside the target class")
        pred = model_logits(params, apply_trigger(clean_env.x[sel], spec)).argmax(axis=1)
    else:
        sel = np.flatnonzero((clean_env.digit == spec.source_label) & (clean_env.angle == spec.angle))
        if len(sel) == 0:
            raise InputError("no source-class examples at the trigger angle")
        pred = z_clean[sel].argmax(axis=1)
    asr = float(np.mean(pred == spec.target_label))
    extra = {"clean_accuracy": clean_acc, "n_triggered": int(len(sel))}
    if clean_reference is not None:
        extra["clean_accuracy_drop"] = clean_reference - clean_acc
    return AttackReport(f"backdoor_{spec.kind}", asr, extra=extra, **report_fields)


def pooled(envs: Sequence[Environment], name: str = "pooled") -> Environment:
    return concat_envs(list(envs), domain_id=-1, role="attack", name=name)
