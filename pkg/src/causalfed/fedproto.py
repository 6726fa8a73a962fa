"""Federated protocols.

* CausalFed (split learning): clients run the featurizer and ship ``(h, y)``;
  the server owns the head, evaluates the ERM / IRM / RMatch objective across
  all client environments, steps the head and returns ``dL/dh`` to each client.
* FedAvg: local ERM training, sample-weighted parameter averaging.
* CausalFedGSD: clients receive a small globally shared dataset ``G_0`` and
  train the invariance objective locally over {own env} + G_0's environments,
  followed by FedAvg.

Randomness is derived per (seed, round, purpose, client) so every run is a
pure function of its configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from causalfed.blobs import read_tensors, write_tensors
from causalfed.data import Environment
from causalfed.errors import ConfigurationError, InputError, NumericError, ProtocolError, ShapeError
from causalfed.numerics import (
    ArchSpec,
    ForwardCache,
    Gradients,
    ModelParams,
    backward,
    featurize,
    featurizer_backward,
    forward,
    init_params,
    per_example_loss,
    predict_logits,
    sgd_step,
)
from causalfed.objectives import EnvBatch, MatchPairing, PenaltyConfig, build_matches, server_loss

ALGORITHMS = ("fedavg", "fed_erm", "causalfed_irm", "causalfed_rm", "causalfedgsd_irm", "causalfedgsd_rm")
_OBJECTIVE = {
    "fedavg": "erm",
    "fed_erm": "erm",
    "causalfed_irm": "irm",
    "causalfed_rm": "rmatch",
    "causalfedgsd_irm": "irm",
    "causalfedgsd_rm": "rmatch",
}
CHECKPOINT_FORMAT = "causalfed.checkpoint.v1"
GLOBAL_DOMAIN_OFFSET = 1000

# rng stream tags
_SELECT, _BATCH, _MATCH, _LOCAL, _SHARE = 1, 2, 3, 4, 5


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *(int(t) for t in tags)])


@dataclass(frozen=True)
class FedConfig:
    algorithm: str = "causalfed_irm"
    rounds: int = 50
    clients_per_round: int | None = None
    local_epochs: int = 1
    batch_size: int = 128
    eta: float = 0.1
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    global_share_fraction: float = 0.1
    pairs_per_class: int = 16
    sequential_clients: bool = False
    seed: int = 0

    @property
    def objective(self) -> str:
        return _OBJECTIVE[self.algorithm]

    @property
    def protocol(self) -> str:
        if self.algorithm == "fedavg":
            return "fedavg"
        return "gsd" if self.algorithm.startswith("causalfedgsd") else "split"

    def validate(self, n_clients: int | None = None) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ConfigurationError("batch_size and local_epochs must be >= 1")
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")
        if self.protocol == "gsd" and not 0.0 < self.global_share_fraction <= 1.0:
            raise ConfigurationError("global_share_fraction must lie in (0, 1]")
        if self.sequential_clients:
            # TODO(sequential-chaining): client k starting from client k-1's weights within a round
            raise ConfigurationError("sequential client chaining is not supported; use the shared featurizer")
        if n_clients is not None and self.clients_per_round is not None:
            if not 1 <= self.clients_per_round <= n_clients:
                raise ConfigurationError(f"clients_per_round must be in [1, {n_clients}]")

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "rounds": self.rounds,
            "clients_per_round": self.clients_per_round,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "eta": self.eta,
            "penalty": self.penalty.to_dict(),
            "global_share_fraction": self.global_share_fraction,
            "pairs_per_class": self.pairs_per_class,
            "sequential_clients": self.sequential_clients,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FedConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k != "penalty"}
        return cls(penalty=PenaltyConfig.from_dict(d.get("penalty", {})), **known)


@dataclass(frozen=True)
class ClientPayload:
    """Everything a client discloses to the server in one split-learning round."""

    client_id: int
    domain_id: int
    h: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class GlobalShare:
    G: tuple[Environment, ...]
    G0: tuple[Environment, ...]


@dataclass
class RoundState:
    round: int
    params: ModelParams
    client_featurizers: list
    seed: int
    history: list = field(default_factory=list)


def init_state(arch: ArchSpec, n_clients: int, seed: int) -> RoundState:
    params = init_params(arch, seed)
    return RoundState(0, params, [params.featurizer] * n_clients, seed)


def select_clients(n_clients: int, config: FedConfig, round_idx: int) -> list[int]:
    k = n_clients if config.clients_per_round is None else config.clients_per_round
    if k >= n_clients:
        return list(range(n_clients))
    rng = derive_rng(config.seed, _SELECT, round_idx)
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


# --- split learning ----------------------------------------------------------


def client_representation(
    params: ModelParams, env: Environment, batch_size: int, rng: np.random.Generator, client_id: int = 0
) -> tuple[ClientPayload, ForwardCache]:
    """Featurizes a seeded minibatch; the cache never leaves the client."""
    if len(env) == 0:
        raise ConfigurationError(f"client {client_id} has an empty environment")
    n = len(env)
    idx = np.sort(rng.choice(n, size=min(batch_size, n), replace=False))
    h, cache = featurize(params, env.x[idx])
    return ClientPayload(client_id, env.domain_id, h, env.y[idx].copy()), cache


def server_causal_update(
    head: np.ndarray,
    payloads: Sequence[ClientPayload],
    objective: str,
    penalty: PenaltyConfig,
    round_idx: int,
    eta: float,
    pairs_per_class: int = 16,
    match_seed=0,
) -> tuple[np.ndarray, dict[int, np.ndarray], dict]:
    """One server step on the head; returns ``(new_head, {client_id: dL/dh}, info)``.

    Only ``ClientPayload`` fields are touched here: representations, labels
    and ids.
    """
    if not payloads:
        raise ProtocolError("server update needs at least one client payload")
    payloads = sorted(payloads, key=lambda p: p.client_id)
    d = head.shape[0]
    for p in payloads:
        if p.h.ndim != 2 or p.h.shape[1] != d:
            raise ProtocolError(f"client {p.client_id} sent representations of width {p.h.shape[-1]}, expected {d}")
    if len({p.domain_id for p in payloads}) != len(payloads):
        raise ProtocolError("each payload must come from a distinct domain")
    batches = [EnvBatch(p.domain_id, p.h, p.h @ head, p.labels) for p in payloads]
    pairing = None
    if objective == "rmatch":
        if len(batches) < 2:
            pairing = MatchPairing(np.zeros((0, 4), dtype=np.int64), match_seed)
        else:
            pairing = build_matches(batches, pairs_per_class, match_seed)
    loss, grad_z, grad_h_direct, info = server_loss(batches, penalty, objective, round_idx, pairing)
    grad_head = np.zeros_like(head)
    grads_h = {}
    for p, b, gz, gh in zip(payloads, batches, grad_z, grad_h_direct):
        grad_head += b.h.T @ gz
        grads_h[p.client_id] = gz @ head.T + gh
    info = {**info, "loss": loss}
    return head - eta * grad_head, grads_h, info


def client_update(params: ModelParams, cache: ForwardCache, grad_h: np.ndarray, eta: float) -> ModelParams:
    """Backpropagates the server's ``dL/dh`` and steps the featurizer."""
    grads = featurizer_backward(params, cache, grad_h)
    return sgd_step(params, Gradients(featurizer=grads), eta)


def run_causalfed_round(state: RoundState, envs: Sequence[Environment], config: FedConfig) -> RoundState:
    """Select clients, exchange representations/gradients, re-synchronise.

    All clients share one featurizer; the re-synchronised weights are the
    current weights plus the sum of every selected client's update, i.e. one
    SGD step on the summed server objective.
    """
    t = state.round
    selected = select_clients(len(envs), config, t)
    base = state.params
    payloads, caches, local = [], {}, {}
    for k in selected:
        local[k] = base.replace(featurizer=state.client_featurizers[k])
        payload, cache = client_representation(
            local[k], envs[k], config.batch_size, derive_rng(config.seed, _BATCH, t, k), k
        )
        payloads.append(payload)
        caches[k] = cache
    new_head, grads_h, info = server_causal_update(
        base.head, payloads, config.objective, config.penalty, t, config.eta,
        config.pairs_per_class, [config.seed, _MATCH, t],
    )
    updated = {k: client_update(local[k], caches[k], grads_h[k], config.eta) for k in selected}
    if len(selected) == 1:
        shared = updated[selected[0]].featurizer
    else:
        shared = tuple(
            p + sum(updated[k].featurizer[i] - p for k in selected) for i, p in enumerate(base.featurizer)
        )
    params = ModelParams(base.arch, shared, new_head)
    state.history.append({"round": t, "selected": selected, **info})
    return RoundState(t + 1, params, [params.featurizer] * len(envs), state.seed, state.history)


# --- local training / FedAvg / GSD ---------------------------------------------


class _Cycler:
    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.perm, self.pos = rng.permutation(n), 0

    def take(self, size: int) -> np.ndarray:
        size = min(size, self.n)
        if self.pos + size > self.n:
            self.perm, self.pos = self.rng.permutation(self.n), 0
        out = self.perm[self.pos:self.pos + size]
        self.pos += size
        return np.sort(out)


def objective_step(
    params: ModelParams,
    xs: Sequence[np.ndarray],
    ys: Sequence[np.ndarray],
    domain_ids: Sequence[int],
    objective: str,
    penalty: PenaltyConfig,
    round_idx: int,
    pairs_per_class: int = 16,
    match_seed=0,
) -> tuple[Gradients, dict]:
    """Full-model gradient of the objective over per-environment batches."""
    batches, caches = [], []
    for x, y, dom in zip(xs, ys, domain_ids):
        h, z, cache = forward(params, x)
        batches.append(EnvBatch(dom, h, z, y))
        caches.append(cache)
    pairing = None
    if objective == "rmatch":
        pairing = (build_matches(batches, pairs_per_class, match_seed) if len(batches) > 1
                   else MatchPairing(np.zeros((0, 4), dtype=np.int64), match_seed))
    loss, grad_z, grad_h_direct, info = server_loss(batches, penalty, objective, round_idx, pairing)
    total: Gradients | None = None
    for cache, gz, gh in zip(caches, grad_z, grad_h_direct):
        gf, ghead, _ = backward(params, cache, gz)
        if objective == "rmatch" and np.any(gh):
            gf = tuple(a + b for a, b in zip(gf, featurizer_backward(params, cache, gh)))
        g = Gradients(gf, ghead)
        total = g if total is None else total + g
    return total, {**info, "loss": loss}


def local_train(
    params: ModelParams,
    env_list: Sequence[Environment],
    objective: str,
    config: FedConfig,
    round_idx: int = 0,
    client_id: int = 0,
) -> tuple[ModelParams, dict]:
    """``local_epochs`` passes of minibatch SGD over ``env_list[0]``.

    Each step draws one minibatch from every listed environment and
    optimises the objective across them (the first environment sets the
    number of steps per epoch).
    """
    if not env_list:
        raise InputError("local_train needs at least one environment")
    rng = derive_rng(config.seed, _LOCAL, round_idx, client_id)
    cyclers = [_Cycler(len(e), rng) for e in env_list]
    steps = int(np.ceil(len(env_list[0]) / config.batch_size)) * config.local_epochs
    info: dict = {}
    for step in range(steps):
        idx = [c.take(config.batch_size) for c in cyclers]
        grads, info = objective_step(
            params,
            [e.x[i] for e, i in zip(env_list, idx)],
            [e.y[i] for e, i in zip(env_list, idx)],
            [e.domain_id for e in env_list],
            objective,
            config.penalty,
            round_idx,
            config.pairs_per_class,
            [config.seed, _MATCH, round_idx, client_id, step],
        )
        params = sgd_step(params, grads, config.eta)
    return params, info


def aggregate_fedavg(param_list: Sequence[ModelParams], counts: Sequence[int]) -> ModelParams:
    """Sample-weighted mean ``sum_k (n_k / n) w_k``.

    Contributions are sorted before summation so the result is bitwise
    independent of client order.
    """
    if not param_list or len(param_list) != len(counts):
        raise ProtocolError("need one sample count per parameter set")
    counts = [int(c) for c in counts]
    if min(counts) <= 0:
        raise ProtocolError("sample counts must be positive")
    ref = param_list[0]
    for p in param_list[1:]:
        if p.arch != ref.arch or any(a.shape != b.shape for a, b in zip(p.featurizer, ref.featurizer)):
            raise ProtocolError("parameter shapes differ across clients")
    total = sum(counts)
    weights = [c / total for c in counts]

    def mean(tensors):
        stacked = np.stack([w * t for w, t in zip(weights, tensors)])
        return np.sort(stacked, axis=0).sum(axis=0)

    featurizer = tuple(mean([p.featurizer[i] for p in param_list]) for i in range(len(ref.featurizer)))
    return ModelParams(ref.arch, featurizer, mean([p.head for p in param_list]))


def run_fedavg_round(state: RoundState, envs: Sequence[Environment], config: FedConfig) -> RoundState:
    t = state.round
    selected = select_clients(len(envs), config, t)
    trained, info = [], {}
    for k in selected:
        p, info = local_train(state.params, [envs[k]], config.objective, config, t, k)
        trained.append(p)
    params = aggregate_fedavg(trained, [len(envs[k]) for k in selected])
    state.history.append({"round": t, "selected": selected, **info})
    return RoundState(t + 1, params, [params.featurizer] * len(envs), state.seed, state.history)


def make_global_share(G: Sequence[Environment], fraction: float, seed: int) -> GlobalShare:
    """Draws ``G_0`` once: a ``fraction`` of every shared environment."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError("global_share_fraction must lie in (0, 1]")
    rng = derive_rng(seed, _SHARE)
    g0 = []
    for env in G:
        k = max(1, int(round(fraction * len(env))))
        g0.append(env.subset(np.sort(rng.choice(len(env), size=k, replace=False))))
    return GlobalShare(tuple(G), tuple(g0))


def run_gsd_round(state: RoundState, envs: Sequence[Environment], share: GlobalShare, config: FedConfig) -> RoundState:
    t = state.round
    selected = select_clients(len(envs), config, t)
    trained, info = [], {}
    for k in selected:
        p, info = local_train(state.params, [envs[k], *share.G0], config.objective, config, t, k)
        trained.append(p)
    params = aggregate_fedavg(trained, [len(envs[k]) for k in selected])
    state.history.append({"round": t, "selected": selected, **info})
    return RoundState(t + 1, params, [params.featurizer] * len(envs), state.seed, state.history)


def run_round(state: RoundState, envs, config: FedConfig, share: GlobalShare | None = None) -> RoundState:
    if config.protocol == "split":
        return run_causalfed_round(state, envs, config)
    if config.protocol == "fedavg":
        return run_fedavg_round(state, envs, config)
    if share is None:
        raise ConfigurationError("CausalFedGSD needs a GlobalShare")
    return run_gsd_round(state, envs, share, config)


def train(
    envs: Sequence[Environment],
    config: FedConfig,
    arch: ArchSpec,
    share: GlobalShare | None = None,
    callback=None,
) -> RoundState:
    """Runs ``config.rounds`` rounds; ``callback(state)`` fires after each.

    Raises NumericError as soon as any parameter stops being finite.
    """
    config.validate(len(envs))
    state = init_state(arch, len(envs), config.seed)
    for _ in range(config.rounds):
        with np.errstate(over="ignore", invalid="ignore"):
            state = run_round(state, envs, config, share)
        if not np.isfinite(state.params.flat()).all():
            raise NumericError(
                f"training diverged in round {state.round - 1} (non-finite parameters); lower eta or lambda"
            )
        if callback is not None:
            callback(state)
    return state


# --- evaluation & checkpoints --------------------------------------------------


def evaluate(params: ModelParams, env: Environment) -> tuple[float, float]:
    """Argmax accuracy and mean cross-entropy over ``env``."""
    if len(env) == 0:
        raise InputError("cannot evaluate on an empty environment")
    z = predict_logits(params, env.x)
    acc = float(np.mean(z.argmax(axis=1) == env.y))
    return acc, float(per_example_loss(z, env.y).mean())


def save_checkpoint(directory: str | Path, params: ModelParams, round_idx: int, config_hash: str) -> Path:
    tensors = {f"featurizer/{i}": p for i, p in enumerate(params.featurizer)}
    tensors["head"] = params.head
    meta = {"arch": params.arch.to_dict(), "round": round_idx, "config_hash": config_hash}
    return write_tensors(directory, CHECKPOINT_FORMAT, tensors, meta)


def load_checkpoint(directory: str | Path) -> tuple[ModelParams, dict]:
    manifest, tensors = read_tensors(directory, CHECKPOINT_FORMAT)
    arch = ArchSpec.from_dict(manifest["arch"])
    n = len(arch.featurizer_shapes())
    try:
        featurizer = tuple(tensors[f"featurizer/{i}"] for i in range(n))
    except KeyError as exc:
        raise ShapeError(f"checkpoint is missing tensor {exc}") from None
    return ModelParams(arch, featurizer, tensors["head"]), manifest
