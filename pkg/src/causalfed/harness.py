"""Experiment orchestration: config, environment construction, training
loop with per-round evaluation, attacks, JSONL metrics, report tables and the
command-line interface.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from causalfed import attacks as atk
from causalfed import data as dt
from causalfed.errors import CausalFedError, ConfigurationError, ConsistencyError
from causalfed.fedproto import (
    GLOBAL_DOMAIN_OFFSET,
    FedConfig,
    GlobalShare,
    evaluate,
    load_checkpoint,
    make_global_share,
    save_checkpoint,
    train,
)
from causalfed.numerics import ArchSpec, ModelParams

log = logging.getLogger("causalfed")

SCHEMA_VERSION = 1
TIMING_SUFFIX = ".timing.jsonl"
ATTACKS_SUFFIX = ".attacks.jsonl"
DATASETS = ("colored_mnist", "rotated_mnist", "rotated_fmnist")
ALGORITHM_ORDER = ("fedavg", "fed_erm", "causalfed_rm", "causalfed_irm", "causalfedgsd_rm", "causalfedgsd_irm")
ALGORITHM_TITLES = {
    "fedavg": "Fed-Avg",
    "fed_erm": "Fed-ERM",
    "causalfed_rm": "CausalFed-RM",
    "causalfed_irm": "CausalFed-IRM",
    "causalfedgsd_rm": "CausalFedGSD-RM",
    "causalfedgsd_irm": "CausalFedGSD-IRM",
}
DATASET_TITLES = {"colored_mnist": "Colored MNIST", "rotated_mnist": "Rotated MNIST", "rotated_fmnist": "Rotated FMNIST"}


class MissingDataError(CausalFedError, OSError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "colored_mnist"
    fed: FedConfig = field(default_factory=FedConfig)
    arch: str = "mlp"
    hidden: tuple[int, ...] = (256, 256)
    n_per_env: int | None = None
    correlations: tuple[float, ...] = (0.9, 0.8)
    test_correlation: float = 0.1
    label_noise: float = 0.0
    attacks: tuple[dict, ...] = ()
    data: dict = field(default_factory=lambda: {"source": "synthetic"})
    out_dir: str = "out"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {self.schema_version}")
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        if self.data.get("source", "synthetic") not in ("synthetic", "idx"):
            raise ConfigurationError("data.source must be 'synthetic' or 'idx'")
        for a in self.attacks:
            if a.get("kind") not in ("membership", "property", "backdoor"):
                raise ConfigurationError(f"unknown attack kind {a.get('kind')!r}")

    @property
    def seed(self) -> int:
        return self.fed.seed

    @property
    def per_env(self) -> int:
        if self.n_per_env is not None:
            return int(self.n_per_env)
        return {"colored_mnist": 2000, "rotated_mnist": 1000, "rotated_fmnist": 10000}[self.dataset]

    @property
    def n_classes(self) -> int:
        return 2 if self.dataset == "colored_mnist" else 10

    @property
    def n_clients(self) -> int:
        return len(self.correlations) if self.dataset == "colored_mnist" else len(dt.TRAIN_ANGLES)

    def arch_spec(self) -> ArchSpec:
        channels = 2 if self.dataset == "colored_mnist" else 1
        return ArchSpec(self.arch, (channels, dt.SIDE, dt.SIDE), tuple(self.hidden), self.n_classes)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, fed=replace(self.fed, seed=int(seed)))

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dataset": self.dataset,
            "arch": {"arch_tag": self.arch, "hidden": list(self.hidden)},
            "env": {
                "n_per_env": self.n_per_env,
                "correlations": list(self.correlations),
                "test_correlation": self.test_correlation,
                "label_noise": self.label_noise,
            },
            "fed": self.fed.to_dict(),
            "attacks": [dict(a) for a in self.attacks],
            "data": dict(self.data),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        arch = d.get("arch", {})
        env = d.get("env", {})
        return cls(
            schema_version=int(d.get("schema_version", SCHEMA_VERSION)),
            dataset=d.get("dataset", "colored_mnist"),
            arch=arch.get("arch_tag", "mlp"),
            hidden=tuple(arch.get("hidden", (256, 256))),
            n_per_env=env.get("n_per_env"),
            correlations=tuple(env.get("correlations", (0.9, 0.8))),
            test_correlation=float(env.get("test_correlation", 0.1)),
            label_noise=float(env.get("label_noise", 0.0)),
            fed=FedConfig.from_dict(d.get("fed", {})),
            attacks=tuple(dict(a) for a in d.get("attacks", ())),
            data=dict(d.get("data", {"source": "synthetic"})),
            out_dir=d.get("out_dir", "out"),
        )

    def hash(self) -> str:
        """Content hash of everything except the seed and output location."""
        d = self.to_dict()
        d["fed"] = {k: v for k, v in d["fed"].items() if k != "seed"}
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def stem(self) -> str:
        return f"{self.dataset}_{self.fed.algorithm}_seed{self.seed}"


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- environments --------------------------------------------------------------


@dataclass
class World:
    """Everything a run trains and evaluates on."""

    clients: list
    test: dt.Environment
    share: GlobalShare | None = None
    attack_target: atk.ShadowPool | None = None
    attack_shadows: list = field(default_factory=list)
    clean_clients: list = field(default_factory=list)
    backdoor: atk.BackdoorSpec | None = None
    backdoor_probe: dt.Environment | None = None


def _membership_spec(config: ExperimentConfig) -> dict | None:
    return next((a for a in config.attacks if a["kind"] == "membership"), None)


def _backdoor_spec(config: ExperimentConfig) -> atk.BackdoorSpec | None:
    a = next((a for a in config.attacks if a["kind"] == "backdoor"), None)
    if a is None:
        return None
    return atk.BackdoorSpec.from_dict({k: v for k, v in a.items() if k != "kind"})


def _pool_sizes(config: ExperimentConfig) -> dict[str, int]:
    n, c = config.per_env, config.n_clients
    sizes = {"test": n}
    mem = _membership_spec(config)
    if mem is None:
        sizes["train"] = n * c
    else:
        sizes["attack"] = 2 * n * c * (int(mem.get("n_shadows", 4)) + 1)
    if config.fed.protocol == "gsd":
        sizes["global"] = n * c
    spec = _backdoor_spec(config)
    if spec is not None and spec.kind == "semantic":
        sizes["probe"] = n
    return sizes


def load_base_data(config: ExperimentConfig, n_needed: int) -> dt.BaseData:
    source = config.data.get("source", "synthetic")
    kind = "fashion" if config.dataset == "rotated_fmnist" else "digits"
    if source == "synthetic":
        return dt.synth_fallback(n_needed, int(config.data.get("synth_seed", 0)), kind)
    images, labels = config.data.get("images"), config.data.get("labels")
    if not images or not labels or not Path(images).exists() or not Path(labels).exists():
        raise MissingDataError(
            f"IDX files not found ({images!r}, {labels!r}); download MNIST/Fashion-MNIST or set "
            '"data": {"source": "synthetic"} in the config to use the procedural fallback'
        )
    base = dt.load_base(images, labels, "fmnist" if kind == "fashion" else "mnist")
    if len(base) < n_needed:
        raise ConfigurationError(f"IDX data holds {len(base)} images, experiment needs {n_needed}")
    return base


def _client_builder(config: ExperimentConfig, base: dt.BaseData):
    n_clients = config.n_clients

    def build(indices, seed):
        sub = base.subset(indices)
        n = len(indices) // n_clients
        if config.dataset == "colored_mnist":
            return dt.make_colored_envs(sub, config.correlations, config.test_correlation, n, seed,
                                        config.label_noise, with_test=False)[0]
        name = "mnist" if config.dataset == "rotated_mnist" else "fmnist"
        return dt.make_rotated_envs(sub, name, seed, n, with_test=False)[0]

    return build


def build_world(config: ExperimentConfig) -> World:
    """Builds client, test, shared-global and attack environments on disjoint data."""
    sizes = _pool_sizes(config)
    base = load_base_data(config, sum(sizes.values()))
    rng = np.random.default_rng([config.seed, 0xE0])
    perm = rng.permutation(len(base))
    slices, pos = {}, 0
    for name, size in sizes.items():
        slices[name] = np.sort(perm[pos:pos + size])
        pos += size
    build = _client_builder(config, base)
    n, seed = config.per_env, config.seed

    if config.dataset == "colored_mnist":
        test = dt.make_colored_mnist(base.subset(slices["test"]), n, config.test_correlation, config.n_clients,
                                     seed, "server_test", config.label_noise)
    else:
        name = "mnist" if config.dataset == "rotated_mnist" else "fmnist"
        test = dt.make_rotated_test_env(base.subset(slices["test"]), name, seed, n, dt.TEST_ANGLES, config.n_clients)

    world = World(clients=[], test=test)
    mem = _membership_spec(config)
    if mem is None:
        world.clients = build(slices["train"], seed)
    else:
        pool = base.subset(slices["attack"])
        world.attack_target, world.attack_shadows, _ = atk.make_attack_pools(
            lambda idx, s: build(slices["attack"][idx], s),
            len(pool), n * config.n_clients, n * config.n_clients, int(mem.get("n_shadows", 4)), seed,
        )
        world.clients = list(world.attack_target.members)

    if config.fed.protocol == "gsd":
        G = [dt.relabel_domain(e, GLOBAL_DOMAIN_OFFSET + e.domain_id, "global_shared")
             for e in build(slices["global"], seed + 7919)]
        world.share = make_global_share(G, config.fed.global_share_fraction, seed)

    spec = _backdoor_spec(config)
    if spec is not None:
        if spec.kind == "semantic" and config.dataset == "colored_mnist":
            raise ConfigurationError("semantic backdoor needs a rotated dataset")
        world.backdoor = spec
        world.backdoor_probe = world.test
        if spec.kind == "semantic":
            # held-out digits at the trigger angle, since the test domain never contains it
            probe = base.subset(slices["probe"])
            world.backdoor_probe = dt.rotated_env(probe, np.full(len(probe), spec.angle), -2, float(spec.angle),
                                                  "attack", f"probe_rot{spec.angle}")
        world.clean_clients = list(world.clients)
        world.clients = [atk.poison(e, spec, seed) if i in spec.attacker_clients else e
                         for i, e in enumerate(world.clients)]
    return world


# --- running -------------------------------------------------------------------


def _round_record(state, world: World, config: ExperimentConfig) -> dict:
    per_env = []
    for env in world.clients:
        acc, loss = evaluate(state.params, env)
        per_env.append({"domain_id": env.domain_id, "accuracy": acc, "loss": loss})
    test_acc, test_loss = evaluate(state.params, world.test)
    info = state.history[-1]
    return {
        "round": state.round,
        "dataset": config.dataset,
        "algorithm": config.fed.algorithm,
        "train": per_env,
        "train_accuracy": float(np.mean([e["accuracy"] for e in per_env])),
        "train_loss": float(np.mean([e["loss"] for e in per_env])),
        "objective_loss": float(info.get("loss", 0.0)),
        "penalty": float(info.get("penalty", 0.0)),
        "lambda": float(info.get("lambda", 0.0)),
        "test_accuracy": test_acc,
        "test_loss": test_loss,
        "config_hash": config.hash(),
        "seed": config.seed,
    }


def _recipe(config: ExperimentConfig, arch: ArchSpec, share: GlobalShare | None):
    def recipe(envs, seed):
        return train(list(envs), replace(config.fed, seed=int(seed)), arch, share).params
    return recipe


def run_attacks(params: ModelParams, world: World, config: ExperimentConfig) -> list[atk.AttackReport]:
    fields = {"dataset": config.dataset, "algorithm": config.fed.algorithm, "config_hash": config.hash()}
    reports = []
    for spec in config.attacks:
        kind = spec["kind"]
        if kind == "membership":
            reports.append(atk.run_membership_attack(
                params, world.attack_target, world.attack_shadows,
                _recipe(config, config.arch_spec(), world.share), config.seed, **fields,
            ))
        elif kind == "property":
            attribute = spec.get("attribute", "domain")
            pool = atk.pooled(world.clients)
            values = pool.color if attribute == "color" else pool.domain
            reports.append(atk.property_leakage(params, pool.x, values, config.seed, attribute, **fields))
        elif kind == "backdoor":
            reports.append(atk.attack_success_rate(params, world.backdoor_probe, world.backdoor, seed=config.seed,
                                                   **fields))
    return reports


def write_jsonl(path: str | Path, rows: Sequence[dict], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, allow_nan=False) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    """Reads a JSONL metrics file, rejecting a truncated final line."""
    text = Path(path).read_text(encoding="utf-8")
    if text and not text.endswith("\n"):
        raise ConsistencyError(f"{path}: final line is truncated")
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ConsistencyError(f"{path}:{lineno}: malformed JSONL row ({exc.msg})") from None
    return rows


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Trains, evaluates every round, runs configured attacks, writes JSONL.

    Wall-clock timings go to a ``.timing.jsonl`` sidecar so the metrics file
    itself is byte-identical across repeated runs.
    """
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(config)
    arch = config.arch_spec()
    rows, timings = [], []
    tick = time.perf_counter()

    def on_round(state):
        nonlocal tick
        rows.append(_round_record(state, world, config))
        now = time.perf_counter()
        timings.append({"round": state.round, "wall_ms": round((now - tick) * 1000.0, 3)})
        tick = now
        log.info("round %d train %.3f test %.3f", state.round, rows[-1]["train_accuracy"], rows[-1]["test_accuracy"])

    state = train(world.clients, config.fed, arch, world.share, callback=on_round)
    save_checkpoint(out / f"{config.stem}.ckpt", state.params, state.round, config.hash())
    rows += [r.to_row() for r in run_attacks(state.params, world, config)]
    path = out / f"{config.stem}.jsonl"
    write_jsonl(path, rows)
    write_jsonl(out / f"{config.stem}{TIMING_SUFFIX}", timings)
    return path


# --- reporting -----------------------------------------------------------------


@dataclass
class ReportRow:
    dataset: str
    algorithm: str
    train_accuracy: float
    test_accuracy: float
    attacks: dict
    runs: int
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "algorithm": self.algorithm,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "attacks": self.attacks,
            "runs": self.runs,
            "config_hash": self.config_hash,
        }


def report(paths: Sequence[str | Path]) -> tuple[str, list[dict]]:
    """Aggregates metric files into per-dataset comparison tables.

    Runs are grouped by (dataset, algorithm) and averaged; every run in a
    group must carry the same config hash.
    """
    if not paths:
        raise ConfigurationError("report needs at least one metrics file")
    groups: dict[tuple, list] = defaultdict(list)
    # sidecars sit next to metrics files and are easy to glob by accident
    paths = [p for p in paths if not str(p).endswith((TIMING_SUFFIX, ATTACKS_SUFFIX))]
    if not paths:
        raise ConfigurationError("report needs at least one metrics file (sidecar files are ignored)")
    for p in paths:
        rows = read_metrics(p)
        rounds = [r for r in rows if "round" in r]
        attacks = [r for r in rows if "attack" in r]
        if not rounds:
            raise ConsistencyError(f"{p}: no training rows")
        if any(key not in rounds[-1] for key in ("dataset", "algorithm", "config_hash", "test_accuracy")):
            raise ConsistencyError(f"{p}: not a metrics file (missing dataset/algorithm/accuracy keys)")
        last = rounds[-1]
        groups[(last["dataset"], last["algorithm"])].append((last, attacks))
    table = []
    for (dataset, algorithm), runs in groups.items():
        hashes = {last["config_hash"] for last, _ in runs} | {a["config_hash"] for _, ats in runs for a in ats}
        if len(hashes) != 1:
            raise ConsistencyError(f"mixed config hashes for {dataset}/{algorithm}: {sorted(hashes)}")
        attack_vals = defaultdict(list)
        for _, ats in runs:
            for a in ats:
                attack_vals[a["attack"]].append(a["accuracy"])
        table.append(ReportRow(
            dataset, algorithm,
            float(np.mean([last["train_accuracy"] for last, _ in runs])),
            float(np.mean([last["test_accuracy"] for last, _ in runs])),
            {k: float(np.mean(v)) for k, v in sorted(attack_vals.items())},
            len(runs),
            hashes.pop(),
        ))
    order = {a: i for i, a in enumerate(ALGORITHM_ORDER)}
    table.sort(key=lambda r: (DATASETS.index(r.dataset), order[r.algorithm]))
    return format_tables(table), [r.to_dict() for r in table]


def format_tables(rows: Sequence[ReportRow]) -> str:
    algos = [a for a in ALGORITHM_ORDER if any(r.algorithm == a for r in rows)]
    datasets = [d for d in DATASETS if any(r.dataset == d for r in rows)]
    cell = {(r.dataset, r.algorithm): r for r in rows}
    metrics = [("Train Results", lambda r: r.train_accuracy), ("Test Results", lambda r: r.test_accuracy)]
    attack_names = sorted({k for r in rows for k in r.attacks})
    metrics += [(f"Attack: {name}", (lambda n: lambda r: r.attacks.get(n))(name)) for name in attack_names]
    out = []
    for title, getter in metrics:
        header = ["Dataset"] + [ALGORITHM_TITLES[a] for a in algos]
        lines = [header]
        for d in datasets:
            vals = {a: getter(cell[(d, a)]) if (d, a) in cell else None for a in algos}
            best = None
            if title == "Test Results":
                present = [v for v in vals.values() if v is not None]
                best = max(present) if present else None
            line = [DATASET_TITLES[d]]
            for a in algos:
                v = vals[a]
                text = "-" if v is None else f"{100 * v:.2f} %"
                if best is not None and v == best:
                    text = f"**{text}**"
                line.append(text)
            lines.append(line)
        widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
        out.append(title)
        for i, l in enumerate(lines):
            out.append("  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip())
            if i == 0:
                out.append("  ".join("-" * w for w in widths))
        out.append("")
    return "\n".join(out)


# --- CLI -------------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="causalfed", description="Causal federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, need_config=True):
        sp.add_argument("--config", required=need_config, help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides config out_dir)")

    common(sub.add_parser("data", help="build and cache environments"))
    common(sub.add_parser("train", help="run an experiment"))
    ap = sub.add_parser("attack", help="run configured attacks against a checkpoint")
    common(ap)
    ap.add_argument("--checkpoint", required=True)
    rp = sub.add_parser("report", help="compare metrics files")
    rp.add_argument("files", nargs="+")
    rp.add_argument("--json", dest="json_out", help="also write the machine-readable table here")
    return p


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config, Path(args.out if args.out else config.out_dir)


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            text, rows = report(args.files)
            print(text)
            if args.json_out:
                Path(args.json_out).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            return 0
        config, out = _resolve(args)
        if args.command == "train":
            print(run_experiment(config, out))
        elif args.command == "data":
            world = build_world(config)
            envs = [*world.clients, world.test, *(world.share.G0 if world.share else ())]
            print(dt.save_env_cache(out / f"{config.stem}.envs", envs).parent)
        elif args.command == "attack":
            params, _ = load_checkpoint(args.checkpoint)
            world = build_world(config)
            rows = [r.to_row() for r in run_attacks(params, world, config)]
            out.mkdir(parents=True, exist_ok=True)
            path = out / f"{config.stem}{ATTACKS_SUFFIX}"
            write_jsonl(path, rows)
            print(path)
        return 0
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        log.debug("runtime failure", exc_info=True)
        print(f"causalfed: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
