"""Federated round loop with pluggable defenses and a two-phase attacker.

Rounds are a strict barrier: every client submits a delta, the server applies
the configured defense, and the surviving aggregate is added to the global
model. Attackers behave exactly like benign clients during the stealth phase
and switch to their attack behavior at phase_switch_round.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from fedpoison import data as data_mod
from fedpoison import defense as defense_mod
from fedpoison import grmp as grmp_mod
from fedpoison import model as model_mod
from fedpoison.defense import DefenseError, DefenseParams
from fedpoison.grmp import GrmpConfig, RoundObservation

ATTACKS = ("none", "naive_flip", "grmp")


@dataclass
class DataConfig:
    source: str = "synth"  # "synth" or "agnews"
    train_per_class: int = 500
    test_per_class: int = 62
    vocab_per_class: int = 30
    trigger_rate: float = 0.2
    alpha: float = 0.5
    hash_dim: int = 1024
    triggers: tuple[str, ...] = data_mod.DEFAULT_TRIGGERS
    src_class: int = 2  # business
    dst_class: int = 1  # sports
    agnews_train: str = ""
    agnews_test: str = ""


@dataclass
class ExperimentConfig:
    n_clients: int = 6
    n_attackers: int = 2
    rounds: int = 20
    local_epochs: int = 2
    lr: float = 0.5
    batch_size: int = 32
    weight_decay: float = 0.0
    defense: str = "cosine_filter"
    attack: str = "none"
    phase_switch_round: int = 11
    seed: int = 42
    data: DataConfig = field(default_factory=DataConfig)
    defense_params: DefenseParams = field(default_factory=DefenseParams)
    grmp: GrmpConfig = field(default_factory=GrmpConfig)

    def validate(self) -> None:
        if self.n_attackers >= self.n_clients:
            raise ValueError("n_attackers must be < n_clients")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 1 <= self.phase_switch_round <= self.rounds + 1:
            raise ValueError("phase_switch_round must lie in [1, rounds+1]")
        if self.defense not in defense_mod.DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}")
        if self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}")
        if self.data.src_class == self.data.dst_class:
            raise ValueError("src_class and dst_class must differ")


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    asr: float
    per_client_cosine: list[float]
    threshold: Optional[float]
    accepted: list[bool]
    aggregate_norm: float
    defense_error: bool = False
    naive_cosines: Optional[list[float]] = None
    naive_accepted: Optional[list[bool]] = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    final_params: np.ndarray
    attack_trace: list[dict]


def _child_seed(seed: int, *tags) -> int:
    """Stable derived seed for a named stream (crc32, not randomized hash())."""
    ent = [seed & 0xFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(ent).generate_state(1)[0])


def _build_corpus(cfg: ExperimentConfig) -> data_mod.Corpus:
    if cfg.data.source == "synth":
        scfg = data_mod.SynthConfig(
            train_per_class=cfg.data.train_per_class,
            test_per_class=cfg.data.test_per_class,
            vocab_per_class=cfg.data.vocab_per_class,
            trigger_rate=cfg.data.trigger_rate,
        )
        return data_mod.synth_corpus(scfg, _child_seed(cfg.seed, "corpus"))
    if cfg.data.source == "agnews":
        return data_mod.load_agnews_csv(cfg.data.agnews_train, cfg.data.agnews_test)
    raise ValueError(f"unknown data source {cfg.data.source!r}")


class _RunState:
    """Everything the round loop carries between rounds."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        corpus = _build_corpus(cfg)
        dc = cfg.data
        plan = data_mod.partition_noniid(
            corpus, cfg.n_clients, dc.alpha, _child_seed(cfg.seed, "partition")
        )
        fseed = _child_seed(cfg.seed, "hash")
        self.client_data = []
        self.client_data_flipped = []
        for idx in plan.client_indices:
            part = [corpus.train[i] for i in idx]
            self.client_data.append(data_mod.featurize_all(part, dc.hash_dim, fseed))
            flipped = data_mod.flip_labels(part, dc.triggers, dc.src_class, dc.dst_class)
            self.client_data_flipped.append(data_mod.featurize_all(flipped, dc.hash_dim, fseed))
        self.sizes = np.array([len(idx) for idx in plan.client_indices], dtype=float)
        self.X_test, self.y_test = data_mod.featurize_all(corpus.test, dc.hash_dim, fseed)
        subset = data_mod.asr_eval_subset(corpus, dc.triggers, dc.src_class)
        self.X_asr, _ = data_mod.featurize_all(subset, dc.hash_dim, fseed)
        self.class_count = corpus.class_count
        self.params = model_mod.init_params(dc.hash_dim, corpus.class_count)
        self.prev_aggregate: Optional[np.ndarray] = None
        self.history: list[RoundObservation] = []
        self.vgae_params: Optional[grmp_mod.VgaeParams] = None
        self.attack_trace: list[dict] = []
        # the label-flip adversary needs src-class data to flip, so it controls
        # the clients holding the most flippable (triggered src-class) examples;
        # ties break toward the higher client id
        flippable = [
            int(np.sum(self.client_data[i][1] != self.client_data_flipped[i][1]))
            for i in range(cfg.n_clients)
        ]
        order = sorted(range(cfg.n_clients), key=lambda i: (flippable[i], i), reverse=True)
        self.attacker_ids = sorted(order[: cfg.n_attackers])
        # the coordinated adversary's pooled local data, clean and flipped
        if cfg.n_attackers > 0:
            att_clean = [self.client_data[i] for i in self.attacker_ids]
            att_flip = [self.client_data_flipped[i] for i in self.attacker_ids]
            self.X_att = np.concatenate([x for x, _ in att_clean])
            self.y_att = np.concatenate([y for _, y in att_clean])
            self.y_att_flip = np.concatenate([y for _, y in att_flip])


def _local_delta(state: _RunState, X, y, seed: int) -> np.ndarray:
    cfg = state.cfg
    return model_mod.local_train(
        state.params,
        X,
        y,
        state.class_count,
        cfg.local_epochs,
        cfg.lr,
        cfg.batch_size,
        seed,
        cfg.weight_decay,
    )


def _estimate_floor(benign_updates: np.ndarray, reference: np.ndarray, cfg: ExperimentConfig) -> float:
    """Attacker-side threshold estimate: the defense's adaptive rule applied to
    the observed benign cosines, plus a safety margin."""
    s = np.array([defense_mod.cosine(u, reference) for u in benign_updates])
    floor = float(s.mean() - cfg.defense_params.lambda_ * s.std()) + cfg.grmp.stealth_margin
    return float(np.clip(floor, -1.0, 1.0))


def _grmp_crafting_matrix(state: _RunState, benign_now: np.ndarray) -> np.ndarray:
    cfg = state.cfg
    if cfg.grmp.knowledge == "full":
        return benign_now
    mats, _ = grmp_mod.collect_benign_observations(state.history, cfg.grmp.knowledge)
    stacked = np.concatenate(mats[-cfg.grmp.window :])
    if len(stacked) < 2:
        raise ValueError("estimation mode needs at least two rounds of history")
    return stacked


def _fit_vgae_if_needed(state: _RunState, benign_now: np.ndarray) -> None:
    if state.vgae_params is not None:
        return
    cfg = state.cfg
    if cfg.grmp.knowledge == "full" and state.history:
        mats, _ = grmp_mod.collect_benign_observations(state.history, "full")
        graphs = [grmp_mod.build_update_graph(m, cfg.grmp.tau_edge) for m in mats]
    else:
        graphs = [grmp_mod.build_update_graph(_grmp_crafting_matrix(state, benign_now), cfg.grmp.tau_edge)]
    state.vgae_params = grmp_mod.fit_vgae(
        graphs,
        cfg.grmp.hidden,
        cfg.grmp.latent,
        cfg.grmp.vgae_epochs,
        cfg.grmp.vgae_lr,
        _child_seed(cfg.seed, "vgae"),
    )


def run_round(state: _RunState, round_idx: int) -> RoundRecord:
    cfg = state.cfg
    exploit = (
        cfg.attack != "none"
        and cfg.n_attackers > 0
        and round_idx >= cfg.phase_switch_round
    )
    deltas = [
        _local_delta(state, X, y, _child_seed(cfg.seed, "train", round_idx, i))
        for i, (X, y) in enumerate(state.client_data)
    ]
    benign_now = np.stack([deltas[i] for i in range(cfg.n_clients) if i not in state.attacker_ids]) \
        if cfg.n_attackers > 0 else np.stack(deltas)

    trace_entry = None
    naive_deltas = None
    if exploit:
        if cfg.attack == "naive_flip":
            for i in state.attacker_ids:
                Xf, yf = state.client_data_flipped[i]
                deltas[i] = _local_delta(state, Xf, yf, _child_seed(cfg.seed, "train", round_idx, i))
        else:  # grmp
            _fit_vgae_if_needed(state, benign_now)
            reference = (
                state.prev_aggregate
                if state.prev_aggregate is not None
                else benign_now.mean(axis=0)
            )
            crafting = _grmp_crafting_matrix(state, benign_now)
            pseed = _child_seed(cfg.seed, "poison", round_idx)
            ptrain = lambda X, y: model_mod.local_train(
                state.params, X, y, state.class_count, cfg.grmp.poison_epochs,
                cfg.lr, cfg.batch_size, pseed, cfg.weight_decay,
            )
            raw_poison = ptrain(state.X_att, state.y_att_flip) - ptrain(state.X_att, state.y_att)
            gcfg = cfg.grmp
            if gcfg.auto_floor:
                gcfg = replace(gcfg, stealth_floor=_estimate_floor(crafting, reference, cfg))
            crafted, trace = grmp_mod.craft_with_trace(
                crafting, raw_poison, reference, gcfg, state.vgae_params
            )
            for i in state.attacker_ids:
                rng = np.random.default_rng(_child_seed(cfg.seed, "noise", round_idx, i))
                noise = rng.standard_normal(crafted.size)
                noise *= 1e-3 * np.linalg.norm(crafted) / max(np.linalg.norm(noise), 1e-300)
                deltas[i] = crafted + noise
            trace_entry = {"round": round_idx, **trace}
            # paired counterfactual: what the naive attacker would have sent
            naive_deltas = [
                _local_delta(
                    state,
                    *state.client_data_flipped[i],
                    _child_seed(cfg.seed, "train", round_idx, i),
                )
                for i in state.attacker_ids
            ]

    updates = np.stack(deltas)
    reference = (
        state.prev_aggregate if state.prev_aggregate is not None else updates.mean(axis=0)
    )
    per_client_cosine = [defense_mod.cosine(u, reference) for u in updates]
    defense_error = False
    try:
        report = defense_mod.apply_defense(
            cfg.defense, updates, state.sizes, reference, cfg.defense_params
        )
    except DefenseError:
        defense_error = True
        report = defense_mod.AggregationReport(
            aggregate=np.zeros_like(state.params),
            accepted=np.zeros(cfg.n_clients, dtype=bool),
            scores=np.array(per_client_cosine),
            threshold=None,
            rule=cfg.defense,
        )

    naive_cosines = naive_accepted = None
    if naive_deltas is not None:
        naive_cosines = [defense_mod.cosine(u, reference) for u in naive_deltas]
        # counterfactual: rerun the filter with the crafted rows swapped for
        # the naive ones, so the threshold reflects what the server would
        # actually have seen in that round
        cf_updates = updates.copy()
        cf_updates[list(state.attacker_ids)] = np.stack(naive_deltas)
        try:
            cf_report = defense_mod.apply_defense(
                cfg.defense, cf_updates, state.sizes, reference, cfg.defense_params
            )
            naive_accepted = [bool(cf_report.accepted[i]) for i in state.attacker_ids]
        except DefenseError:
            naive_accepted = [False for _ in state.attacker_ids]

    if not defense_error:
        state.params = state.params + report.aggregate
        state.prev_aggregate = report.aggregate
    applied = report.aggregate if not defense_error else np.zeros_like(state.params)
    if cfg.n_attackers > 0:
        state.history.append(
            RoundObservation(
                n_clients=cfg.n_clients,
                benign_updates=benign_now,
                global_delta=applied,
                own_updates=updates[state.attacker_ids],
            )
        )
    if trace_entry is not None:
        state.attack_trace.append(trace_entry)

    return RoundRecord(
        round=round_idx,
        accuracy=model_mod.evaluate_accuracy(state.params, state.X_test, state.y_test, state.class_count),
        asr=model_mod.evaluate_asr(state.params, state.X_asr, cfg.data.dst_class, state.class_count),
        per_client_cosine=per_client_cosine,
        threshold=report.threshold,
        accepted=list(map(bool, report.accepted)),
        aggregate_norm=float(np.linalg.norm(applied)),
        defense_error=defense_error,
        naive_cosines=naive_cosines,
        naive_accepted=naive_accepted,
    )


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute all rounds; pure function of cfg (seed included)."""
    state = _RunState(cfg)
    records = []
    for r in range(1, cfg.rounds + 1):
        try:
            records.append(run_round(state, r))
        except Exception as exc:
            raise RuntimeError(f"round {r} failed: {exc}") from exc
    return ExperimentResult(
        config=cfg,
        records=records,
        final_params=state.params,
        attack_trace=state.attack_trace,
    )


# ---------------------------------------------------------------------------
# config <-> flat dotted key/value mapping (shared with the CLI)

_SECTIONS = {"data": DataConfig, "defense": DefenseParams, "grmp": GrmpConfig}


def _field_key(section: str, name: str) -> str:
    name = name.rstrip("_")  # lambda_ -> lambda
    return f"{section}.{name}" if section else name


def config_to_flat(cfg: ExperimentConfig) -> dict[str, object]:
    flat: dict[str, object] = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if f.name == "data":
            section, obj = "data", val
        elif f.name == "defense_params":
            section, obj = "defense", val
        elif f.name == "grmp":
            section, obj = "grmp", val
        else:
            flat[_field_key("", f.name)] = val
            continue
        for sf in dataclasses.fields(obj):
            v = getattr(obj, sf.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            flat[_field_key(section, sf.name)] = v
    return flat


def _coerce(raw: object, target, key: str):
    if isinstance(raw, bool) or not isinstance(raw, str):
        # already typed (e.g. loaded from JSON); tuples round-trip as strings
        if isinstance(target, tuple):
            raise ValueError(f"{key}: expected comma-separated string")
        return raw if not isinstance(target, bool) else bool(raw)
    s = raw.strip()
    try:
        if isinstance(target, bool):
            if s.lower() in ("true", "1", "yes"):
                return True
            if s.lower() in ("false", "0", "no"):
                return False
            raise ValueError
        if isinstance(target, int):
            return int(s)
        if isinstance(target, float):
            return float(s)
        if isinstance(target, tuple):
            return tuple(t for t in s.split(",") if t)
        return s
    except ValueError:
        raise ValueError(f"{key}: expected {type(target).__name__}, got {raw!r}") from None


def config_from_flat(flat: dict[str, object]) -> ExperimentConfig:
    """Build a config from dotted keys; unknown keys are an error."""
    cfg = ExperimentConfig()
    known: dict[str, tuple[object, str]] = {}
    for f in dataclasses.fields(cfg):
        if f.name in ("data", "defense_params", "grmp"):
            continue
        known[f.name] = (cfg, f.name)
    for section, obj in (("data", cfg.data), ("defense", cfg.defense_params), ("grmp", cfg.grmp)):
        for sf in dataclasses.fields(obj):
            known[_field_key(section, sf.name)] = (obj, sf.name)
    unknown = [k for k in flat if k not in known]
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key, raw in flat.items():
        obj, name = known[key]
        current = getattr(obj, name)
        if isinstance(current, tuple) and isinstance(raw, str):
            val = tuple(t for t in raw.split(",") if t)
        else:
            val = _coerce(raw, current, key)
        setattr(obj, name, val)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# run directory

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_run_dir(result: ExperimentResult, out_dir: str) -> None:
    """config.json + rounds.csv (wide) + scores.csv (long) + attack trace +
    final model checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = result.config
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config_to_flat(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    n = cfg.n_clients
    with open(os.path.join(out_dir, "rounds.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["round", "accuracy", "asr", "threshold", "aggregate_norm", "defense_error"]
        header += [f"cosine_{i}" for i in range(n)] + [f"accepted_{i}" for i in range(n)]
        w.writerow(header)
        for rec in result.records:
            row = [
                rec.round,
                _fmt(rec.accuracy),
                _fmt(rec.asr),
                _fmt(rec.threshold),
                _fmt(rec.aggregate_norm),
                int(rec.defense_error),
            ]
            row += [_fmt(c) for c in rec.per_client_cosine]
            row += [int(a) for a in rec.accepted]
            w.writerow(row)
    with open(os.path.join(out_dir, "scores.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client_id", "score", "threshold", "accepted"])
        for rec in result.records:
            for i in range(n):
                w.writerow(
                    [rec.round, i, _fmt(rec.per_client_cosine[i]), _fmt(rec.threshold), int(rec.accepted[i])]
                )
    with open(os.path.join(out_dir, "attack_trace.jsonl"), "w", encoding="utf-8") as fh:
        for entry in result.attack_trace:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    model_mod.save_params(result.final_params, os.path.join(out_dir, "model.bin"))
