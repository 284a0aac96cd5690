"""FL round loop: client sampling, attacker placement, defense, metrics.

Randomness is organized as independent streams derived from the master
seed: every (round, client) pair owns its own training / poisoning /
sibling streams, so results are identical for any worker-parallelism
degree, and two runs with the same master seed produce byte-identical
metric streams.

The shadow phase is a separate fedavg run (iid partition, trigger-patch
attackers) on the same data pools, used only to collect labeled PLR
sequences for encoder training; its seed lineage is forked from the master
seed so it never correlates with the main run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import attacks, data, defense, nn
from .nn import ConfigError, ParamVector

DEFENSE_KINDS = ("flbuff", "fedavg", "coord_median", "norm_clip")
_KERNEL_DEFAULT = defense.KERNEL_MEDIAN

# seed-stream tags (master seed, tag, ...) -> independent generators
_T_DATA = 1
_T_SPLIT = 2
_T_PARTITION = 3
_T_PLACEMENT = 4
_T_INIT = 5
_T_SELECT = 6
_T_TRAIN = 7
_T_POISON = 8
_T_CLEAN = 9
_T_SHADOW = 10
_T_AUX_ALT = 11
_T_DEFTRAIN = 12


def stream_seed(*keys: int) -> int:
    """Stable derived seed for an independent RNG stream."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def client_train_seed(master: int, round_index: int, client_id: int) -> int:
    return stream_seed(master, _T_TRAIN, round_index, client_id)


def client_poison_seed(master: int, round_index: int, client_id: int) -> int:
    return stream_seed(master, _T_POISON, round_index, client_id)


def client_clean_seed(master: int, round_index: int, client_id: int) -> int:
    return stream_seed(master, _T_CLEAN, round_index, client_id)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; every field maps to one JSON config key."""

    # data
    dataset: str = "blobs"  # blobs | idx
    blob_classes: int = 10
    blob_dim: int = 32
    blob_per_class: int = 130
    blob_spread: float = 0.12
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    train_size: int = 1000
    test_size: int = 200
    aux_pool_size: int = 100
    # partition
    partition: str = "iid"
    dir_alpha: float = 0.3
    prob_q: float = 0.3
    qty_k: int = 2
    noise_sigma: float = 0.5
    qs_beta: float = 0.5
    noniid_degree: Optional[float] = None
    # federation
    n_clients: int = 100
    clients_per_round: int = 10
    rounds: int = 30
    malicious_ratio: float = 0.2
    local_epochs: int = 5
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.001
    momentum: float = 0.9
    hidden_dims: tuple = (64, 32)
    # attack
    attack: str = "badnets"
    poison_rate: float = 0.5
    target_label: int = 0
    trigger_coords: Optional[tuple] = None
    trigger_value: float = 1.0
    dba_parts: int = 4
    scaling_factor: Optional[float] = None
    alie_z: float = 1.0
    adaptive_lambda: float = 1.0
    adaptive_rho: float = 1.0
    adaptive_eta: float = 1.0
    adaptive_steps: int = 50
    adaptive_probe: str = "own"  # own | aux | aux-encoder
    # defense
    defense: str = "flbuff"
    clip_norm: float = 1.0
    tau: float = 0.5
    kappa: float = 1.0
    gamma: float = 0.5
    aux_size: int = 32
    kernel: str = _KERNEL_DEFAULT
    kernel_bandwidth: Optional[float] = None
    encoder_hidden: int = 64
    encoder_dim: int = 32
    encoder_epochs: int = 60
    encoder_lr: float = 1e-3
    w_cls: float = 1.0
    batch_benign: int = 8
    batch_malicious: int = 4
    # shadow collection / encoder reuse
    shadow_rounds: int = 30
    encoder_checkpoint: Optional[str] = None
    aux_source: str = "heldout"  # heldout | alt-blobs
    # run control
    seed: int = 0
    workers: int = 1
    emit_embeddings: bool = False

    def validate(self) -> None:
        if self.dataset not in ("blobs", "idx"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("idx dataset needs idx_images and idx_labels paths")
        if self.partition not in data.PARTITION_KINDS:
            raise ConfigError(f"unknown partition {self.partition!r}")
        if self.attack not in attacks.ATTACK_KINDS:
            raise ConfigError(f"unknown attack {self.attack!r}")
        if self.defense not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense {self.defense!r}")
        if not 0.0 <= self.malicious_ratio < 0.5:
            raise ConfigError("malicious ratio must satisfy 0 <= ratio < 0.5")
        if self.clients_per_round > self.n_clients or self.clients_per_round < 2:
            raise ConfigError("need 2 <= clients_per_round <= n_clients")
        if self.rounds < 1 or self.shadow_rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ConfigError("poison_rate must lie in [0, 1]")
        if self.adaptive_probe not in ("own", "aux", "aux-encoder"):
            raise ConfigError("adaptive_probe must be own, aux, or aux-encoder")
        if self.aux_source not in ("heldout", "alt-blobs"):
            raise ConfigError("aux_source must be 'heldout' or 'alt-blobs'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.defense_config()  # bounds-check the defense block
        self.optimizer_state()

    # -- derived pieces ------------------------------------------------

    def partition_spec(self) -> data.PartitionSpec:
        if self.noniid_degree is not None:
            return data.noniid_degree_spec(
                self.partition, self.noniid_degree, self.class_count(), self.n_clients
            )
        return data.PartitionSpec(
            kind=self.partition,
            dir_alpha=self.dir_alpha,
            prob_q=self.prob_q,
            qty_k=self.qty_k,
            noise_sigma=self.noise_sigma,
            qs_beta=self.qs_beta,
        )

    def defense_config(self) -> defense.DefenseConfig:
        return defense.DefenseConfig(
            tau=self.tau,
            kappa=self.kappa,
            gamma=self.gamma,
            aux_size=self.aux_size,
            kernel=self.kernel,
            kernel_bandwidth=self.kernel_bandwidth,
            encoder_hidden=self.encoder_hidden,
            encoder_dim=self.encoder_dim,
            encoder_epochs=self.encoder_epochs,
            encoder_lr=self.encoder_lr,
            w_cls=self.w_cls,
            batch_benign=self.batch_benign,
            batch_malicious=self.batch_malicious,
        )

    def optimizer_state(self) -> nn.OptimizerState:
        return nn.OptimizerState(kind=self.optimizer, lr=self.lr, momentum=self.momentum)

    def adaptive_config(self) -> attacks.AdaptiveConfig:
        return attacks.AdaptiveConfig(
            lam=self.adaptive_lambda,
            rho=self.adaptive_rho,
            eta=self.adaptive_eta,
            inner_steps=self.adaptive_steps,
        )

    def class_count(self) -> int:
        if self.dataset == "blobs":
            return self.blob_classes
        return 10  # IDX digit data

    def trigger(self, feature_dim: int) -> attacks.TriggerPattern:
        if self.trigger_coords is not None:
            coords = tuple(int(c) for c in self.trigger_coords)
            return attacks.TriggerPattern(
                coords, (self.trigger_value,) * len(coords), self.target_label
            )
        return attacks.default_trigger(
            feature_dim, value=self.trigger_value, target_label=self.target_label
        )

    # -- (de)serialization ----------------------------------------------

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, val in out.items():
            if isinstance(val, tuple):
                out[key] = list(val)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        for key in ("hidden_dims", "trigger_coords"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def config_hash(self) -> str:
        # workers is execution plumbing: it never changes results, so it
        # must not change the experiment's identity
        canon = {k: v for k, v in self.to_dict().items() if k != "workers"}
        return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Run state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pools:
    """Disjoint data pools: client training data, clean test, auxiliary set."""

    train: data.Dataset
    test_features: np.ndarray
    test_labels: np.ndarray
    bd_features: np.ndarray
    bd_labels: np.ndarray
    aux: defense.AuxiliarySet
    trigger: attacks.TriggerPattern


@dataclass
class FlState:
    round: int
    theta: ParamVector
    shards: list
    malicious: frozenset
    alie_history: dict = field(default_factory=dict)
    adaptive_norms: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    acc: float
    asr: float
    selected: tuple
    n_malicious_selected: int
    n_flagged: int
    mean_score_benign: float
    mean_score_malicious: float


@dataclass
class ExperimentResult:
    metrics: list
    final_acc: float
    final_asr: float
    wall_clock: float
    embeddings: list
    encoder: Optional[defense.EncoderModel]
    config: ExperimentConfig


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def load_base_dataset(cfg: ExperimentConfig) -> data.Dataset:
    if cfg.dataset == "blobs":
        return data.gen_blobs(
            cfg.blob_classes,
            cfg.blob_dim,
            cfg.blob_per_class,
            cfg.blob_spread,
            seed=stream_seed(cfg.seed, _T_DATA),
        )
    return data.load_idx(cfg.idx_images, cfg.idx_labels)


def build_pools(cfg: ExperimentConfig) -> Pools:
    """Carve disjoint train / test / auxiliary pools and fix the trigger."""
    ds = load_base_dataset(cfg)
    need = cfg.train_size + cfg.test_size + cfg.aux_pool_size
    if need > len(ds):
        raise ConfigError(f"pools need {need} samples, dataset has {len(ds)}")
    tr, te, ax = data.stratified_split(
        ds, [cfg.train_size, cfg.test_size, cfg.aux_pool_size],
        seed=stream_seed(cfg.seed, _T_SPLIT),
    )
    train = data.subset(ds, tr)
    trigger = cfg.trigger(ds.dim)
    bd_x, bd_y = attacks.make_backdoor_testset(
        ds.features[te], ds.labels[te], trigger
    )
    if cfg.aux_source == "alt-blobs":
        alt = data.gen_blobs(
            cfg.class_count(), ds.dim,
            per_class=max(1, -(-cfg.aux_size // cfg.class_count())),
            spread=cfg.blob_spread,
            seed=stream_seed(cfg.seed, _T_AUX_ALT),
        )
        aux_feats = alt.features[: cfg.aux_size]
    else:
        aux_feats = ds.features[ax[: cfg.aux_size]]
    return Pools(
        train=train,
        test_features=ds.features[te],
        test_labels=ds.labels[te],
        bd_features=bd_x,
        bd_labels=bd_y,
        aux=defense.AuxiliarySet(aux_feats),
        trigger=trigger,
    )


def model_arch(cfg: ExperimentConfig, feature_dim: int):
    return nn.mlp_arch((feature_dim, *cfg.hidden_dims, cfg.class_count()))


def init_state(cfg: ExperimentConfig, pools: Pools, master: int) -> FlState:
    arch = model_arch(cfg, pools.train.dim)
    theta = nn.flatten(nn.init_mlp(arch, stream_seed(master, _T_INIT)))
    shards = data.partition(
        pools.train, cfg.partition_spec(), cfg.n_clients,
        seed=stream_seed(master, _T_PARTITION),
    )
    n_bad = round(cfg.malicious_ratio * cfg.n_clients) if cfg.attack != "none" else 0
    placement = np.random.default_rng(stream_seed(master, _T_PLACEMENT))
    malicious = frozenset(
        int(c) for c in placement.choice(cfg.n_clients, size=n_bad, replace=False)
    )
    return FlState(round=0, theta=theta, shards=shards, malicious=malicious)


def eval_acc(theta: ParamVector, arch, features: np.ndarray, labels: np.ndarray) -> float:
    model = nn.unflatten(theta, arch)
    pred = nn.forward_logits(model, features).argmax(axis=1)
    return float((pred == labels).mean())


def eval_asr(theta: ParamVector, arch, bd_features: np.ndarray, bd_labels: np.ndarray) -> float:
    """Fraction of triggered non-target samples classified as the target."""
    return eval_acc(theta, arch, bd_features, bd_labels)


# ---------------------------------------------------------------------------
# One federated round
# ---------------------------------------------------------------------------


@dataclass
class _ClientResult:
    client_id: int
    delta: ParamVector
    is_malicious: bool
    bd_delta: Optional[np.ndarray] = None  # alie: backdoored sibling update
    clean_delta: Optional[np.ndarray] = None  # alie: clean sibling update


def _attacker_rank(state: FlState, client_id: int) -> int:
    return sorted(state.malicious).index(client_id)


def _client_job(
    cfg: ExperimentConfig,
    state: FlState,
    pools: Pools,
    arch,
    encoder: Optional[defense.EncoderModel],
    round_index: int,
    client_id: int,
) -> _ClientResult:
    master = cfg.seed
    theta = state.theta
    base = nn.unflatten(theta, arch)
    X, y = data.shard_data(pools.train, state.shards[client_id])
    opt = cfg.optimizer_state()
    t_seed = client_train_seed(master, round_index, client_id)
    is_mal = client_id in state.malicious

    if not is_mal or cfg.attack == "none":
        local = nn.train_local(base, X, y, cfg.local_epochs, cfg.batch_size, opt, t_seed)
        return _ClientResult(client_id, nn.param_delta(nn.flatten(local), theta), False)

    p_seed = client_poison_seed(master, round_index, client_id)
    trigger = pools.trigger
    if cfg.attack == "dba":
        trigger = attacks.dba_subtrigger(
            trigger, _attacker_rank(state, client_id) % cfg.dba_parts, cfg.dba_parts
        )

    if cfg.attack in ("badnets", "dba"):
        px, py, _ = attacks.poison_shard(X, y, trigger, cfg.poison_rate, p_seed)
        local = nn.train_local(base, px, py, cfg.local_epochs, cfg.batch_size, opt, t_seed)
        return _ClientResult(client_id, nn.param_delta(nn.flatten(local), theta), True)

    if cfg.attack == "scaling":
        px, py, _ = attacks.poison_shard(X, y, trigger, cfg.poison_rate, p_seed)
        local = nn.train_local(base, px, py, cfg.local_epochs, cfg.batch_size, opt, t_seed)
        factor = cfg.scaling_factor or float(cfg.clients_per_round)
        return _ClientResult(
            client_id, attacks.craft_scaling(theta, nn.flatten(local), factor), True
        )

    if cfg.attack == "alie":
        px, py, _ = attacks.poison_shard(X, y, trigger, cfg.poison_rate, p_seed)
        bd = nn.train_local(base, px, py, cfg.local_epochs, cfg.batch_size, opt, t_seed)
        clean = nn.train_local(
            base, X, y, cfg.local_epochs, cfg.batch_size, opt,
            client_clean_seed(master, round_index, client_id),
        )
        # the actual delta is resolved after all attacker stats are pooled
        return _ClientResult(
            client_id,
            nn.param_delta(nn.flatten(bd), theta),
            True,
            bd_delta=nn.flatten(bd).values - theta.values,
            clean_delta=nn.flatten(clean).values - theta.values,
        )

    if cfg.attack == "adaptive":
        px, py, _ = attacks.poison_shard(X, y, trigger, cfg.poison_rate, p_seed)
        # The server's auxiliary set is private: by default the attacker can
        # only probe PLR distances with its own clean samples. The "aux*"
        # modes grant oracle knowledge of the true auxiliary set (and the
        # frozen encoder) for worst-case studies.
        if cfg.adaptive_probe == "own":
            probe = attacks.AdaptiveProbe(X[: len(pools.aux.features)], None)
        elif cfg.adaptive_probe == "aux":
            probe = attacks.AdaptiveProbe(pools.aux.features, None)
        else:  # aux-encoder
            probe = attacks.AdaptiveProbe(pools.aux.features, encoder)
        norms = state.adaptive_norms.setdefault(client_id, attacks.AdaptiveNormalizers())
        # the combined objective is minimized by plain gradient descent; the
        # benign-behaving sibling inside still trains like an honest client
        inner_opt = dataclasses.replace(opt, momentum=0.0) if opt.kind == nn.SGD else opt
        delta = attacks.craft_adaptive(
            theta, arch, px, py, X, y, probe, cfg.adaptive_config(), inner_opt,
            cfg.local_epochs, cfg.batch_size, t_seed, norms, sibling_opt=opt,
        )
        return _ClientResult(client_id, delta, True)

    raise ConfigError(f"unknown attack {cfg.attack!r}")  # pragma: no cover


def _resolve_alie(
    cfg: ExperimentConfig, state: FlState, results: list
) -> None:
    """Pool attacker clean-sibling stats, clip each backdoored update in-band."""
    atk = [r for r in results if r.is_malicious and r.clean_delta is not None]
    if not atk:
        return
    pool = [r.clean_delta for r in atk]
    if len(atk) == 1:
        pool = pool + state.alie_history.get(atk[0].client_id, [])
    stack = np.stack(pool)
    mu = stack.mean(axis=0)
    sd = stack.std(axis=0)
    layout = results[0].delta.layout
    for r in atk:
        r.delta = attacks.craft_alie(
            ParamVector(mu, layout),
            ParamVector(sd, layout),
            ParamVector(r.bd_delta, layout),
            cfg.alie_z,
        )
    for r in atk:
        state.alie_history.setdefault(r.client_id, []).append(r.clean_delta)


def run_round(
    cfg: ExperimentConfig,
    state: FlState,
    pools: Pools,
    encoder: Optional[defense.EncoderModel] = None,
    collector: Optional[Callable] = None,
) -> tuple[FlState, RoundMetrics, list]:
    """Advance one round: sample, train/attack, score, aggregate, evaluate.

    ``collector(round, client_id, sequence, is_malicious)`` is invoked for
    every selected client when set (shadow-phase capture).
    """
    arch = model_arch(cfg, pools.train.dim)
    r = state.round
    sel_rng = np.random.default_rng(stream_seed(cfg.seed, _T_SELECT, r))
    selected = np.sort(sel_rng.choice(cfg.n_clients, cfg.clients_per_round, replace=False))

    job = lambda cid: _client_job(cfg, state, pools, arch, encoder, r, int(cid))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(job, selected))
    else:
        results = [job(cid) for cid in selected]
    _resolve_alie(cfg, state, results)

    deltas = [res.delta for res in results]
    is_mal = np.array([res.is_malicious for res in results])

    seqs = None
    if collector is not None or cfg.defense == "flbuff":
        seqs = [
            defense.extract_plr_sequence(
                state.theta, res.delta, pools.aux, arch, res.client_id, r
            )
            for res in results
        ]
    if collector is not None:
        for seq, res in zip(seqs, results):
            collector(r, res.client_id, seq, res.is_malicious)

    n_flagged = 0
    mean_ben = float("nan")
    mean_mal = float("nan")
    embed_rows: list = []
    if cfg.defense == "flbuff":
        if encoder is None:
            raise ConfigError("flbuff defense needs a trained encoder")
        trust = defense.trust_scores(seqs, encoder, cfg.defense_config())
        theta_next = defense.aggregate(state.theta, deltas, trust)
        n_flagged = int(trust.flagged.sum())
        if (~is_mal).any():
            mean_ben = float(trust.scores[~is_mal].mean())
        if is_mal.any():
            mean_mal = float(trust.scores[is_mal].mean())
        if cfg.emit_embeddings:
            for seq, res, flag, score in zip(seqs, results, trust.flagged, trust.scores):
                embed_rows.append(
                    defense.embedding_csv_row(
                        r, res.client_id, res.is_malicious, bool(flag),
                        float(score), defense.embed(encoder, seq),
                    )
                )
    else:
        theta_next = defense.aggregate_baseline(
            state.theta, deltas, cfg.defense, clip_norm=cfg.clip_norm
        )

    metrics = RoundMetrics(
        round=r,
        acc=eval_acc(theta_next, arch, pools.test_features, pools.test_labels),
        asr=eval_asr(theta_next, arch, pools.bd_features, pools.bd_labels),
        selected=tuple(int(c) for c in selected),
        n_malicious_selected=int(is_mal.sum()),
        n_flagged=n_flagged,
        mean_score_benign=mean_ben,
        mean_score_malicious=mean_mal,
    )
    state_next = dataclasses.replace(state, round=r + 1, theta=theta_next)
    return state_next, metrics, embed_rows


# ---------------------------------------------------------------------------
# Shadow collection and encoder preparation
# ---------------------------------------------------------------------------


def shadow_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """The labeled-collection run: iid, trigger-patch attackers, no defense."""
    return replace(
        cfg,
        partition="iid",
        noniid_degree=None,
        attack="badnets",
        defense="fedavg",
        rounds=cfg.shadow_rounds,
        emit_embeddings=False,
        seed=stream_seed(cfg.seed, _T_SHADOW),
    )


def collect_defense_trainset(
    cfg: ExperimentConfig, pools: Optional[Pools] = None
) -> defense.DefenseTrainSet:
    """Run the shadow phase and record every selected client's PLR sequence.

    Labels are ground truth (1 for the planted attackers). The shadow run
    starts from the same global initialization the main run will deploy
    (the server owns both), so the collected sequences cover the parameter
    region the defended run actually starts in. Raises if the shadow run
    never selected a malicious client.
    """
    shadow_cfg = shadow_config(cfg)
    pools = pools if pools is not None else build_pools(cfg)
    state = init_state(shadow_cfg, pools, shadow_cfg.seed)
    arch = model_arch(cfg, pools.train.dim)
    theta0 = nn.flatten(nn.init_mlp(arch, stream_seed(cfg.seed, _T_INIT)))
    state = dataclasses.replace(state, theta=theta0)
    sequences: list = []
    labels: list = []

    def collector(rnd, cid, seq, is_mal):
        sequences.append(seq)
        labels.append(1 if is_mal else 0)

    for _ in range(shadow_cfg.rounds):
        state, _, _ = run_round(shadow_cfg, state, pools, collector=collector)
    labels_arr = np.asarray(labels, dtype=np.int64)
    if not np.any(labels_arr == 1):
        raise defense.DefenseError("shadow run produced no malicious sequences")
    return defense.DefenseTrainSet(tuple(sequences), labels_arr)


def prepare_encoder(
    cfg: ExperimentConfig, pools: Optional[Pools] = None
) -> tuple[defense.EncoderModel, defense.DefenseTrainSet]:
    trainset = collect_defense_trainset(cfg, pools)
    enc = defense.train_defense(
        trainset, cfg.defense_config(), seed=stream_seed(cfg.seed, _T_DEFTRAIN)
    )
    return enc, trainset


# ---------------------------------------------------------------------------
# Full experiment
# ---------------------------------------------------------------------------


def run_experiment(
    cfg: ExperimentConfig,
    encoder: Optional[defense.EncoderModel] = None,
    pools: Optional[Pools] = None,
) -> ExperimentResult:
    """Optional shadow phase, then the main loop; deterministic per master seed."""
    cfg.validate()
    t0 = time.perf_counter()
    pools = pools if pools is not None else build_pools(cfg)
    if cfg.defense == "flbuff" and encoder is None:
        if cfg.encoder_checkpoint:
            encoder, meta = defense.load_encoder(cfg.encoder_checkpoint)
            plr_dim = cfg.hidden_dims[-1]
            if encoder.input_dim != plr_dim or int(meta["m"]) != cfg.aux_size:
                raise ConfigError("encoder checkpoint does not match this config")
        else:
            encoder, _ = prepare_encoder(cfg, pools)

    state = init_state(cfg, pools, cfg.seed)
    metrics: list = []
    embeddings: list = []
    for _ in range(cfg.rounds):
        state, rm, rows = run_round(cfg, state, pools, encoder=encoder)
        metrics.append(rm)
        embeddings.extend(rows)
    return ExperimentResult(
        metrics=metrics,
        final_acc=metrics[-1].acc,
        final_asr=metrics[-1].asr,
        wall_clock=time.perf_counter() - t0,
        embeddings=embeddings,
        encoder=encoder,
        config=cfg,
    )
