"""Buffer-layer defense: PLR sequences, contrastive encoder, MMD trust scores.

Pipeline per aggregation round:
    1. every selected client's update delta_i is combined with the global
       parameters and run over a fixed auxiliary set, yielding an m x p
       matrix of penultimate-layer representations (a PLR sequence);
    2. a supervised-contrastive encoder (trained once, offline, on labeled
       benign/malicious sequences) maps each row into an embedding space
       where benign and malicious sequences are separated by a wide margin;
    3. a sigmoid head flags sequences that look malicious; the remaining
       sequences are scored by counting mutual nearest neighbors under the
       MMD distance between their encoded row-sets, softmaxed into trust
       scores; flagged clients get score zero;
    4. the global model moves by the trust-weighted sum of the updates.

Encoder and scoring are pure w.r.t. their inputs; the encoder is read-only
during scoring and can be shared across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import nn
from .nn import ConfigError, MlpModel, ParamVector

KERNEL_MEDIAN = "rbf-median"
KERNEL_FIXED = "rbf-fixed"


class DefenseError(RuntimeError):
    """Defense pipeline cannot proceed (missing class, degenerate input)."""


class DegenerateBatchError(ValueError):
    """A contrastive batch without >=2 benign and >=1 malicious members."""


@dataclass(frozen=True)
class AuxiliarySet:
    """Fixed, ordered feature set shared by all clients and rounds of a run."""

    features: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) < 2:
            raise ConfigError("auxiliary set needs at least 2 feature rows")

    def __len__(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class PLRSequence:
    """Penultimate representations of one client update over the auxiliary set."""

    client_id: int
    round: int
    rows: np.ndarray  # (m, p)

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ConfigError("PLR sequence must be a 2-D matrix")
        if not np.all(np.isfinite(self.rows)):
            raise ConfigError("PLR sequence contains non-finite values")


@dataclass(frozen=True)
class DefenseTrainSet:
    """Labeled PLR sequences (0 = benign, 1 = malicious) for encoder training."""

    sequences: tuple[PLRSequence, ...]
    labels: np.ndarray

    def __post_init__(self):
        if len(self.sequences) != len(self.labels):
            raise ConfigError("sequence/label count mismatch")
        if not (np.any(self.labels == 0) and np.any(self.labels == 1)):
            raise DefenseError("defense training set needs both classes")


@dataclass(frozen=True)
class EncoderModel:
    """Per-sample encoder (MLP p -> hidden -> d) plus a linear sigmoid head.

    The encoder consumes direction-normalized PLR rows (see
    ``normalize_rows``), making it insensitive to the activation-magnitude
    growth of converging classifiers.
    """

    net: MlpModel
    head_w: np.ndarray  # (d,)
    head_b: float
    tau: float

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    @property
    def embed_dim(self) -> int:
        return self.net.output_dim


@dataclass(frozen=True)
class DefenseConfig:
    tau: float = 0.5
    kappa: float = 1.0
    gamma: float = 0.5
    aux_size: int = 32
    kernel: str = KERNEL_MEDIAN
    kernel_bandwidth: Optional[float] = None
    encoder_hidden: int = 64
    encoder_dim: int = 32
    encoder_epochs: int = 60
    encoder_lr: float = 1e-3
    w_cls: float = 1.0
    batch_benign: int = 8  # alpha: benign sequences per contrastive batch
    batch_malicious: int = 4  # beta: malicious sequences per batch

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if self.kappa <= 0:
            raise ConfigError("kappa must be > 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.kernel not in (KERNEL_MEDIAN, KERNEL_FIXED):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.kernel == KERNEL_FIXED and not (self.kernel_bandwidth or 0) > 0:
            raise ConfigError("fixed kernel needs a positive bandwidth")
        if self.batch_benign < 2 or self.batch_malicious < 1:
            raise ConfigError("contrastive batches need >=2 benign and >=1 malicious")


@dataclass(frozen=True)
class TrustScoreVector:
    """Per-selected-client flag/count/score; unflagged scores sum to one."""

    client_ids: tuple[int, ...]
    flagged: np.ndarray
    counts: np.ndarray
    scores: np.ndarray
    fallback_uniform: bool = False


# ---------------------------------------------------------------------------
# PLR extraction and embedding
# ---------------------------------------------------------------------------


def extract_plr_sequence(
    theta: ParamVector,
    delta: ParamVector,
    aux: AuxiliarySet,
    arch,
    client_id: int = -1,
    round_index: int = -1,
) -> PLRSequence:
    """PLR matrix of the client model (theta + delta) over the auxiliary set."""
    model = nn.unflatten(nn.apply_update(theta, delta), arch)
    _, plr = nn.forward_with_plr(model, aux.features)
    return PLRSequence(client_id, round_index, plr)


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    """Scale each PLR row to unit norm (zero rows pass through).

    Activation magnitudes grow as classifiers converge; normalizing keeps
    the encoder's input distribution stable across training stages so the
    flagging head does not drift on well-trained models.
    """
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return rows / np.maximum(norms, 1e-12)


def encode_rows(enc: EncoderModel, rows: np.ndarray) -> np.ndarray:
    """Apply the per-sample encoder to every PLR row (direction-normalized)."""
    return nn.forward_logits(enc.net, normalize_rows(rows))


def embed(enc: EncoderModel, seq: PLRSequence) -> np.ndarray:
    """Sequence embedding: mean of encoded rows, L2-normalized to the unit sphere."""
    pooled = encode_rows(enc, seq.rows).mean(axis=0)
    norm = np.linalg.norm(pooled)
    if norm == 0.0:
        raise DefenseError("sequence embedding collapsed to the zero vector")
    return pooled / norm


def head_probability(enc: EncoderModel, embedding: np.ndarray) -> float:
    """Sigmoid probability that a sequence embedding is malicious."""
    s = float(enc.head_w @ embedding + enc.head_b)
    # stable logistic
    return 1.0 / (1.0 + math.exp(-s)) if s >= 0 else math.exp(s) / (1.0 + math.exp(s))


# ---------------------------------------------------------------------------
# Supervised contrastive loss
# ---------------------------------------------------------------------------


def supcl_loss(
    benign: np.ndarray, malicious: np.ndarray, tau: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Pairwise contrastive loss over unit embeddings, with analytic gradients.

    For each ordered benign pair (i, j), the positive similarity b_i.b_j
    competes against the similarities of b_i to every malicious embedding;
    the mean of all alpha*(alpha-1) ordered-pair terms is returned together
    with d(loss)/d(benign) and d(loss)/d(malicious).
    """
    alpha, beta = len(benign), len(malicious)
    if alpha < 2 or beta < 1:
        raise DegenerateBatchError("need alpha >= 2 benign and beta >= 1 malicious")
    if tau <= 0:
        raise ConfigError("tau must be positive")

    s_bb = benign @ benign.T / tau  # (a, a)
    s_bm = benign @ malicious.T / tau  # (a, b)
    lrow = _logsumexp_rows(s_bm)  # (a,)
    lse = np.logaddexp(s_bb, lrow[:, None])  # (a, a) combined normalizer
    off = ~np.eye(alpha, dtype=bool)
    n_terms = alpha * (alpha - 1)
    loss = float((lse - s_bb)[off].sum()) / n_terms

    # dL/ds_bb[i,j] = softmax weight of the positive term minus one
    d_bb = np.where(off, (np.exp(s_bb - lse) - 1.0) / n_terms, 0.0)
    # dL/ds_bm[i,z] = sum_j exp(s_bm[i,z] - lse[i,j]) over j != i
    inv = np.where(off, np.exp(-lse), 0.0).sum(axis=1)  # (a,)
    d_bm = np.exp(s_bm) * inv[:, None] / n_terms

    d_ben = (d_bb @ benign + d_bb.T @ benign + d_bm @ malicious) / tau
    d_mal = d_bm.T @ benign / tau
    return loss, d_ben, d_mal


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


# ---------------------------------------------------------------------------
# Encoder training
# ---------------------------------------------------------------------------


def _embed_with_cache(enc_arch, enc_views, rows: np.ndarray):
    acts = nn._forward_acts(enc_arch, enc_views, normalize_rows(rows))
    pooled = acts[-1].mean(axis=0)
    norm = np.linalg.norm(pooled)
    if norm == 0.0:
        raise DefenseError("sequence embedding collapsed to the zero vector")
    return acts, pooled / norm, norm


def _batch_loss_and_grads(
    enc_arch,
    enc_flat: np.ndarray,
    head_w: np.ndarray,
    head_b: float,
    rows_list: Sequence[np.ndarray],
    labels: np.ndarray,
    tau: float,
    w_cls: float,
):
    """Total batch loss (contrastive + weighted head BCE) and all gradients."""
    views = nn._param_views(enc_arch, enc_flat)
    caches, embeds, norms = [], [], []
    for rows in rows_list:
        acts, e, norm = _embed_with_cache(enc_arch, views, rows)
        caches.append(acts)
        embeds.append(e)
        norms.append(norm)
    embeds = np.stack(embeds)
    ben_idx = np.flatnonzero(labels == 0)
    mal_idx = np.flatnonzero(labels == 1)

    loss, d_ben, d_mal = supcl_loss(embeds[ben_idx], embeds[mal_idx], tau)
    d_embeds = np.zeros_like(embeds)
    d_embeds[ben_idx] = d_ben
    d_embeds[mal_idx] = d_mal

    # linear head with sigmoid, mean BCE over the batch
    k = len(embeds)
    scores = embeds @ head_w + head_b
    probs = 1.0 / (1.0 + np.exp(-scores))
    bce = float(np.mean(np.logaddexp(0.0, scores) - labels * scores))
    loss += w_cls * bce
    ds = (probs - labels) * (w_cls / k)
    d_embeds += ds[:, None] * head_w[None, :]
    g_head_w = ds @ embeds
    g_head_b = float(ds.sum())

    g_enc = np.zeros_like(enc_flat)
    for acts, e, norm, de in zip(caches, embeds, norms, d_embeds):
        du = (de - (de @ e) * e) / norm  # through L2 normalization
        dz = np.tile(du / len(acts[0]), (len(acts[0]), 1))  # through mean pooling
        gflat, _ = nn._backward_flat(enc_arch, views, acts, dz)
        g_enc += gflat
    return loss, g_enc, g_head_w, g_head_b


def train_defense(train: DefenseTrainSet, cfg: DefenseConfig, seed) -> EncoderModel:
    """Train the contrastive encoder and its flagging head on labeled sequences.

    Each mini-batch draws ``batch_benign`` benign and ``batch_malicious``
    malicious sequences (the minority class is resampled with replacement),
    and one Adam step is taken on the combined loss. Deterministic per seed.
    """
    p = train.sequences[0].rows.shape[1]
    rng = np.random.default_rng(seed)
    enc_arch = nn.mlp_arch((p, cfg.encoder_hidden, cfg.encoder_dim))
    net = nn.init_mlp(enc_arch, rng.integers(0, 2**32))
    head_w = rng.normal(0.0, 0.01, size=cfg.encoder_dim)
    head_b = 0.0

    enc_flat = nn.flatten(net).values.copy()
    runner = nn._OptRunner(
        nn.OptimizerState(nn.ADAM, lr=cfg.encoder_lr), len(enc_flat) + cfg.encoder_dim + 1
    )
    ben = np.flatnonzero(train.labels == 0)
    mal = np.flatnonzero(train.labels == 1)
    per_epoch = max(1, len(train.sequences) // (cfg.batch_benign + cfg.batch_malicious))
    joint = np.concatenate([enc_flat, head_w, [head_b]])

    for _ in range(cfg.encoder_epochs):
        for _ in range(per_epoch):
            bsel = rng.choice(ben, cfg.batch_benign, replace=len(ben) < cfg.batch_benign)
            msel = rng.choice(
                mal, cfg.batch_malicious, replace=len(mal) < cfg.batch_malicious
            )
            sel = np.concatenate([bsel, msel])
            rows_list = [train.sequences[i].rows for i in sel]
            labels = train.labels[sel].astype(np.float64)
            _, g_enc, g_w, g_b = _batch_loss_and_grads(
                enc_arch,
                joint[: len(enc_flat)],
                joint[len(enc_flat) : len(enc_flat) + cfg.encoder_dim],
                float(joint[-1]),
                rows_list,
                labels,
                cfg.tau,
                cfg.w_cls,
            )
            runner.step(joint, np.concatenate([g_enc, g_w, [g_b]]))

    net = nn.unflatten(
        nn.ParamVector(joint[: len(enc_flat)].copy(), nn.arch_layout(enc_arch)), enc_arch
    )
    return EncoderModel(
        net,
        joint[len(enc_flat) : len(enc_flat) + cfg.encoder_dim].copy(),
        float(joint[-1]),
        cfg.tau,
    )


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------


def median_bandwidth(vectors: np.ndarray) -> float:
    """Median pairwise Euclidean distance; falls back to 1.0 if degenerate."""
    n = len(vectors)
    if n < 2:
        return 1.0
    sq = np.sum(vectors**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (vectors @ vectors.T), 0.0)
    med = float(np.median(np.sqrt(d2[np.triu_indices(n, k=1)])))
    return med if med > 0 else 1.0


def _rbf(x: np.ndarray, y: np.ndarray, h: float) -> np.ndarray:
    sqx = np.sum(x**2, axis=1)
    sqy = np.sum(y**2, axis=1)
    d2 = np.maximum(sqx[:, None] + sqy[None, :] - 2.0 * (x @ y.T), 0.0)
    return np.exp(-d2 / (2.0 * h * h))


def mmd2(a: np.ndarray, b: np.ndarray, bandwidth: float) -> float:
    """Biased squared MMD with an RBF kernel (zero on identical sets)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) < 1 or len(b) < 1:
        raise ConfigError("mmd2 needs nonempty sets")
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")
    return float(
        _rbf(a, a, bandwidth).mean()
        + _rbf(b, b, bandwidth).mean()
        - 2.0 * _rbf(a, b, bandwidth).mean()
    )


def mmd2_with_grad(a: np.ndarray, b: np.ndarray, bandwidth: float):
    """Biased squared MMD plus its gradient w.r.t. the rows of ``a``.

    The bandwidth is treated as a constant (no gradient through the median
    heuristic). Used by the adaptive attacker to steer its PLRs.
    """
    h2 = bandwidth * bandwidth
    kaa = _rbf(a, a, bandwidth)
    kab = _rbf(a, b, bandwidth)
    kbb_mean = _rbf(b, b, bandwidth).mean()
    value = float(kaa.mean() + kbb_mean - 2.0 * kab.mean())

    na, m = len(a), len(b)
    # d k(x,y)/dx = -k(x,y) (x - y) / h^2; both (i,j) and (j,i) hit row i of kaa
    diff_aa = a[:, None, :] - a[None, :, :]
    grad = -2.0 * np.einsum("ij,ijk->ik", kaa, diff_aa) / (h2 * na * na)
    diff_ab = a[:, None, :] - b[None, :, :]
    grad += 2.0 * np.einsum("ij,ijk->ik", kab, diff_ab) / (h2 * na * m)
    return value, grad


# ---------------------------------------------------------------------------
# Trust scores and aggregation
# ---------------------------------------------------------------------------


def trust_scores(
    seqs: Sequence[PLRSequence], enc: EncoderModel, cfg: DefenseConfig
) -> TrustScoreVector:
    """Flag suspicious sequences, then score the rest by MMD neighbor counts.

    Every unflagged sequence selects its ceil(0.5*(u-1)) nearest peers by
    the MMD distance between encoded row-sets (ties broken by lower client
    id); a sequence's count is how often its peers selected it, and scores
    are the softmax of count/kappa. Flagged sequences score exactly zero.
    If everything is flagged the defense falls back to uniform scores.
    """
    if len(seqs) < 2:
        raise ConfigError("trust scoring needs at least 2 sequences")
    k = len(seqs)
    client_ids = tuple(s.client_id for s in seqs)
    probs = np.array([head_probability(enc, embed(enc, s)) for s in seqs])
    flagged = probs >= cfg.gamma
    counts = np.zeros(k, dtype=np.int64)
    scores = np.zeros(k)

    live = np.flatnonzero(~flagged)
    if len(live) == 0:
        return TrustScoreVector(
            client_ids, flagged, counts, np.full(k, 1.0 / k), fallback_uniform=True
        )

    encoded = [encode_rows(enc, seqs[i].rows) for i in live]
    if cfg.kernel == KERNEL_FIXED:
        h = float(cfg.kernel_bandwidth)
    else:
        h = median_bandwidth(np.vstack(encoded))
    u = len(live)
    dist = np.zeros((u, u))
    for x in range(u):
        for y in range(x + 1, u):
            dist[x, y] = dist[y, x] = mmd2(encoded[x], encoded[y], h)

    n_neighbors = math.ceil(0.5 * (u - 1))
    live_counts = np.zeros(u, dtype=np.int64)
    for x in range(u):
        peers = [y for y in range(u) if y != x]
        peers.sort(key=lambda y: (dist[x, y], client_ids[live[y]]))
        for y in peers[:n_neighbors]:
            live_counts[y] += 1

    shifted = live_counts / cfg.kappa
    shifted = shifted - shifted.max()
    soft = np.exp(shifted)
    scores[live] = soft / soft.sum()
    counts[live] = live_counts
    return TrustScoreVector(client_ids, flagged, counts, scores)


def aggregate(
    theta: ParamVector, deltas: Sequence[ParamVector], trust: TrustScoreVector
) -> ParamVector:
    """Trust-weighted update: theta + sum_i score_i * delta_i."""
    if len(deltas) != len(trust.scores):
        raise ConfigError("one delta per trust score required")
    out = theta.values.copy()
    for score, delta in zip(trust.scores, deltas):
        nn._check_same_layout(theta, delta)
        out += score * delta.values
    return ParamVector(out, theta.layout)


def aggregate_baseline(
    theta: ParamVector,
    deltas: Sequence[ParamVector],
    method: str,
    clip_norm: Optional[float] = None,
) -> ParamVector:
    """Reference aggregators: fedavg mean, coordinate median, norm-clipped mean."""
    if not deltas:
        raise ConfigError("nothing to aggregate")
    for d in deltas:
        nn._check_same_layout(theta, d)
    stack = np.stack([d.values for d in deltas])
    if method == "fedavg":
        upd = stack.mean(axis=0)
    elif method == "coord_median":
        upd = np.median(stack, axis=0)
    elif method == "norm_clip":
        if not (clip_norm or 0) > 0:
            raise ConfigError("norm_clip needs a positive clip norm")
        norms = np.linalg.norm(stack, axis=1)
        scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
        upd = (stack * scale[:, None]).mean(axis=0)
    else:
        raise ConfigError(f"unknown baseline aggregator {method!r}")
    return ParamVector(theta.values + upd, theta.layout)


# ---------------------------------------------------------------------------
# Encoder checkpoints
# ---------------------------------------------------------------------------


def save_encoder(
    enc: EncoderModel, gamma: float, aux_size: int, path
) -> None:
    """Metadata line (tau gamma d m p), then the standard checkpoint format.

    The head is serialized as one extra pseudo-layer ``head d 1 none``.
    """
    head_layer = nn.LayerSpec("head", enc.embed_dim, 1, nn.LINEAR)
    full = MlpModel(
        enc.net.arch + (head_layer,),
        enc.net.weights + (enc.head_w.reshape(-1, 1),),
        enc.net.biases + (np.array([enc.head_b]),),
    )
    meta = (
        f"tau {enc.tau!r} gamma {gamma!r} d {enc.embed_dim} "
        f"m {aux_size} p {enc.input_dim}\n"
    )
    with open(path, "wb") as fh:
        fh.write(meta.encode("ascii"))
        fh.write(nn.checkpoint_bytes(full))


def load_encoder(path) -> tuple[EncoderModel, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise nn.LayoutError("encoder checkpoint missing metadata line")
    fields = raw[:nl].decode("ascii").split()
    meta = {fields[i]: float(fields[i + 1]) for i in range(0, len(fields), 2)}
    full = nn.parse_checkpoint(raw[nl + 1 :])
    if full.arch[-1].layer_id != "head":
        raise nn.LayoutError("encoder checkpoint missing head layer")
    net = MlpModel(full.arch[:-1], full.weights[:-1], full.biases[:-1])
    enc = EncoderModel(
        net, full.weights[-1].ravel().copy(), float(full.biases[-1][0]), meta["tau"]
    )
    return enc, meta


# ---------------------------------------------------------------------------
# Embedding dump (external plotting aid)
# ---------------------------------------------------------------------------


def embedding_csv_row(
    round_index: int,
    client_id: int,
    is_malicious: bool,
    flagged: bool,
    score: float,
    embedding: np.ndarray,
) -> str:
    cells = [str(round_index), str(client_id), str(int(is_malicious)), str(int(flagged)), repr(float(score))]
    cells.extend(repr(float(v)) for v in embedding)
    return ",".join(cells)


def embedding_csv_header(embed_dim: int) -> str:
    return "round,client_id,is_malicious,flagged,score," + ",".join(
        f"e_{i}" for i in range(embed_dim)
    )
