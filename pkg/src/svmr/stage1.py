"""Stage 1: two-branch auto-encoder for video-level retrieval.

Each branch (query, reference) owns an independent encoder and decoder.
The encoder runs a per-concept temporal filter stack, projects channels to
the embedding width, and average-pools time down to one vector (query) or a
few time buckets (reference).  The decoder mirrors it: projection back to
feature channels, linear upsampling to the original length, and a second
filter stack.  Training pairs a reconstruction objective on both branches
with a cosine-similarity objective tying query embeddings to labeled
reference time buckets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .benchmark import Corpus
from .checkpoint import STAGE1_MAGIC, load_checkpoint, save_checkpoint
from .data import AnnotatedVideo, QueryClip
from .ops import (
    Adam,
    AvgPoolTemporal,
    ChannelProjection,
    ConceptTemporalConv,
    LinearResize,
    ShapeError,
    back_layers,
    linear_resize,
    run_layers,
)

Array = np.ndarray


@dataclass(frozen=True)
class Stage1Config:
    channels: int = 64
    d_e: int = 512
    t_emb: int = 4
    l_q: int = 4
    l_r: int = 100
    ctc_filters: tuple[int, ...] = (1, 32, 1)
    lambda_sim: float = 2.0
    rho: float = 0.5
    lr: float = 1e-4
    batch_size: int = 256
    micro_batch: int = 16
    epochs: int = 5
    steps_per_epoch: int = 100
    val_batches: int = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.channels, self.d_e, self.t_emb, self.l_q, self.l_r) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.ctc_filters[0] != 1 or self.ctc_filters[-1] != 1:
            raise ValueError("filter stack must start and end at one filter")
        if not 0 < self.rho <= 1:
            raise ValueError(f"coverage threshold must be in (0, 1], got {self.rho}")


class _Branch:
    """Encoder + decoder for one input geometry (length, pool target)."""

    def __init__(self, config: Stage1Config, length: int, pool_target: int,
                 seeds: list[int]):
        filters = config.ctc_filters
        it = iter(seeds)
        self.length = length
        self.pool_target = pool_target
        # nonlinear only in hidden filter banks: linear interfaces keep
        # near-invertible solutions reachable, so reconstruction can shape
        # the embedding instead of stalling on rectified features
        self.enc_ctc = []
        f_prev = 1
        for i, f in enumerate(filters):
            act = "linear" if i == len(filters) - 1 else "relu"
            self.enc_ctc.append(ConceptTemporalConv(f_prev, f, activation=act,
                                                    seed=next(it)))
            f_prev = f
        self.enc_proj = ChannelProjection(config.channels, config.d_e,
                                          activation="linear", seed=next(it))
        self.enc_pool = AvgPoolTemporal(pool_target)
        self.dec_proj = ChannelProjection(config.d_e, config.channels,
                                          activation="linear", seed=next(it))
        self.dec_resize = LinearResize(length)
        self.dec_ctc = []
        f_prev = 1
        for i, f in enumerate(reversed(filters)):
            act = "linear" if i == len(filters) - 1 else "relu"
            self.dec_ctc.append(ConceptTemporalConv(f_prev, f, activation=act,
                                                    seed=next(it)))
            f_prev = f

    SEEDS_NEEDED = 8  # 3 encoder CTC + enc proj + dec proj + 3 decoder CTC

    def layers(self) -> list:
        return [*self.enc_ctc, self.enc_proj, self.enc_pool,
                self.dec_proj, self.dec_resize, *self.dec_ctc]

    def encode(self, x: Array):
        if x.shape[-1] != self.length:
            raise ShapeError(f"expected input length {self.length}, got {x.shape[-1]}")
        h, ctc_caches = run_layers(self.enc_ctc, x[..., None])
        h = h[..., 0]
        h, proj_cache = self.enc_proj.forward(h)
        emb, pool_cache = self.enc_pool.forward(h)
        return emb, (ctc_caches, proj_cache, pool_cache)

    def encode_backward(self, demb: Array, cache) -> Array:
        ctc_caches, proj_cache, pool_cache = cache
        dh = self.enc_pool.backward(demb, pool_cache)
        dh = self.enc_proj.backward(dh, proj_cache)
        dx = back_layers(self.enc_ctc, dh[..., None], ctc_caches)
        return dx[..., 0]

    def decode(self, emb: Array):
        h, proj_cache = self.dec_proj.forward(emb)
        h, resize_cache = self.dec_resize.forward(h)
        y, ctc_caches = run_layers(self.dec_ctc, h[..., None])
        return y[..., 0], (proj_cache, resize_cache, ctc_caches)

    def decode_backward(self, dy: Array, cache) -> Array:
        proj_cache, resize_cache, ctc_caches = cache
        dh = back_layers(self.dec_ctc, dy[..., None], ctc_caches)[..., 0]
        dh = self.dec_resize.backward(dh, resize_cache)
        return self.dec_proj.backward(dh, proj_cache)


def _branch_seeds(seed: int, count: int) -> list[int]:
    state = np.random.SeedSequence(seed).generate_state(count)
    return [int(s) for s in state]


class Stage1Model:
    """Both branches plus the loss machinery."""

    def __init__(self, config: Stage1Config):
        self.config = config
        seeds = _branch_seeds(config.seed, 2 * _Branch.SEEDS_NEEDED)
        n = _Branch.SEEDS_NEEDED
        self.query = _Branch(config, config.l_q, 1, seeds[:n])
        self.reference = _Branch(config, config.l_r, config.t_emb, seeds[n:])

    def layers(self) -> list:
        return self.query.layers() + self.reference.layers()

    def encode_query(self, f_q: Array) -> Array:
        emb, _ = self.query.encode(np.asarray(f_q, dtype=float))
        return emb[..., 0]

    def encode_reference(self, f_r: Array) -> Array:
        emb, _ = self.reference.encode(np.asarray(f_r, dtype=float))
        return emb

    def decode_query(self, e_q: Array) -> Array:
        recon, _ = self.query.decode(np.asarray(e_q, dtype=float)[..., None])
        return recon

    def decode_reference(self, e_r: Array) -> Array:
        recon, _ = self.reference.decode(np.asarray(e_r, dtype=float))
        return recon

    # -- training loss ----------------------------------------------------

    def loss_forward(self, f_q: Array, f_r: Array, g: Array, scale: float = None):
        """Scaled-sum stage-1 loss over a (possibly partial) batch.

        ``scale`` defaults to 1/batch so the result is the batch mean; a
        caller accumulating micro-batches passes 1/total_batch instead.
        """
        batch = f_q.shape[0]
        if scale is None:
            scale = 1.0 / batch
        e_q, qe_cache = self.query.encode(f_q)
        f_q_hat, qd_cache = self.query.decode(e_q)
        e_r, re_cache = self.reference.encode(f_r)
        f_r_hat, rd_cache = self.reference.decode(e_r)

        diff_q = f_q_hat - f_q
        diff_r = f_r_hat - f_r
        recon_q = scale * float((diff_q ** 2).mean(axis=(-2, -1)).sum())
        recon_r = scale * float((diff_r ** 2).mean(axis=(-2, -1)).sum())
        cos, cos_cache = _cosine_forward(e_q[..., 0], e_r)
        sim = scale * float(((cos - g) ** 2).mean(axis=-1).sum())
        lam = self.config.lambda_sim
        total = recon_q + recon_r + lam * sim
        parts = {"recon_q": recon_q, "recon_r": recon_r, "sim": sim, "total": total}
        cache = (f_q, f_r, g, scale, e_q, e_r, diff_q, diff_r, cos, cos_cache,
                 qe_cache, qd_cache, re_cache, rd_cache)
        return total, parts, cache

    def loss_backward(self, cache) -> tuple[Array, Array]:
        """Accumulate parameter grads; returns (d/d f_q, d/d f_r)."""
        (f_q, f_r, g, scale, e_q, e_r, diff_q, diff_r, cos, cos_cache,
         qe_cache, qd_cache, re_cache, rd_cache) = cache
        lam = self.config.lambda_sim

        dfq_hat = scale * 2.0 * diff_q / (diff_q.shape[-2] * diff_q.shape[-1])
        dfr_hat = scale * 2.0 * diff_r / (diff_r.shape[-2] * diff_r.shape[-1])
        dcos = scale * lam * 2.0 * (cos - g) / g.shape[-1]
        de_q_cos, de_r_cos = _cosine_backward(dcos, cos_cache)

        de_q = self.query.decode_backward(dfq_hat, qd_cache)
        de_q = de_q + de_q_cos[..., None]
        dfq = self.query.encode_backward(de_q, qe_cache) - dfq_hat

        de_r = self.reference.decode_backward(dfr_hat, rd_cache) + de_r_cos
        dfr = self.reference.encode_backward(de_r, re_cache) - dfr_hat
        return dfq, dfr

    def zero_grads(self) -> None:
        for layer in self.layers():
            layer.zero_grads()

    # -- persistence -------------------------------------------------------

    _BRANCH_KEYS = ("query", "reference")

    def to_blocks(self) -> dict[str, Array]:
        cfg = self.config
        blocks = {"hyper": np.array([cfg.channels, cfg.d_e, cfg.t_emb, cfg.l_q,
                                     cfg.l_r, cfg.lambda_sim, cfg.rho, cfg.seed,
                                     *cfg.ctc_filters], dtype=float)}
        for key in self._BRANCH_KEYS:
            branch: _Branch = getattr(self, key)
            named = [("enc_ctc%d" % i, l) for i, l in enumerate(branch.enc_ctc)]
            named += [("enc_proj", branch.enc_proj), ("dec_proj", branch.dec_proj)]
            named += [("dec_ctc%d" % i, l) for i, l in enumerate(branch.dec_ctc)]
            for name, layer in named:
                for pname, arr in layer.params.arrays.items():
                    blocks[f"{key}.{name}.{pname}"] = arr
        return blocks

    def load_blocks(self, blocks: dict[str, Array]) -> None:
        for key in self._BRANCH_KEYS:
            branch: _Branch = getattr(self, key)
            named = [("enc_ctc%d" % i, l) for i, l in enumerate(branch.enc_ctc)]
            named += [("enc_proj", branch.enc_proj), ("dec_proj", branch.dec_proj)]
            named += [("dec_ctc%d" % i, l) for i, l in enumerate(branch.dec_ctc)]
            for name, layer in named:
                for pname, arr in layer.params.arrays.items():
                    block = blocks[f"{key}.{name}.{pname}"]
                    if block.shape != arr.shape:
                        raise ValueError(
                            f"{key}.{name}.{pname}: shape {block.shape} != {arr.shape}")
                    layer.params.arrays[pname] = block.astype(float)

    def save(self, path) -> None:
        save_checkpoint(self.to_blocks(), path, STAGE1_MAGIC)

    @staticmethod
    def load(path) -> "Stage1Model":
        blocks = load_checkpoint(path, STAGE1_MAGIC)
        h = blocks["hyper"]
        config = Stage1Config(channels=int(h[0]), d_e=int(h[1]), t_emb=int(h[2]),
                              l_q=int(h[3]), l_r=int(h[4]), lambda_sim=float(h[5]),
                              rho=float(h[6]), seed=int(h[7]),
                              ctc_filters=tuple(int(f) for f in h[8:]))
        model = Stage1Model(config)
        model.load_blocks(blocks)
        return model


# -- cosine machinery -------------------------------------------------------


def _cosine_forward(a: Array, b: Array):
    """Columnwise cosine between a (..., d) and b (..., d, T); zeros give 0."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-2)
    dot = np.einsum("...d,...dt->...t", a, b)
    denom = na[..., None] * nb
    valid = denom > 0.0
    cos = np.zeros_like(dot)
    np.divide(dot, denom, out=cos, where=valid)
    return cos, (a, b, na, nb, cos, valid)


def _cosine_backward(dcos: Array, cache):
    a, b, na, nb, cos, valid = cache
    d = np.where(valid, dcos, 0.0)
    denom = np.where(valid, na[..., None] * nb, 1.0)
    na2 = np.where(na > 0.0, na ** 2, 1.0)
    nb2 = np.where(valid, nb ** 2, 1.0)
    da = np.einsum("...t,...dt->...d", d / denom, b) \
        - np.einsum("...t,...d->...d", d * cos / na2[..., None], a)
    db = d[..., None, :] / denom[..., None, :] * a[..., None] \
        - d[..., None, :] * cos[..., None, :] * b / nb2[..., None, :]
    return da, db


def max_cos_similarity(e_q: Array, e_r: Array) -> float:
    """Best cosine between the query vector and any reference column."""
    e_q = np.asarray(e_q, dtype=float)
    e_r = np.asarray(e_r, dtype=float)
    if e_q.ndim != 1 or e_r.ndim != 2 or e_r.shape[0] != e_q.shape[0]:
        raise ShapeError(f"incompatible embedding shapes {e_q.shape}, {e_r.shape}")
    if not np.linalg.norm(e_q) > 0.0:
        raise ValueError("degenerate query embedding")
    cos, _ = _cosine_forward(e_q, e_r)
    return float(cos.max())


# -- losses (single-pair forms) ---------------------------------------------


def recon_loss(f: Array, f_hat: Array) -> float:
    """Mean squared elementwise reconstruction error."""
    f = np.asarray(f, dtype=float)
    f_hat = np.asarray(f_hat, dtype=float)
    if f.shape != f_hat.shape:
        raise ShapeError(f"shape mismatch {f.shape} vs {f_hat.shape}")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(f_hat))):
        raise ValueError("non-finite reconstruction inputs")
    return float(((f - f_hat) ** 2).mean())


def similarity_loss(e_q: Array, e_r: Array, g: Array) -> float:
    """Mean squared gap between bucket cosines and their +-1 labels."""
    g = np.asarray(g, dtype=float)
    if not np.all(np.abs(g) == 1.0):
        raise ValueError("labels must be +-1")
    cos, _ = _cosine_forward(np.asarray(e_q, dtype=float),
                             np.asarray(e_r, dtype=float))
    if cos.shape != g.shape:
        raise ShapeError(f"label shape {g.shape} does not match {cos.shape}")
    return float(((cos - g) ** 2).mean())


def stage1_loss(f_q: Array, f_q_hat: Array, f_r: Array, f_r_hat: Array,
                e_q: Array, e_r: Array, g: Array, lambda_sim: float = 2.0) -> float:
    return (recon_loss(f_q, f_q_hat) + recon_loss(f_r, f_r_hat)
            + lambda_sim * similarity_loss(e_q, e_r, g))


# -- labels and sampling ------------------------------------------------------


def make_similarity_label(video: AnnotatedVideo, query_class: int,
                          t_emb: int, rho: float = 0.5) -> Array:
    """+-1 per time bucket: +1 iff query-class instances cover >= rho of it."""
    duration = video.duration_sec
    intervals = sorted((i.t_start, i.t_end) for i in video.instances
                       if i.class_id == query_class)
    merged: list[list[float]] = []
    for lo, hi in intervals:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    g = np.full(t_emb, -1.0)
    for i in range(t_emb):
        w_lo = i * duration / t_emb
        w_hi = (i + 1) * duration / t_emb
        covered = sum(max(0.0, min(hi, w_hi) - max(lo, w_lo)) for lo, hi in merged)
        if covered >= rho * (w_hi - w_lo):
            g[i] = 1.0
    return g


@dataclass
class PairSampler:
    """Uniform query sampling with a 50% positive-reference coin flip."""

    queries: list[QueryClip]
    references: list[AnnotatedVideo]
    t_emb: int
    rho: float = 0.5
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._pos: dict[int, list[int]] = {}
        self._neg: dict[int, list[int]] = {}
        classes = {q.class_id for q in self.queries}
        for c in classes:
            pos = [i for i, v in enumerate(self.references) if c in v.classes()]
            neg = [i for i, v in enumerate(self.references) if c not in v.classes()]
            self._pos[c] = pos
            self._neg[c] = neg
        self.usable = []
        for q in self.queries:
            if not self._pos[q.class_id]:
                self.warnings.append(
                    f"{q.features.video_id}: class {q.class_id} has no positive "
                    "reference, query skipped")
            else:
                self.usable.append(q)
        if not self.usable:
            raise ValueError("no usable queries: every class lacks positive references")

    def sample(self, rng: np.random.Generator) -> tuple[QueryClip, AnnotatedVideo, Array]:
        query = self.usable[int(rng.integers(len(self.usable)))]
        c = query.class_id
        want_positive = rng.random() < 0.5
        pool = self._pos[c] if want_positive or not self._neg[c] else self._neg[c]
        ref = self.references[int(pool[rng.integers(len(pool))])]
        g = make_similarity_label(ref, c, self.t_emb, self.rho)
        return query, ref, g


def resize_batch(sequences: list[Array], target: int) -> Array:
    return np.stack([linear_resize(np.asarray(s, dtype=float), target)
                     for s in sequences])


def make_batch(sampler: PairSampler, rng: np.random.Generator, batch_size: int,
               config: Stage1Config) -> tuple[Array, Array, Array]:
    fq, fr, g = [], [], []
    for _ in range(batch_size):
        query, ref, label = sampler.sample(rng)
        fq.append(query.features.data)
        fr.append(ref.features.data)
        g.append(label)
    return (resize_batch(fq, config.l_q), resize_batch(fr, config.l_r), np.stack(g))


# -- training -----------------------------------------------------------------


def train_stage1(corpus: Corpus, config: Stage1Config,
                 log=None) -> tuple[Stage1Model, dict]:
    """Adam training with best-validation-loss checkpointing.

    Validation batches are fixed once (seeded) so per-epoch values are
    comparable; the returned model carries the best-epoch parameters.
    """
    model = Stage1Model(config)
    optimizer = Adam(model.layers(), lr=config.lr)
    # a reference mixing in a held-out class would collect -1 labels against
    # every training query and its content would be repelled from the whole
    # embedding space, so training sees train-class references only
    split = corpus.class_split
    train_refs = [v for v in corpus.references
                  if v.classes() <= split.train_classes]
    sampler = PairSampler(corpus.queries["train"], train_refs,
                          config.t_emb, config.rho)
    val_queries = corpus.queries["val"] or corpus.queries["train"]
    if corpus.queries["val"]:
        val_refs = [v for v in corpus.references
                    if v.classes() <= split.train_classes | split.val_classes]
    else:
        val_refs = train_refs
    val_sampler = PairSampler(val_queries, val_refs,
                              config.t_emb, config.rho)
    val_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 2)))
    val_set = [make_batch(val_sampler, val_rng, min(config.batch_size, 64), config)
               for _ in range(config.val_batches)]

    history = {"train_loss": [], "val_loss": [], "best_epoch": -1}
    best_val = np.inf
    best_blocks = None
    for epoch in range(config.epochs):
        epoch_losses = []
        for step in range(config.steps_per_epoch):
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, 1, epoch, step)))
            f_q, f_r, g = make_batch(sampler, rng, config.batch_size, config)
            model.zero_grads()
            total = 0.0
            for lo in range(0, config.batch_size, config.micro_batch):
                hi = min(lo + config.micro_batch, config.batch_size)
                loss, _parts, cache = model.loss_forward(
                    f_q[lo:hi], f_r[lo:hi], g[lo:hi], scale=1.0 / config.batch_size)
                model.loss_backward(cache)
                total += loss
            if not np.isfinite(total):
                raise RuntimeError(
                    f"divergence at epoch {epoch} step {step} "
                    f"(batch seed ({config.seed}, 1, {epoch}, {step}))")
            optimizer.step()
            epoch_losses.append(total)
        val_loss = 0.0
        for f_q, f_r, g in val_set:
            loss, _, _ = model.loss_forward(f_q, f_r, g)
            val_loss += loss / len(val_set)
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_loss"].append(float(val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_blocks = {k: v.copy() for k, v in model.to_blocks().items()}
            history["best_epoch"] = epoch
        if log is not None:
            log(f"stage1 epoch {epoch}: train {history['train_loss'][-1]:.6f} "
                f"val {val_loss:.6f}")
    if best_blocks is not None:
        model.load_blocks(best_blocks)
    history["sampler_warnings"] = list(sampler.warnings)
    return model, history
