"""Stage 2: attention-based re-localization over boundary-matching maps.

A shared temporal conv base encodes the (resized) query clip and reference
video; the reference encoding is expanded into a dense candidate map over
(start, duration) cells, each represented by a fixed number of interpolated
samples.  A per-cell sigmoid attention against the pooled query vector
weights the map, the query vector is fused in by elementwise product, and
two small conv heads emit classification and regression score maps.  Cells
whose span would leave the video (start + duration + 1 > map length) are
invalid and forced to exact zero everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .benchmark import Corpus
from .checkpoint import STAGE2_MAGIC, load_checkpoint, save_checkpoint
from .data import AnnotatedVideo, QueryClip
from .metrics import ar_at_an, auc
from .ops import (
    Adam,
    AvgPoolTemporal,
    MapConv2d,
    SampleAxisConv,
    ShapeError,
    TemporalConv1d,
    sigmoid,
)
from .stage1 import resize_batch

Array = np.ndarray


@dataclass(frozen=True)
class Stage2Config:
    channels: int = 64            # input feature channels
    base_hidden: int = 256
    map_channels: int = 128       # C: channels of the candidate map
    n_samples: int = 32           # N: interpolated samples per candidate
    head_channels: int = 128
    l_q: int = 4
    l_r: int = 100                # map length: candidate grid is l_r x l_r
    use_query_branch: bool = True
    theta_pos: float = 0.6
    theta_neg: float = 0.2
    clamp_eps: float = 1e-6
    band_high: float = 0.7
    band_low: float = 0.3
    lambda_rlm: float = 10.0
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 5
    steps_per_epoch: int = 50
    val_pairs: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError(f"need at least 2 samples per candidate, "
                             f"got {self.n_samples}")
        if not 0 <= self.theta_neg < self.theta_pos <= 1:
            raise ValueError("need 0 <= theta_neg < theta_pos <= 1")
        if min(self.l_q, self.l_r, self.map_channels, self.head_channels) < 1:
            raise ValueError("all dimensions must be >= 1")


def valid_mask(l_r: int) -> Array:
    """Boolean (start, duration) grid of candidates fitting inside the video."""
    s = np.arange(l_r)[:, None]
    d = np.arange(l_r)[None, :]
    return s + d + 1 <= l_r


class BMSampler:
    """Expands (..., C, L) features to the (..., C, N, S, D) candidate map.

    Cell (s, d) spans grid interval [s, s+d+1); its N samples interpolate
    the feature sequence at evenly spaced positions from s to s+d.  Invalid
    cells are exact zeros.
    """

    def __init__(self, l_r: int, n_samples: int):
        self.l_r = l_r
        self.n_samples = n_samples
        s = np.arange(l_r)[None, :, None]
        d = np.arange(l_r)[None, None, :]
        steps = np.linspace(0.0, 1.0, n_samples)[:, None, None]
        pos = s + steps * d                      # (N, S, D)
        lo = np.floor(pos).astype(int)
        np.clip(lo, 0, l_r - 1, out=lo)
        frac = pos - lo
        hi = np.minimum(lo + 1, l_r - 1)
        mask = valid_mask(l_r)
        self.mask = mask
        self.lo = lo
        self.hi = hi
        self.w_lo = np.where(mask, 1.0 - frac, 0.0)
        self.w_hi = np.where(mask, frac, 0.0)

    def forward(self, f: Array) -> Array:
        if f.shape[-1] != self.l_r:
            raise ShapeError(f"expected length {self.l_r}, got {f.shape[-1]}")
        # fancy indexing can return Fortran-ordered data; keep C order so
        # downstream reshape-based folds stay views
        return np.ascontiguousarray(
            f[..., self.lo] * self.w_lo + f[..., self.hi] * self.w_hi)

    def backward(self, dmap: Array, feature_shape: tuple) -> Array:
        df = np.zeros(feature_shape)
        flat_lo = self.lo.ravel()
        flat_hi = self.hi.ravel()
        w_lo = self.w_lo.ravel()
        w_hi = self.w_hi.ravel()
        dflat = dmap.reshape(-1, flat_lo.size)
        rows = dflat.shape[0]
        df_rows = df.reshape(rows, feature_shape[-1])
        for r in range(rows):
            df_rows[r] += np.bincount(flat_lo, weights=dflat[r] * w_lo,
                                      minlength=self.l_r)
            df_rows[r] += np.bincount(flat_hi, weights=dflat[r] * w_hi,
                                      minlength=self.l_r)
        return df


def bm_sample(f: Array, l_r: int | None = None, n_samples: int = 32) -> Array:
    """One-shot candidate-map expansion (see BMSampler)."""
    l_r = f.shape[-1] if l_r is None else l_r
    return BMSampler(l_r, n_samples).forward(f)


class Stage2Model:
    """Base convs (shared), candidate sampling, attention fusion, map heads."""

    def __init__(self, config: Stage2Config):
        self.config = config
        seeds = np.random.SeedSequence(config.seed).generate_state(6)
        self.base1 = TemporalConv1d(config.channels, config.base_hidden,
                                    activation="relu", seed=int(seeds[0]))
        self.base2 = TemporalConv1d(config.base_hidden, config.map_channels,
                                    activation="relu", seed=int(seeds[1]))
        self.query_pool = AvgPoolTemporal(1)
        self.att_conv = SampleAxisConv(config.map_channels, config.map_channels,
                                       config.n_samples, activation="linear",
                                       seed=int(seeds[2]))
        # gate-neutral start: zero weights hold every attention logit at 0,
        # so the sigmoid opens at 0.5 with full gradient; a fan-in init on
        # the all-positive base features saturates it beyond recovery
        for arr in self.att_conv.params.arrays.values():
            arr[:] = 0.0
        self.head_reduce = SampleAxisConv(config.map_channels, config.head_channels,
                                          config.n_samples, activation="relu",
                                          seed=int(seeds[3]))
        self.head_conv = MapConv2d(config.head_channels, config.head_channels,
                                   kernel_size=3, activation="relu",
                                   seed=int(seeds[4]))
        self.head_out = MapConv2d(config.head_channels, 2, kernel_size=1,
                                  activation="sigmoid", seed=int(seeds[5]))
        self.sampler = BMSampler(config.l_r, config.n_samples)

    def layers(self) -> list:
        return [self.base1, self.base2, self.query_pool, self.att_conv,
                self.head_reduce, self.head_conv, self.head_out]

    def zero_grads(self) -> None:
        for layer in self.layers():
            layer.zero_grads()

    # -- base -----------------------------------------------------------------

    def base_module(self, f_q: Array, f_r: Array):
        """Shared conv stack on both inputs; query pooled to one vector."""
        if f_q.shape[-2] != self.config.channels or f_r.shape[-2] != self.config.channels:
            raise ShapeError(
                f"expected {self.config.channels} channels, got "
                f"{f_q.shape[-2]} and {f_r.shape[-2]}")
        hq1, cq1 = self.base1.forward(f_q)
        hq2, cq2 = self.base2.forward(hq1)
        f_c, cqp = self.query_pool.forward(hq2)
        hr1, cr1 = self.base1.forward(f_r)
        f_rf, cr2 = self.base2.forward(hr1)
        return f_c, f_rf, (cq1, cq2, cqp, cr1, cr2)

    def base_backward(self, df_c: Array, df_rf: Array, cache):
        cq1, cq2, cqp, cr1, cr2 = cache
        dhq2 = self.query_pool.backward(df_c, cqp)
        dhq1 = self.base2.backward(dhq2, cq2)
        df_q = self.base1.backward(dhq1, cq1)
        dhr1 = self.base2.backward(df_rf, cr2)
        df_r = self.base1.backward(dhr1, cr1)
        return df_q, df_r

    # -- attention --------------------------------------------------------------

    def attention(self, f_c: Array, f_map: Array):
        """Per-cell sigmoid attention, then query fusion by Hadamard product."""
        f_down, conv_cache = self.att_conv.forward(f_map)     # (..., C, S, D)
        logits = np.einsum("...csd,...cx->...sd", f_down, f_c)
        att = sigmoid(logits)
        weighted = f_map * att[..., None, None, :, :]
        fc_col = f_c[..., :, 0][..., :, None, None, None]     # (..., C, 1, 1, 1)
        fused = weighted * fc_col
        cache = (f_c, f_map, f_down, conv_cache, att, weighted)
        return fused, att, cache

    def attention_backward(self, dfused: Array, cache):
        f_c, f_map, f_down, conv_cache, att, weighted = cache
        fc_col = f_c[..., :, 0][..., :, None, None, None]
        dweighted = dfused * fc_col
        dfc_had = (dfused * weighted).sum(axis=(-3, -2, -1))
        datt = (dweighted * f_map).sum(axis=(-4, -3))
        df_map = dweighted * att[..., None, None, :, :]
        dlogits = datt * att * (1.0 - att)
        df_down = dlogits[..., None, :, :] * f_c[..., :, 0][..., :, None, None]
        dfc_log = np.einsum("...sd,...csd->...c", dlogits, f_down)
        df_map += self.att_conv.backward(df_down, conv_cache)
        df_c = (dfc_had + dfc_log)[..., None]
        return df_c, df_map

    # -- heads ------------------------------------------------------------------

    def predict_maps(self, fused: Array):
        h, c1 = self.head_reduce.forward(fused)
        h, c2 = self.head_conv.forward(h)
        out, c3 = self.head_out.forward(h)
        out = out * self.sampler.mask
        m_c = out[..., 0, :, :]
        m_r = out[..., 1, :, :]
        return m_c, m_r, (c1, c2, c3)

    def predict_backward(self, dm_c: Array, dm_r: Array, cache):
        c1, c2, c3 = cache
        dout = np.stack([dm_c, dm_r], axis=-3) * self.sampler.mask
        dh = self.head_out.backward(dout, c3)
        dh = self.head_conv.backward(dh, c2)
        return self.head_reduce.backward(dh, c1)

    # -- full pass ----------------------------------------------------------------

    def forward(self, f_q: Array, f_r: Array):
        """Resized features in, masked (M_C, M_R) maps out."""
        f_c, f_rf, base_cache = self.base_module(np.asarray(f_q, dtype=float),
                                                 np.asarray(f_r, dtype=float))
        f_map = self.sampler.forward(f_rf)
        if self.config.use_query_branch:
            fused, _att, att_cache = self.attention(f_c, f_map)
        else:
            fused, att_cache = f_map, None
        m_c, m_r, head_cache = self.predict_maps(fused)
        cache = (f_rf.shape, base_cache, att_cache, head_cache)
        return m_c, m_r, cache

    def backward(self, dm_c: Array, dm_r: Array, cache):
        f_rf_shape, base_cache, att_cache, head_cache = cache
        dfused = self.predict_backward(dm_c, dm_r, head_cache)
        if self.config.use_query_branch:
            df_c, df_map = self.attention_backward(dfused, att_cache)
        else:
            df_c = 0.0
            df_map = dfused
        df_rf = self.sampler.backward(df_map, f_rf_shape)
        if not self.config.use_query_branch:
            batch_shape = df_rf.shape[:-2]
            df_c = np.zeros(batch_shape + (self.config.map_channels, 1))
        return self.base_backward(df_c, df_rf, base_cache)

    # -- persistence -----------------------------------------------------------------

    _NAMED = ("base1", "base2", "att_conv", "head_reduce", "head_conv", "head_out")

    def to_blocks(self) -> dict[str, Array]:
        cfg = self.config
        blocks = {"hyper": np.array([
            cfg.channels, cfg.base_hidden, cfg.map_channels, cfg.n_samples,
            cfg.head_channels, cfg.l_q, cfg.l_r, float(cfg.use_query_branch),
            cfg.theta_pos, cfg.theta_neg, cfg.band_high, cfg.band_low,
            cfg.lambda_rlm, cfg.seed], dtype=float)}
        for name in self._NAMED:
            layer = getattr(self, name)
            for pname, arr in layer.params.arrays.items():
                blocks[f"{name}.{pname}"] = arr
        return blocks

    def load_blocks(self, blocks: dict[str, Array]) -> None:
        for name in self._NAMED:
            layer = getattr(self, name)
            for pname, arr in layer.params.arrays.items():
                block = blocks[f"{name}.{pname}"]
                if block.shape != arr.shape:
                    raise ValueError(
                        f"{name}.{pname}: shape {block.shape} != {arr.shape}")
                layer.params.arrays[pname] = block.astype(float)

    def save(self, path) -> None:
        save_checkpoint(self.to_blocks(), path, STAGE2_MAGIC)

    @staticmethod
    def load(path) -> "Stage2Model":
        blocks = load_checkpoint(path, STAGE2_MAGIC)
        h = blocks["hyper"]
        config = Stage2Config(
            channels=int(h[0]), base_hidden=int(h[1]), map_channels=int(h[2]),
            n_samples=int(h[3]), head_channels=int(h[4]), l_q=int(h[5]),
            l_r=int(h[6]), use_query_branch=bool(h[7]), theta_pos=float(h[8]),
            theta_neg=float(h[9]), band_high=float(h[10]), band_low=float(h[11]),
            lambda_rlm=float(h[12]), seed=int(h[13]))
        model = Stage2Model(config)
        model.load_blocks(blocks)
        return model


# -- labels ---------------------------------------------------------------------


def to_grid_intervals(video: AnnotatedVideo, class_id: int,
                      l_r: int) -> list[tuple[float, float]]:
    """Same-class instance intervals mapped onto the candidate grid."""
    scale = l_r / video.duration_sec
    return [(inst.t_start * scale, inst.t_end * scale)
            for inst in video.instances if inst.class_id == class_id]


def gt_label_map(grid_intervals: list[tuple[float, float]], l_r: int) -> Array:
    """Max tIoU of each candidate cell against the positive instances."""
    s = np.arange(l_r, dtype=float)[:, None]
    e = s + np.arange(l_r, dtype=float)[None, :] + 1.0
    g = np.zeros((l_r, l_r))
    for lo, hi in grid_intervals:
        if not hi > lo:
            raise ValueError(f"empty grid interval ({lo}, {hi})")
        inter = np.clip(np.minimum(e, hi) - np.maximum(s, lo), 0.0, None)
        union = (e - s) + (hi - lo) - inter
        np.maximum(g, inter / union, out=g)
    return g * valid_mask(l_r)


# -- loss ------------------------------------------------------------------------


class RlmLoss:
    """Balanced map loss with cell selections frozen at construction.

    Classification: positives are valid cells with label above theta_pos,
    negatives below theta_neg, subsampled to a 1:1 ratio.  Regression: mean
    squared error over valid cells subsampled 1:1:1 from high/mid/low label
    bands.  Freezing the sampled indices makes the loss a deterministic
    function of the maps, which keeps gradient checks meaningful.
    """

    def __init__(self, g_batch: Array, rng: np.random.Generator,
                 config: Stage2Config):
        if g_batch.ndim == 2:
            g_batch = g_batch[None]
        self.g = g_batch
        self.config = config
        mask_flat = valid_mask(config.l_r).ravel()
        self.cls_pos: list[Array] = []
        self.cls_neg: list[Array] = []
        self.reg_sel: list[Array] = []
        for g in g_batch:
            g_flat = g.ravel()
            pos = np.flatnonzero(mask_flat & (g_flat > config.theta_pos))
            neg = np.flatnonzero(mask_flat & (g_flat < config.theta_neg))
            n = min(pos.size, neg.size)
            if n > 0:
                if pos.size > n:
                    pos = rng.choice(pos, n, replace=False)
                if neg.size > n:
                    neg = rng.choice(neg, n, replace=False)
            self.cls_pos.append(np.sort(pos))
            self.cls_neg.append(np.sort(neg))

            high = np.flatnonzero(mask_flat & (g_flat > config.band_high))
            low = np.flatnonzero(mask_flat & (g_flat < config.band_low))
            mid = np.flatnonzero(mask_flat & (g_flat >= config.band_low)
                                 & (g_flat <= config.band_high))
            bands = [b for b in (high, mid, low) if b.size]
            k = min(b.size for b in bands) if bands else 0
            chosen = [rng.choice(b, k, replace=False) if b.size > k else b
                      for b in bands]
            self.reg_sel.append(np.sort(np.concatenate(chosen))
                                if chosen else np.zeros(0, dtype=int))

    def forward(self, m_c: Array, m_r: Array):
        if m_c.ndim == 2:
            m_c, m_r = m_c[None], m_r[None]
        if m_c.shape != self.g.shape or m_r.shape != self.g.shape:
            raise ShapeError(f"map shape {m_c.shape} does not match labels "
                             f"{self.g.shape}")
        eps = self.config.clamp_eps
        batch = self.g.shape[0]
        l_c_total = 0.0
        l_r_total = 0.0
        for b in range(batch):
            mc_flat = m_c[b].ravel()
            pos, neg = self.cls_pos[b], self.cls_neg[b]
            n_sel = pos.size + neg.size
            if n_sel:
                p = np.clip(mc_flat[pos], eps, 1.0 - eps)
                q = np.clip(mc_flat[neg], eps, 1.0 - eps)
                l_c_total += -(np.log(p).sum() + np.log1p(-q).sum()) / n_sel
            sel = self.reg_sel[b]
            if sel.size:
                diff = m_r[b].ravel()[sel] - self.g[b].ravel()[sel]
                l_r_total += float((diff ** 2).mean())
        l_c = l_c_total / batch
        l_reg = l_r_total / batch
        total = l_c + self.config.lambda_rlm * l_reg
        return total, {"cls": l_c, "reg": l_reg, "total": total}, (m_c, m_r)

    def backward(self, cache) -> tuple[Array, Array]:
        m_c, m_r = cache
        eps = self.config.clamp_eps
        batch = self.g.shape[0]
        # np.zeros (not zeros_like) so the ravel views below always alias
        dm_c = np.zeros(m_c.shape)
        dm_r = np.zeros(m_r.shape)
        for b in range(batch):
            mc_flat = m_c[b].ravel()
            dmc_flat = dm_c[b].ravel()
            pos, neg = self.cls_pos[b], self.cls_neg[b]
            n_sel = pos.size + neg.size
            if n_sel:
                scale = 1.0 / (n_sel * batch)
                p = mc_flat[pos]
                inside_p = (p > eps) & (p < 1.0 - eps)
                np.add.at(dmc_flat, pos,
                          np.where(inside_p, -scale / np.clip(p, eps, None), 0.0))
                q = mc_flat[neg]
                inside_q = (q > eps) & (q < 1.0 - eps)
                np.add.at(dmc_flat, neg,
                          np.where(inside_q, scale / np.clip(1.0 - q, eps, None), 0.0))
            sel = self.reg_sel[b]
            if sel.size:
                diff = m_r[b].ravel()[sel] - self.g[b].ravel()[sel]
                np.add.at(dm_r[b].ravel(), sel,
                          self.config.lambda_rlm * 2.0 * diff / (sel.size * batch))
        return dm_c, dm_r


def rlm_loss(m_c: Array, m_r: Array, g: Array, rng: np.random.Generator,
             config: Stage2Config) -> tuple[float, dict]:
    """One-shot loss evaluation (fresh cell selection from rng)."""
    loss = RlmLoss(np.asarray(g, dtype=float), rng, config)
    total, parts, _ = loss.forward(np.asarray(m_c, dtype=float),
                                   np.asarray(m_r, dtype=float))
    return total, parts


# -- training ------------------------------------------------------------------------


def sample_stage2_pair(queries: list[QueryClip], references: list[AnnotatedVideo],
                       pos_map: dict[int, list[int]], rng: np.random.Generator
                       ) -> tuple[QueryClip, AnnotatedVideo]:
    query = queries[int(rng.integers(len(queries)))]
    pool = pos_map[query.class_id]
    return query, references[int(pool[rng.integers(len(pool))])]


def _positive_map(queries: list[QueryClip], references: list[AnnotatedVideo]
                  ) -> tuple[list[QueryClip], dict[int, list[int]], list[str]]:
    pos_map: dict[int, list[int]] = {}
    warnings = []
    usable = []
    for c in sorted({q.class_id for q in queries}):
        pos_map[c] = [i for i, v in enumerate(references) if c in v.classes()]
    for q in queries:
        if pos_map[q.class_id]:
            usable.append(q)
        else:
            warnings.append(f"{q.features.video_id}: class {q.class_id} has no "
                            "positive reference, query skipped")
    return usable, pos_map, warnings


def make_stage2_batch(queries: list[QueryClip], references: list[AnnotatedVideo],
                      pos_map: dict[int, list[int]], rng: np.random.Generator,
                      batch_size: int, config: Stage2Config
                      ) -> tuple[Array, Array, Array]:
    f_q, f_r, g = [], [], []
    for _ in range(batch_size):
        query, ref = sample_stage2_pair(queries, references, pos_map, rng)
        f_q.append(query.features.data)
        f_r.append(ref.features.data)
        g.append(gt_label_map(to_grid_intervals(ref, query.class_id, config.l_r),
                              config.l_r))
    return (resize_batch(f_q, config.l_q), resize_batch(f_r, config.l_r),
            np.stack(g))


def rank_map_cells(m_c: Array, m_r: Array, duration_sec: float,
                   top_k: int = 100) -> list[tuple[float, float]]:
    """Cells as ranked second-unit intervals, scored M_C * M_R (no NMS)."""
    l_r = m_c.shape[0]
    scores = m_c * m_r
    mask = valid_mask(l_r)
    order = np.argsort(-scores.ravel(), kind="stable")
    out = []
    for flat in order:
        s, d = divmod(int(flat), l_r)
        if not mask[s, d]:
            continue
        out.append((s / l_r * duration_sec, (s + d + 1) / l_r * duration_sec))
        if len(out) >= top_k:
            break
    return out


def stage2_val_auc(model: Stage2Model, queries: list[QueryClip],
                   references: list[AnnotatedVideo], rng: np.random.Generator,
                   max_pairs: int = 32) -> float:
    """AR-vs-AN area over sampled positive (query, reference) pairs."""
    usable, pos_map, _ = _positive_map(queries, references)
    if not usable:
        return 0.0
    config = model.config
    pairs = []
    for _ in range(min(max_pairs, 4 * len(usable))):
        query, ref = sample_stage2_pair(usable, references, pos_map, rng)
        f_q = resize_batch([query.features.data], config.l_q)
        f_r = resize_batch([ref.features.data], config.l_r)
        m_c, m_r, _ = model.forward(f_q, f_r)
        preds = rank_map_cells(m_c[0], m_r[0], ref.duration_sec)
        gts = [(i.t_start, i.t_end) for i in ref.instances
               if i.class_id == query.class_id]
        pairs.append((preds, gts))
    ar, _ = ar_at_an(pairs)
    return auc(ar)


def train_stage2(corpus: Corpus, config: Stage2Config,
                 log=None) -> tuple[Stage2Model, dict]:
    """Adam training on always-positive pairs, best-val-AUC checkpointing."""
    model = Stage2Model(config)
    optimizer = Adam(model.layers(), lr=config.lr)
    # keep held-out-class content out of the training pairs (same protocol
    # as the retrieval stage): positives are sampled from train-class-only
    # references, validation from train+val ones
    split = corpus.class_split
    train_refs = [v for v in corpus.references
                  if v.classes() <= split.train_classes]
    usable, pos_map, warnings = _positive_map(corpus.queries["train"],
                                              train_refs)
    if not usable:
        raise ValueError("no train query has a positive reference")
    val_queries = corpus.queries["val"] or corpus.queries["train"]
    if corpus.queries["val"]:
        val_refs = [v for v in corpus.references
                    if v.classes() <= split.train_classes | split.val_classes]
    else:
        val_refs = train_refs

    history = {"train_loss": [], "val_auc": [], "best_epoch": -1,
               "sampler_warnings": warnings}
    best_auc = -np.inf
    best_blocks = None
    for epoch in range(config.epochs):
        epoch_losses = []
        for step in range(config.steps_per_epoch):
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, 1, epoch, step)))
            f_q, f_r, g = make_stage2_batch(usable, train_refs, pos_map,
                                            rng, config.batch_size, config)
            loss_fn = RlmLoss(g, rng, config)
            m_c, m_r, cache = model.forward(f_q, f_r)
            loss, _parts, loss_cache = loss_fn.forward(m_c, m_r)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"divergence at epoch {epoch} step {step} "
                    f"(batch seed ({config.seed}, 1, {epoch}, {step}))")
            model.zero_grads()
            dm_c, dm_r = loss_fn.backward(loss_cache)
            model.backward(dm_c, dm_r, cache)
            optimizer.step()
            epoch_losses.append(loss)
        val_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 2)))
        val_auc = stage2_val_auc(model, val_queries, val_refs, val_rng,
                                 config.val_pairs)
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_auc"].append(float(val_auc))
        if val_auc > best_auc:
            best_auc = val_auc
            best_blocks = {k: v.copy() for k, v in model.to_blocks().items()}
            history["best_epoch"] = epoch
        if log is not None:
            log(f"stage2 epoch {epoch}: train {history['train_loss'][-1]:.6f} "
                f"val AUC {val_auc:.2f}")
    if best_blocks is not None:
        model.load_blocks(best_blocks)
    return model, history
