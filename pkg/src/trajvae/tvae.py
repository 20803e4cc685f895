"""Trajectory variational auto-encoder.

The encoder maps a masked trajectory (zero-padded values plus mask) to a
diagonal Gaussian over the latent code. The decoder maps a latent sample, and
unless ``ci`` is set the observed prefix, to a whole-horizon trajectory.
Training minimises

    KL(q(z | full) || q(z | prefix)) - E_q(z|full)[log N(y_future; y_hat(z), diag(sigma_y^2))]

with random cut points, so one network serves every prefix length.
All internal arithmetic happens on positions standardised with the training
split's per-coordinate mean and std.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import neuralkit as nk
from .trajkit import (
    DataError,
    Dataset,
    MaskedTrajectory,
    TimeGrid,
    make_prefix,
    resample_any_length,
)

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
MODEL_KIND = "tvae"


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LatentGaussian:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != std.shape:
            raise ValueError("mean and std differ in shape")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def gaussian_kl(q: LatentGaussian, p: LatentGaussian) -> float:
    """KL(q || p) between diagonal Gaussians, in nats."""
    if q.mean.shape != p.mean.shape:
        raise ValueError("latent dimensions differ")
    if np.any(q.std <= 0) or np.any(p.std <= 0):
        raise ValueError("standard deviations must be positive")
    return float(np.sum(_kl_terms(q.mean, q.std, p.mean, p.std)))


def _kl_terms(mq, sq, mp, sp):
    return np.log(sp / sq) + (sq ** 2 + (mq - mp) ** 2) / (2.0 * sp ** 2) - 0.5


@dataclass
class TvaeModel:
    encoder: nk.MlpParams
    decoder: nk.MlpParams
    log_sigma_y: np.ndarray
    grid: TimeGrid
    latent_dim: int
    ci: bool = False
    pos_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pos_std: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        n_feat = 4 * self.grid.steps
        if self.encoder.n_in != n_feat or self.encoder.n_out != 2 * self.latent_dim:
            raise nk.ShapeError(f"encoder must map {n_feat} -> {2 * self.latent_dim}")
        dec_in = self.latent_dim + (0 if self.ci else n_feat)
        if self.decoder.n_in != dec_in or self.decoder.n_out != 3 * self.grid.steps:
            raise nk.ShapeError(f"decoder must map {dec_in} -> {3 * self.grid.steps}")
        self.log_sigma_y = np.asarray(self.log_sigma_y, dtype=float).reshape(3)
        self.pos_mean = np.asarray(self.pos_mean, dtype=float).reshape(3)
        self.pos_std = np.asarray(self.pos_std, dtype=float).reshape(3)

    @classmethod
    def create(cls, grid: TimeGrid, latent_dim: int, hidden: int, ci: bool = False,
               rng: np.random.Generator | None = None, zero: bool = False, **kw) -> "TvaeModel":
        n_feat = 4 * grid.steps
        enc_sizes = [n_feat, hidden, 2 * latent_dim]
        dec_sizes = [latent_dim + (0 if ci else n_feat), hidden, 3 * grid.steps]
        acts = ["tanh", "identity"]
        if zero:
            enc = nk.zeros_mlp(enc_sizes, acts, softplus_from=latent_dim)
            dec = nk.zeros_mlp(dec_sizes, acts)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            enc = nk.init_mlp(enc_sizes, acts, rng, softplus_from=latent_dim)
            dec = nk.init_mlp(dec_sizes, acts, rng)
        return cls(enc, dec, np.zeros(3), grid, latent_dim, ci, **kw)

    # -- parameter plumbing

    def named(self) -> dict[str, np.ndarray]:
        return {**self.encoder.named("enc."), **self.decoder.named("dec."), "log_sigma_y": self.log_sigma_y}

    def with_named(self, named: dict) -> "TvaeModel":
        out = copy.copy(self)
        out.encoder = self.encoder.with_named(named, "enc.")
        out.decoder = self.decoder.with_named(named, "dec.")
        out.log_sigma_y = named["log_sigma_y"]
        return out

    def astype(self, dtype) -> "TvaeModel":
        out = copy.copy(self)
        out.encoder = self.encoder.astype(dtype)
        out.decoder = self.decoder.astype(dtype)
        return out

    # -- standardisation

    def standardize(self, values: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return (values - self.pos_mean) / self.pos_std * mask[..., None]

    def unstandardize(self, values: np.ndarray) -> np.ndarray:
        return values * self.pos_std + self.pos_mean

    def features(self, values_std: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Network input ``[B, 4N]``: flattened standardised values then the mask."""
        b = values_std.shape[0]
        return np.concatenate([values_std.reshape(b, -1), mask.reshape(b, -1)], axis=1)

    def check_grid(self, m: MaskedTrajectory) -> None:
        if m.steps != self.grid.steps:
            raise DataError(f"trajectory has {m.steps} grid steps, model expects {self.grid.steps}")


# ---------------------------------------------------------------- encode / decode


def encode(model: TvaeModel, x: MaskedTrajectory) -> LatentGaussian:
    model.check_grid(x)
    mean, std = _encode_batch(model, x.values[None], x.mask[None])
    return LatentGaussian(mean[0], std[0])


def _encode_batch(model, values, mask):
    feat = model.features(model.standardize(values, mask), mask).astype(model.encoder.weights[0].dtype)
    out, _ = nk.mlp_forward(model.encoder, feat)
    k = model.latent_dim
    return out[:, :k], out[:, k:]


def decode(model: TvaeModel, z, x: MaskedTrajectory) -> np.ndarray:
    """Whole-horizon prediction ``[N, 3]`` in metres for one latent code."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.latent_dim,):
        raise nk.ShapeError(f"latent code has shape {z.shape}, expected ({model.latent_dim},)")
    model.check_grid(x)
    return _decode_batch(model, z[None], x.values[None], x.mask[None])[0]


def _decode_batch(model, z, values, mask):
    """Decode ``z`` of shape [B, K]; prefix arrays broadcast from one row when B differs."""
    n = model.grid.steps
    dtype = model.decoder.weights[0].dtype
    if model.ci:
        inp = z.astype(dtype)
    else:
        feat = model.features(model.standardize(values, mask), mask)
        if feat.shape[0] != z.shape[0]:
            feat = np.broadcast_to(feat, (z.shape[0], feat.shape[1]))
        inp = np.concatenate([z, feat], axis=1).astype(dtype)
    out, _ = nk.mlp_forward(model.decoder, inp)
    return model.unstandardize(out.reshape(-1, n, 3).astype(float))


# ---------------------------------------------------------------- objective


@dataclass
class Batch:
    """Standardised arrays for a batch of (full trajectory, prefix) training pairs."""

    full_values: np.ndarray   # [B, N, 3]
    full_mask: np.ndarray     # [B, N]
    prefix_values: np.ndarray
    prefix_mask: np.ndarray
    cut: np.ndarray           # [B]

    @property
    def size(self) -> int:
        return len(self.cut)

    def future_weight(self) -> np.ndarray:
        steps = np.arange(self.full_mask.shape[1])
        return self.full_mask * (steps[None, :] >= self.cut[:, None])


def batch_loss(model: TvaeModel, batch: Batch, eps: np.ndarray, *, grads: bool = True,
               kl_stop_grad: bool = False, prefix_recon: float = 0.0):
    """Mean negative ELBO over the batch and its gradients w.r.t. every named parameter.

    ``eps`` holds the standard-normal draws, shape [B, L, K].  ``prefix_recon > 0``
    adds that multiple of the future NLL decoded from ``z ~ q(z | prefix)`` (same
    draws), which trains the prefix encoder on the prediction task directly.
    """
    enc, dec = model.encoder, model.decoder
    k = model.latent_dim
    b, n_mc = eps.shape[0], eps.shape[1]
    n = model.grid.steps

    feat_f = model.features(batch.full_values, batch.full_mask)
    feat_p = model.features(batch.prefix_values, batch.prefix_mask)
    out_f, cache_f = nk.mlp_forward(enc, feat_f)
    out_p, cache_p = nk.mlp_forward(enc, feat_p)
    mu_f, sd_f = out_f[:, :k], out_f[:, k:]
    mu_p, sd_p = out_p[:, :k], out_p[:, k:]
    diff = mu_f - mu_p
    kl = _kl_terms(mu_f, sd_f, mu_p, sd_p).sum(axis=1)

    z = mu_f[:, None, :] + sd_f[:, None, :] * eps
    z_flat = z.reshape(b * n_mc, k)
    if model.ci:
        dec_in = z_flat
    else:
        dec_in = np.concatenate([z_flat, np.repeat(feat_p, n_mc, axis=0)], axis=1)
    y_hat, cache_d = nk.mlp_forward(dec, dec_in)
    y_hat = y_hat.reshape(b, n_mc, n, 3)

    var_y = np.exp(2.0 * model.log_sigma_y)
    w = batch.future_weight()[:, None, :, None]
    resid = batch.full_values[:, None] - y_hat
    nll_terms = w * (0.5 * LOG_2PI + model.log_sigma_y + resid ** 2 / (2.0 * var_y))
    nll = nll_terms.sum(axis=(1, 2, 3)) / n_mc
    per_elem = kl + nll
    if prefix_recon:
        z_p = (mu_p[:, None, :] + sd_p[:, None, :] * eps).reshape(b * n_mc, k)
        dec_in_p = z_p if model.ci else np.concatenate([z_p, np.repeat(feat_p, n_mc, axis=0)], axis=1)
        y_hat_p, cache_dp = nk.mlp_forward(dec, dec_in_p)
        resid_p = batch.full_values[:, None] - y_hat_p.reshape(b, n_mc, n, 3)
        nll_p = (w * (0.5 * LOG_2PI + model.log_sigma_y + resid_p ** 2 / (2.0 * var_y))).sum(axis=(1, 2, 3)) / n_mc
        per_elem = per_elem + prefix_recon * nll_p
    loss = float(per_elem.mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    if not grads:
        return loss, None

    scale = 1.0 / b
    d_yhat = -w * resid / var_y * (scale / n_mc)
    d_lsy = (w * (1.0 - resid ** 2 / var_y)).sum(axis=(0, 1, 2)) * (scale / n_mc)
    g_dec, d_in = nk.mlp_backward(dec, cache_d, d_yhat.reshape(b * n_mc, 3 * n))
    dz = d_in[:, :k].reshape(b, n_mc, k)

    d_mu_f = dz.sum(axis=1)
    d_sd_f = (dz * eps).sum(axis=1)
    if not kl_stop_grad:
        d_mu_f = d_mu_f + diff / sd_p ** 2 * scale
        d_sd_f = d_sd_f + (-1.0 / sd_f + sd_f / sd_p ** 2) * scale
    d_mu_p = -diff / sd_p ** 2 * scale
    d_sd_p = (1.0 / sd_p - (sd_f ** 2 + diff ** 2) / sd_p ** 3) * scale
    if prefix_recon:
        c = prefix_recon * scale / n_mc
        d_lsy = d_lsy + prefix_recon * (w * (1.0 - resid_p ** 2 / var_y)).sum(axis=(0, 1, 2)) * (scale / n_mc)
        g_dec_p, d_in_p = nk.mlp_backward(dec, cache_dp, (-w * resid_p / var_y * c).reshape(b * n_mc, 3 * n))
        dz_p = d_in_p[:, :k].reshape(b, n_mc, k)
        d_mu_p = d_mu_p + dz_p.sum(axis=1)
        d_sd_p = d_sd_p + (dz_p * eps).sum(axis=1)

    g_enc_f, _ = nk.mlp_backward(enc, cache_f, np.concatenate([d_mu_f, d_sd_f], axis=1))
    g_enc_p, _ = nk.mlp_backward(enc, cache_p, np.concatenate([d_mu_p, d_sd_p], axis=1))
    g = {}
    for name, a in g_enc_f.named("enc.").items():
        g[name] = a + g_enc_p.named("enc.")[name]
    g.update(g_dec.named("dec."))
    if prefix_recon:
        for name, a in g_dec_p.named("dec.").items():
            g[name] = g[name] + a
    g["log_sigma_y"] = d_lsy
    return loss, g


def make_batch(model: TvaeModel, fulls, prefixes) -> Batch:
    fv = np.stack([m.values for m in fulls])
    fm = np.stack([m.mask for m in fulls])
    pv = np.stack([m.values for m in prefixes])
    pm = np.stack([m.mask for m in prefixes])
    return Batch(model.standardize(fv, fm), fm, model.standardize(pv, pm), pm,
                 np.array([m.cut for m in prefixes]))


def elbo(model: TvaeModel, full: MaskedTrajectory, t_cut: int, n_samples: int = 1,
         rng: np.random.Generator | None = None, *, eps=None, prefix: MaskedTrajectory | None = None,
         kl_stop_grad: bool = False):
    """Negative ELBO of one trajectory cut at ``t_cut`` and its named gradients.

    ``prefix`` overrides the (uncorrupted) prefix derived from ``full``, e.g. to
    pass a corrupted one. ``eps`` freezes the reparametrisation noise.
    """
    model.check_grid(full)
    if n_samples < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    prefix = prefix if prefix is not None else make_prefix(full, t_cut)
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal((1, n_samples, model.latent_dim))
    eps = np.asarray(eps, dtype=float).reshape(1, -1, model.latent_dim)
    batch = make_batch(model, [full], [MaskedTrajectory(prefix.values, prefix.mask, t_cut)])
    return batch_loss(model, batch, eps, kl_stop_grad=kl_stop_grad)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    mc_samples: int = 1
    lr: float = 1e-3
    p_miss: float = 0.05
    p_outlier: float = 0.01
    hidden: int = 64
    latent_dim: int = 16
    ci: bool = False
    seed: int = 0
    val_fraction: float = 0.1
    kl_stop_grad: bool = False
    prefix_recon: float = 0.0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    dt: float = 1.0 / 180.0
    steps: int = 216

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.mc_samples < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and mc_samples >= 1 required")
        if self.hidden < 1 or self.latent_dim < 1:
            raise ValueError("hidden and latent_dim must be positive")
        for name in ("p_miss", "p_outlier"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.dt, self.steps)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.epochs)

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        rows += [f"{e},{t!r},{v!r}" for e, t, v in zip(self.epochs, self.train_loss, self.val_loss)]
        return "\n".join(rows) + "\n"


class _Pool:
    """Grid-resampled trajectories kept at their natural length, for repeated window draws."""

    def __init__(self, trajs, grid: TimeGrid):
        self.n = grid.steps
        self.items = [resample_any_length(tr, grid.dt) for tr in trajs]

    def __len__(self):
        return len(self.items)

    def windows(self, idx, rng):
        """Stack full-horizon windows (zero padded when shorter)."""
        b = len(idx)
        values = np.zeros((b, self.n, 3))
        mask = np.zeros((b, self.n))
        for row, i in enumerate(idx):
            src = self.items[i]
            if src.steps <= self.n:
                values[row, :src.steps] = src.values
                mask[row, :src.steps] = src.mask
            else:
                start = int(rng.integers(0, src.steps - self.n + 1))
                values[row] = src.values[start:start + self.n]
                mask[row] = src.mask[start:start + self.n]
        return values, mask


def sample_batch(model: TvaeModel, pool: _Pool, idx, cfg: TrainConfig, box, rng) -> Batch:
    """Window, random cut on {0..T_n}, then corrupt the prefix; vectorised over the batch."""
    values, mask = pool.windows(idx, rng)
    b, n = mask.shape
    steps = np.arange(n)
    lengths = np.where(mask.any(axis=1), n - np.argmax(mask[:, ::-1], axis=1), 0)
    cut = rng.integers(0, lengths + 1)
    before = steps[None, :] < cut[:, None]
    pmask = mask * before
    drop_u = rng.random((b, n))
    out_u = rng.random((b, n))
    repl = rng.uniform(box[0], box[1], size=(b, n, 3))
    observed = pmask == 1
    drop = observed & (drop_u < cfg.p_miss)
    outlier = observed & ~drop & (out_u < cfg.p_outlier)
    pvalues = np.where(outlier[..., None], repl, values)
    pmask = np.where(drop, 0.0, pmask)
    return Batch(model.standardize(values, mask), mask, model.standardize(pvalues, pmask), pmask, cut)


def _split_train_val(ds: Dataset, cfg: TrainConfig):
    train = ds.split("train")
    val = ds.split("val")
    if not train:
        raise DataError("dataset has no training trajectories")
    if not val and cfg.val_fraction > 0 and len(train) > 1:
        rng = np.random.default_rng([cfg.seed, 7919])
        order = rng.permutation(len(train))
        n_val = max(1, int(round(cfg.val_fraction * len(train))))
        val = [train[i] for i in sorted(order[:n_val])]
        train = [train[i] for i in sorted(order[n_val:])]
    return train, val


def fit_standardization(trajs):
    pts = np.concatenate([tr.pos[tr.valid] for tr in trajs])
    std = pts.std(axis=0)
    return pts.mean(axis=0), np.where(std > 0, std, 1.0)


def train(ds: Dataset, cfg: TrainConfig, callback=None):
    """Fit a model; returns (model with the best validation loss, History)."""
    train_trajs, val_trajs = _split_train_val(ds, cfg)
    grid = cfg.grid
    rng = np.random.default_rng(cfg.seed)
    mean, std = fit_standardization(train_trajs)
    model = TvaeModel.create(grid, cfg.latent_dim, cfg.hidden, cfg.ci, rng=rng, pos_mean=mean, pos_std=std)
    history = History()
    if cfg.epochs == 0:
        return model, history

    lo, hi = Dataset(train_trajs).bounding_box(split=None, inflate=0.1)
    box = (lo, hi)
    pool = _Pool(train_trajs, grid)
    val_pool = _Pool(val_trajs, grid) if val_trajs else None
    val_batch = val_eps = None
    if val_pool is not None:
        vrng = np.random.default_rng([cfg.seed, 104729])
        val_batch = sample_batch(model, val_pool, np.arange(len(val_pool)), cfg, box, vrng)
        val_eps = vrng.standard_normal((len(val_pool), cfg.mc_samples, cfg.latent_dim))

    opt = nk.OptimizerState(lr=cfg.lr, kind=cfg.optimizer, weight_decay=cfg.weight_decay)
    params = model.named()
    best = (np.inf, params)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pool))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = sample_batch(model, pool, idx, cfg, box, rng)
            eps = rng.standard_normal((len(idx), cfg.mc_samples, cfg.latent_dim))
            loss, grads = batch_loss(model, batch, eps, kl_stop_grad=cfg.kl_stop_grad,
                                     prefix_recon=cfg.prefix_recon)
            params, opt = nk.adam_update(opt, params, grads)
            model = model.with_named(params)
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / len(order))
        if val_batch is not None:
            val_loss, _ = batch_loss(model, val_batch, val_eps, grads=False, prefix_recon=cfg.prefix_recon)
        else:
            val_loss = train_loss
        history.epochs.append(epoch)
        history.train_loss.append(train_loss)
        history.val_loss.append(float(val_loss))
        if val_loss < best[0]:
            best = (val_loss, params)
            history.best_epoch = epoch
        if callback is not None:
            callback(epoch, train_loss, val_loss)
    return model.with_named(best[1]), history


def hyper_search(ds: Dataset, base: TrainConfig, latent_dims=(16, 32, 64, 128), hiddens=(64, 128, 256, 512)):
    """Train one model per (latent_dim, hidden) pair; rank by best validation loss.

    Returns (best config, rows) where each row is a dict with keys
    latent_dim, hidden, val_loss, best_epoch.
    """
    latent_dims, hiddens = list(latent_dims), list(hiddens)
    if not latent_dims or not hiddens:
        raise ValueError("empty search grid")
    rows = []
    for k in latent_dims:
        for h in hiddens:
            cfg = base.replace(latent_dim=int(k), hidden=int(h))
            _, hist = train(ds, cfg)
            val = min(hist.val_loss) if len(hist) else np.inf
            rows.append({"latent_dim": int(k), "hidden": int(h), "val_loss": float(val),
                         "best_epoch": hist.best_epoch})
            log.info("search K=%d hidden=%d val=%.4f", k, h, val)
    best = min(rows, key=lambda r: r["val_loss"])
    return base.replace(latent_dim=best["latent_dim"], hidden=best["hidden"]), rows


# ---------------------------------------------------------------- inference


@dataclass(frozen=True)
class PredictionEnsemble:
    samples: np.ndarray   # [L, N, 3] metres
    cut: int
    latents: np.ndarray   # [L, K]

    @property
    def size(self) -> int:
        return self.samples.shape[0]


def predict_ensemble(model: TvaeModel, prefix: MaskedTrajectory, n_samples: int = 30,
                     rng: np.random.Generator | None = None, *, sigma_zero: bool = False) -> PredictionEnsemble:
    """One encode, ``n_samples`` latent draws, one batched decode."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    model.check_grid(prefix)
    rng = rng if rng is not None else np.random.default_rng()
    mean, std = _encode_batch(model, prefix.values[None], prefix.mask[None])
    eps = rng.standard_normal((n_samples, model.latent_dim))
    z = mean + (0.0 if sigma_zero else std) * eps
    samples = _decode_batch(model, z, prefix.values[None], prefix.mask[None])
    return PredictionEnsemble(samples, prefix.cut, z)


def predict_mean_batch(model: TvaeModel, values: np.ndarray, mask: np.ndarray, n_samples: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Ensemble means for a stack of prefixes ``[B, N, 3]``; returns ``[B, N, 3]`` metres."""
    b = values.shape[0]
    mean, std = _encode_batch(model, values, mask)
    eps = rng.standard_normal((b, n_samples, model.latent_dim))
    z = (mean[:, None] + std[:, None] * eps).reshape(b * n_samples, -1)
    rep_v = np.repeat(values, n_samples, axis=0)
    rep_m = np.repeat(mask, n_samples, axis=0)
    out = _decode_batch(model, z, rep_v, rep_m)
    return out.reshape(b, n_samples, -1, 3).mean(axis=1)


def ensemble_moments(e: PredictionEnsemble):
    """Per-step sample mean ``[N, 3]`` and unbiased covariance ``[N, 3, 3]``."""
    if e.size < 2:
        raise ValueError("need >=2 samples for a covariance")
    # shifted by the first sample: identical samples give an exact mean and zero covariance
    ref = e.samples[0]
    shifted = e.samples - ref
    offset = shifted.mean(axis=0)
    mean = ref + offset
    d = shifted - offset
    cov = np.einsum("lni,lnj->nij", d, d) / (e.size - 1)
    return mean, cov


# ---------------------------------------------------------------- persistence


def save_model(path, model: TvaeModel) -> None:
    manifest = {
        "kind": MODEL_KIND,
        "latent_dim": model.latent_dim,
        "steps": model.grid.steps,
        "dt": model.grid.dt,
        "ci": bool(model.ci),
        "pos_mean": model.pos_mean.tolist(),
        "pos_std": model.pos_std.tolist(),
        "encoder": model.encoder.manifest(),
        "decoder": model.decoder.manifest(),
    }
    nk.write_params(path, model.named(), manifest)


def load_model(path) -> TvaeModel:
    tensors, meta = nk.read_params(path)
    if meta.get("kind") != MODEL_KIND:
        raise nk.FormatError("parameter file does not hold a TVAE model")
    try:
        return TvaeModel(
            nk.mlp_from_tensors(tensors, meta["encoder"], "enc."),
            nk.mlp_from_tensors(tensors, meta["decoder"], "dec."),
            tensors["log_sigma_y"],
            TimeGrid(meta["dt"], meta["steps"]),
            meta["latent_dim"],
            meta["ci"],
            np.array(meta["pos_mean"]),
            np.array(meta["pos_std"]),
        )
    except (KeyError, nk.ShapeError) as e:
        raise nk.FormatError(f"model manifest inconsistent with payload: {e}") from None
