"""The five prediction-map models.

Two families share one calling convention.  Mean-field models (CNP, ConvCNP)
emit per-target means and variances plus one shared noise variance; the
Gaussian family (GNP, ConvGNP, FullConvGNP) emits a correlated covariance,
either through rank-R features or as a dense matrix, plus per-target
heterogeneous noise.

Every model consumes padded, canonically sorted context batches, which makes
context-permutation invariance exact, and exposes:

* ``batch_forward`` - autodiff tensors for training,
* ``predict`` - single-task numpy prediction objects,
* ``task_logliks`` - per-task normalised log density over a task list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import autodiff as ad
from . import gp
from .encoders import (
    Discretisation,
    canonical_context_order,
    make_grid,
    setconv_decode_batch,
    setconv_encode_batch,
)

__all__ = [
    "ModelConfig", "Model", "CNP", "GNP", "ConvCNP", "ConvGNP", "FullConvGNP",
    "LowRankGaussianPrediction", "FullCovGaussianPrediction",
    "MeanFieldBatch", "LowRankBatch", "FullCovBatch",
    "predict_loglik", "batch_loglik",
    "build_model", "load_model", "VARIANTS", "ResourceError",
    "VAR_FLOOR",
]

VARIANTS = ("cnp", "gnp", "convcnp", "convgnp", "fullconvgnp")

VAR_FLOOR = 1e-6


class ResourceError(RuntimeError):
    """A requested computation exceeds the configured memory budget."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; the defaults are the desk-scale sizes."""

    variant: str = "convcnp"
    seed: int = 0
    # deep-set family
    enc_dim: int = 256
    enc_width: int = 128
    enc_layers: int = 3
    dec_width: int = 128
    dec_layers: int = 6
    # Gaussian family
    rank: int = 64
    # convolutional family
    points_per_unit: float = 64.0
    margin: float = 0.1
    unet_channels: int = 32
    unet_levels: int = 4
    unet_kernel: int = 5
    kernel_grid_cap: int = 128  # side length cap of the 2-D kernel grid

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant in ("gnp", "convgnp", "fullconvgnp") and self.rank < 1:
            raise ValueError("rank must be >= 1 for the Gaussian family")

    def discretisation(self) -> Discretisation:
        return Discretisation(self.points_per_unit, self.margin)

    def kernel_discretisation(self) -> Discretisation:
        # The 2-D grid is quadratically more expensive; halve its density.
        return Discretisation(self.points_per_unit / 2.0, self.margin)


# -- prediction containers -----------------------------------------------------


@dataclass
class LowRankGaussianPrediction:
    """Covariance realised as factor factor^T plus per-target noise."""

    mean: np.ndarray
    factor: np.ndarray
    het_noise_var: np.ndarray

    def dense_cov(self) -> np.ndarray:
        return self.factor @ self.factor.T

    def as_joint(self) -> gp.GaussianJoint:
        return gp.GaussianJoint(self.mean, self.dense_cov() + np.diag(self.het_noise_var), 0.0)


@dataclass
class FullCovGaussianPrediction:
    """Dense PSD covariance plus per-target noise."""

    mean: np.ndarray
    cov: np.ndarray
    het_noise_var: np.ndarray

    def as_joint(self) -> gp.GaussianJoint:
        return gp.GaussianJoint(self.mean, self.cov + np.diag(self.het_noise_var), 0.0)


@dataclass
class MeanFieldBatch:
    mean: ad.Tensor   # (B, Nt)
    var: ad.Tensor    # (B, Nt)
    noise_var: ad.Tensor  # scalar


@dataclass
class LowRankBatch:
    mean: ad.Tensor    # (B, Nt)
    factor: ad.Tensor  # (B, Nt, R)
    het: ad.Tensor     # (B, Nt)


@dataclass
class FullCovBatch:
    mean: ad.Tensor  # (B, Nt)
    cov: ad.Tensor   # (B, Nt, Nt)
    het: ad.Tensor   # (B, Nt)


def batch_loglik(pred, y_t: np.ndarray, cov_jitter: float = 0.0) -> ad.Tensor:
    """Per-task log density (B,) of targets under a batched prediction."""
    if isinstance(pred, MeanFieldBatch):
        s = ad.add(pred.var, pred.noise_var)
        r = ad.sub(pred.mean, y_t)
        terms = ad.add(ad.log(s), ad.div(ad.mul(r, r), s))
        n = y_t.shape[-1]
        return ad.mul(-0.5, ad.add(ad.tsum(terms, axis=-1), n * math.log(2.0 * math.pi)))
    if isinstance(pred, LowRankBatch):
        b, n, _ = pred.factor.shape
        eye = np.eye(n)
        diag = ad.mul(ad.reshape(ad.add(pred.het, cov_jitter), (b, n, 1)), eye)
        cov = ad.add(ad.matmul(pred.factor, ad.transpose(pred.factor, (0, 2, 1))), diag)
        return ad.gaussian_loglik(pred.mean, cov, y_t)
    if isinstance(pred, FullCovBatch):
        b, n = pred.mean.shape
        eye = np.eye(n)
        diag = ad.mul(ad.reshape(ad.add(pred.het, cov_jitter), (b, n, 1)), eye)
        return ad.gaussian_loglik(pred.mean, ad.add(pred.cov, diag), y_t)
    raise TypeError(f"unsupported batched prediction {type(pred).__name__}")


def predict_loglik(pred, y_t) -> float:
    """Log density of a single task's targets under a prediction object."""
    y = np.asarray(y_t, float)
    if isinstance(pred, gp.MeanFieldPrediction):
        s = pred.var + pred.noise_var
        return float(-0.5 * np.sum(np.log(2.0 * np.pi * s) + (y - pred.mean) ** 2 / s))
    if isinstance(pred, LowRankGaussianPrediction):
        return gp.joint_logpdf(pred.as_joint(), y)
    if isinstance(pred, FullCovGaussianPrediction):
        return gp.joint_logpdf(pred.as_joint(), y)
    if isinstance(pred, (MeanFieldBatch, LowRankBatch, FullCovBatch)):
        return batch_loglik(pred, y[None] if y.ndim == 1 else y)
    raise TypeError(f"unsupported prediction {type(pred).__name__}")


# -- parameter containers --------------------------------------------------


def _glorot(rng, shape, fan_in, fan_out) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return std * rng.standard_normal(shape)


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class _Params:
    """Named parameter registry backing checkpoints and the optimizer."""

    def __init__(self):
        self._params: dict[str, ad.Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> ad.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = ad.Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def named(self) -> dict[str, ad.Tensor]:
        return dict(self._params)

    def tensors(self) -> list[ad.Tensor]:
        return list(self._params.values())

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, tensor in self._params.items():
            arr = np.asarray(arrays[name], float)
            if arr.shape != tensor.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != expected {tensor.shape}")
            tensor.data = arr.copy()


class _MLP:
    def __init__(self, params: _Params, rng, prefix: str, dim_in: int, width: int,
                 n_hidden: int, dim_out: int):
        dims = [dim_in] + [width] * n_hidden + [dim_out]
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.weights.append(params.add(f"{prefix}.w{i}", _glorot(rng, (a, b), a, b)))
            self.biases.append(params.add(f"{prefix}.b{i}", np.zeros(b)))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.add(ad.matmul(x, w), b)
            if i + 1 < len(self.weights):
                x = ad.relu(x)
        return x


class _UNet:
    """Strided conv encoder/decoder with mirrored skip concatenation.

    Works in one or two dimensions; transposed convolutions output-pad as
    needed to reproduce the matching encoder length exactly.
    """

    def __init__(self, params: _Params, rng, prefix: str, ndim: int,
                 in_ch: int, out_ch: int, levels: int, ch: int, k: int):
        self.ndim = ndim
        self.levels = levels
        self.k = k
        self.pad = k // 2
        kshape = (k,) * ndim
        fan = k ** ndim
        self.down_w, self.down_b = [], []
        for lvl in range(levels):
            cin = in_ch if lvl == 0 else ch
            w = _glorot(rng, (ch, cin) + kshape, cin * fan, ch * fan)
            self.down_w.append(params.add(f"{prefix}.down{lvl}.w", w))
            self.down_b.append(params.add(f"{prefix}.down{lvl}.b", np.zeros(ch)))
        self.up_w, self.up_b = [], []
        for lvl in range(levels):
            cin = ch if lvl == 0 else 2 * ch
            w = _glorot(rng, (cin, ch) + kshape, cin * fan, ch * fan)
            self.up_w.append(params.add(f"{prefix}.up{lvl}.w", w))
            self.up_b.append(params.add(f"{prefix}.up{lvl}.b", np.zeros(ch)))
        w = _glorot(rng, (out_ch, ch) + (1,) * ndim, ch, out_ch)
        self.head_w = params.add(f"{prefix}.head.w", w)
        self.head_b = params.add(f"{prefix}.head.b", np.zeros(out_ch))

    def _bias(self, h: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
        shape = (1, b.shape[0]) + (1,) * self.ndim
        return ad.add(h, ad.reshape(b, shape))

    def __call__(self, h: ad.Tensor) -> ad.Tensor:
        conv = ad.conv1d if self.ndim == 1 else ad.conv2d
        convt = ad.conv_transpose1d if self.ndim == 1 else ad.conv_transpose2d
        sizes = [h.shape[2]]
        skips = []
        for w, b in zip(self.down_w, self.down_b):
            h = ad.relu(self._bias(conv(h, w, stride=2, padding=self.pad), b))
            skips.append(h)
            sizes.append(h.shape[2])
        for lvl, (w, b) in enumerate(zip(self.up_w, self.up_b)):
            if lvl > 0:
                h = ad.concat([h, skips[self.levels - 1 - lvl]], axis=1)
            target = sizes[self.levels - 1 - lvl]
            op = target - ((h.shape[2] - 1) * 2 - 2 * self.pad + self.k)
            h = ad.relu(self._bias(convt(h, w, stride=2, padding=self.pad, output_padding=op), b))
        return self._bias(conv(h, self.head_w, stride=1, padding=0), self.head_b)


# -- batching -------------------------------------------------------------------


def _collate(tasks):
    """Pad contexts (after canonical sorting) and stack equal-size targets."""
    b = len(tasks)
    n_t = tasks[0].n_target
    if any(t.n_target != n_t for t in tasks):
        raise ValueError("all tasks in a batch must have the same number of targets")
    n_c = max((t.n_context for t in tasks), default=0)
    n_c = max(n_c, 1)  # keep arrays non-degenerate for fully empty batches
    x_c = np.zeros((b, n_c))
    y_c = np.zeros((b, n_c))
    mask = np.zeros((b, n_c))
    x_t = np.zeros((b, n_t))
    y_t = np.zeros((b, n_t))
    for i, task in enumerate(tasks):
        n = task.n_context
        if n:
            xs, ys = canonical_context_order(task.x_c, task.y_c)
            x_c[i, :n] = xs
            y_c[i, :n] = ys
            mask[i, :n] = 1.0
        x_t[i] = task.x_t
        y_t[i] = task.y_t
    return x_c, y_c, mask, x_t, y_t


# -- models ---------------------------------------------------------------------


class Model:
    """Base: parameter registry, checkpointing, and task-level evaluation."""

    variant = "base"

    def __init__(self, config: ModelConfig):
        if config.variant != self.variant:
            config = replace(config, variant=self.variant)
        self.config = config
        self.params = _Params()
        self._rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        self._build(self._rng)

    def _build(self, rng):
        raise NotImplementedError

    def forward(self, x_c: np.ndarray, y_c: np.ndarray, mask: np.ndarray, x_t: np.ndarray):
        """Batched forward pass on padded arrays; returns a *Batch prediction."""
        raise NotImplementedError

    # - conveniences -

    def parameters(self) -> list[ad.Tensor]:
        return self.params.tensors()

    def named_parameters(self) -> dict[str, ad.Tensor]:
        return self.params.named()

    def batch_forward(self, tasks):
        """Forward over a task batch.

        Convolutional variants lay one grid over the whole batch (the usual
        trick for batched set convolutions), so with more than one task the
        result can differ from single-task calls by grid placement; deep-set
        variants are exact vectorisations.
        """
        return self.forward(*_collate(tasks)[:4])

    def predict(self, x_c, y_c, x_t):
        """Single-task prediction with numpy fields."""
        x_c, y_c = np.asarray(x_c, float), np.asarray(y_c, float)
        x_t = np.asarray(x_t, float)
        xs, ys = canonical_context_order(x_c, y_c)
        n = max(xs.shape[0], 1)
        xc = np.zeros((1, n))
        yc = np.zeros((1, n))
        mask = np.zeros((1, n))
        xc[0, : xs.shape[0]] = xs
        yc[0, : xs.shape[0]] = ys
        mask[0, : xs.shape[0]] = 1.0
        with ad.no_grad():
            pred = self.forward(xc, yc, mask, x_t[None, :])
        return self._to_single(pred)

    @staticmethod
    def _to_single(pred):
        return _select_single(pred, 0)

    def predict_tasks(self, tasks, group_size: int = 16):
        """Predictions for many tasks, batching groups with equal target counts."""
        out = [None] * len(tasks)
        for idxs in _equal_target_groups(tasks, group_size):
            batch = [tasks[i] for i in idxs]
            with ad.no_grad():
                pred = self.batch_forward(batch)
            for j, i in enumerate(idxs):
                out[i] = _select_single(pred, j)
        return out

    def task_logliks(self, tasks, cov_jitter: float = 0.0, group_size: int = 16) -> np.ndarray:
        """Log density of each task's targets, not normalised."""
        out = np.zeros(len(tasks))
        for idxs in _equal_target_groups(tasks, group_size):
            batch = [tasks[i] for i in idxs]
            y_t = np.stack([t.y_t for t in batch])
            with ad.no_grad():
                ll = batch_loglik(self.batch_forward(batch), y_t, cov_jitter)
            out[list(idxs)] = ll.data
        return out

    def as_prediction_map(self):
        """Callable (x_c, y_c, x_t) -> prediction, for autoregressive rollout."""
        return self.predict

    # - persistence -

    def save(self, path) -> None:
        meta = {"variant": self.variant}
        meta.update({k: v for k, v in asdict(self.config).items() if k != "variant"})
        arrays = {name: t.data for name, t in self.params.named().items()}
        ad.save_checkpoint(path, arrays, meta)

    def load_arrays(self, arrays: dict) -> None:
        self.params.load(arrays)


def _equal_target_groups(tasks, group_size):
    by_nt: dict[int, list[int]] = {}
    for i, t in enumerate(tasks):
        by_nt.setdefault(t.n_target, []).append(i)
    for idxs in by_nt.values():
        for start in range(0, len(idxs), group_size):
            yield idxs[start : start + group_size]


def _select_single(pred, j):
    if isinstance(pred, MeanFieldBatch):
        return gp.MeanFieldPrediction(pred.mean.data[j], pred.var.data[j],
                                      float(pred.noise_var.data))
    if isinstance(pred, LowRankBatch):
        return LowRankGaussianPrediction(pred.mean.data[j], pred.factor.data[j], pred.het.data[j])
    return FullCovGaussianPrediction(pred.mean.data[j], pred.cov.data[j], pred.het.data[j])


class _DeepSetMixin:
    def _build_deepset(self, rng, dec_out: int):
        cfg = self.config
        self.phi = _MLP(self.params, rng, "enc.phi", 2, cfg.enc_width, cfg.enc_layers, cfg.enc_dim)
        self.dec = _MLP(self.params, rng, "dec", cfg.enc_dim + 1, cfg.dec_width, cfg.dec_layers, dec_out)

    def _decode_targets(self, x_c, y_c, mask, x_t) -> ad.Tensor:
        b, n_t = x_t.shape
        pairs = np.stack([x_c, y_c], axis=-1)           # (B, Nc, 2)
        feats = ad.mul(self.phi(ad.Tensor(pairs)), mask[:, :, None])
        z = ad.tsum(feats, axis=1)                      # (B, K)
        z_rep = ad.broadcast_to(ad.reshape(z, (b, 1, self.config.enc_dim)),
                                (b, n_t, self.config.enc_dim))
        dec_in = ad.concat([z_rep, ad.Tensor(x_t[:, :, None])], axis=2)
        return self.dec(dec_in)                         # (B, Nt, dec_out)


class CNP(_DeepSetMixin, Model):
    variant = "cnp"

    def _build(self, rng):
        self._build_deepset(rng, dec_out=2)
        self.raw_noise = self.params.add("noise.raw", np.array(_inv_softplus(0.1)))

    def forward(self, x_c, y_c, mask, x_t):
        out = self._decode_targets(x_c, y_c, mask, x_t)
        mean = out[:, :, 0]
        var = ad.add(ad.softplus(out[:, :, 1]), VAR_FLOOR)
        noise = ad.add(ad.softplus(self.raw_noise), VAR_FLOOR)
        return MeanFieldBatch(mean, var, noise)


class GNP(_DeepSetMixin, Model):
    variant = "gnp"

    def _build(self, rng):
        self._build_deepset(rng, dec_out=1 + self.config.rank + 1)

    def forward(self, x_c, y_c, mask, x_t):
        out = self._decode_targets(x_c, y_c, mask, x_t)
        mean = out[:, :, 0]
        factor = out[:, :, 1 : 1 + self.config.rank]
        het = ad.add(ad.softplus(out[:, :, -1]), VAR_FLOOR)
        return LowRankBatch(mean, factor, het)


class _SetConvMixin:
    def _build_setconv(self, rng):
        init = _inv_softplus(2.0 * self.config.discretisation().spacing)
        self.raw_ls_enc = self.params.add("enc.lengthscale.raw", np.array(init))
        self.raw_ls_dec = self.params.add("dec.lengthscale.raw", np.array(init))

    def _ls(self, raw: ad.Tensor) -> ad.Tensor:
        return ad.softplus(raw)

    def _grid(self, x_c, mask, x_t) -> np.ndarray:
        present = mask.astype(bool)
        xs = [x_c[present], x_t.ravel()] if present.any() else [x_t.ravel()]
        return make_grid(self.config.discretisation(), np.concatenate(xs))


class ConvCNP(_SetConvMixin, Model):
    variant = "convcnp"

    def _build(self, rng):
        cfg = self.config
        self._build_setconv(rng)
        self.unet = _UNet(self.params, rng, "unet", 1, 2, 2,
                          cfg.unet_levels, cfg.unet_channels, cfg.unet_kernel)
        self.raw_noise = self.params.add("noise.raw", np.array(_inv_softplus(0.1)))

    def forward(self, x_c, y_c, mask, x_t):
        grid = self._grid(x_c, mask, x_t)
        channels = setconv_encode_batch(x_c, y_c, mask, grid, self._ls(self.raw_ls_enc), divide=True)
        out = self.unet(channels)                               # (B, 2, K)
        dec = setconv_decode_batch(out, grid, x_t, self._ls(self.raw_ls_dec))
        mean = dec[:, 0, :]
        var = ad.add(ad.softplus(dec[:, 1, :]), VAR_FLOOR)
        noise = ad.add(ad.softplus(self.raw_noise), VAR_FLOOR)
        return MeanFieldBatch(mean, var, noise)


class ConvGNP(_SetConvMixin, Model):
    variant = "convgnp"

    def _build(self, rng):
        cfg = self.config
        self._build_setconv(rng)
        self.unet = _UNet(self.params, rng, "unet", 1, 2, 1 + cfg.rank + 1,
                          cfg.unet_levels, cfg.unet_channels, cfg.unet_kernel)

    def forward(self, x_c, y_c, mask, x_t):
        r = self.config.rank
        grid = self._grid(x_c, mask, x_t)
        channels = setconv_encode_batch(x_c, y_c, mask, grid, self._ls(self.raw_ls_enc), divide=True)
        out = self.unet(channels)                               # (B, 1+R+1, K)
        dec = setconv_decode_batch(out, grid, x_t, self._ls(self.raw_ls_dec))
        mean = dec[:, 0, :]
        factor = ad.transpose(dec[:, 1 : 1 + r, :], (0, 2, 1))  # (B, Nt, R)
        het = ad.add(ad.softplus(dec[:, -1, :]), VAR_FLOOR)
        return LowRankBatch(mean, factor, het)


class FullConvGNP(Model):
    """Separate 1-D mean architecture and 2-D kernel architecture.

    The kernel path encodes the context as bumps on the diagonal of an
    image over grid x grid, adds an identity source channel, runs a 2-D
    CNN, and realises positive semi-definiteness through Z Z^T before the
    smoothing read-out, so the target covariance is a Gram matrix by
    construction.
    """

    variant = "fullconvgnp"

    def _build(self, rng):
        cfg = self.config
        spacing = cfg.discretisation().spacing
        self.raw_ls_enc = self.params.add("mean.enc.lengthscale.raw",
                                          np.array(_inv_softplus(2.0 * spacing)))
        self.raw_ls_dec = self.params.add("mean.dec.lengthscale.raw",
                                          np.array(_inv_softplus(2.0 * spacing)))
        kspacing = cfg.kernel_discretisation().spacing
        self.raw_ls_kenc = self.params.add("kernel.enc.lengthscale.raw",
                                           np.array(_inv_softplus(2.0 * kspacing)))
        self.raw_ls_kdec = self.params.add("kernel.dec.lengthscale.raw",
                                           np.array(_inv_softplus(2.0 * kspacing)))
        self.mean_unet = _UNet(self.params, rng, "mean.unet", 1, 2, 2,
                               cfg.unet_levels, cfg.unet_channels, cfg.unet_kernel)
        self.kernel_unet = _UNet(self.params, rng, "kernel.unet", 2, 3, 1,
                                 cfg.unet_levels, max(cfg.unet_channels // 2, 1), cfg.unet_kernel)

    def forward(self, x_c, y_c, mask, x_t):
        cfg = self.config
        present = mask.astype(bool)
        xs = np.concatenate([x_c[present], x_t.ravel()]) if present.any() else x_t.ravel()
        b, n_t = x_t.shape

        # Mean path: ordinary 1-D discretised set convolution.
        grid = make_grid(cfg.discretisation(), xs)
        channels = setconv_encode_batch(x_c, y_c, mask, grid,
                                        ad.softplus(self.raw_ls_enc), divide=True)
        dec = setconv_decode_batch(self.mean_unet(channels), grid, x_t,
                                   ad.softplus(self.raw_ls_dec))
        mean = dec[:, 0, :]
        het = ad.add(ad.softplus(dec[:, 1, :]), VAR_FLOOR)

        # Kernel path: channels on grid x grid with context bumps on the diagonal.
        kgrid = make_grid(cfg.kernel_discretisation(), xs)
        k = kgrid.shape[0]
        if k > cfg.kernel_grid_cap:
            raise ResourceError(
                f"kernel grid of {k} points exceeds the cap of {cfg.kernel_grid_cap}; "
                "reduce the input span or points_per_unit"
            )
        diff2 = (kgrid[None, :, None] - x_c[:, None, :]) ** 2     # (B, K, Nc)
        ls = ad.softplus(self.raw_ls_kenc)
        w = ad.exp(ad.mul(ad.Tensor(diff2), ad.div(-0.5, ad.mul(ls, ls))))
        w = ad.mul(w, mask[:, None, :])
        wt = ad.transpose(w, (0, 2, 1))                           # (B, Nc, K)
        data = ad.matmul(ad.mul(w, y_c[:, None, :]), wt)          # (B, K, K)
        density = ad.matmul(w, wt)
        source = np.broadcast_to(np.eye(k), (b, k, k))
        img = ad.concat([
            ad.reshape(data, (b, 1, k, k)),
            ad.reshape(density, (b, 1, k, k)),
            ad.Tensor(source.reshape(b, 1, k, k)),
        ], axis=1)
        z = ad.reshape(self.kernel_unet(img), (b, k, k))
        wq2 = (x_t[:, :, None] - kgrid[None, None, :]) ** 2       # (B, Nt, K)
        lsd = ad.softplus(self.raw_ls_kdec)
        wq = ad.exp(ad.mul(ad.Tensor(wq2), ad.div(-0.5, ad.mul(lsd, lsd))))
        g = ad.matmul(wq, z)                                      # (B, Nt, K)
        cov = ad.matmul(g, ad.transpose(g, (0, 2, 1)))            # (B, Nt, Nt), PSD
        return FullCovBatch(mean, cov, het)


_MODEL_CLASSES = {cls.variant: cls for cls in (CNP, GNP, ConvCNP, ConvGNP, FullConvGNP)}


def build_model(config: ModelConfig) -> Model:
    return _MODEL_CLASSES[config.variant](config)


def load_model(path) -> Model:
    """Rebuild a model from a checkpoint written by `Model.save`."""
    arrays, meta = ad.load_checkpoint(path)
    if "variant" not in meta:
        raise ValueError(f"{path}: checkpoint metadata is missing the model variant")
    kwargs = {"variant": meta["variant"]}
    for name in ModelConfig.__dataclass_fields__:
        if name != "variant" and name in meta:
            kwargs[name] = _parse_number(meta[name])
    model = build_model(ModelConfig(**kwargs))
    model.load_arrays(arrays)
    return model


def _parse_number(raw: str):
    try:
        return int(raw)
    except ValueError:
        return float(raw)
