"""Alternating VAE / kernel-generator training.

Each batch runs two updates in sequence:

1. ELBO step on the VAE parameters. During warm-up (and for the pixel
   baselines) the reconstruction term is the plain Gaussian one; afterwards
   the proposed run weights the error with the Wiener gain of the kernel
   predicted by the generator. The kernel is a constant here unless
   ``logdet = exact``, in which case the log-determinant term is
   differentiated through the kernel into the latent code (the generator
   parameters themselves are still left untouched).
2. Kernel step on the generator parameters, fitting ``x * k`` to the
   reconstruction from step 1, which is treated as a constant.

Random streams for model init, generator init, shuffling, posterior noise
and prior noise are independent children of one seed, so switching the
loss kind never perturbs the other streams.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .circulant import log_abs_det_tensor
from .config import TrainConfig
from .data import Dataset, pgm_write, tile_grid
from .kernels import KernelGenerator, kernel_fit_loss, kernel_second_moment
from .metrics import psnr, spectrum_gap, ssim, to_unit_range
from .model import VAE, VaeConfig
from .tensor import Tensor, backward, get_tape, no_grad
from .wiener import assemble_elbo, baseline_loss, build_weight, kl_standard_normal, weighted_recon_loss

__all__ = [
    "Adam",
    "adam_step",
    "TrainingDiverged",
    "TrainResult",
    "METRIC_COLUMNS",
    "build_models",
    "train",
    "evaluate",
    "elbo_loss",
    "reconstruct",
    "model_arrays",
    "load_models",
]

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "phase", "recon", "logdet", "kl", "beta", "total",
                  "g_loss", "mean_kernel_m2", "psnr", "ssim"]
THETA_PHI_COLUMNS = ["epoch", "recon", "logdet", "kl", "beta", "total", "psnr", "ssim"]


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    """Bias-corrected Adam over a fixed list of tensors."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        grads = [p.grad for p in self.params] if grads is None else grads
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(state: Adam, params, grads, lr: float) -> list:
    """Functional form: one Adam update of ``params`` with ``grads``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("parameter list does not match optimizer state")
    state.lr = lr
    state.step(grads)
    return params


def _clip(params, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / total


def build_models(cfg: TrainConfig, image_size: int, in_channels: int = 1, seed=None):
    ss = np.random.SeedSequence(cfg.seed if seed is None else seed)
    model_ss, g_ss, *_ = ss.spawn(5)
    vcfg = VaeConfig(image_size=image_size, in_channels=in_channels, channels=tuple(cfg.channels),
                     latent_dim=cfg.latent_dim, hidden=cfg.hidden, batchnorm=cfg.use_batchnorm)
    model = VAE(vcfg, rng=np.random.default_rng(model_ss))
    gen = KernelGenerator(cfg.latent_dim, cfg.kernel_size, cfg.g_hidden, cfg.kernel_norm,
                          rng=np.random.default_rng(g_ss))
    return model, gen


def model_arrays(model: VAE, gen: KernelGenerator) -> dict:
    out = dict(model.state_arrays())
    out.update({k: t.data for k, t in gen.params.items()})
    return out


def load_models(cfg: TrainConfig, ckpt_path, image_size: int, in_channels: int = 1):
    arrays = load_checkpoint(ckpt_path)
    model, gen = build_models(cfg, image_size, in_channels)
    model.load_state_arrays(arrays)
    for k, t in gen.params.items():
        if k not in arrays:
            raise KeyError(f"checkpoint is missing {k}")
        if arrays[k].shape != t.shape:
            raise ValueError(f"checkpoint entry {k} has shape {arrays[k].shape}, model needs {t.shape}")
        t.data = arrays[k].copy()
    return model, gen


@dataclass
class TrainResult:
    model: VAE
    generator: KernelGenerator
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def metrics_csv(self) -> str:
        return format_metrics(self.rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def format_metrics(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRIC_COLUMNS)
    for r in rows:
        wr.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def _recon_term(kind: str, x: np.ndarray, x_hat: Tensor) -> Tensor:
    if kind in ("L2", "proposed"):
        return baseline_loss("L2", x, x_hat) * 0.5
    if kind == "L1":
        return baseline_loss("L1", x, x_hat)
    return baseline_loss("CE", to_unit_range(x), x_hat * 0.5 + 0.5)


def reconstruct(model: VAE, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode reconstructions using the posterior mean."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            s = model.encode(images[i:i + batch_size], training=False)
            out.append(model.decode(s.mu, training=False).data)
    return np.concatenate(out) if out else np.zeros_like(images)


def posterior_means(model: VAE, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.encode(images[i:i + batch_size], training=False).mu.data)
    return np.concatenate(out)


def _generated_kernels(gen: KernelGenerator, z: np.ndarray) -> np.ndarray:
    with no_grad():
        return gen(Tensor(z)).data


def _image_scores(x: np.ndarray, x_hat: np.ndarray):
    a, b = to_unit_range(x), to_unit_range(x_hat)
    ps = np.array([psnr(a[i], b[i], 1.0) for i in range(len(a))])
    ss = np.array([ssim(a[i, c], b[i, c]) for i in range(len(a)) for c in range(a.shape[1])])
    return ps, ss.reshape(len(a), -1).mean(axis=1)


def _kernel_m2(gen: KernelGenerator, z: np.ndarray) -> np.ndarray:
    if gen.normalization != "softmax":
        return np.full(len(z), np.nan)
    return kernel_second_moment(_generated_kernels(gen, z))


def elbo_loss(model: VAE, gen: KernelGenerator, cfg: TrainConfig, x: np.ndarray,
              eps: np.ndarray, wiener_phase: bool):
    """Loss of one ELBO step with posterior noise ``eps``.

    Returns ``(total, breakdown, sample, x_hat)``. In the Wiener phase the
    kernel ``G(z)`` only enters the weight as a constant; with
    ``logdet = exact`` the log-determinant keeps its path back to ``z``.
    """
    _, Cch, H, W = x.shape
    sample = model.encode(x, training=True, eps=eps)
    x_hat = model.decode(sample.z, training=True)
    kl = kl_standard_normal(sample.mu, sample.logvar)
    if wiener_phase:
        if cfg.logdet == "exact":
            k_t = gen(sample.z)
        else:
            with no_grad():
                k_t = gen(Tensor(sample.z.data))
        weight = build_weight(k_t.data, cfg.C, H, W)
        recon = weighted_recon_loss(x, x_hat, weight) * 0.5
        logdet = log_abs_det_tensor(k_t, H, W, cfg.eps_value).mean() * float(Cch)
        if cfg.logdet == "omit":
            logdet = logdet.item()
    else:
        recon = _recon_term(cfg.loss_kind, x, x_hat)
        logdet = 0.0
    total, bd = assemble_elbo(recon, logdet, kl, cfg.beta)
    return total, bd, sample, x_hat


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None) -> TrainResult:
    """Run the alternating optimization; writes metrics and checkpoints if ``out_dir`` is given."""
    images = dataset.images
    if len(dataset.train_idx) == 0:
        raise ValueError("training split is empty")
    _, Cch, H, W = images.shape
    model, gen = build_models(cfg, H, Cch)
    _, _, shuffle_ss, noise_ss, prior_ss = np.random.SeedSequence(cfg.seed).spawn(5)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    prior_rng = np.random.default_rng(prior_ss)
    opt = Adam(model.parameters(), cfg.lr)
    g_opt = Adam(gen.parameters(), cfg.g_lr_value)
    tape = get_tape()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "samples").mkdir(parents=True, exist_ok=True)
    result = TrainResult(model, gen)
    test = dataset.test if len(dataset.test_idx) else dataset.train

    for epoch in range(1, cfg.epochs + 1):
        wiener_phase = cfg.loss_kind == "proposed" and epoch > cfg.warmup_epochs
        phase = "wiener" if wiener_phase else "warmup"
        order = shuffle_rng.permutation(dataset.train_idx)
        sums = dict(recon=0.0, logdet=0.0, kl=0.0, total=0.0, g_loss=0.0)
        n_batches = 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            x = images[order[start:start + cfg.batch_size]]
            if cfg.use_batchnorm and len(x) < 2:
                continue
            # ---- ELBO step on the VAE parameters
            tape.clear()
            try:
                eps = noise_rng.standard_normal((len(x), cfg.latent_dim))
                total, bd, sample, x_hat = elbo_loss(model, gen, cfg, x, eps, wiener_phase)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, step {step}: {exc}") from exc
            if not math.isfinite(bd.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            backward(total)
            if cfg.grad_clip > 0:
                _clip(opt.params, cfg.grad_clip)
            opt.step()
            opt.zero_grad()
            g_opt.zero_grad()
            # ---- kernel step on the generator parameters
            tape.clear()
            if cfg.g_input == "posterior":
                z_in = sample.z.data
            else:
                z_in = prior_rng.standard_normal(sample.z.shape)
            g_loss = kernel_fit_loss(x, x_hat.data, gen(Tensor(z_in)))
            backward(g_loss)
            g_opt.step()
            g_opt.zero_grad()
            opt.zero_grad()
            tape.clear()

            sums["recon"] += bd.recon_term
            sums["logdet"] += bd.logdet_term
            sums["kl"] += bd.kl_term
            sums["total"] += bd.total
            sums["g_loss"] += g_loss.item()
            n_batches += 1

        row = {"epoch": epoch, "phase": phase, "beta": float(cfg.beta)}
        row.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            rec = reconstruct(model, test)
            ps, ss = _image_scores(test, rec)
            mu = posterior_means(model, test)
            row.update(psnr=float(ps.mean()), ssim=float(ss.mean()),
                       mean_kernel_m2=float(np.mean(_kernel_m2(gen, mu))))
        else:
            row.update(psnr=float("nan"), ssim=float("nan"), mean_kernel_m2=float("nan"))
        result.rows.append(row)
        logger.info("epoch %d %s total=%.4f recon=%.4f kl=%.4f g=%.5f psnr=%.2f m2=%.3f",
                    epoch, phase, row["total"], row["recon"], row["kl"], row["g_loss"],
                    row["psnr"], row["mean_kernel_m2"])

        if out is not None:
            (out / "metrics.csv").write_text(format_metrics(result.rows))
            n_show = min(16, len(test))
            with no_grad():
                rec = reconstruct(model, test[:n_show])
            pgm_write(out / "samples" / f"recon_epoch{epoch}.pgm",
                      tile_grid(np.concatenate([test[:n_show], rec]), ncols=n_show))
            pgm_write(out / "samples" / f"gen_epoch{epoch}.pgm",
                      tile_grid(model.generate(n_show, cfg.seed), ncols=n_show))
            if epoch % cfg.ckpt_every == 0 or epoch == cfg.epochs:
                path = out / f"ckpt_epoch{epoch}.dbve"
                save_checkpoint(path, model_arrays(model, gen))
                result.checkpoints.append(path)
    return result


def evaluate(model: VAE, gen: KernelGenerator, images: np.ndarray, hf_radius: float | None = None):
    """Per-image PSNR / SSIM / generated-kernel second moment, plus set-level spectrum gaps.

    Returns ``(rows, summary)``; rows are dicts keyed by
    ``index, psnr, ssim, kernel_m2``.
    """
    if len(images) == 0:
        raise ValueError("evaluation split is empty")
    c = model.config
    if images.shape[1:] != (c.in_channels, c.image_size, c.image_size):
        raise ValueError(f"images {images.shape[1:]} do not match the model "
                         f"({c.in_channels}, {c.image_size}, {c.image_size})")
    rec = reconstruct(model, images)
    ps, ss = _image_scores(images, rec)
    m2 = _kernel_m2(gen, posterior_means(model, images))
    rows = [{"index": i, "psnr": float(ps[i]), "ssim": float(ss[i]), "kernel_m2": float(m2[i])}
            for i in range(len(images))]
    H = images.shape[-1]
    hf = H / 8 if hf_radius is None else hf_radius
    summary = {
        "n": len(images),
        "psnr": float(ps.mean()),
        "ssim": float(ss.mean()),
        "kernel_m2": float(m2.mean()),
        "spectrum_gap": spectrum_gap(rec, images),
        "spectrum_gap_hf": spectrum_gap(rec, images, min_radius=hf),
    }
    return rows, summary
