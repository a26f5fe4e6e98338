"""Synthetic query generation through the substitute's gradients.

OPT-SYN optimises each input directly so that the frozen substitute predicts
a randomly drawn probability vector.  DNN-SYN trains a conditional generator
so the substitute assigns its outputs to randomly chosen classes, with a
mode-seeking term that rewards distinct outputs for distinct latents.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import SoftDataset
from .errors import DomainError, SynthesisError
from .models import GeneratorNetwork, Network, build_generator, generate, one_hot
from .tensor import AdamState, Tensor, adam_step
from .training import as_rng

log = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-3
MS_DENOMINATOR_FLOOR = 1e-8
MAX_RETRIES = 3
SYNTH_MODES = ("opt_syn", "dnn_syn", "random")


@dataclass
class DirichletSpec:
    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1 or len(self.alpha) == 0 or (self.alpha <= 0).any():
            raise DomainError("Dirichlet concentrations must be a non-empty positive vector")

    @property
    def k(self) -> int:
        return len(self.alpha)


@dataclass
class SynthesisConfig:
    samples_per_epoch: int = 256
    opt_iterations: int = 30
    synth_lr: float = 0.01
    lambda_ms: float = 1.0
    mode: str = "opt_syn"
    latent_dim: int = 16
    generator_hidden: int = 128
    generator_lr: float = 1e-3
    generator_batch: int = 64
    reinit_generator: bool = False

    def __post_init__(self):
        if self.samples_per_epoch <= 0 or self.opt_iterations < 0 or self.synth_lr <= 0 or self.lambda_ms < 0:
            raise DomainError("invalid synthesis configuration")
        if self.mode not in SYNTH_MODES:
            raise DomainError(f"unknown synthesis mode {self.mode!r}; choose from {SYNTH_MODES}")


def draw_alpha(k: int, seed) -> np.ndarray:
    """Concentrations from |N(0, 1)|, floored at 1e-3 so every entry is a valid Dirichlet parameter."""
    g = as_rng(seed).standard_normal(k)
    return np.maximum(np.abs(g), ALPHA_FLOOR)


def sample_dirichlet(spec: DirichletSpec | np.ndarray, seed) -> np.ndarray:
    """Normalised independent Gamma(alpha_i, 1) variates.

    The gammas are drawn in log space (``log G(a) = log G(a + 1) + log(U) / a``)
    so that tiny concentrations do not underflow to an all-zero vector.
    """
    spec = spec if isinstance(spec, DirichletSpec) else DirichletSpec(spec)
    rng = as_rng(seed)
    alpha = spec.alpha
    if spec.k == 1:
        return np.ones(1)
    log_g = np.log(rng.standard_gamma(alpha + 1.0)) + np.log(rng.random(spec.k)) / alpha
    y = np.exp(log_g - log_g.max())
    y /= y.sum()
    tiny = np.finfo(np.float64).tiny
    if (y < tiny).any():
        y = np.maximum(y, tiny)
        y /= y.sum()
    return y


def per_sample_ce(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return -(targets * T.log_softmax(logits)).sum(axis=1)


def optimize_inputs(f_s: Network, x0: np.ndarray, targets: np.ndarray, m: int, lr: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adam on the inputs to minimise CE(f_s(x), target) per row, substitute frozen.

    The summed loss makes every row's gradient independent of the others, so
    a batch behaves like that many separate single-sample runs. Returns the
    lowest-loss iterate of each row together with its loss and the initial loss.
    """
    x = Tensor(np.array(x0, dtype=np.float64), requires_grad=True)
    n = len(x0)
    state = AdamState(lr=lr)
    best_x = x.data.copy()
    with f_s.frozen():
        with T.no_grad():
            init_loss = per_sample_ce(f_s(x).data, targets)
        best_loss = init_loss.copy()
        for _ in range(m):
            logits = f_s(x)
            loss = T.softmax_cross_entropy(logits, targets) * float(n)
            if not np.isfinite(loss.data).all():
                raise SynthesisError("non-finite synthesis loss")
            loss.backward()
            adam_step(state, [x])
            with T.no_grad():
                cur = per_sample_ce(f_s(x).data, targets)
            better = cur < best_loss
            best_loss = np.where(better, cur, best_loss)
            best_x[better] = x.data[better]
    if not np.isfinite(best_x).all():
        raise SynthesisError("non-finite synthetic input")
    return best_x, best_loss, init_loss


def opt_syn_sample(f_s: Network, y: np.ndarray, m: int, lr: float, seed) -> np.ndarray:
    """Synthesise one input whose substitute prediction approaches ``y``; starts from N(0, 1)."""
    y = np.asarray(y, dtype=np.float64)
    rng = as_rng(seed)
    for attempt in range(MAX_RETRIES):
        x0 = rng.standard_normal((1,) + f_s.input_shape)
        try:
            best, _, _ = optimize_inputs(f_s, x0, y[None, :], m, lr)
            return best[0]
        except SynthesisError:
            log.warning("opt_syn_sample: non-finite loss, retry %d", attempt + 1)
    raise SynthesisError(f"synthesis failed after {MAX_RETRIES} attempts")


def _sample_plan(f_s: Network, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample target vectors and N(0,1) starts; sample i depends only on (seed, i)."""
    k = f_s.class_count
    targets = np.empty((count, k))
    starts = np.empty((count,) + f_s.input_shape)
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        targets[i] = sample_dirichlet(draw_alpha(k, rng), rng)
        starts[i] = rng.standard_normal(f_s.input_shape)
    return targets, starts


def opt_syn_epoch(f_s: Network, count: int, m: int, lr: float, seed: int, epoch_tag: int = 0,
                  chunk: int = 512) -> SoftDataset:
    """One epoch of OPT-SYN: ``count`` inputs, each with its own concentration, target and start."""
    if count <= 0:
        raise DomainError("count must be positive")
    targets, starts = _sample_plan(f_s, count, seed)
    out = np.empty_like(starts)
    for start in range(0, count, chunk):
        sl = slice(start, start + chunk)
        for attempt in range(MAX_RETRIES + 1):
            try:
                out[sl], _, _ = optimize_inputs(f_s, starts[sl], targets[sl], m, lr)
                break
            except SynthesisError:
                if attempt == MAX_RETRIES:
                    raise
                log.warning("opt_syn_epoch: non-finite loss, restarting chunk %d", start)
                rng = np.random.default_rng([seed, start, attempt, 99])
                starts[sl] = rng.standard_normal(starts[sl].shape)
    return SoftDataset(out, epoch_tag=epoch_tag, name="opt_syn")


def mode_seeking_loss(g: GeneratorNetwork, z1, z2, labels) -> Tensor:
    """Sum over rows of ||z1 - z2|| / max(||G(z1, l) - G(z2, l)||, 1e-8)."""
    z1 = z1.data if isinstance(z1, Tensor) else np.asarray(z1, dtype=np.float64)
    z2 = z2.data if isinstance(z2, Tensor) else np.asarray(z2, dtype=np.float64)
    num = np.linalg.norm(z1 - z2, axis=1)
    a = generate(g, z1, labels)
    b = generate(g, z2, labels)
    diff = (a - b).reshape(len(z1), -1)
    dist = T.row_norm(diff)
    if (dist.data < MS_DENOMINATOR_FLOOR).any():
        log.info("mode_seeking_loss: %d collapsed pair(s)", int((dist.data < MS_DENOMINATOR_FLOOR).sum()))
    return (Tensor(num) / T.clamp_min(dist, MS_DENOMINATOR_FLOOR)).sum()


def generator_loss(g: GeneratorNetwork, f_s: Network, z1, z2, labels, lam: float) -> Tensor:
    """Mean image loss plus ``lam`` times the mean mode-seeking ratio."""
    labels = np.asarray(labels, dtype=np.float64)
    l_img = T.softmax_cross_entropy(f_s(generate(g, z1, labels)), labels)
    if lam == 0:
        return l_img
    return l_img + mode_seeking_loss(g, z1, z2, labels) * (lam / len(labels))


def dnn_syn_step(g: GeneratorNetwork, f_s: Network, z1, z2, labels, lam: float, state: AdamState) -> float:
    """One Adam step on the generator with the substitute frozen; returns the pre-step loss."""
    with f_s.frozen():
        loss = generator_loss(g, f_s, z1, z2, labels, lam)
        value = loss.item()
        if not np.isfinite(value):
            raise SynthesisError("non-finite generator loss")
        loss.backward()
    adam_step(state, g.parameters())
    return value


def random_labels(count: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return one_hot(rng.integers(0, k, size=count), k)


@dataclass
class DnnSynthesizer:
    """Generator plus optimizer state, persisted across stealing epochs unless re-initialised."""

    config: SynthesisConfig
    class_count: int
    output_shape: tuple[int, ...]
    seed: int = 0
    generator: GeneratorNetwork | None = None
    state: AdamState = field(default_factory=AdamState)
    resets: int = 0

    def __post_init__(self):
        if self.generator is None:
            self.reset()

    def reset(self) -> None:
        cfg = self.config
        self.generator = build_generator(cfg.latent_dim, self.class_count, self.output_shape,
                                         seed=np.random.SeedSequence([self.seed, 7, self.resets]).generate_state(1)[0],
                                         hidden=cfg.generator_hidden)
        self.state = AdamState(lr=cfg.generator_lr)
        self.resets += 1

    def train(self, f_s: Network, steps: int, rng: np.random.Generator) -> list[float]:
        cfg = self.config
        losses = []
        for _ in range(steps):
            labels = random_labels(cfg.generator_batch, self.class_count, rng)
            z1 = rng.standard_normal((cfg.generator_batch, cfg.latent_dim))
            z2 = rng.standard_normal((cfg.generator_batch, cfg.latent_dim))
            losses.append(dnn_syn_step(self.generator, f_s, z1, z2, labels, cfg.lambda_ms, self.state))
        return losses

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        labels = random_labels(count, self.class_count, rng)
        z = rng.standard_normal((count, self.config.latent_dim))
        with T.no_grad():
            return generate(self.generator, z, labels).data


def dnn_syn_epoch(synth: DnnSynthesizer, f_s: Network, count: int, seed: int, epoch_tag: int = 0) -> SoftDataset:
    rng = np.random.default_rng([seed, 5])
    if synth.config.reinit_generator:
        synth.reset()
    synth.train(f_s, synth.config.opt_iterations, rng)
    return SoftDataset(synth.sample(count, rng), epoch_tag=epoch_tag, name="dnn_syn")


def augment(x: np.ndarray, seed, flip_prob: float = 0.5, max_shift: int = 2, noise_std: float = 0.05) -> np.ndarray:
    """Random horizontal flip and column shift (image batches only) plus Gaussian noise.

    Image batches are ``[n, c, h, w]``; anything else is treated as vector
    data and only receives noise. Shifted-in columns are zero.
    """
    rng = as_rng(seed)
    x = np.array(x, dtype=np.float64)
    if x.ndim == 4:
        n, _, _, w = x.shape
        flips = rng.random(n) < flip_prob
        x[flips] = x[flips][..., ::-1]
        shifts = rng.integers(-max_shift, max_shift + 1, size=n) if max_shift > 0 else np.zeros(n, dtype=int)
        for i, s in enumerate(shifts):
            if s == 0:
                continue
            shifted = np.zeros_like(x[i])
            if s > 0:
                shifted[..., s:] = x[i][..., : w - s]
            else:
                shifted[..., : w + s] = x[i][..., -s:]
            x[i] = shifted
    if noise_std > 0:
        x = x + noise_std * rng.standard_normal(x.shape)
    return x
