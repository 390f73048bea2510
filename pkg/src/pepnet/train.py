"""Two-stage training for the latent-bottleneck segmentation model.

Stage A (warmup) trains with the identity projection, so the latent
pipeline runs at full dimension. After warmup a single pass over the
training set accumulates posterior means, fits the principal-component
projection, and freezes it into the model; Stage B then trains with the
KL matched and the latent sampled in the compact space.

Every run is reproducible: one master seed spawns independent streams
for parameter init, batch shuffling, rater choice and latent noise, and
each consumes in a fixed order.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .latent import kl_compact, kl_diag_fullspace, project_gaussian, sample_compact
from .metrics import MetricsReport, evaluate_model
from .model import Model, ModelConfig
from .optim import Adam, clip_grad_norm
from .pca import MomentAccumulator, finalize, symmetric_eigen
from .tensor import Tensor

LOG_HEADER = ("epoch", "lr", "loss", "recon", "kl", "stage")

PCA_FEATURES = ("posterior_mean", "posterior_sample")


class TrainingError(RuntimeError):
    """A training step produced non-finite values."""


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 3
    batch_size: int = 8
    lr: float = 1e-4
    step_size: int = 10
    gamma: float = 0.1
    beta: float = 1.0
    grad_clip: float = 5.0
    seed: int = 0
    d: int = 6
    k: int = 2
    use_ilsr: bool = True
    fit_pca: bool = True
    pca_feature: str = "posterior_mean"
    # diagnostic: keep the sampling path but compute the KL between the
    # native-space diagonal Gaussians instead of the compact ones
    kl_in_full_space: bool = False
    image_size: int = 32
    base_channels: int = 16
    depth: int = 3
    adapter_hidden: int = 16

    def __post_init__(self):
        if self.epochs < 2:
            raise ValueError(f"epochs must be >= 2, got {self.epochs}")
        if not 1 <= self.warmup_epochs < self.epochs:
            raise ValueError(
                f"warmup_epochs must be in [1, epochs), got {self.warmup_epochs}"
            )
        for name in ("batch_size", "step_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "gamma", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 1 <= self.k <= self.d:
            raise ValueError(f"k must satisfy 1 <= k <= {self.d}, got {self.k}")
        if self.pca_feature not in PCA_FEATURES:
            raise ValueError(
                f"pca_feature must be one of {PCA_FEATURES}, got {self.pca_feature!r}"
            )

    def model_config(self) -> ModelConfig:
        # without a PCA stage the projection stays the k=d identity
        return ModelConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            depth=self.depth,
            d=self.d,
            k=self.k if self.fit_pca else self.d,
            num_classes=1,
            use_ilsr=self.use_ilsr,
            beta=self.beta,
            adapter_hidden=self.adapter_hidden,
        )


@dataclass
class StepStats:
    loss: float
    recon: float
    kl: float


def elbo_from_parts(recon: Tensor, kl_value: Tensor, beta: float) -> Tensor:
    """Combine a reconstruction scalar and a KL scalar into the objective."""
    loss = T.add(T.cast(recon, np.float64), T.scale(kl_value, float(beta)))
    if not np.isfinite(loss.data):
        raise TrainingError(
            f"non-finite loss: recon={float(recon.data)!r} kl={float(kl_value.data)!r}"
        )
    return loss


def elbo_loss(logits: Tensor, target: Tensor, kl_value: Tensor, beta: float) -> Tensor:
    """Reconstruction plus beta-weighted KL: bce_with_logits + beta * kl."""
    return elbo_from_parts(T.bce_with_logits(logits, target), kl_value, beta)


def _batch_tensors(samples, indices, rater_rng) -> tuple[Tensor, Tensor]:
    """Stack images and one uniformly chosen rater mask per image."""
    images = np.stack([samples[i].image for i in indices])[:, None].astype(np.float32)
    chosen = []
    for i in indices:
        masks = samples[i].masks
        chosen.append(masks[int(rater_rng.integers(masks.shape[0]))])
    target = np.stack(chosen)[:, None].astype(np.float32)
    return Tensor(images), Tensor(target)


def train_step(model: Model, images: Tensor, target: Tensor, config: TrainConfig,
               opt: Adam, noise_rng) -> StepStats:
    """One ELBO step: posterior sample conditions the decoder, prior anchors the KL.

    noise_rng only needs standard_normal(n); passing a zero stub makes the
    step deterministic (the sample collapses onto the posterior mean).
    """
    feats = model.backbone_forward(images)
    posteriors = model.posterior_forward(images, target)
    priors = model.prior_forward(images)

    kls = []
    z_natives = []
    for q_d, p_d in zip(posteriors, priors):
        q = project_gaussian(q_d, model.projection)
        if config.kl_in_full_space:
            kls.append(kl_diag_fullspace(q_d, p_d))
        else:
            kls.append(kl_compact(q, project_gaussian(p_d, model.projection)))
        z = sample_compact(q, np.asarray(noise_rng.standard_normal(q.k)))
        z_natives.append(model.latent_to_native(z.z_k))

    kl_mean = T.scale(T.sum_tensors(kls), 1.0 / len(kls))
    logits = model.fuse_and_predict(feats, z_natives)
    recon = T.bce_with_logits(logits, target)
    try:
        loss = elbo_from_parts(recon, kl_mean, config.beta)
    except TrainingError as err:
        raise TrainingError(f"{err} (optimizer step {opt.t + 1})") from None

    opt.zero_grad()
    loss.backward()
    clip_grad_norm(opt.params, config.grad_clip)
    opt.step()
    return StepStats(loss=float(loss.data), recon=float(recon.data), kl=float(kl_mean.data))


def fit_pca_phase(model: Model, samples, batch_size: int = 8,
                  feature: str = "posterior_mean", noise_rng=None):
    """Fit and freeze the projection from posterior features over all rater pairs.

    feature selects what each (image, rater mask) pair contributes: the
    posterior mean, or one diagonal reparameterized draw from the
    posterior (noise_rng required). Returns (projection, eigenvalues,
    captured) where eigenvalues is the full descending spectrum of the
    feature covariance and captured the top-k variance fraction.
    """
    if feature not in PCA_FEATURES:
        raise ValueError(f"feature must be one of {PCA_FEATURES}, got {feature!r}")
    if feature == "posterior_sample" and noise_rng is None:
        raise ValueError("posterior_sample features need a noise_rng")
    acc = MomentAccumulator(model.config.d)
    pairs = [
        (s.image, s.masks[r]) for s in samples for r in range(s.num_raters)
    ]
    with T.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            images = Tensor(np.stack([c[0] for c in chunk])[:, None].astype(np.float32))
            masks = Tensor(np.stack([c[1] for c in chunk])[:, None].astype(np.float32))
            for g in model.posterior_forward(images, masks):
                vec = g.mu.data
                if feature == "posterior_sample":
                    std = np.exp(0.5 * g.log_var.data)
                    vec = vec + std * noise_rng.standard_normal(vec.shape[0])
                acc.accumulate(vec)
    eigenvalues, _ = symmetric_eigen(acc.covariance())
    projection = finalize(acc, model.config.k)
    model.set_projection(projection)
    total = float(np.sum(eigenvalues))
    captured = 1.0 if total <= 0 else float(np.sum(eigenvalues[: model.config.k])) / total
    return projection, eigenvalues, captured


class Trainer:
    """Drives warmup, the PCA freeze and compact-space epochs over a dataset."""

    def __init__(self, config: TrainConfig, samples):
        if not samples:
            raise ValueError("no training samples")
        self.config = config
        self.samples = list(samples)
        init_ss, shuffle_ss, rater_ss, noise_ss = np.random.SeedSequence(
            config.seed
        ).spawn(4)
        self.model = Model(config.model_config(), rng=np.random.default_rng(init_ss))
        self.opt = Adam(self.model.params(), lr=config.lr)
        self._shuffle_rng = np.random.default_rng(shuffle_ss)
        self._rater_rng = np.random.default_rng(rater_ss)
        self._noise_rng = np.random.default_rng(noise_ss)
        self.log_rows: list[dict] = []
        self.pca_eigenvalues = None
        self.pca_captured = None

    def lr_at(self, epoch: int) -> float:
        return self.config.lr * self.config.gamma ** (epoch // self.config.step_size)

    @property
    def stage(self) -> str:
        return "B" if self.model.projection_frozen else "A"

    def fit_pca(self) -> None:
        projection, eigenvalues, captured = fit_pca_phase(
            self.model,
            self.samples,
            self.config.batch_size,
            feature=self.config.pca_feature,
            noise_rng=self._noise_rng,
        )
        self.pca_eigenvalues = eigenvalues
        self.pca_captured = captured
        assert self.model.projection is projection

    def run_epoch(self, epoch: int) -> StepStats:
        lr = self.lr_at(epoch)
        self.opt.lr = lr
        order = self._shuffle_rng.permutation(len(self.samples))
        sums = np.zeros(3, dtype=np.float64)
        seen = 0
        for start in range(0, len(order), self.config.batch_size):
            idx = order[start : start + self.config.batch_size]
            images, target = _batch_tensors(self.samples, idx, self._rater_rng)
            stats = train_step(
                self.model, images, target, self.config, self.opt, self._noise_rng
            )
            sums += np.array([stats.loss, stats.recon, stats.kl]) * len(idx)
            seen += len(idx)
        mean = sums / seen
        epoch_stats = StepStats(loss=mean[0], recon=mean[1], kl=mean[2])
        self.log_rows.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss": epoch_stats.loss,
                "recon": epoch_stats.recon,
                "kl": epoch_stats.kl,
                "stage": self.stage,
            }
        )
        return epoch_stats

    def train(self) -> Model:
        for epoch in range(self.config.epochs):
            if self.config.fit_pca and epoch == self.config.warmup_epochs:
                self.fit_pca()
            self.run_epoch(epoch)
        return self.model


def write_training_log(rows, path) -> None:
    """CSV log, one row per epoch: epoch,lr,loss,recon,kl,stage."""
    with open(path, "w", newline="", encoding="ascii") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def evaluate(model: Model, samples, m: int = 16, seed: int = 0,
             against: str = "raters") -> MetricsReport:
    """Seeded dataset evaluation sampling from the projected prior."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return evaluate_model(model, samples, m, rng, against=against)
