"""Segmentation model: deterministic U-Net backbone, prior/posterior
Gaussian heads over a D-dimensional latent, and a 1x1-conv adapter that
fuses a native-space latent vector into the decoder features.

The network runs in float32. Latent vectors cross into float64 at the
head outputs (where the Gaussian algebra lives) and come back to float32
just before fusion. A single Projection instance is shared by the prior
and posterior paths; it starts as the identity and can be frozen to a
fitted PCA map exactly once.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .latent import GaussianD, Projection, inverse_reproject
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    image_size: int = 32
    base_channels: int = 16
    depth: int = 3
    d: int = 6
    k: int = 2
    num_classes: int = 1
    use_ilsr: bool = True
    beta: float = 1.0
    adapter_hidden: int = 16

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.image_size % (2**self.depth) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^depth = {2**self.depth}"
            )
        if not 1 <= self.k <= self.d:
            raise ValueError(f"k must satisfy 1 <= k <= {self.d}, got {self.k}")
        if self.num_classes != 1:
            raise ValueError("only binary segmentation (num_classes=1) is supported")
        if self.base_channels < 2:
            raise ValueError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.adapter_hidden < 1:
            raise ValueError(f"adapter_hidden must be >= 1, got {self.adapter_hidden}")


LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


class Model:
    """Parameter container plus the forward passes built on the tape ops."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self._params: dict[str, Tensor] = {}
        self._projection = Projection.identity(config.d)
        self._projection_frozen = False
        self._build(rng)

    # -- parameter registry ----------------------------------------------------

    def _conv(self, name: str, out_ch: int, in_ch: int, ksize: int, rng) -> None:
        fan_in = in_ch * ksize * ksize
        std = np.sqrt(2.0 / fan_in)
        w = rng.standard_normal((out_ch, in_ch, ksize, ksize)) * std
        self._params[f"{name}.w"] = Tensor(w.astype(np.float32), requires_grad=True)
        self._params[f"{name}.b"] = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)

    def _linear(self, name: str, in_f: int, out_f: int, rng) -> None:
        std = np.sqrt(1.0 / in_f)
        w = rng.standard_normal((in_f, out_f)) * std
        self._params[f"{name}.w"] = Tensor(w.astype(np.float32), requires_grad=True)
        self._params[f"{name}.b"] = Tensor(np.zeros(out_f, dtype=np.float32), requires_grad=True)

    def _build(self, rng) -> None:
        cfg = self.config
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        prev = 1
        for i, c in enumerate(chans):
            self._conv(f"backbone.enc{i}", c, prev, 3, rng)
            prev = c
        self._conv("backbone.mid", chans[-1], chans[-1], 3, rng)
        prev = chans[-1]
        for i in reversed(range(cfg.depth)):
            self._conv(f"backbone.dec{i}", chans[i], prev + chans[i], 3, rng)
            prev = chans[i]
        half = [max(cfg.base_channels // 2, 1) * 2**i for i in range(cfg.depth)]
        for head, in_ch in (("prior", 1), ("posterior", 2)):
            prev = in_ch
            for i, c in enumerate(half):
                self._conv(f"{head}.enc{i}", c, prev, 3, rng)
                prev = c
            self._linear(f"{head}.out", half[-1], 2 * cfg.d, rng)
        self._conv("adapter.conv1", cfg.adapter_hidden, cfg.base_channels + cfg.d, 1, rng)
        self._conv("adapter.conv2", cfg.num_classes, cfg.adapter_hidden, 1, rng)

    def named_params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def params(self) -> list[Tensor]:
        return list(self._params.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    # -- projection lifecycle ---------------------------------------------------

    @property
    def projection(self) -> Projection:
        return self._projection

    @property
    def projection_frozen(self) -> bool:
        return self._projection_frozen

    def set_projection(self, proj: Projection) -> None:
        """Install the fitted projection; allowed exactly once."""
        if self._projection_frozen:
            raise RuntimeError("projection is frozen; it cannot be replaced")
        if proj.d != self.config.d:
            raise ShapeError(f"projection dim {proj.d} != model D {self.config.d}")
        if proj.k != self.config.k:
            raise ShapeError(f"projection k {proj.k} != model k {self.config.k}")
        self._projection = proj
        self._projection_frozen = True

    # -- forward passes ----------------------------------------------------------

    def _check_images(self, images: Tensor, channels: int, what: str) -> None:
        s = self.config.image_size
        d = images.data
        if d.ndim != 4 or d.shape[1] != channels or d.shape[2] != s or d.shape[3] != s:
            raise ShapeError(f"{what}: expected (N,{channels},{s},{s}), got {images.shape}")
        if d.dtype != np.float32:
            raise TypeError(f"{what}: expected float32, got {d.dtype}")

    def _conv_block(self, name: str, x: Tensor) -> Tensor:
        pad = (self._params[f"{name}.w"].shape[2] - 1) // 2
        h = T.conv2d(x, self._params[f"{name}.w"], stride=1, padding=pad)
        return T.relu(T.add_channel_bias(h, self._params[f"{name}.b"]))

    def backbone_forward(self, images: Tensor) -> Tensor:
        """U-Net over (N,1,S,S) images -> (N,base_channels,S,S) features."""
        self._check_images(images, 1, "backbone_forward")
        cfg = self.config
        skips = []
        h = images
        for i in range(cfg.depth):
            h = self._conv_block(f"backbone.enc{i}", h)
            skips.append(h)
            h = T.avg_pool2d(h)
        h = self._conv_block("backbone.mid", h)
        for i in reversed(range(cfg.depth)):
            h = T.upsample2x(h)
            h = T.concat([h, skips[i]], axis=1)
            h = self._conv_block(f"backbone.dec{i}", h)
        return h

    def _head_forward(self, head: str, x: Tensor) -> list[GaussianD]:
        cfg = self.config
        h = x
        for i in range(cfg.depth):
            h = self._conv_block(f"{head}.enc{i}", h)
            h = T.avg_pool2d(h)
        pooled = T.mean_hw(h)
        out = T.linear(pooled, self._params[f"{head}.out.w"], self._params[f"{head}.out.b"])
        out64 = T.cast(out, np.float64)
        n = out.shape[0]
        gaussians = []
        for i in range(n):
            row = T.reshape(T.slice_axis(out64, 0, i, i + 1), (2 * cfg.d,))
            mu = T.slice_axis(row, 0, 0, cfg.d)
            log_var = T.clamp(T.slice_axis(row, 0, cfg.d, 2 * cfg.d), LOG_VAR_MIN, LOG_VAR_MAX)
            gaussians.append(GaussianD(mu=mu, log_var=log_var))
        return gaussians

    def prior_forward(self, images: Tensor) -> list[GaussianD]:
        """Per-sample prior Gaussians from images alone."""
        self._check_images(images, 1, "prior_forward")
        return self._head_forward("prior", images)

    def posterior_forward(self, images: Tensor, masks: Tensor) -> list[GaussianD]:
        """Per-sample posterior Gaussians from (image, mask) channel pairs."""
        self._check_images(images, 1, "posterior_forward")
        self._check_images(masks, 1, "posterior_forward masks")
        return self._head_forward("posterior", T.concat([images, masks], axis=1))

    def latent_to_native(self, z_k: Tensor) -> Tensor:
        """Compact sample -> native-space vector fed to the adapter.

        With ILSR (inverse latent-space reprojection) this is the affine
        map U z_k + m; with ILSR ablated the compact sample is zero-padded
        to length D instead.
        """
        if self.config.use_ilsr:
            return inverse_reproject(z_k, self._projection)
        if z_k.shape[0] == self.config.d:
            return z_k
        pad = Tensor(np.zeros(self.config.d - z_k.shape[0], dtype=np.float64))
        return T.concat([z_k, pad], axis=0)

    def fuse_and_predict(self, features: Tensor, z_natives: list[Tensor]) -> Tensor:
        """Tile latents over space, concat to features, 1x1-conv to logits."""
        cfg = self.config
        n = features.shape[0]
        if features.shape[1] != cfg.base_channels:
            raise ShapeError(f"features have {features.shape[1]} channels")
        if len(z_natives) != n:
            raise ShapeError(f"{len(z_natives)} latents for batch of {n}")
        rows = []
        for z in z_natives:
            if z.data.ndim != 1 or z.shape[0] != cfg.d:
                raise ShapeError(f"latent shape {z.shape}, expected ({cfg.d},)")
            rows.append(T.reshape(T.cast(z, np.float32), (1, cfg.d)))
        zmat = rows[0] if n == 1 else T.concat(rows, axis=0)
        tiled = T.tile_latent(zmat, features.shape[2], features.shape[3])
        h = T.concat([features, tiled], axis=1)
        h = self._conv_block("adapter.conv1", h)
        w2, b2 = self._params["adapter.conv2.w"], self._params["adapter.conv2.b"]
        return T.add_channel_bias(T.conv2d(h, w2, stride=1, padding=0), b2)
