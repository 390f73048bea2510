"""Probabilistic U-Net with a frozen PCA latent bottleneck.

Subpackages:
    tensor   -- float tensors with reverse-mode autodiff
    optim    -- Adam and gradient clipping
    latent   -- Gaussian latent algebra (projection, compact KL, sampling)
    pca      -- moment accumulation and the frozen projection fit
    model    -- backbone, Gaussian heads and adapter fusion
    data     -- synthetic multi-rater datasets and PGM IO
    metrics  -- IoU, GED, NLL, Brier and ECE
    train    -- two-stage training loop, evaluation, checkpoints
    cli      -- command-line front end
"""

__version__ = "0.1.0"
