"""Shared test oracles: naive convolution, finite differences, distances.

Everything here is deliberately written the slow, obvious way and stays
independent of the library code paths it is used to check.
"""

import math

import numpy as np

from pepnet.tensor import Tensor


def naive_conv2d(x, w, stride=1, padding=0):
    """Direct cross-correlation with explicit loops (float64)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wid = x.shape
    o, i, kh, kw = w.shape
    assert c == i
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, oh, ow))
    for nn in range(n):
        for oo in range(o):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ii in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[nn, ii, oy * stride + ky, ox * stride + kx] * w[oo, ii, ky, kx]
                    out[nn, oo, oy, ox] = acc
    return out


def directional_fd(builder, arrays, directions, h=1e-5):
    """Central-difference directional derivative of builder at arrays.

    builder maps a list of constant Tensors to a scalar Tensor; arrays and
    directions are matching lists of float64 numpy arrays.
    """

    def value(arrs):
        ts = [Tensor(a.copy()) for a in arrs]
        return builder(*ts).item()

    plus = [a + h * d for a, d in zip(arrays, directions)]
    minus = [a - h * d for a, d in zip(arrays, directions)]
    return (value(plus) - value(minus)) / (2.0 * h)


def check_grad_direction(builder, arrays, rng, h=1e-5, tol=1e-3):
    """One randomized directional gradient check; returns the relative error.

    The error is normalized by max(|fd|, |analytic|, ||g||*||d||): when the
    directional derivative happens to cancel toward zero, the gradient
    magnitude is the meaningful yardstick, and a wrong gradient still shows
    up as ||g_err||/||g||.
    """
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = builder(*ts)
    loss.backward()
    dirs = [rng.standard_normal(a.shape) for a in arrays]
    analytic = 0.0
    gnorm_sq = 0.0
    dnorm_sq = 0.0
    for t, d in zip(ts, dirs):
        if t.grad is not None:
            analytic += float(np.sum(t.grad * d))
            gnorm_sq += float(np.sum(t.grad.astype(np.float64) ** 2))
            dnorm_sq += float(np.sum(d * d))
    fd = directional_fd(builder, arrays, dirs, h=h)
    scale = max(abs(fd), abs(analytic), np.sqrt(gnorm_sq * dnorm_sq), 1e-8)
    return abs(analytic - fd) / scale


def full_fd_grads(builder, arrays, h=1e-6):
    """Elementwise central-difference gradients for every input array."""

    def value(arrs):
        ts = [Tensor(a.copy()) for a in arrs]
        return builder(*ts).item()

    grads = []
    work = [a.copy() for a in arrays]
    for a in work:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = value(work)
            flat[j] = orig - h
            fm = value(work)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.max(np.abs(b))) if b.size else 0.0, floor)
    return float(np.max(np.abs(a - b))) / denom if a.size else 0.0


def random_orthonormal(rng, d, k):
    """First k columns of a Haar-ish random orthogonal matrix."""
    m = rng.standard_normal((d, d))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diagonal(r))
    return q[:, :k].copy()


def diag_gaussian_kl_reference(mu_q, log_var_q, mu_p, log_var_p):
    """Closed-form KL between diagonal Gaussians, the textbook way."""
    var_q = np.exp(np.asarray(log_var_q, dtype=np.float64))
    var_p = np.exp(np.asarray(log_var_p, dtype=np.float64))
    dmu = np.asarray(mu_p, dtype=np.float64) - np.asarray(mu_q, dtype=np.float64)
    return 0.5 * float(np.sum(var_q / var_p + dmu ** 2 / var_p - 1.0 + np.log(var_p) - np.log(var_q)))


def iou_oracle(a, b) -> float:
    """Set-counting IoU; both-empty counts as a perfect match."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.sum(a | b)
    return 1.0 if union == 0 else float(np.sum(a & b)) / float(union)


def ged_oracle(preds, raters) -> float:
    """Brute-force generalized energy distance under Jaccard distance.

    Accumulates in the same nesting order as the library (first argument
    outer, second inner) so the comparison can be exact, not approximate.
    """

    def md(xs, ys):
        return sum(1.0 - iou_oracle(x, y) for x in xs for y in ys) / (len(xs) * len(ys))

    sq = 2.0 * md(preds, raters) - md(preds, preds) - md(raters, raters)
    return math.sqrt(max(sq, 0.0))


def ece_oracle(prob, rater_masks, bins=10) -> float:
    """Expected calibration error via explicit per-pixel bucket lists."""
    p = np.clip(np.asarray(prob, dtype=np.float64), 1e-7, 1.0 - 1e-7)
    pairs = []
    for m in np.asarray(rater_masks):
        for pi, yi in zip(p.ravel(), m.ravel()):
            conf = max(pi, 1.0 - pi)
            pred = 1 if pi >= 0.5 else 0
            pairs.append((conf, 1.0 if pred == yi else 0.0))
    buckets = {}
    for conf, corr in pairs:
        buckets.setdefault(min(int(conf * bins), bins - 1), []).append((conf, corr))
    out = 0.0
    for vals in buckets.values():
        acc = sum(c for _, c in vals) / len(vals)
        avg_conf = sum(c for c, _ in vals) / len(vals)
        out += (len(vals) / len(pairs)) * abs(acc - avg_conf)
    return out


def op_grad_cases():
    """(name, factory) pairs covering every differentiable op kind.

    Each factory takes an rng and returns (arrays, builder) where builder
    maps matching constant/grad Tensors to a scalar Tensor. Constants such
    as masks and targets are closed over inside the builder.
    """
    from pepnet import tensor as T

    def w(rng, shape):
        return T.Tensor(rng.standard_normal(shape))

    def loss_of(rng, shape):
        r = rng.standard_normal(shape)

        def reduce_out(out):
            return T.tsum(T.mul(out, T.Tensor(r)))

        return reduce_out

    def case_add(rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        red = loss_of(rng, (3, 4))
        return [a, b], lambda ta, tb: red(T.add(ta, tb))

    def case_neg(rng):
        a = rng.standard_normal((5,))
        red = loss_of(rng, (5,))
        return [a], lambda ta: red(T.neg(ta))

    def case_mul(rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        red = loss_of(rng, (2, 3))
        return [a, b], lambda ta, tb: red(T.mul(ta, tb))

    def case_scale(rng):
        a = rng.standard_normal((4,))
        red = loss_of(rng, (4,))
        s = float(rng.standard_normal())
        return [a], lambda ta: red(T.scale(ta, s))

    def case_reshape(rng):
        a = rng.standard_normal((2, 6))
        red = loss_of(rng, (3, 4))
        return [a], lambda ta: red(T.reshape(ta, (3, 4)))

    def case_transpose(rng):
        a = rng.standard_normal((3, 5))
        red = loss_of(rng, (5, 3))
        return [a], lambda ta: red(T.transpose(ta))

    def case_concat(rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
        red = loss_of(rng, (2, 5))
        return [a, b], lambda ta, tb: red(T.concat([ta, tb], axis=1))

    def case_slice(rng):
        a = rng.standard_normal((4, 6))
        red = loss_of(rng, (4, 3))
        return [a], lambda ta: red(T.slice_axis(ta, 1, 2, 5))

    def case_cast(rng):
        a = rng.standard_normal((3, 3))
        red = loss_of(rng, (3, 3))
        return [a], lambda ta: red(T.cast(T.cast(ta, np.float32), np.float64))

    def case_relu(rng):
        a = rng.standard_normal((4, 4))
        a += np.sign(a) * 0.1  # keep clear of the kink
        red = loss_of(rng, (4, 4))
        return [a], lambda ta: red(T.relu(ta))

    def case_sigmoid(rng):
        a = rng.standard_normal((4, 4)) * 2.0
        red = loss_of(rng, (4, 4))
        return [a], lambda ta: red(T.sigmoid(ta))

    def case_exp(rng):
        a = rng.standard_normal((3, 4))
        red = loss_of(rng, (3, 4))
        return [a], lambda ta: red(T.exp(ta))

    def case_log(rng):
        a = np.abs(rng.standard_normal((3, 4))) + 0.5
        red = loss_of(rng, (3, 4))
        return [a], lambda ta: red(T.log(ta))

    def case_clamp(rng):
        a = rng.standard_normal((4, 4)) * 2.0
        a[np.abs(np.abs(a) - 1.5) < 0.1] = 0.0  # keep clear of the bounds
        red = loss_of(rng, (4, 4))
        return [a], lambda ta: red(T.clamp(ta, -1.5, 1.5))

    def case_sum(rng):
        a = rng.standard_normal((3, 3))
        return [a], lambda ta: T.tsum(ta)

    def case_mean(rng):
        a = rng.standard_normal((3, 3))
        return [a], lambda ta: T.tmean(ta)

    def case_mean_hw(rng):
        a = rng.standard_normal((2, 3, 4, 4))
        red = loss_of(rng, (2, 3))
        return [a], lambda ta: red(T.mean_hw(ta))

    def case_matmul_22(rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        red = loss_of(rng, (3, 2))
        return [a, b], lambda ta, tb: red(T.matmul(ta, tb))

    def case_matmul_21(rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4,))
        red = loss_of(rng, (3,))
        return [a, b], lambda ta, tb: red(T.matmul(ta, tb))

    def case_matmul_12(rng):
        a, b = rng.standard_normal((4,)), rng.standard_normal((4, 3))
        red = loss_of(rng, (3,))
        return [a, b], lambda ta, tb: red(T.matmul(ta, tb))

    def case_matmul_11(rng):
        a, b = rng.standard_normal((5,)), rng.standard_normal((5,))
        return [a, b], lambda ta, tb: T.matmul(ta, tb)

    def case_linear(rng):
        x, wm, b = rng.standard_normal((2, 4)), rng.standard_normal((4, 3)), rng.standard_normal((3,))
        red = loss_of(rng, (2, 3))
        return [x, wm, b], lambda tx, tw, tb: red(T.linear(tx, tw, tb))

    def case_diag_embed(rng):
        v = rng.standard_normal((4,))
        red = loss_of(rng, (4, 4))
        return [v], lambda tv: red(T.diag_embed(tv))

    def case_diag_part(rng):
        a = rng.standard_normal((4, 4))
        red = loss_of(rng, (4,))
        return [a], lambda ta: red(T.diag_part(ta))

    def case_tri_solve(rng):
        k = 3
        b = rng.standard_normal((k, 2))
        free = rng.standard_normal((k, k))
        mask = T.Tensor(np.tril(np.ones((k, k)), -1))
        red = loss_of(rng, (k, 2))

        def build(tfree, tb):
            # exp keeps every pivot safely positive for any draw of free
            lower = T.add(T.mul(tfree, mask), T.diag_embed(T.exp(T.diag_part(tfree))))
            return red(T.tri_solve_lower(lower, tb))

        return [free, b], build

    def case_cholesky(rng):
        k = 3
        free = rng.standard_normal((k, k))
        eye = T.Tensor(np.eye(k) * (k + 1.0))
        red = loss_of(rng, (k, k))

        def build(tfree):
            sym = T.scale(T.add(tfree, T.transpose(tfree)), 0.5)
            lower, _ = T.cholesky(T.add(sym, eye))
            return red(lower)

        return [free], build

    def case_conv(rng):
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        x = rng.standard_normal((2, 2, 5, 5))
        wk = rng.standard_normal((3, 2, 3, 3))
        oh = (5 + 2 * padding - 3) // stride + 1
        red = loss_of(rng, (2, 3, oh, oh))
        return [x, wk], lambda tx, tw: red(T.conv2d(tx, tw, stride=stride, padding=padding))

    def case_channel_bias(rng):
        x, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((3,))
        red = loss_of(rng, (2, 3, 4, 4))
        return [x, b], lambda tx, tb: red(T.add_channel_bias(tx, tb))

    def case_avg_pool(rng):
        x = rng.standard_normal((2, 2, 4, 4))
        red = loss_of(rng, (2, 2, 2, 2))
        return [x], lambda tx: red(T.avg_pool2d(tx))

    def case_upsample(rng):
        x = rng.standard_normal((2, 2, 3, 3))
        red = loss_of(rng, (2, 2, 6, 6))
        return [x], lambda tx: red(T.upsample2x(tx))

    def case_tile_latent(rng):
        z = rng.standard_normal((2, 3))
        red = loss_of(rng, (2, 3, 4, 4))
        return [z], lambda tz: red(T.tile_latent(tz, 4, 4))

    def case_bce(rng):
        x = rng.standard_normal((3, 4)) * 2.0
        target = T.Tensor((rng.random((3, 4)) < 0.5).astype(np.float64))
        return [x], lambda tx: T.bce_with_logits(tx, target)

    return [
        ("add", case_add), ("neg", case_neg), ("mul", case_mul), ("scale", case_scale),
        ("reshape", case_reshape), ("transpose", case_transpose), ("concat", case_concat),
        ("slice_axis", case_slice), ("cast", case_cast), ("relu", case_relu),
        ("sigmoid", case_sigmoid), ("exp", case_exp), ("log", case_log), ("clamp", case_clamp),
        ("sum", case_sum), ("mean", case_mean), ("mean_hw", case_mean_hw),
        ("matmul_22", case_matmul_22), ("matmul_21", case_matmul_21),
        ("matmul_12", case_matmul_12), ("matmul_11", case_matmul_11),
        ("linear", case_linear), ("diag_embed", case_diag_embed), ("diag_part", case_diag_part),
        ("tri_solve_lower", case_tri_solve), ("cholesky", case_cholesky), ("conv2d", case_conv),
        ("add_channel_bias", case_channel_bias), ("avg_pool2d", case_avg_pool),
        ("upsample2x", case_upsample), ("tile_latent", case_tile_latent),
        ("bce_with_logits", case_bce),
    ]
