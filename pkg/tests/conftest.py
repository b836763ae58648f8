"""Shared helpers: random valid inputs and the finite-difference gradient oracle."""

import numpy as np

from webly.data import CleanSpec, synth_clean
from webly.loss import modulated_cross_entropy
from webly.model import ModelConfig, ModelParams, backward, forward, init_params


def random_transition(k, rng):
    """Row-stochastic matrix with all entries bounded away from zero."""
    rows = rng.uniform(0.2, 1.0, size=(k, k))
    return rows / rows.sum(axis=1, keepdims=True)


def make_clean_dataset(k=3, d=None, per_class=20, separation=8.0, sigma=0.5,
                       seed=0, groups_per_class=4):
    """Axis-aligned Gaussian mixture; separation is in feature units."""
    d = k if d is None else d
    means = np.zeros((k, d))
    for c in range(k):
        means[c, c % d] = separation
    spec = CleanSpec(num_classes=k, feature_dim=d, class_means=means,
                     sigma=sigma, class_counts=[per_class] * k,
                     groups_per_class=groups_per_class, seed=seed)
    return synth_clean(spec)


def fd_max_rel_error(cfg: ModelConfig, batch_size=8, n_coords=100, h=1e-4,
                     seed=0, keep_prob=0.8, renormalize=False,
                     dropout_seed=1234):
    """Max relative error between analytic and central-difference gradients.

    The end-to-end scalar is the modulated weighted cross-entropy of a
    train-mode forward pass (fixed dropout seed, so both finite-difference
    evaluations see the same mask).  Relative error is
    |a - n| / max(|a|, |n|, 1e-8), maximized over sampled coordinates.

    Central differences are only meaningful where the loss is differentiable,
    so the instance is re-drawn (deterministically) until every ReLU
    preactivation sits well clear of its kink; with zero-initialized biases a
    fully dropped hidden row otherwise lands a preactivation at exactly 0.
    """
    for attempt in range(50):
        rng = np.random.default_rng((seed, attempt))
        params = init_params(cfg)
        x = rng.normal(size=(batch_size, cfg.input_dim))
        labels = rng.integers(0, cfg.num_classes, size=batch_size)
        t = random_transition(cfg.num_classes, rng)
        w = rng.uniform(0.5, 2.0, size=cfg.num_classes)
        _, probe = forward(params, x, train=True, dropout_seed=dropout_seed,
                           keep_prob=keep_prob)
        margins = [np.abs(z).min() for z in probe.pre_activations]
        if not margins or min(margins) > 50 * h:
            break
    else:
        raise RuntimeError("no kink-free instance found")

    def scalar_loss(p: ModelParams) -> float:
        posteriors, _ = forward(p, x, train=True, dropout_seed=dropout_seed,
                                keep_prob=keep_prob)
        return modulated_cross_entropy(posteriors, labels, t, w,
                                       renormalize=renormalize).loss

    posteriors, cache = forward(params, x, train=True,
                                dropout_seed=dropout_seed, keep_prob=keep_prob)
    report = modulated_cross_entropy(posteriors, labels, t, w,
                                     renormalize=renormalize)
    analytic = backward(cache, report.logit_grads).flat_arrays()

    base = params.flat_arrays()
    sizes = [a.size for a in base]
    total = sum(sizes)
    coords = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum([0] + sizes)

    worst = 0.0
    for flat_idx in coords:
        ai = int(np.searchsorted(bounds, flat_idx, side="right") - 1)
        off = int(flat_idx - bounds[ai])

        def loss_at(delta):
            arrays = [a.copy() for a in base]
            arrays[ai].flat[off] += delta
            perturbed = ModelParams(config=cfg, weights=arrays[0::2],
                                    biases=arrays[1::2])
            return scalar_loss(perturbed)

        numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h)
        a = float(analytic[ai].flat[off])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
