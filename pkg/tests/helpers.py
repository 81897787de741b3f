"""Shared instance builders and gradient-check helpers for the test suite."""

import numpy as np

from otadapt import CostSpec, Histogram, label_mask
from otadapt.losses import assemble_gradients, loss_br, loss_cls, loss_rt
from otadapt.model import forward_features

LAMBDA_GRID = (0.05, 0.1, 0.5)
BETA2_GRID = (0.001, 0.05, 1.0)


def random_semirelaxed_instance(seed, max_n=4, max_m=4):
    """Small mixed-mask instance with every row feasible; parameters cycle
    through the lambda/beta2 grids so each solve hits a different regime."""
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(1, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    while n * m > 16:
        m = int(rng.integers(1, max_m + 1))
    cost = rng.uniform(0.0, 1.0, (n, m))
    mask = rng.random((n, m)) > 0.3
    for i in range(n):
        if not mask[i].any():
            mask[i, rng.integers(0, m)] = True
    lam = LAMBDA_GRID[seed % len(LAMBDA_GRID)]
    beta2 = BETA2_GRID[(seed // len(LAMBDA_GRID)) % len(BETA2_GRID)]
    qw = rng.uniform(0.5, 1.5, m)
    p = Histogram.uniform(n)
    q = Histogram(qw / qw.sum())
    return p, q, CostSpec.semirelaxed(cost, mask, lam, beta2)


def grid_cost_class_instance(seed, lam=0.1, beta2=0.001):
    """Class-masked instance with grid-valued costs.

    Costs land on multiples of 1/8, so any two unequal within-class entries
    differ by at least 0.125 after normalization -- far more than the
    relaxed column scaling can reorder at beta2/(beta2+lam) <= 0.02.
    """
    rng = np.random.default_rng(4000 + seed)
    k = int(rng.integers(2, 4))
    rows_per = rng.integers(2, 5, k)
    cols_per = rng.integers(2, 6, k)
    row_labels = np.repeat(np.arange(1, k + 1), rows_per)
    col_labels = np.repeat(np.arange(1, k + 1), cols_per)
    cost = rng.integers(0, 9, (row_labels.size, col_labels.size)) / 8.0
    mask = label_mask(row_labels, col_labels)
    spec = CostSpec.semirelaxed(cost, mask, lam, beta2)
    p = Histogram.uniform(row_labels.size)
    q = Histogram.uniform(col_labels.size)
    return p, q, spec, row_labels, col_labels


def gradient_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    return abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric))


def central_difference(value_fn, array, index, h=1e-5):
    original = array[index]
    array[index] = original + h
    plus = value_fn()
    array[index] = original - h
    minus = value_fn()
    array[index] = original
    return (plus - minus) / (2.0 * h)


def sample_param_coords(model, n_coords, seed):
    rng = np.random.default_rng(seed)
    coords = []
    names = [name for name, _ in model.parameters()]
    for _ in range(n_coords):
        name = names[rng.integers(0, len(names))]
        arr = getattr(model, name)
        flat = int(rng.integers(0, arr.size))
        coords.append((name, np.unravel_index(flat, arr.shape)))
    return coords


def cls_value_and_grads(model, xs, ys, x_private=None, pseudo_label=None):
    zs, cache_s = forward_features(model, xs, return_cache=True)
    if x_private is not None and len(x_private):
        zp, cache_p = forward_features(model, x_private, return_cache=True)
        value, d_zs, d_zp, h_buf = loss_cls(model, zs, ys, zp, pseudo_label)
        return value, assemble_gradients(model, cache_s, cache_p, d_zs, d_zp, h_buf)
    value, d_zs, _, h_buf = loss_cls(model, zs, ys)
    return value, assemble_gradients(model, cache_s, None, d_zs, None, h_buf)


def rt_value_and_grads(model, xs, xt, gamma_shr, gamma_prv):
    zs, cache_s = forward_features(model, xs, return_cache=True)
    zt, cache_t = forward_features(model, xt, return_cache=True)
    value, _, _, d_zs, d_zt = loss_rt(zs, zt, gamma_shr, gamma_prv)
    return value, assemble_gradients(model, cache_s, cache_t, d_zs, d_zt, None)


def br_value_and_grads(model, plan, xt, ys):
    zt, cache_t = forward_features(model, xt, return_cache=True)
    value, d_zt, h_buf, _ = loss_br(model, plan, zt, ys)
    return value, assemble_gradients(model, None, cache_t, None, d_zt, h_buf)


def combined_value_and_grads(model, xs, ys, xt, plan_st, gamma_shr, gamma_prv,
                             prv_idx, pseudo_label, eta1, eta2):
    """Objective assembly mirroring one training step with plans frozen."""
    zs, cache_s = forward_features(model, xs, return_cache=True)
    zt, cache_t = forward_features(model, xt, return_cache=True)
    if prv_idx is not None and len(prv_idx):
        v_cls, d_zs_cls, d_prv, h_cls = loss_cls(
            model, zs, ys, zt[prv_idx], pseudo_label
        )
        d_zt_cls = np.zeros_like(zt)
        d_zt_cls[prv_idx] = d_prv
    else:
        v_cls, d_zs_cls, _, h_cls = loss_cls(model, zs, ys)
        d_zt_cls = None
    v_rt, _, _, d_zs_rt, d_zt_rt = loss_rt(zs, zt, gamma_shr, gamma_prv)
    v_br, d_zt_br, h_br, _ = loss_br(model, plan_st, zt, ys)
    total = v_cls + eta1 * v_rt + eta2 * v_br
    buf = assemble_gradients(model, cache_s, cache_t, d_zs_cls, d_zt_cls, h_cls)
    buf.add_scaled(
        assemble_gradients(model, cache_s, cache_t, d_zs_rt, d_zt_rt, None), eta1
    )
    buf.add_scaled(
        assemble_gradients(model, None, cache_t, None, d_zt_br, h_br), eta2
    )
    return total, buf
