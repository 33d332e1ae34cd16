"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way: explicit Python loops,
explicit softmax, explicit set arithmetic. Nothing imports model code
beyond reading parameter tensors out of modules.
"""

from __future__ import annotations

import numpy as np
import torch


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def conv2d_single_channel(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Stride-1 same-padding cross-correlation of one channel, via loops."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = image.shape
    padded = np.zeros((h + 2 * ph, w + 2 * pw), dtype=np.float64)
    padded[ph : ph + h, pw : pw + w] = image
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            out[i, j] = (padded[i : i + kh, j : j + kw] * kernel).sum()
    return out


def depthwise_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """(C, H, W) depthwise conv with per-channel (1, kh, kw) kernels."""
    return np.stack(
        [conv2d_single_channel(x[c], weight[c, 0]) + bias[c] for c in range(x.shape[0])]
    )


def pointwise_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """(C_in, H, W) -> (C_out, H, W) 1x1 conv as a matrix product."""
    c_out = weight.shape[0]
    flat = x.reshape(x.shape[0], -1)
    out = weight.reshape(c_out, -1) @ flat + bias[:, None]
    return out.reshape(c_out, *x.shape[1:])


def modality_projector(module, x: np.ndarray) -> np.ndarray:
    """Replay a depthwise-stack + pointwise projector on (C, H, W) input."""
    out = x.astype(np.float64)
    for conv in module.spatial:
        out = depthwise_conv(
            out,
            conv.weight.detach().double().numpy(),
            conv.bias.detach().double().numpy(),
        )
    return pointwise_conv(
        out,
        module.mix.weight.detach().double().numpy(),
        module.mix.bias.detach().double().numpy(),
    )


def prototypes(class_maps: np.ndarray, semantics: np.ndarray) -> np.ndarray:
    """(M, K, H, W) x (M, C, H, W) -> (K, C) by explicit summation."""
    m, k_cls, h, w = class_maps.shape
    c = semantics.shape[1]
    out = np.zeros((k_cls, c), dtype=np.float64)
    for mi in range(m):
        for i in range(h):
            for j in range(w):
                for k in range(k_cls):
                    out[k] += class_maps[mi, k, i, j] * semantics[mi, :, i, j]
    return out


def _linear(module, x: np.ndarray) -> np.ndarray:
    w = module.weight.detach().double().numpy()
    b = module.bias.detach().double().numpy()
    return x @ w.T + b


def spatial_perceptron(module, protos: np.ndarray, feats: np.ndarray):
    """Per-pixel brute-force attention with prototype queries.

    ``protos`` is (K, C), ``feats`` is (M, C, H, W). Returns
    ``(f_se (C, H, W), attn (H, W, heads, K, M))``.
    """
    heads = module.heads
    k_cls, c = protos.shape
    m, _, h, w = feats.shape
    d = c // heads
    scale = 1.0 / np.sqrt(d)
    q = _linear(module.to_q, protos).reshape(k_cls, heads, d)
    f_se = np.zeros((c, h, w), dtype=np.float64)
    attn_all = np.zeros((h, w, heads, k_cls, m), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            tokens = feats[:, :, i, j]  # (M, C)
            key = _linear(module.to_k, tokens).reshape(m, heads, d)
            val = _linear(module.to_v, tokens).reshape(m, heads, d)
            per_class = np.zeros((k_cls, c), dtype=np.float64)
            for n in range(heads):
                for k in range(k_cls):
                    logits = np.array(
                        [float(q[k, n] @ key[mm, n]) * scale for mm in range(m)]
                    )
                    weights = softmax(logits)
                    attn_all[i, j, n, k] = weights
                    ctx = sum(weights[mm] * val[mm, n] for mm in range(m))
                    per_class[k, n * d : (n + 1) * d] = ctx
            pooled = per_class.mean(axis=0)
            f_se[:, i, j] = _linear(module.to_out, pooled)
    return f_se, attn_all


def robustness_perceptron(module, f_se: np.ndarray, feats: np.ndarray):
    """Per-pixel brute-force attention with the fused map as single query.

    ``f_se`` is (C, H, W), ``feats`` is (M, C, H, W). Returns
    ``(fused (C, H, W), robustness (M, H, W), attn (H, W, heads, M))``.
    """
    heads = module.heads
    m, c, h, w = feats.shape
    d = c // heads
    scale = 1.0 / np.sqrt(d)
    fused = np.zeros((c, h, w), dtype=np.float64)
    robustness = np.zeros((m, h, w), dtype=np.float64)
    attn_all = np.zeros((h, w, heads, m), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            q = _linear(module.to_q, f_se[:, i, j]).reshape(heads, d)
            tokens = feats[:, :, i, j]
            key = _linear(module.to_k, tokens).reshape(m, heads, d)
            val = _linear(module.to_v, tokens).reshape(m, heads, d)
            merged = np.zeros(c, dtype=np.float64)
            for n in range(heads):
                logits = np.array([float(q[n] @ key[mm, n]) * scale for mm in range(m)])
                weights = softmax(logits)
                attn_all[i, j, n] = weights
                merged[n * d : (n + 1) * d] = sum(
                    weights[mm] * val[mm, n] for mm in range(m)
                )
            fused[:, i, j] = _linear(module.to_out, merged)
            robustness[:, i, j] = attn_all[i, j].mean(axis=0)
    return fused, robustness, attn_all


def confusion(pred: np.ndarray, target: np.ndarray, k: int, ignore: int) -> np.ndarray:
    out = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(pred.reshape(-1), target.reshape(-1)):
        if t == ignore:
            continue
        out[t, p] += 1
    return out


def iou_f1_sets(pred: np.ndarray, target: np.ndarray, k: int, ignore: int):
    """Per-class IoU and F1 via explicit pixel-index set arithmetic."""
    pred = pred.reshape(-1)
    target = target.reshape(-1)
    valid = target != ignore
    iou: dict[int, float] = {}
    f1: dict[int, float] = {}
    for cls in range(k):
        pset = {i for i in np.flatnonzero(valid & (pred == cls))}
        tset = {i for i in np.flatnonzero(valid & (target == cls))}
        union = pset | tset
        if not union:
            continue
        inter = pset & tset
        iou[cls] = len(inter) / len(union)
        f1[cls] = 2 * len(inter) / (len(pset) + len(tset))
    return iou, f1


def finite_difference_gradients(
    loss_fn, params: list[torch.Tensor], max_entries: int = 4, h: float = 1e-6, seed: int = 0
):
    """Central-difference gradient estimates for sampled parameter entries.

    Returns a list of ``(analytic, numeric)`` pairs. ``loss_fn`` must be a
    zero-argument callable returning a scalar tensor built from ``params``.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        base = loss_fn()
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()

    pairs = []
    for p in params:
        flat = p.detach().reshape(-1)
        grad = p.grad.reshape(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(max_entries, n), replace=False)
        for idx in picks:
            idx = int(idx)
            original = float(flat[idx])
            with torch.no_grad():
                flat[idx] = original + h
                up = float(loss_fn())
                flat[idx] = original - h
                down = float(loss_fn())
                flat[idx] = original
            numeric = (up - down) / (2 * h)
            pairs.append((float(grad[idx]), numeric))
    assert float(base) == float(base), "loss not finite"
    return pairs


def finite_difference_directional(
    loss_fn, params: list[torch.Tensor], h: float = 1e-4, direction: str = "gradient", seed: int = 0
):
    """One central-difference probe per parameter tensor along a unit direction.

    Compares the analytic directional derivative grad . v against
    (f(p + h v) - f(p - h v)) / 2h. Probing along the normalized gradient
    (the default) makes the analytic value the full gradient norm, so
    float64 rounding noise stays far below any honest tolerance even for
    tensors whose individual entries are near zero. ``direction="random"``
    draws v from a seeded normal instead.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()

    pairs = []
    for p in params:
        if direction == "gradient":
            v = p.grad / p.grad.norm()
        else:
            v = torch.from_numpy(rng.standard_normal(tuple(p.shape))).to(p.dtype)
            v = v / v.norm()
        analytic = float((p.grad * v).sum())
        with torch.no_grad():
            p.add_(h * v)
            up = float(loss_fn())
            p.add_(-2.0 * h * v)
            down = float(loss_fn())
            p.add_(h * v)
        pairs.append((analytic, (up - down) / (2.0 * h)))
    return pairs


def max_relative_error(pairs: list[tuple[float, float]], floor: float = 1e-8) -> float:
    worst = 0.0
    for analytic, numeric in pairs:
        denom = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
