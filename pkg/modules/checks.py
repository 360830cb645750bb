#!/usr/bin/env python3
"""
Numerical self-checks - central finite differences against autograd and
scalar-loop reference implementations of every kernel.

Every check returns a CheckResult carrying the worst relative error seen.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from modules.bt_core import LossWeights, batch_normalize, bt_loss, bt_loss_from_raw, combined_loss, cross_correlation
from modules.geometry import largest_interior_rectangle
from modules.metrics import ConfusionMatrix, accumulate, iou
from modules.model import BTSegNet, DecoderSpec, EncoderSpec, ProjectorSpec
from modules.pooling import pool_features
from modules.trainer import EmbeddingCache, bt_loss_cached

KERNEL_GRAD_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
ORACLE_TOLERANCE = 1e-9
CACHE_TOLERANCE = 1e-6
SCOPES = ("grads", "oracles", "all")


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    detail: str = ""


def relative_error(actual, expected):
    """||a - e|| / max(||a|| + ||e||, tiny); 0 when both are zero"""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    scale = np.linalg.norm(a) + np.linalg.norm(e)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - e) / max(scale, 1e-300))


def central_difference(func, x, indices, delta):
    """(f(x + h e_i) - f(x - h e_i)) / 2h for the flat ``indices`` of ``x`` (modified in place, restored)"""
    grads = []
    flat = x.data.view(-1)
    with torch.no_grad():
        for i in indices:
            original = flat[i].item()
            flat[i] = original + delta
            plus = float(func())
            flat[i] = original - delta
            minus = float(func())
            flat[i] = original
            grads.append((plus - minus) / (2 * delta))
    return np.array(grads)


def _sample_indices(numel, limit, rng):
    if numel <= limit:
        return list(range(numel))
    return sorted(rng.choice(numel, size=limit, replace=False).tolist())


def _generator(seed):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


# ---------------------------
# Scalar-loop references
# ---------------------------
def loop_batch_normalize(z, epsilon):
    b, p = z.shape
    out = np.zeros((b, p))
    for j in range(p):
        mean = sum(z[k, j] for k in range(b)) / b
        var = sum((z[k, j] - mean) ** 2 for k in range(b)) / b
        for k in range(b):
            out[k, j] = (z[k, j] - mean) / np.sqrt(var + epsilon)
    return out


def loop_cross_correlation(z_a, z_b):
    b, p = z_a.shape
    c = np.zeros((p, p))
    for i in range(p):
        for j in range(p):
            c[i, j] = sum(z_a[k, i] * z_b[k, j] for k in range(b)) / b
    return c


def loop_bt_loss(c, lambda_bt):
    p = c.shape[0]
    total = 0.0
    for i in range(p):
        for j in range(p):
            total += (1.0 - c[i, j]) ** 2 if i == j else lambda_bt * c[i, j] ** 2
    return total


def loop_weighted_pool(y, w, epsilon):
    """w=None means the plain average"""
    b, d, m, n = y.shape
    out = np.zeros((b, d))
    for k in range(b):
        for c in range(d):
            num = den = 0.0
            for i in range(m):
                for j in range(n):
                    weight = 1.0 if w is None else w[k, i, j]
                    num += y[k, c, i, j] * weight
                    den += weight
            out[k, c] = num / (den if w is None else den + epsilon)
    return out


def loop_iou(pred, gt, num_classes, ignore_index):
    result = []
    for c in range(num_classes):
        tp = fp = fn = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g == ignore_index:
                continue
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        union = tp + fp + fn
        result.append(tp / union if union else None)
    return result


def brute_force_lir_area(mask):
    """Max all-valid rectangle area by enumerating every rectangle (prefix sums)"""
    mask = np.asarray(mask).astype(np.int64)
    h, w = mask.shape
    s = np.zeros((h + 1, w + 1), dtype=np.int64)
    s[1:, 1:] = mask.cumsum(0).cumsum(1)
    best = 0
    for top in range(h):
        for left in range(w):
            heights = np.arange(1, h - top + 1)[:, None]
            widths = np.arange(1, w - left + 1)[None, :]
            sums = s[top + 1:, left + 1:] - s[top, left + 1:][None, :] - s[top + 1:, left][:, None] + s[top, left]
            areas = heights * widths
            full = sums == areas
            if full.any():
                best = max(best, int(areas[full].max()))
    return best


# ---------------------------
# Gradient suites
# ---------------------------
def check_bt_gradient(seed=0, instances=5):
    worst = 0.0
    rng = np.random.default_rng(seed)
    for t in range(instances):
        g = _generator(seed + t)
        b, p = int(rng.integers(4, 9)), int(rng.integers(3, 7))
        z_a = torch.randn(b, p, generator=g, dtype=torch.float64, requires_grad=True)
        z_b = torch.randn(b, p, generator=g, dtype=torch.float64)
        weights = LossWeights.for_dim(p)
        loss = bt_loss_from_raw(z_a, z_b, weights)
        (analytic,) = torch.autograd.grad(loss, z_a)
        numeric = central_difference(lambda: bt_loss_from_raw(z_a, z_b, weights), z_a,
                                     range(z_a.numel()), 1e-3)
        worst = max(worst, relative_error(analytic.reshape(-1).numpy(), numeric))
    return CheckResult("grad: bt_loss", worst, worst < KERNEL_GRAD_TOLERANCE)


def check_pooling_gradients(seed=0):
    results = []
    g = _generator(seed)
    y = torch.randn(3, 4, 5, 6, generator=g, dtype=torch.float64, requires_grad=True)
    mask = (torch.rand(3, 5, 6, generator=g) > 0.4).double()
    conf = torch.rand(3, 5, 6, generator=g, dtype=torch.float64)
    for mode in ("avg", "segm", "conf", "segconf"):
        # weighted sum of the pooled vector makes every output entry count
        proj = torch.randn(3, 4, generator=g, dtype=torch.float64)

        def objective():
            return (pool_features(y, mode, mask, conf) * proj).sum()

        (analytic,) = torch.autograd.grad(objective(), y)
        numeric = central_difference(objective, y, range(y.numel()), 1e-4)
        err = relative_error(analytic.reshape(-1).numpy(), numeric)
        results.append(CheckResult(f"grad: pooling {mode}", err, err < KERNEL_GRAD_TOLERANCE))
    return results


def tiny_model(seed=0, num_classes=4):
    """b=4, 16x16 inputs, d=16, p=8"""
    return BTSegNet(EncoderSpec((8, 8), (4, 8)), DecoderSpec(num_classes, upsample=4, hidden=8),
                    ProjectorSpec((16, 16, 8)), seed=seed)


def check_end_to_end_gradient(seed=0, entries_per_tensor=6, alpha=0.1):
    """Combined CE + alpha * BT loss against finite differences for every parameter group"""
    model = tiny_model(seed)
    model.train()
    g = _generator(seed)
    source = torch.rand(4, 3, 16, 16, generator=g, dtype=torch.float64)
    target = torch.rand(4, 3, 16, 16, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 4, (4, 16, 16), generator=g)
    conf = torch.rand(4, 4, 4, generator=g, dtype=torch.float64)
    weights = LossWeights.for_dim(model.projector_spec.out_dim)

    def objective():
        y_s = model.encoder(source)
        y_t = model.encoder(target)
        l_ce = F.cross_entropy(model.decoder(y_s), labels)
        z_s = model.projector(pool_features(y_s, "conf", confidence=conf))
        z_t = model.projector(pool_features(y_t, "conf", confidence=conf))
        return combined_loss(l_ce, bt_loss_from_raw(z_s, z_t, weights), alpha)

    model.zero_grad()
    objective().backward()
    rng = np.random.default_rng(seed)
    results = []
    for group, params in model.param_groups().items():
        analytic, numeric = [], []
        for param in params:
            idx = _sample_indices(param.numel(), entries_per_tensor, rng)
            analytic.extend(param.grad.reshape(-1)[idx].tolist())
            numeric.extend(central_difference(objective, param, idx, 1e-6))
        err = relative_error(analytic, numeric)
        results.append(CheckResult(f"grad: end-to-end {group}", err, err < END_TO_END_TOLERANCE))
    return results


# ---------------------------
# Oracle suites
# ---------------------------
def check_kernel_oracles(seed=0, instances=50):
    rng = np.random.default_rng(seed)
    worst = {"batch_normalize": 0.0, "cross_correlation": 0.0, "bt_loss_from_raw": 0.0}
    for _ in range(instances):
        b, p = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        z_a = rng.normal(size=(b, p)) * rng.uniform(0.1, 3.0)
        z_b = rng.normal(size=(b, p))
        lam = 1.0 / p
        ta, tb = torch.from_numpy(z_a), torch.from_numpy(z_b)

        norm = batch_normalize(ta).numpy()
        worst["batch_normalize"] = max(worst["batch_normalize"],
                                       relative_error(norm, loop_batch_normalize(z_a, 1e-5)))
        worst["cross_correlation"] = max(worst["cross_correlation"],
                                         relative_error(cross_correlation(ta, tb).numpy(),
                                                        loop_cross_correlation(z_a, z_b)))
        reference = loop_bt_loss(loop_cross_correlation(loop_batch_normalize(z_a, 1e-5),
                                                        loop_batch_normalize(z_b, 1e-5)), lam)
        actual = float(bt_loss_from_raw(ta, tb, LossWeights(lambda_bt=lam)))
        worst["bt_loss_from_raw"] = max(worst["bt_loss_from_raw"], relative_error(actual, reference))
        c = rng.normal(size=(p, p))
        worst["bt_loss_from_raw"] = max(worst["bt_loss_from_raw"],
                                        relative_error(float(bt_loss(torch.from_numpy(c), lam)),
                                                       loop_bt_loss(c, lam)))
    return [CheckResult(f"oracle: {name}", err, err <= ORACLE_TOLERANCE) for name, err in worst.items()]


def check_pooling_oracles(seed=0, instances=50):
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(("avg", "segm", "conf", "segconf"), 0.0)
    for _ in range(instances):
        b, d, m, n = (int(v) for v in rng.integers(1, 5, size=4))
        y = rng.normal(size=(b, d, m, n))
        mask = (rng.random((b, m, n)) > 0.3).astype(np.float64)
        conf = rng.random((b, m, n))
        weights = {"avg": None, "segm": mask, "conf": conf, "segconf": mask * conf}
        for mode, w in weights.items():
            actual = pool_features(torch.from_numpy(y), mode, torch.from_numpy(mask),
                                   torch.from_numpy(conf)).numpy()
            worst[mode] = max(worst[mode], relative_error(actual, loop_weighted_pool(y, w, 1e-6)))
    return [CheckResult(f"oracle: pooling {mode}", err, err <= ORACLE_TOLERANCE) for mode, err in worst.items()]


def check_iou_oracle(seed=0, instances=50, ignore_index=255):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        k = int(rng.integers(2, 6))
        shape = (int(rng.integers(2, 10)), int(rng.integers(2, 10)))
        pred = rng.integers(0, k, size=shape)
        gt = rng.integers(0, k, size=shape)
        gt[rng.random(shape) < 0.1] = ignore_index
        if (gt == ignore_index).all():
            continue
        report = iou(accumulate(ConfusionMatrix(k), pred, gt, ignore_index))
        reference = loop_iou(pred, gt, k, ignore_index)
        if [v is None for v in report.per_class_iou] != [v is None for v in reference]:
            return CheckResult("oracle: iou", float("inf"), False, "undefined classes disagree")
        pairs = [(a, e) for a, e in zip(report.per_class_iou, reference) if e is not None]
        worst = max(worst, relative_error([a for a, _ in pairs], [e for _, e in pairs]))
    return CheckResult("oracle: iou", worst, worst <= ORACLE_TOLERANCE)


def check_lir_oracle(seed=0, instances=200, max_side=24):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(instances):
        h, w = (int(v) for v in rng.integers(1, max_side + 1, size=2))
        mask = rng.random((h, w)) < rng.uniform(0.4, 0.95)
        if not mask.any():
            mask[rng.integers(h), rng.integers(w)] = True
        rect = largest_interior_rectangle(mask)
        rows, cols = rect.slices()
        if not mask[rows, cols].all() or rect.area != brute_force_lir_area(mask):
            mismatches += 1
    error = mismatches / instances
    return CheckResult("oracle: largest interior rectangle", error, mismatches == 0,
                       f"{mismatches}/{instances} masks disagree")


def check_cache_equivalence(seed=0, instances=20, batch=32, dim=8):
    """Cache filled from a full batch gives the monolithic full-batch loss"""
    worst = 0.0
    for t in range(instances):
        g = _generator(seed + t)
        z_s = torch.randn(batch, dim, generator=g, dtype=torch.float64)
        z_t = torch.randn(batch, dim, generator=g, dtype=torch.float64)
        weights = LossWeights.for_dim(dim)
        cache = EmbeddingCache(batch)
        for k in range(0, batch, 4):
            cache.push(z_s[k:k + 4], z_t[k:k + 4])
        worst = max(worst, relative_error(float(bt_loss_cached(cache, weights)),
                                          float(bt_loss_from_raw(z_s, z_t, weights))))
    return CheckResult("oracle: embedding cache", worst, worst <= CACHE_TOLERANCE)


def run_checks(scope="all", seed=0):
    if scope not in SCOPES:
        raise ValueError(f"unknown check scope '{scope}', expected one of {SCOPES}")
    results = []
    if scope in ("grads", "all"):
        results.append(check_bt_gradient(seed))
        results.extend(check_pooling_gradients(seed))
        results.extend(check_end_to_end_gradient(seed))
    if scope in ("oracles", "all"):
        results.extend(check_kernel_oracles(seed))
        results.extend(check_pooling_oracles(seed))
        results.append(check_iou_oracle(seed))
        results.append(check_lir_oracle(seed))
        results.append(check_cache_equivalence(seed))
    return results
