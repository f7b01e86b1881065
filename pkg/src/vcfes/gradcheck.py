"""Central finite-difference check of the analytic objective gradient."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .heads import ArcFaceHead, HeadParameters, SPACES
from .losses import Batch, evaluate_objective, kink_signature
from .training import TrainConfig

STEP = 1e-5
# denominators below this are treated as absolute error
REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: int
    id_mode: str
    view_weighting: str

    def line(self):
        return (f"id_mode={self.id_mode} weighting={self.view_weighting} "
                f"max_rel_error={self.max_rel_error:.3e} checked={self.checked} "
                f"excluded={self.excluded}")


def random_instance(seed, input_dim=16, embed_dim=8, num_classes=4, P=2, K=2,
                    id_mode="arcface_ce", view_weighting="uniform"):
    rng = np.random.default_rng(seed)
    heads = HeadParameters(rng.normal(0, 0.5, (len(SPACES), embed_dim, input_dim)),
                           rng.normal(0, 0.1, (len(SPACES), embed_dim)))
    arcface = ArcFaceHead(rng.normal(0, 1.0, (len(SPACES), num_classes, embed_dim)))
    identities = rng.choice(num_classes, size=P, replace=False)
    labels = np.repeat(identities, K)
    batch = Batch(rng.normal(0, 1.0, (P * K, input_dim)), labels,
                  rng.dirichlet(np.ones(3), size=P * K))
    prototypes = rng.normal(size=(num_classes, len(SPACES), embed_dim))
    prototypes /= np.linalg.norm(prototypes, axis=-1, keepdims=True)
    config = TrainConfig(id_mode=id_mode, view_weighting=view_weighting,
                         embed_dim=embed_dim, lambda_id=1.0, lambda_triplet=1.0,
                         triplet_margin=0.3)
    return batch, heads, arcface, config, prototypes


def check_gradients(batch, heads, arcface, config, prototypes=None, step=STEP):
    """Compare analytic gradients against central differences, entry by entry.

    Entries whose +/- step lands on a different piece of the objective
    (changed mining pick, hinge activity or clamp zone) are excluded.
    """
    _, grads, fwd = evaluate_objective(batch, heads, arcface, config, prototypes)
    base_sig = kink_signature(fwd, arcface)
    heads = heads.copy()
    arcface = arcface.copy()
    targets = [(heads.weights, grads.weights), (arcface.class_weights, grads.class_weights)]
    if heads.use_bias:
        targets.append((heads.biases, grads.biases))

    def probe():
        report, _, f = evaluate_objective(batch, heads, arcface, config, prototypes,
                                          want_grad=False)
        return report.total, kink_signature(f, arcface)

    worst, checked, excluded = 0.0, 0, 0
    for param, analytic in targets:
        flat, flat_grad = param.reshape(-1), analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus, sig_plus = probe()
            flat[i] = orig - step
            f_minus, sig_minus = probe()
            flat[i] = orig
            if sig_plus != base_sig or sig_minus != base_sig:
                excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = flat_grad[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(worst, checked, excluded, config.id_mode,
                           getattr(config, "view_weighting", "uniform"))


def run_gradcheck(trials=3, seed=0, modes=("arcface_ce", "softmin_distance"),
                  weightings=("uniform", "visibility"), **dims):
    results = []
    for mode in modes:
        for weighting in weightings:
            for t in range(trials):
                inst = random_instance(seed + t, id_mode=mode, view_weighting=weighting, **dims)
                results.append(check_gradients(*inst))
    return results


def summarize(results):
    worst = max(r.max_rel_error for r in results)
    return worst, sum(r.checked for r in results), sum(r.excluded for r in results)


def with_overrides(config, **kwargs):
    return replace(config, **kwargs)
