"""Central finite-difference verification of the hand-written backward passes.

Every learned block ships an analytic gradient; this module holds those
gradients to the numerical definition. Family checks draw small random
shapes so a full coordinate sweep stays cheap, and the composed check runs
the trainer's actual batch backward on a synthetic episode with spot
finite differences per parameter block.

Random draws are kept away from the policy head's clamp boundaries, where
the loss is continuous but not differentiable and central differences are
meaningless.
"""

from __future__ import annotations

import numpy as np

from . import attention, entities, losses, policy, training
from .entities import EncoderParams
from .errors import NumericalError
from .planner import GraspTemplate
from .training import TrainConfig, TrainingEpisode

DEFAULT_EPS = 1e-6
DEFAULT_TOL = 1e-5

GRADIENT_FAMILIES = ("encoder", "attention", "action", "contrastive", "policy")


def finite_difference_grad(f, x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (mutates x transiently)."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat, grad_flat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        grad_flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=float).ravel()
    b = np.asarray(numeric, dtype=float).ravel()
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-8)
    return float(np.linalg.norm(a - b)) / denom


# ---------- per-family checks (one random instance each) ----------

def check_encoder(rng: np.random.Generator) -> float:
    n = int(rng.integers(2, 6))
    d_in = int(rng.integers(3, 8))
    d_out = int(rng.integers(3, 8))
    inputs = rng.normal(size=(n, d_in))
    weight = rng.normal(size=(d_out, d_in))
    probe = rng.normal(size=(n, d_out))

    _, cache = entities.appearance_forward(inputs, EncoderParams(weight=weight))
    analytic = entities.appearance_backward(probe, cache)

    def f(w):
        app, _ = entities.appearance_forward(inputs, EncoderParams(weight=w))
        return float(np.sum(probe * app))

    return relative_error(analytic, finite_difference_grad(f, weight.copy()))


def check_attention(rng: np.random.Generator) -> float:
    n = int(rng.integers(2, 6))
    d_att = int(rng.integers(3, 7))
    d_feat = int(rng.integers(3, 7))
    d_query = int(rng.integers(3, 7))
    use_lang = bool(rng.integers(2))

    features = rng.normal(size=(n, d_feat))
    q_input = rng.normal(size=d_query)
    params = attention.AttentionParams(
        w_query=rng.normal(size=(d_att, d_query)),
        w_key=rng.normal(size=(d_att, d_feat)),
        w_value=rng.normal(size=(d_att, d_feat)),
        w_query_lang=rng.normal(size=(d_att, d_query)) if use_lang else None,
    )
    ids = tuple(range(n))
    v_goal = rng.normal(size=d_att)
    v_weights = rng.normal(size=n)

    def scalar(p, feats, qi):
        goal, _ = attention.attend(qi, feats, ids, p, use_lang_query=use_lang)
        return float(v_goal @ goal.embedding + v_weights @ goal.weights)

    _, cache = attention.attend(q_input, features, ids, params, use_lang_query=use_lang)
    grads = attention.attention_backward(v_goal, cache, params, d_weights=v_weights)

    def with_block(name):
        def f(block):
            kwargs = {
                "w_query": params.w_query, "w_key": params.w_key,
                "w_value": params.w_value, "w_query_lang": params.w_query_lang,
            }
            kwargs[name] = block
            return scalar(attention.AttentionParams(**kwargs), features, q_input)
        return f

    errs = [
        relative_error(grads.d_w_query,
                       finite_difference_grad(
                           with_block("w_query_lang" if use_lang else "w_query"),
                           (params.w_query_lang if use_lang else params.w_query).copy())),
        relative_error(grads.d_w_key, finite_difference_grad(with_block("w_key"), params.w_key.copy())),
        relative_error(grads.d_w_value, finite_difference_grad(with_block("w_value"), params.w_value.copy())),
        relative_error(grads.d_features,
                       finite_difference_grad(lambda fe: scalar(params, fe, q_input), features.copy())),
        relative_error(grads.d_query_input,
                       finite_difference_grad(lambda qi: scalar(params, features, qi), q_input.copy())),
    ]
    return max(errs)


def check_action(rng: np.random.Generator) -> float:
    d = int(rng.integers(2, 7))
    predicted = rng.normal(size=d)
    expert = rng.normal(size=d)

    _, grad = losses.action_loss(predicted, expert)
    fd = finite_difference_grad(
        lambda p: losses.action_loss(p, expert)[0], predicted.copy())
    return relative_error(grad, fd)


def check_contrastive(rng: np.random.Generator) -> float:
    n = int(rng.integers(2, 9))
    d = int(rng.integers(3, 8))
    query = rng.normal(size=d)
    keys = rng.normal(size=(n, d))
    positive = int(rng.integers(n))
    temperature = float(rng.uniform(0.3, 2.0))

    _, d_query, d_keys = losses.contrastive_loss(query, keys, positive, temperature)

    fd_q = finite_difference_grad(
        lambda q: losses.contrastive_loss(q, keys, positive, temperature)[0], query.copy())
    fd_k = finite_difference_grad(
        lambda k: losses.contrastive_loss(query, k, positive, temperature)[0], keys.copy())
    return max(relative_error(d_query, fd_q), relative_error(d_keys, fd_k))


def _policy_instance(rng: np.random.Generator):
    """Random batch + params resampled until clear of the clamp boundaries."""
    t = int(rng.integers(1, 5))
    d_in = int(rng.integers(5, 11))
    hidden = int(rng.integers(4, 9))
    for _ in range(50):
        params = policy.PolicyParams(
            w1=rng.normal(size=(hidden, d_in)),
            b1=rng.normal(size=hidden),
            w2=rng.normal(size=(policy.ACTION_DIM, hidden)),
            b2=rng.normal(size=policy.ACTION_DIM),
        )
        x = rng.normal(size=(t, d_in))
        _, cache = policy.policy_forward_batch(x, params)
        norms = np.linalg.norm(cache.raw[:, :3], axis=1)
        grip = cache.raw[:, 3]
        clear = (np.all(np.abs(norms - policy.MAX_STEP) > 1e-3)
                 and np.all(np.abs(grip) > 1e-3)
                 and np.all(np.abs(grip - 1.0) > 1e-3))
        if clear:
            return x, params
    raise NumericalError("could not sample a policy instance away from clamp boundaries")


def check_policy(rng: np.random.Generator) -> float:
    x, params = _policy_instance(rng)
    probe = rng.normal(size=(x.shape[0], policy.ACTION_DIM))

    _, cache = policy.policy_forward_batch(x, params)
    grads = policy.policy_backward_batch(probe, cache, params)

    def scalar(p, xs):
        out, _ = policy.policy_forward_batch(xs, p)
        return float(np.sum(probe * out))

    def with_block(name):
        def f(block):
            kwargs = {"w1": params.w1, "b1": params.b1, "w2": params.w2, "b2": params.b2}
            kwargs[name] = block
            return scalar(policy.PolicyParams(**kwargs), x)
        return f

    errs = [
        relative_error(grads.d_w1, finite_difference_grad(with_block("w1"), params.w1.copy())),
        relative_error(grads.d_b1, finite_difference_grad(with_block("b1"), params.b1.copy())),
        relative_error(grads.d_w2, finite_difference_grad(with_block("w2"), params.w2.copy())),
        relative_error(grads.d_b2, finite_difference_grad(with_block("b2"), params.b2.copy())),
        relative_error(grads.d_x, finite_difference_grad(lambda xs: scalar(params, xs), x.copy())),
    ]
    return max(errs)


_FAMILY_CHECKS = {
    "encoder": check_encoder,
    "attention": check_attention,
    "action": check_action,
    "contrastive": check_contrastive,
    "policy": check_policy,
}


def run_family_checks(n_instances: int = 100, seed: int = 0,
                      tol: float = DEFAULT_TOL) -> dict[str, dict]:
    """``n_instances`` random instances per family; reports the worst error."""
    report = {}
    for index, (family, check) in enumerate(_FAMILY_CHECKS.items()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x40 + index]))
        worst = 0.0
        for _ in range(n_instances):
            worst = max(worst, check(rng))
        report[family] = {"n_instances": n_instances, "max_rel_error": worst,
                          "tol": tol, "passed": worst < tol}
    return report


# ---------- composed check through the trainer's backward ----------

def _synthetic_episode(rng: np.random.Generator, ablation: str,
                       imitate: bool = True) -> TrainingEpisode:
    n = int(rng.integers(3, 6))
    t = int(rng.integers(2, 5))
    template = GraspTemplate(category="mug")
    from . import pipeline, planner, world
    tokens = ("get", "the", "mug")
    q_input, use_lang = pipeline.query_features(tokens, template, ablation)
    positions = rng.uniform(0.1, 0.9, size=(n, 3))
    positions[:, 2] = 0.0
    raw_inputs = np.concatenate([
        rng.normal(size=(n, entities.ATTR_DIM)) * 0.3 + 0.2,
        positions,
        rng.normal(size=(n, 1)) * 0.1,
    ], axis=1)
    bow = planner.bag_of_words(tokens) if ablation == "language_to_policy" else None
    positive_row = int(rng.integers(n))
    # The positive row matches the template; every other row misses it so the
    # contrastive term always has in-episode negatives to draw.
    class_keys = tuple(
        f"mug/{world.COLORS[int(rng.integers(len(world.COLORS)))]}/small"
        if r == positive_row else
        f"block/{world.COLORS[int(rng.integers(len(world.COLORS)))]}/large"
        for r in range(n))
    return TrainingEpisode(
        scene_id=int(rng.integers(1, 2**31 - 1)),
        tokens=tokens,
        template=template,
        query_input=q_input,
        use_lang=use_lang,
        raw_inputs=raw_inputs,
        positions=positions,
        ids=tuple(range(n)),
        class_keys=class_keys,
        obs=policy.observation_summary(positions),
        bow=bow,
        path=rng.uniform(0.1, 0.9, size=(t, 3)),
        expert=np.concatenate([rng.uniform(-0.08, 0.08, size=(t, 3)),
                               rng.uniform(0.2, 0.8, size=(t, 1))], axis=1),
        positive_row=positive_row,
        corrupted=False,
        imitate=imitate,
    )


def check_composed(seed: int = 0, ablation: str = "full", n_coords: int = 8,
                   eps: float = DEFAULT_EPS) -> dict[str, float]:
    """Spot finite differences against the full batch backward.

    Samples ``n_coords`` coordinates per parameter block of a three-episode
    batch (one contrastive-only, mirroring ambiguous episodes) and compares
    against the assembled analytic gradient, exercising the action loss, the
    contrastive loss and every cross-block path at once. Returns the max
    relative coordinate error per block.
    """
    from . import pipeline

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D]))
    config = TrainConfig(seed=seed, ablation=ablation, contrastive_candidates=4,
                         temperature=0.7)
    batch = [_synthetic_episode(rng, ablation),
             _synthetic_episode(rng, ablation),
             _synthetic_episode(rng, ablation, imitate=False)]
    params = pipeline.init_model(seed, ablation)

    def total_loss() -> float:
        fixed = np.random.default_rng(np.random.SeedSequence([seed, 0x6E]))
        _, act, contrastive = training.batch_losses_and_grads(params, batch, config, fixed)
        return act + config.effective_contrastive_weight * contrastive

    fixed = np.random.default_rng(np.random.SeedSequence([seed, 0x6E]))
    grads, _, _ = training.batch_losses_and_grads(params, batch, config, fixed)

    blocks = training.param_blocks(params)
    report = {}
    for name, grad in grads.items():
        block = blocks[name]
        flat = block.ravel()
        grad_flat = grad.ravel()
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = total_loss()
            flat[c] = orig - eps
            lo = total_loss()
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(grad_flat[c]), abs(numeric), 1e-6)
            worst = max(worst, abs(grad_flat[c] - numeric) / denom)
        report[name] = worst
    return report
