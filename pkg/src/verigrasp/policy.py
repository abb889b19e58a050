"""Fast reactive policy head and the bottleneck audit.

The policy is a two-layer perceptron mapping (grounded goal, observation
summary, gripper position) to a displacement plus grip channel. By design
its input carries no instruction-derived features; language can only reach
it through the attention-pooled goal embedding. The audit below enforces
that claim on recorded episodes, and the language_to_policy ablation
violates it on purpose by appending bag-of-words features.

The observation summary is deliberately coarse (entity count and mean
position): it gives the policy a sense of the table without allowing it to
resolve references on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StaleCacheError, ValidationError
from .world import MAX_STEP, ActionVector

# The grip channel is a threshold on the distance to the decoded target,
# and a single tanh layer can only build a radial function by tiling ridge
# units across directions; the width buys that tiling room.
POLICY_HIDDEN = 128
OBS_DIM = 4
ACTION_DIM = 4  # displacement xyz + grip channel

# Hidden-layer init gains. The displacement field the policy imitates is
# globally linear in the state (execution, not regression, applies the step
# clamp), so half of the tanh units start in their near-linear regime.
# The grip ramp is a radial function of the distance to the decoded target,
# which a linear map of (goal, gripper) cannot express at all; the other
# half start with large pre-activations so their curvature can tile
# |u . (p - g)| ridges into a distance estimate.
POLICY_W1_GAIN_LINEAR = 1.0
POLICY_W1_GAIN_CURVED = 5.0

ALLOWED_INPUT_FIELDS = ("goal", "obs", "gripper")


@dataclass(frozen=True)
class PolicyInput:
    """Named input blocks; ``instruction_bow`` exists only under the
    language_to_policy ablation and is what the audit catches."""

    goal: np.ndarray
    obs: np.ndarray
    gripper: np.ndarray
    instruction_bow: np.ndarray | None = None

    def blocks(self) -> dict[str, np.ndarray]:
        out = {"goal": self.goal, "obs": self.obs, "gripper": self.gripper}
        if self.instruction_bow is not None:
            out["instruction_bow"] = self.instruction_bow
        return out

    def vector(self) -> np.ndarray:
        return np.concatenate(list(self.blocks().values()))


def observation_summary(positions: np.ndarray) -> np.ndarray:
    """Count (scaled) and centroid of the entity positions."""
    if positions.ndim != 2 or positions.shape[0] == 0:
        raise ValidationError("observation summary needs at least one position")
    return np.concatenate([[positions.shape[0] / 6.0], positions.mean(axis=0)])


@dataclass
class PolicyParams:
    w1: np.ndarray  # (POLICY_HIDDEN, in_dim)
    b1: np.ndarray  # (POLICY_HIDDEN,)
    w2: np.ndarray  # (ACTION_DIM, POLICY_HIDDEN)
    b2: np.ndarray  # (ACTION_DIM,)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]


def init_policy(rng: np.random.Generator, in_dim: int) -> PolicyParams:
    w1 = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(POLICY_HIDDEN, in_dim))
    n_linear = POLICY_HIDDEN // 2
    w1[:n_linear] *= POLICY_W1_GAIN_LINEAR
    w1[n_linear:] *= POLICY_W1_GAIN_CURVED
    return PolicyParams(
        w1=w1,
        b1=np.zeros(POLICY_HIDDEN),
        w2=rng.normal(0.0, 1.0 / np.sqrt(POLICY_HIDDEN), size=(ACTION_DIM, POLICY_HIDDEN)),
        b2=np.zeros(ACTION_DIM),
    )


@dataclass
class PolicyCache:
    x: np.ndarray
    hidden: np.ndarray
    raw: np.ndarray  # pre-clamp output (ACTION_DIM,)
    consumed: bool = False


@dataclass
class PolicyGrads:
    d_w1: np.ndarray
    d_b1: np.ndarray
    d_w2: np.ndarray
    d_b2: np.ndarray
    d_x: np.ndarray


def policy_forward(policy_input: PolicyInput, params: PolicyParams) -> tuple[ActionVector, PolicyCache]:
    """Deterministic action from the named input blocks.

    The displacement is norm-clamped to the per-step maximum and the grip
    channel clipped to [0, 1]; with all-zero parameters the action is the
    exact zero action.
    """
    x = policy_input.vector()
    if x.shape[0] != params.in_dim:
        raise ValidationError(
            f"policy input dim {x.shape[0]} does not match params ({params.in_dim})")
    if not np.all(np.isfinite(x)):
        raise ValidationError("policy input contains non-finite values")
    z1 = params.w1 @ x + params.b1
    hidden = np.tanh(z1)
    raw = params.w2 @ hidden + params.b2

    raw_delta = raw[:3]
    norm = float(np.linalg.norm(raw_delta))
    delta = raw_delta if norm <= MAX_STEP else raw_delta * (MAX_STEP / norm)
    grip = float(np.clip(raw[3], 0.0, 1.0))

    action = ActionVector(delta=tuple(float(v) for v in delta), grip=grip)
    return action, PolicyCache(x=x, hidden=hidden, raw=raw)


def policy_backward(d_action: np.ndarray, cache: PolicyCache, params: PolicyParams) -> PolicyGrads:
    """Analytic gradients through the head, including both saturations.

    The norm clamp uses its exact Jacobian; the grip clip passes gradient
    only strictly inside (0, 1).
    """
    if cache.consumed:
        raise StaleCacheError("policy cache already consumed")
    cache.consumed = True

    raw_delta = cache.raw[:3]
    norm = float(np.linalg.norm(raw_delta))
    d_raw = np.zeros(ACTION_DIM)
    if norm <= MAX_STEP:
        d_raw[:3] = d_action[:3]
    else:
        unit = raw_delta / norm
        scale = MAX_STEP / norm
        d_raw[:3] = scale * (d_action[:3] - unit * float(unit @ d_action[:3]))
    if 0.0 < cache.raw[3] < 1.0:
        d_raw[3] = d_action[3]

    d_w2 = np.outer(d_raw, cache.hidden)
    d_b2 = d_raw
    d_hidden = params.w2.T @ d_raw
    d_z1 = d_hidden * (1.0 - cache.hidden**2)
    d_w1 = np.outer(d_z1, cache.x)
    d_b1 = d_z1
    d_x = params.w1.T @ d_z1
    return PolicyGrads(d_w1=d_w1, d_b1=d_b1, d_w2=d_w2, d_b2=d_b2, d_x=d_x)


def action_to_array(action: ActionVector) -> np.ndarray:
    return np.array([*action.delta, action.grip], dtype=float)


# ---------- batched variants used by the trainer ----------

@dataclass
class PolicyBatchCache:
    x: np.ndarray  # (T, in_dim)
    hidden: np.ndarray  # (T, POLICY_HIDDEN)
    raw: np.ndarray  # (T, ACTION_DIM)


def policy_forward_batch(x: np.ndarray, params: PolicyParams) -> tuple[np.ndarray, PolicyBatchCache]:
    """Row-wise version of policy_forward over a (T, in_dim) input matrix.

    Returns the clamped action matrix (T, ACTION_DIM); each row matches the
    single-step forward on the same input to float precision.
    """
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValidationError(f"bad batch input shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("policy input contains non-finite values")
    hidden = np.tanh(x @ params.w1.T + params.b1)
    raw = hidden @ params.w2.T + params.b2

    actions = raw.copy()
    norms = np.linalg.norm(raw[:, :3], axis=1)
    over = norms > MAX_STEP
    if np.any(over):
        actions[over, :3] = raw[over, :3] * (MAX_STEP / norms[over])[:, None]
    actions[:, 3] = np.clip(raw[:, 3], 0.0, 1.0)
    return actions, PolicyBatchCache(x=x, hidden=hidden, raw=raw)


def policy_backward_batch(d_actions: np.ndarray, cache: PolicyBatchCache,
                          params: PolicyParams) -> PolicyGrads:
    """Gradients for policy_forward_batch; sums parameter gradients over rows."""
    raw = cache.raw
    d_raw = np.zeros_like(raw)

    norms = np.linalg.norm(raw[:, :3], axis=1)
    over = norms > MAX_STEP
    d_raw[~over, :3] = d_actions[~over, :3]
    if np.any(over):
        unit = raw[over, :3] / norms[over][:, None]
        inner = np.sum(unit * d_actions[over, :3], axis=1, keepdims=True)
        d_raw[over, :3] = (MAX_STEP / norms[over])[:, None] * (
            d_actions[over, :3] - unit * inner)
    inside = (raw[:, 3] > 0.0) & (raw[:, 3] < 1.0)
    d_raw[inside, 3] = d_actions[inside, 3]

    d_w2 = d_raw.T @ cache.hidden
    d_b2 = d_raw.sum(axis=0)
    d_hidden = d_raw @ params.w2
    d_z1 = d_hidden * (1.0 - cache.hidden**2)
    d_w1 = d_z1.T @ cache.x
    d_b1 = d_z1.sum(axis=0)
    d_x = d_z1 @ params.w1
    return PolicyGrads(d_w1=d_w1, d_b1=d_b1, d_w2=d_w2, d_b2=d_b2, d_x=d_x)


def policy_backward_batch_raw(d_raw: np.ndarray, cache: PolicyBatchCache,
                              params: PolicyParams) -> PolicyGrads:
    """Gradients for the pre-saturation outputs ``cache.raw``.

    Imitation regresses the raw head outputs onto expert actions, which
    always lie inside the clamp region. Training through the clamp instead
    would hit a plateau: the clamp Jacobian zeroes the radial direction
    whenever the raw norm exceeds the cap, so a policy that starts outside
    can never learn to take a sub-maximal final step.
    """
    d_w2 = d_raw.T @ cache.hidden
    d_b2 = d_raw.sum(axis=0)
    d_hidden = d_raw @ params.w2
    d_z1 = d_hidden * (1.0 - cache.hidden**2)
    d_w1 = d_z1.T @ cache.x
    d_b1 = d_z1.sum(axis=0)
    d_x = d_z1 @ params.w1
    return PolicyGrads(d_w1=d_w1, d_b1=d_b1, d_w2=d_w2, d_b2=d_b2, d_x=d_x)


# ---------- bottleneck audit ----------

@dataclass(frozen=True)
class AuditViolation:
    episode_id: int
    step_index: int
    field_path: str


@dataclass(frozen=True)
class AuditReport:
    ok: bool
    violations: tuple[AuditViolation, ...]


def bottleneck_audit(records, allowed: tuple[str, ...] = ALLOWED_INPUT_FIELDS) -> AuditReport:
    """Scan episode records for instruction-derived policy input fields.

    ``records`` is any iterable of episode records whose steps expose a
    ``policy_input`` mapping of field name to values. Every field outside
    the allowlist is reported with its path.
    """
    violations: list[AuditViolation] = []
    for record in records:
        for idx, step in enumerate(record.steps):
            for name in step.policy_input:
                if name not in allowed:
                    violations.append(AuditViolation(
                        episode_id=record.episode_id,
                        step_index=idx,
                        field_path=f"policy_input.{name}",
                    ))
    return AuditReport(ok=not violations, violations=tuple(violations))
