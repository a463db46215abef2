"""Matrix capsules: votes, capsule pooling, EM routing and attention routing.

Shape conventions (``...`` is any leading index space, e.g. batch x time x
rows x cols):

* poses ``(..., I, 4, 4)``, activations ``(..., I)``
* votes ``(..., I, J, 4, 4)``
* assignments ``(..., I, J)``
* fitted means / variances ``(..., J, 16)``, output activations ``(..., J)``
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor

POSE_DIM = 16
ROLES = ("key", "value", "query", "plain")
_LOG_2PI = math.log(2.0 * math.pi)
_TINY = 1e-300
# Output types with less routed mass than this count as empty; 1/mass enters the
# gradient of mu, which overflows for denormal masses.
MASS_FLOOR = 1e-10


@dataclass
class CapsuleGrid:
    poses: Tensor
    activations: Tensor

    def __post_init__(self):
        self.poses = T.as_tensor(self.poses)
        self.activations = T.as_tensor(self.activations)
        if self.poses.shape[-2:] != (4, 4) or self.poses.shape[:-2] != self.activations.shape:
            raise DimensionError(
                f"pose shape {self.poses.shape} does not match activation shape {self.activations.shape}")
        a = self.activations.data
        if a.size and (np.nanmin(a) < 0.0 or np.nanmax(a) > 1.0):
            raise ContractError("capsule activations must lie in [0, 1]")

    @property
    def types(self):
        return self.activations.shape[-1]

    @property
    def index_shape(self):
        return self.activations.shape[:-1]


@dataclass
class TransformationWeights:
    """One 4x4 transform per (input type, output type) for each role."""

    tables: Dict[str, Tensor] = field(default_factory=dict)

    def table(self, role):
        if role not in self.tables:
            raise ConfigurationError(f"no transformation weights for role {role!r}")
        return self.tables[role]

    @classmethod
    def init(cls, rng, n_in, n_out, roles, noise=0.01, n_in_by_role=None):
        """Identity plus Gaussian noise so that initial votes approximate poses."""
        tables = {}
        for role in roles:
            ni = (n_in_by_role or {}).get(role, n_in)
            w = np.tile(np.eye(4), (ni, n_out, 1, 1)) + noise * rng.standard_normal((ni, n_out, 4, 4))
            tables[role] = T.parameter(w, name=f"W_{role}")
        return cls(tables)


@dataclass
class VoteTensor:
    votes: Tensor
    role: str = "plain"

    @property
    def n_in(self):
        return self.votes.shape[-4]

    @property
    def n_out(self):
        return self.votes.shape[-3]


@dataclass(frozen=True)
class RoutingConfig:
    iterations: int = 3
    lambdas: Tuple[float, ...] = (0.5, 1.0, 2.0)
    sigma_floor: float = 1e-6
    beta_a: Optional[Tensor] = None
    beta_u: Optional[Tensor] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("routing needs at least one iteration")
        if len(self.lambdas) != self.iterations:
            raise ConfigurationError(
                f"lambda schedule has {len(self.lambdas)} entries for {self.iterations} iterations")
        if any(l <= 0 for l in self.lambdas) or any(b < a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ConfigurationError("lambda schedule must be positive and non-decreasing")
        if self.sigma_floor <= 0:
            raise ConfigurationError("sigma_floor must be positive")

    def with_betas(self, beta_a, beta_u):
        return replace(self, beta_a=beta_a, beta_u=beta_u)

    def betas(self, n_out):
        ba = self.beta_a if self.beta_a is not None else Tensor(np.zeros(n_out))
        bu = self.beta_u if self.beta_u is not None else Tensor(np.zeros(n_out))
        if ba.shape != (n_out,) or bu.shape != (n_out,):
            raise ConfigurationError(f"beta parameters must have shape ({n_out},)")
        return ba, bu


def _flat_votes(v):
    v = v.votes if isinstance(v, VoteTensor) else T.as_tensor(v)
    if v.shape[-2:] == (4, 4):
        v = v.reshape(v.shape[:-2] + (POSE_DIM,))
    return v


def compute_votes(capsules, weights, role):
    """``V_ij = M_i W_ij`` for every (input type i, output type j)."""
    w = weights.table(role) if isinstance(weights, TransformationWeights) else T.as_tensor(weights)
    if w.ndim != 4 or w.shape[-2:] != (4, 4):
        raise ConfigurationError(f"weights for role {role!r} must be (I, J, 4, 4), got {w.shape}")
    if w.shape[0] != capsules.types:
        raise ConfigurationError(
            f"weights for role {role!r} cover {w.shape[0]} input types, capsules have {capsules.types}")
    m = T.expand_dims(capsules.poses, -3)  # (..., I, 1, 4, 4)
    return VoteTensor(T.matmul(m, w), role)


def capsule_pool(x, axis, valid=None):
    """Arithmetic mean over a receptive-field axis.

    ``valid`` optionally marks which field entries exist; it must broadcast
    against ``x``. Padding entries are excluded from the mean.
    Works on Tensors, VoteTensors and CapsuleGrids.
    """
    if isinstance(x, VoteTensor):
        return VoteTensor(capsule_pool(x.votes, axis, valid), x.role)
    if isinstance(x, CapsuleGrid):
        pa = axis % x.activations.ndim
        return CapsuleGrid(capsule_pool(x.poses, pa, valid), capsule_pool(x.activations, pa, valid))
    x = T.as_tensor(x)
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise ContractError("capsule pooling over an empty receptive field")
    if valid is None:
        return T.mean(x, ax)
    w = np.asarray(valid, dtype=np.float64)
    w = w.reshape((1,) * (x.ndim - w.ndim) + w.shape)
    count = w.sum(axis=ax, keepdims=True)
    if np.any(count == 0):
        raise ContractError("capsule pooling over an empty receptive field")
    return T.tsum(T.mul(x, w / count), ax)


def m_step(R, a_in, votes, cfg, lam=None, j=None):
    """Fit one Gaussian per output type from weighted votes.

    Returns ``(mu, var, a)`` with ``var`` the per-dimension variance (floored
    at ``cfg.sigma_floor``). Output types that receive no mass get ``a = 0``
    and ``mu = 0`` (mass below ``MASS_FLOOR`` counts as none). ``j`` selects
    a single output type.
    """
    R, a_in = T.as_tensor(R), T.as_tensor(a_in)
    V = _flat_votes(votes)
    n_out = V.shape[-2]
    beta_a, beta_u = cfg.betas(n_out)
    lam = cfg.lambdas[-1] if lam is None else lam
    if np.any(R.data < 0):
        raise ContractError("assignments must be nonnegative")
    rp = R * T.expand_dims(a_in, -1)  # (..., I, J)
    mass = T.tsum(rp, -2)  # (..., J)
    live = mass.data > MASS_FLOOR
    safe = T.where(live, mass, 1.0)
    w = T.expand_dims(rp / T.expand_dims(safe, -2), -1)  # (..., I, J, 1)
    mu = T.tsum(w * V, -3)  # (..., J, H)
    dev = V - T.expand_dims(mu, -3)
    var = T.clamp(T.tsum(w * T.square(dev), -3), lo=cfg.sigma_floor)
    cost = (T.expand_dims(beta_u, -1) + 0.5 * T.log(var)) * T.expand_dims(mass, -1)
    a = T.sigmoid(lam * (beta_a - T.tsum(cost, -1)))
    a = T.where(live, a, 0.0)
    mu = T.where(live[..., None], mu, 0.0)
    var = T.where(live[..., None], var, cfg.sigma_floor)
    if j is not None:
        return mu[..., j, :], var[..., j, :], a[..., j]
    return mu, var, a


def e_step(mu, var, a_out, votes):
    """Posterior assignment of each input capsule to each output type."""
    mu, var, a_out = T.as_tensor(mu), T.as_tensor(var), T.as_tensor(a_out)
    V = _flat_votes(votes)
    if np.any(var.data <= 0):
        raise ContractError("variances must be positive")
    dev = V - T.expand_dims(mu, -3)  # (..., I, J, H)
    quad = T.square(dev) / T.expand_dims(var, -3)
    logp = -0.5 * T.tsum(quad + T.expand_dims(T.log(var), -3) + _LOG_2PI, -1)  # (..., I, J)
    logits = logp + T.expand_dims(T.log(T.clamp(a_out, lo=_TINY)), -2)
    R = T.softmax(logits, -1)
    dead = np.all(a_out.data == 0, axis=-1)
    if np.any(dead):
        R = T.where(np.broadcast_to(dead[..., None, None], R.shape), 1.0 / R.shape[-1], R)
    return R


def em_routing(a_in, votes, cfg):
    """EM routing-by-agreement; returns the routed higher-level capsules."""
    a_in = T.as_tensor(a_in)
    V = _flat_votes(votes)
    n_in, n_out = V.shape[-3], V.shape[-2]
    if a_in.shape[-1] != n_in:
        raise DimensionError(f"{a_in.shape[-1]} input activations for {n_in} vote rows")
    R = Tensor(np.full(V.shape[:-1], 1.0 / n_out))
    for it in range(cfg.iterations):
        mu, var, a = m_step(R, a_in, V, cfg, lam=cfg.lambdas[it])
        if it < cfg.iterations - 1:
            R = e_step(mu, var, a, V)
    return CapsuleGrid(mu.reshape(mu.shape[:-1] + (4, 4)), a)


def vote_distance(query_poses, key_votes):
    """Squared Euclidean distance between each key vote and its target query capsule."""
    q = T.as_tensor(query_poses)
    q = q.reshape(q.shape[:-2] + (POSE_DIM,)) if q.shape[-2:] == (4, 4) else q
    k = _flat_votes(key_votes)
    if k.shape[-2:] != q.shape[-2:]:
        raise DimensionError(f"query poses {q.shape} do not align with key votes {k.shape}")
    return T.tsum(T.square(k - T.expand_dims(q, -3)), -1)


def assignment_from_distance(query_poses, key_votes):
    """Softmax over output types of negative vote distances."""
    return T.softmax(-vote_distance(query_poses, key_votes), -1)


def attention_routing(video, frame, weights, cfg, query_cfg=None):
    """Condition video capsules on frame capsules.

    Key and value votes come from the video capsules, query votes from the
    frame capsules. The query votes are EM-routed into higher-level query
    capsules; each video capsule then distributes its value vote over output
    types by distance between its key vote and the routed query pose, and a
    final M-step (inverse temperature ``cfg.lambdas[-1]``) forms the
    conditioned capsules. ``query_cfg`` carries the query routing betas.
    """
    if video.index_shape != frame.index_shape:
        raise DimensionError(
            f"video index space {video.index_shape} differs from frame index space {frame.index_shape}; "
            "tile frame capsules first")
    vk = compute_votes(video, weights, "key")
    vv = compute_votes(video, weights, "value")
    vq = compute_votes(frame, weights, "query")
    if not (vk.n_out == vv.n_out == vq.n_out):
        raise ConfigurationError(
            f"output type counts differ: key {vk.n_out}, value {vv.n_out}, query {vq.n_out}")
    query = em_routing(frame.activations, vq, query_cfg or cfg)
    R = assignment_from_distance(query.poses, vk)
    mu, _, a = m_step(R, video.activations, vv, cfg)
    return CapsuleGrid(mu.reshape(mu.shape[:-1] + (4, 4)), a)


def concat_routing(video, frame, weights, cfg):
    """Ablation: plain EM routing over the union of video and frame capsules."""
    v1 = compute_votes(video, weights, "plain")
    v2 = compute_votes(frame, weights, "frame_plain" if "frame_plain" in weights.tables else "plain")
    votes = T.concat([v1.votes, v2.votes], axis=-4)
    a_in = T.concat([video.activations, frame.activations], axis=-1)
    return em_routing(a_in, votes, cfg)
