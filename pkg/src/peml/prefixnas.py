"""Differentiable search over prefix-generator architectures.

Each generator layer is a mixture over k candidate operations
(linear -> activation -> dropout -> optional layer norm).  Mixture weights come
from per-layer architecture logits through one of three relaxations:

* ``softmax``  exp(a_j) / sum_m exp(a_m)
* ``gumbel``   softmax((a + G) / tau),  G ~ Gumbel(0, 1)
* ``ste``      hard one-hot of argmax(a) forward, softmax Jacobian backward

After search, :func:`discretize` picks argmax per layer (ties -> lowest index)
and the generator runs single-path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError, ParameterError
from .model import EVAL, Context, PrefixKV
from .simplex import project_simplex

STRATEGIES = ("softmax", "gumbel", "ste")

# (activation, dropout, layer_norm); covers every activation and dropout rate
DEFAULT_CATALOG = (
    ("relu", 0.1, True),
    ("tanh", 0.3, True),
    ("leaky_relu", 0.5, True),
    ("gelu", 0.1, True),
    ("relu", 0.3, False),
    ("tanh", 0.1, False),
)


@dataclass
class SearchSpace:
    n_layers: int = 6
    catalog: tuple = DEFAULT_CATALOG
    allow_skip: bool = False
    allow_reduction: bool = False

    def __post_init__(self):
        self.catalog = tuple(tuple(c) for c in self.catalog)
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")
        if self.k < 2:
            raise ConfigurationError("need at least 2 candidate operations per layer")
        if self.allow_skip or self.allow_reduction:
            raise ConfigurationError("skip connections and reduction cells are excluded from the search")
        for act, p, _ in self.catalog:
            if act not in ad.ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
            if not 0 <= p < 1:
                raise ConfigurationError(f"dropout {p} outside [0, 1)")

    @property
    def k(self) -> int:
        return len(self.catalog)


def catalog(k: int) -> tuple:
    """First ``k`` entries of the activation x dropout x layer-norm cross product,
    ordered so that small k still spreads over activations."""
    if k <= len(DEFAULT_CATALOG):
        return DEFAULT_CATALOG[:k]
    acts = ("relu", "tanh", "leaky_relu", "gelu")
    extra = [(a, p, ln) for ln in (True, False) for p in (0.1, 0.3, 0.5) for a in acts]
    out = list(DEFAULT_CATALOG)
    for c in extra:
        if len(out) == k:
            break
        if c not in out:
            out.append(c)
    if len(out) < k:
        raise ConfigurationError(f"catalog has only {len(out)} distinct operations")
    return tuple(out)


class CandidateOp:
    """linear -> activation -> dropout -> (layer norm); width preserving."""

    def __init__(self, d: int, activation: str, dropout_p: float, layer_norm: bool,
                 rng: np.random.Generator):
        self.activation = activation
        self.dropout_p = float(dropout_p)
        self.layer_norm = bool(layer_norm)
        self.W = Tensor(rng.normal(0, 1 / math.sqrt(d), (d, d)), requires_grad=True)
        self.b = Tensor(np.zeros(d), requires_grad=True)
        self.gain = Tensor(np.ones(d), requires_grad=True) if layer_norm else None
        self.beta = Tensor(np.zeros(d), requires_grad=True) if layer_norm else None

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.W, self.b, self.gain, self.beta) if p is not None]

    def describe(self) -> dict:
        return {"activation": self.activation, "dropout": self.dropout_p, "layer_norm": self.layer_norm}

    def __call__(self, x: Tensor, ctx: Context = EVAL) -> Tensor:
        if x.shape[-1] != self.W.shape[1]:
            raise DimensionError(f"op expects width {self.W.shape[1]}, got input {x.shape}")
        y = ad.add(ad.matmul(x, self.W.T), self.b)
        y = ad.ACTIVATIONS[self.activation](y)
        y = ad.dropout(y, self.dropout_p, ctx.rng(), ctx.training)
        if self.layer_norm:
            y = ad.layer_norm(y, self.gain, self.beta)
        return y


# -- architecture parameters -------------------------------------------------------

class ArchParams:
    """Per-layer architecture parameters.

    ``rows[i]`` holds the parameters of the operations still alive in layer i;
    ``ops[i]`` maps each column to its index in the generator's layer.
    In ``simplex`` parameterization each row lives on the probability simplex
    and is used directly as the mixture weights.
    """

    def __init__(self, rows: list[np.ndarray], parameterization: str = "softmax",
                 ops: list[np.ndarray] | None = None):
        if parameterization not in ("softmax", "simplex"):
            raise ConfigurationError(f"unknown parameterization {parameterization!r}")
        self.parameterization = parameterization
        self.rows = [Tensor(np.asarray(r, dtype=np.float64), requires_grad=True) for r in rows]
        self.ops = [np.arange(len(r)) if ops is None else np.asarray(ops[i]) for i, r in enumerate(rows)]
        self.choices: list[int] | None = None
        if parameterization == "simplex":
            for r in self.rows:
                if (r.data < 0).any() or abs(r.data.sum() - 1) > 1e-10:
                    raise ContractError("simplex parameterization needs rows on the simplex")

    @classmethod
    def uniform(cls, space: SearchSpace, parameterization: str = "softmax") -> "ArchParams":
        k = space.k
        row = np.zeros(k) if parameterization == "softmax" else np.full(k, 1.0 / k)
        return cls([row.copy() for _ in range(space.n_layers)], parameterization)

    @property
    def n_layers(self) -> int:
        return len(self.rows)

    @property
    def discretized(self) -> bool:
        return self.choices is not None

    def parameters(self) -> list[Tensor]:
        return list(self.rows)

    def matrix(self) -> np.ndarray:
        """Dense (n_layers, k_full) view; pruned columns are -inf (softmax) or 0."""
        k = max(int(o.max()) + 1 for o in self.ops)
        fill = -np.inf if self.parameterization == "softmax" else 0.0
        out = np.full((self.n_layers, k), fill)
        for i, (r, o) in enumerate(zip(self.rows, self.ops)):
            out[i, o] = r.data
        return out

    def probabilities(self) -> list[np.ndarray]:
        if self.parameterization == "simplex":
            return [r.data.copy() for r in self.rows]
        out = []
        for r in self.rows:
            e = np.exp(r.data - r.data.max())
            out.append(e / e.sum())
        return out

    def copy(self) -> "ArchParams":
        c = ArchParams([r.data.copy() for r in self.rows], self.parameterization,
                       [o.copy() for o in self.ops])
        c.choices = None if self.choices is None else list(self.choices)
        return c

    def state(self) -> dict:
        return {"parameterization": self.parameterization,
                "rows": [r.data.tolist() for r in self.rows],
                "ops": [o.tolist() for o in self.ops],
                "choices": self.choices}

    @classmethod
    def from_state(cls, state: dict) -> "ArchParams":
        a = cls([np.asarray(r) for r in state["rows"]], state["parameterization"],
                [np.asarray(o, dtype=np.int64) for o in state["ops"]])
        a.choices = state.get("choices")
        return a


# -- relaxations ---------------------------------------------------------------------

def gumbel_noise(k: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(k)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def _ste(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max()
    p = np.exp(z)
    p /= p.sum()
    hard = np.zeros_like(p)
    hard[int(np.argmax(logits.data))] = 1.0
    return ad.custom("ste", hard, (logits,), lambda g: (p * (g - (g * p).sum()),))


def mixture_weights(alpha_row, strategy: str = "softmax", temperature: float = 1.0,
                    rng: np.random.Generator | None = None, noise: np.ndarray | None = None,
                    parameterization: str = "softmax") -> Tensor:
    """Nonnegative mixture weights summing to one for a single layer.

    ``noise`` fixes the Gumbel sample (otherwise drawn from ``rng``).
    """
    row = ad.as_tensor(alpha_row)
    if row.ndim != 1 or row.shape[0] < 1:
        raise DimensionError(f"alpha row must be a vector, got {row.shape}")
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if parameterization == "simplex":
        if strategy != "softmax":
            raise ConfigurationError("simplex parameterization supports the softmax strategy only")
        return row
    if strategy == "softmax":
        return ad.softmax(row)
    if strategy == "ste":
        return _ste(row)
    if temperature <= 0:
        raise ParameterError(f"gumbel temperature must be > 0, got {temperature}")
    if noise is None:
        if rng is None:
            raise ContractError("gumbel strategy needs rng or noise")
        noise = gumbel_noise(row.shape[0], rng)
    return ad.softmax(ad.scale(ad.add(row, noise), 1.0 / temperature))


def mixed_layer_forward(x: Tensor, ops: list[CandidateOp], weights, ctx: Context = EVAL) -> Tensor:
    """Σ_j weights_j · o_j(x)."""
    weights = ad.as_tensor(weights)
    if weights.shape != (len(ops),):
        raise DimensionError(f"{len(ops)} ops but weights of shape {weights.shape}")
    outs = ad.stack([op(x, ctx) for op in ops], axis=0)
    w = ad.reshape(weights, (len(ops),) + (1,) * x.ndim)
    return ad.tsum(ad.mul(outs, w), axis=0)


def entropy_regularizer(alpha: ArchParams) -> Tensor:
    """Σ over layers of the Shannon entropy (nats) of each layer's distribution."""
    terms = []
    for r in alpha.rows:
        if alpha.parameterization == "softmax":
            p = ad.softmax(r)
            terms.append(ad.scale(ad.tsum(ad.mul(p, ad.log_softmax(r))), -1.0))
        else:
            terms.append(_simplex_entropy(r))
    return ad.tsum(ad.stack(terms))


def _simplex_entropy(r: Tensor) -> Tensor:
    p = r.data
    pos = p > 0
    logp = np.where(pos, np.log(np.where(pos, p, 1.0)), 0.0)
    h = -(p * logp).sum()
    # subgradient at 0 clipped to a finite value
    dlog = np.where(pos, logp, math.log(1e-12))
    return ad.custom("entropy", np.asarray(h), (r,), lambda g: (-g * (dlog + 1.0),))


def discretize(alpha: ArchParams) -> list[int]:
    """Argmax per layer (lowest index on ties), as indices into the layer's ops."""
    choices = [int(o[int(np.argmax(r.data))]) for r, o in zip(alpha.rows, alpha.ops)]
    alpha.choices = choices
    return choices


def l1_to_vertex(p: np.ndarray) -> float:
    """‖p − onehot(argmax p)‖₁ for a point p on the simplex, i.e. 2(1 − max p)."""
    return 2.0 * (1.0 - float(np.max(p)))


def discretization_gap(evaluate, alpha_star: ArchParams) -> tuple[list[float], float]:
    """Per-layer ℓ1 distance to the argmax vertex and |loss(relaxed) − loss(discrete)|.

    ``evaluate(weights)`` returns the loss on fixed data given one weight vector
    per layer.
    """
    probs = alpha_star.probabilities()
    hard = [np.eye(len(p))[int(np.argmax(p))] for p in probs]
    l1 = [l1_to_vertex(p) for p in probs]
    return l1, abs(float(evaluate(probs)) - float(evaluate(hard)))


def lipschitz_estimate(evaluate, alpha_star: ArchParams, n_samples: int = 1000,
                       rng: np.random.Generator | None = None, scale: float = 0.05,
                       n_segments: int = 16) -> float:
    """Empirical max |Δloss| / ‖Δweights‖₂ over sampled weight pairs.

    Pairs tile the segment from the relaxed weights to the argmax vertex (so
    the estimate bounds the discretization gap) and add random simplex
    perturbations around points on it.
    """
    rng = rng or np.random.default_rng(0)
    probs = alpha_star.probabilities()
    hard = [np.eye(len(p))[int(np.argmax(p))] for p in probs]

    def point(t):
        return [(1 - t) * p + t * h for p, h in zip(probs, hard)]

    def ratio(a, b):
        dist = math.sqrt(sum(float(((x - y) ** 2).sum()) for x, y in zip(a, b)))
        if dist == 0:
            return 0.0
        return abs(float(evaluate(a)) - float(evaluate(b))) / dist

    best = 0.0
    ts = np.linspace(0, 1, n_segments + 1)
    for t0, t1 in zip(ts[:-1], ts[1:]):
        best = max(best, ratio(point(t0), point(t1)))
    for _ in range(max(0, n_samples - n_segments)):
        a = point(rng.random())
        b = [project_simplex(x + rng.normal(0, scale, x.shape)) for x in a]
        best = max(best, ratio(a, b))
    return best


def prune_weak(alpha: ArchParams, threshold: float, k: int | None = None) -> list[np.ndarray]:
    """Drop ops whose weight falls below ``threshold`` in each layer (in place).

    The argmax op is never removed.  Softmax rows keep their remaining logits
    (softmax renormalizes); simplex rows are re-projected.  Returns, per layer,
    the kept column positions (relative to the pre-pruning row).
    """
    k = k or max(len(r.data) for r in alpha.rows)
    if not 0 < threshold < 1.0 / k:
        raise ParameterError(f"threshold {threshold} must lie in (0, 1/k) = (0, {1.0 / k})")
    kept = []
    probs = alpha.probabilities()
    for i, (r, p) in enumerate(zip(alpha.rows, probs)):
        keep = p >= threshold
        keep[int(np.argmax(p))] = True
        idx = np.nonzero(keep)[0]
        kept.append(idx)
        if len(idx) == len(p):
            continue
        new = r.data[idx]
        if alpha.parameterization == "simplex":
            new = project_simplex(new)
        alpha.rows[i] = Tensor(new, requires_grad=True)
        alpha.ops[i] = alpha.ops[i][idx]
    return kept


# -- generator ---------------------------------------------------------------------------

class PrefixGenerator:
    """Base embedding P (l x d) -> n mixed layers -> output head -> per-block (P_K, P_V)."""

    def __init__(self, d_model: int, n_blocks: int, prefix_length: int, space: SearchSpace,
                 rng: np.random.Generator, head_std: float = 0.1):
        if prefix_length < 0:
            raise ConfigurationError("prefix_length must be >= 0")
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.prefix_length = prefix_length
        self.space = space
        self.P = Tensor(rng.normal(0, 1.0, (prefix_length, d_model)), requires_grad=True)
        self.layers = [[CandidateOp(d_model, a, p, ln, rng) for a, p, ln in space.catalog]
                       for _ in range(space.n_layers)]
        self.W_out = Tensor(rng.normal(0, head_std, (2 * n_blocks * d_model, d_model)), requires_grad=True)
        self.b_out = Tensor(np.zeros(2 * n_blocks * d_model), requires_grad=True)

    def parameters(self, alpha: ArchParams | None = None) -> list[Tensor]:
        """Trainable tensors; with ``alpha`` only the ops still alive are listed."""
        out = [self.P]
        for i, layer in enumerate(self.layers):
            idx = range(len(layer)) if alpha is None else alpha.ops[i]
            if alpha is not None and alpha.discretized:
                idx = [alpha.choices[i]]
            for j in idx:
                out += layer[j].parameters()
        return out + [self.W_out, self.b_out]

    def count(self, alpha: ArchParams | None = None) -> int:
        return sum(p.size for p in self.parameters(alpha))

    def split(self, h: Tensor) -> list[PrefixKV]:
        out = ad.add(ad.matmul(h, self.W_out.T), self.b_out)
        d = self.d_model
        res = []
        for b in range(self.n_blocks):
            k = ad.getitem(out, (slice(None), slice(2 * b * d, (2 * b + 1) * d)))
            v = ad.getitem(out, (slice(None), slice((2 * b + 1) * d, (2 * b + 2) * d)))
            res.append(PrefixKV(k, v))
        return res

    def state(self) -> dict:
        return {"d_model": self.d_model, "n_blocks": self.n_blocks,
                "prefix_length": self.prefix_length, "n_layers": self.space.n_layers,
                "catalog": [list(c) for c in self.space.catalog],
                "tensors": [p.data.tolist() for p in self.parameters()]}

    @classmethod
    def from_state(cls, state: dict) -> "PrefixGenerator":
        space = SearchSpace(state["n_layers"], tuple(tuple(c) for c in state["catalog"]))
        gen = cls(state["d_model"], state["n_blocks"], state["prefix_length"], space,
                  np.random.default_rng(0))
        params = gen.parameters()
        if len(params) != len(state["tensors"]):
            raise DimensionError("generator state does not match its architecture")
        for p, arr in zip(params, state["tensors"]):
            a = np.asarray(arr, dtype=np.float64).reshape(p.shape)
            p.data = a
        return gen


def layer_weights(alpha: ArchParams, strategy: str = "softmax", temperature: float = 1.0,
                  rng: np.random.Generator | None = None) -> list[Tensor]:
    return [mixture_weights(r, strategy, temperature, rng, parameterization=alpha.parameterization)
            for r in alpha.rows]


def generate_prefix(gen: PrefixGenerator, alpha: ArchParams, strategy: str = "softmax",
                    ctx: Context = EVAL, temperature: float = 1.0,
                    gumbel_rng: np.random.Generator | None = None,
                    weights: list | None = None) -> list[PrefixKV]:
    """One unified prefix (per block) shared by every task.

    ``weights`` overrides the per-layer mixture weights (arrays or Tensors
    aligned with ``alpha.rows``).  A discretized ``alpha`` runs single-path.
    """
    if alpha.n_layers != len(gen.layers):
        raise DimensionError(f"alpha has {alpha.n_layers} layers, generator {len(gen.layers)}")
    h = gen.P
    if gen.prefix_length == 0:
        return gen.split(h)
    if weights is None and alpha.discretized:
        for i, layer in enumerate(gen.layers):
            h = layer[alpha.choices[i]](h, ctx)
        return gen.split(h)
    if weights is None:
        weights = layer_weights(alpha, strategy, temperature, gumbel_rng)
    for i, layer in enumerate(gen.layers):
        ops = [layer[j] for j in alpha.ops[i]]
        h = mixed_layer_forward(h, ops, weights[i], ctx)
    return gen.split(h)


def export_architecture(gen: PrefixGenerator, alpha: ArchParams) -> dict:
    """Per-layer chosen op description plus the final probabilities."""
    choices = alpha.choices if alpha.discretized else discretize(alpha.copy())
    layers = []
    for i, (p, o) in enumerate(zip(alpha.probabilities(), alpha.ops)):
        full = np.zeros(len(gen.layers[i]))
        full[o] = p
        layers.append({"layer": i, "op": int(choices[i]), **gen.layers[i][choices[i]].describe(),
                       "probabilities": full.tolist()})
    return {"format_version": 1, "parameterization": alpha.parameterization,
            "prefix_length": gen.prefix_length, "layers": layers}


def save_architecture(gen: PrefixGenerator, alpha: ArchParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(export_architecture(gen, alpha), fh, indent=2, sort_keys=True)
        fh.write("\n")
