"""Desk-scale decoder-only attention layer over signed-measure signals.

Sequences live as (d, T) matrices whose column t-1 is the signal at
position t. Causality is structural: every per-position computation only
ever slices columns 1..t. No training, no dropout, no caching; this module
exercises the layer map itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hmm import validate_tokens

DEFAULT_ELL_MAX = 10000.0

# Variance at or below this triggers the epsilon-regularized layernorm branch.
LAYERNORM_DEGENERATE_VAR = 1e-12
LAYERNORM_EPS = 1e-5


@dataclass(frozen=True)
class PositionalEncoding:
    """Sinusoidal position signals: values[x, t-1] encodes position t."""

    values: np.ndarray
    ell_max: float = DEFAULT_ELL_MAX


def positional_encoding(d: int, T: int, ell_max: float = DEFAULT_ELL_MAX) -> PositionalEncoding:
    """Rows 2i-1 / 2i (1-based) are sin / cos at frequency ell_max^(-2i/d), t = 1..T.

    d must be even; the frequencies sweep a wide range of scales as i runs
    over 1..d/2. All entries lie in [-1, 1].
    """
    if d < 2 or d % 2 != 0:
        raise ValueError(f"sinusoidal encoding needs even d >= 2, got {d}")
    W = np.zeros((d, T))
    ts = np.arange(1, T + 1, dtype=float)
    for i in range(1, d // 2 + 1):
        freq = ell_max ** (-2.0 * i / d)
        W[2 * i - 2] = np.sin(freq * ts)
        W[2 * i - 1] = np.cos(freq * ts)
    return PositionalEncoding(values=W, ell_max=ell_max)


def embed_sequence(emb: np.ndarray, pe: PositionalEncoding, z) -> np.ndarray:
    """Column t-1 of the output is emb[:, z_t] + positional column t-1."""
    emb = np.asarray(emb, dtype=float)
    z = validate_tokens(z, emb.shape[1] - 1)
    if len(z) > pe.values.shape[1]:
        raise ValueError(f"path length {len(z)} exceeds encoded horizon {pe.values.shape[1]}")
    cols = emb[:, list(z)] + pe.values[:, : len(z)]
    return cols


@dataclass(frozen=True)
class AttentionHeadParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray

    def __post_init__(self):
        W_Q = np.asarray(self.W_Q, dtype=float)
        W_K = np.asarray(self.W_K, dtype=float)
        W_V = np.asarray(self.W_V, dtype=float)
        if W_Q.shape != W_K.shape:
            raise ValueError(f"W_Q {W_Q.shape} and W_K {W_K.shape} must agree")
        if W_V.shape[1] != W_Q.shape[1]:
            raise ValueError("W_V and W_Q must share the input dimension")
        for name, arr in (("W_Q", W_Q), ("W_K", W_K), ("W_V", W_V)):
            object.__setattr__(self, name, arr)

    @property
    def d_K(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_V(self) -> int:
        return self.W_V.shape[0]


@dataclass(frozen=True)
class FeedForwardParams:
    """Affine, nonlinearity, affine; the nonlinearity is a config knob."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "gelu"

    def __call__(self, y: np.ndarray) -> np.ndarray:
        h = np.asarray(self.W1) @ y + np.asarray(self.b1)
        if self.activation == "gelu":
            # tanh form of the smooth gate
            h = 0.5 * h * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (h + 0.044715 * h**3)))
        elif self.activation == "tanh":
            h = np.tanh(h)
        elif self.activation == "relu":
            h = np.maximum(h, 0.0)
        else:
            raise ValueError(f"unknown activation {self.activation!r}")
        return np.asarray(self.W2) @ h + np.asarray(self.b2)


@dataclass(frozen=True)
class MiscToggles:
    """Per-op switches for the stabilization tail after attention."""

    residual: bool = False
    layernorm: bool = False
    ffn: bool = False

    def any(self) -> bool:
        return self.residual or self.layernorm or self.ffn


@dataclass(frozen=True)
class LayerParams:
    heads: tuple[AttentionHeadParams, ...]
    W_O: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    ffn: FeedForwardParams | None = None
    misc: MiscToggles = field(default_factory=MiscToggles)

    def __post_init__(self):
        heads = tuple(self.heads)
        if not heads:
            raise ValueError("at least one attention head is required")
        W_O = np.asarray(self.W_O, dtype=float)
        d = W_O.shape[0]
        if W_O.shape != (d, d):
            raise ValueError(f"W_O must be square, got {W_O.shape}")
        d_V = heads[0].d_V
        if any(h.d_V != d_V for h in heads):
            raise ValueError("all heads must share d_V")
        if d_V * len(heads) != d:
            raise ValueError(f"n_head * d_V = {len(heads) * d_V} must equal d = {d}")
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "W_O", W_O)
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))

    @property
    def d(self) -> int:
        return self.W_O.shape[0]

    @property
    def n_head(self) -> int:
        return len(self.heads)


def attention_weights(head: AttentionHeadParams, sigmas: np.ndarray) -> np.ndarray:
    """Softmax over s = 1..t of q_t . k_s / sqrt(d_K); query is the last column.

    Max-subtracted for stability; the output is a probability vector over
    the visible positions.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.ndim != 2 or sigmas.shape[1] < 1:
        raise ValueError(f"need a (d, t) block with t >= 1, got shape {sigmas.shape}")
    q = head.W_Q @ sigmas[:, -1]
    logits = (head.W_K @ sigmas).T @ q / np.sqrt(head.d_K)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def head_output(head: AttentionHeadParams, sigmas: np.ndarray) -> np.ndarray:
    """Value projection of the attention-weighted average of the visible columns."""
    alpha = attention_weights(head, sigmas)
    return head.W_V @ (np.asarray(sigmas) @ alpha)


def _attention_only(params: LayerParams, sigmas: np.ndarray, t: int) -> np.ndarray:
    block = sigmas[:, :t]
    concat = np.concatenate([head_output(h, block) for h in params.heads])
    return params.W_O @ concat


def layer_norm(y: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """gamma * (y - mean) / std + beta, with population std over the d entries.

    A near-zero variance falls back to sqrt(var + eps) so constant inputs
    normalize to zero rather than dividing by zero; elsewhere the plain
    root keeps the normalized output at exactly unit standard deviation.
    """
    y = np.asarray(y, dtype=float)
    mean = y.mean()
    var = np.mean((y - mean) ** 2)
    if var <= LAYERNORM_DEGENERATE_VAR:
        denom = np.sqrt(var + LAYERNORM_EPS)
    else:
        denom = np.sqrt(var)
    return gamma * ((y - mean) / denom) + beta


def layer_forward(params: LayerParams, sigmas: np.ndarray) -> np.ndarray:
    """One layer: causal multi-head attention, then the enabled misc ops per position.

    Misc order: residual add, layernorm, feed-forward with residual,
    layernorm. Every output column depends only on input columns at or
    before it.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    d, T = sigmas.shape
    if d != params.d:
        raise ValueError(f"input dimension {d} does not match parameters ({params.d})")
    out = np.zeros_like(sigmas)
    for t in range(1, T + 1):
        y = _attention_only(params, sigmas, t)
        if params.misc.residual:
            y = y + sigmas[:, t - 1]
        if params.misc.layernorm:
            y = layer_norm(y, params.gamma, params.beta)
        if params.misc.ffn:
            if params.ffn is None:
                raise ValueError("ffn toggle is on but no feed-forward parameters were given")
            y = y + params.ffn(y)
        if params.misc.layernorm:
            y = layer_norm(y, params.gamma, params.beta)
        out[:, t - 1] = y
    return out


def simplified_form(params: LayerParams, sigmas: np.ndarray, t: int, f: np.ndarray) -> float:
    """Bilinear form sum_{s<=t} sigma_s . y_s(t) of the attention-only layer.

    y_s(t) = sum_h alpha(s; t, h) (L_h)^T f with L_h the W_O block column
    times W_V of head h. Equals f . (layer output at position t) when the
    misc ops are disabled, which is required here.
    """
    if params.misc.any():
        raise ValueError("the bilinear form describes the attention map alone; disable misc ops")
    sigmas = np.asarray(sigmas, dtype=float)
    f = np.asarray(f, dtype=float)
    if not 1 <= t <= sigmas.shape[1]:
        raise ValueError(f"position {t} outside 1..{sigmas.shape[1]}")
    block = sigmas[:, :t]
    d_V = params.heads[0].d_V
    total = 0.0
    for h, head in enumerate(params.heads):
        L_h = params.W_O[:, h * d_V : (h + 1) * d_V] @ head.W_V
        alpha = attention_weights(head, block)
        proj = L_h.T @ f
        for s in range(t):
            total += alpha[s] * float(block[:, s] @ proj)
    return total


def unembed(emb: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Softmax over tokens of the logits sigma . emb(:, z)."""
    logits = np.asarray(sigma, dtype=float) @ np.asarray(emb, dtype=float)
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


def predictions(emb: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """(m+1, T) table of per-position next-token distributions."""
    sigmas = np.asarray(sigmas, dtype=float)
    return np.stack([unembed(emb, sigmas[:, t]) for t in range(sigmas.shape[1])], axis=1)


def layer_stack(params: LayerParams, sigmas: np.ndarray, n_layers: int) -> list[np.ndarray]:
    """Repeat one layer n_layers times; returns [input, after layer 1, ...]."""
    if n_layers < 1:
        raise ValueError(f"need n_layers >= 1, got {n_layers}")
    outs = [np.asarray(sigmas, dtype=float)]
    for _ in range(n_layers):
        outs.append(layer_forward(params, outs[-1]))
    return outs


def random_layer_params(
    rng: np.random.Generator,
    d: int,
    n_head: int,
    d_K: int | None = None,
    activation: str = "gelu",
    misc: MiscToggles | None = None,
) -> LayerParams:
    """Seeded Gaussian parameters scaled by 1/sqrt(d) for reproducible demos."""
    if d % n_head != 0:
        raise ValueError(f"n_head = {n_head} must divide d = {d}")
    d_V = d // n_head
    d_K = d_V if d_K is None else d_K
    scale = 1.0 / np.sqrt(d)
    heads = tuple(
        AttentionHeadParams(
            W_Q=scale * rng.standard_normal((d_K, d)),
            W_K=scale * rng.standard_normal((d_K, d)),
            W_V=scale * rng.standard_normal((d_V, d)),
        )
        for _ in range(n_head)
    )
    hidden = 4 * d
    ffn = FeedForwardParams(
        W1=scale * rng.standard_normal((hidden, d)),
        b1=np.zeros(hidden),
        W2=scale * rng.standard_normal((d, hidden)),
        b2=np.zeros(d),
        activation=activation,
    )
    return LayerParams(
        heads=heads,
        W_O=scale * rng.standard_normal((d, d)),
        gamma=np.ones(d),
        beta=np.zeros(d),
        ffn=ffn,
        misc=misc or MiscToggles(),
    )
