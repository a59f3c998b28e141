"""Token self-attention blocks.

Each block runs, per head: Q/K pointwise projections of the input plus a
sinusoidal positional encoding over the token index, values taken as an
unprojected channel slice of the input, and a bounded score map

    scores = alpha * tanh(Q K^T / sqrt(c_beta)) + M

with trainable per-head alpha and (U,U) matrix M. Head outputs are
concatenated, passed through a token-axis convolution (kernel k_u) and a
pointwise FFN with residual connections, and finished by temporal
aggregation (kernel k_t along the within-window time axis, plus residual).
"""

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import (BatchNormState, ConfigurationError, Parameter,
                     apply_scores, attention_contract, batchnorm, concat,
                     conv3d_axis, leaky_relu, mul, pointwise_conv3d, tanh)


@dataclass(frozen=True)
class TSABlockConfig:
    c_in: int
    c_out: int
    heads: int
    c_qkv: int
    k_u: int = 3
    k_t: int = 3
    gamma: float = 0.1

    def __post_init__(self):
        if self.c_out not in (self.c_in, 2 * self.c_in):
            raise ConfigurationError(
                f"block output channels must equal or double the input: "
                f"c_in={self.c_in}, c_out={self.c_out}")
        if self.heads < 1 or self.c_in % self.heads:
            raise ConfigurationError(
                f"heads ({self.heads}) must divide input channels ({self.c_in})")
        if self.c_qkv < 1:
            raise ConfigurationError(f"c_qkv must be >= 1, got {self.c_qkv}")
        for k in (self.k_u, self.k_t):
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"conv kernels must be odd and >= 1, got {k}")
        if self.gamma < 0:
            raise ConfigurationError(f"activation slope must be >= 0, got {self.gamma}")

    @property
    def v_channels(self):
        return self.c_in // self.heads


def positional_encoding(c, t_w, s, u, dtype=np.float64):
    """Sinusoid over the token index, channel-dependent wavelength, constant
    over the within-token axes. pe[c] = sin(u/10000^(c/C)) for even c,
    cos(u/10000^((c-1)/C)) for odd c."""
    pe = np.zeros((c, u), dtype=np.float64)
    pos = np.arange(u, dtype=np.float64)
    for ch in range(c):
        exponent = (ch if ch % 2 == 0 else ch - 1) / c
        angle = pos / (10000.0 ** exponent)
        pe[ch] = np.sin(angle) if ch % 2 == 0 else np.cos(angle)
    return np.broadcast_to(pe[:, None, None, :], (c, t_w, s, u)).astype(dtype)


def _init_conv(rng, c_out, c_in, k=None):
    fan_in = c_in * (k if k else 1)
    bound = 1.0 / np.sqrt(fan_in)
    shape = (c_out, c_in, k) if k else (c_out, c_in)
    return rng.uniform(-bound, bound, size=shape)


class TSABlockParams:
    """Trainable state of one block; parameter names encode block and head
    indices for checkpoint round-trips."""

    def __init__(self, config, num_tokens, rng=None, dtype=np.float32, name="block"):
        self.config = config
        self.num_tokens = num_tokens
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg = config
        self.q_weights, self.q_biases = [], []
        self.k_weights, self.k_biases = [], []
        self.alphas, self.ms = [], []
        for h in range(cfg.heads):
            self.q_weights.append(Parameter(f"{name}.head{h}.q_weight",
                                            _init_conv(rng, cfg.c_qkv, cfg.c_in), dtype=dtype))
            self.q_biases.append(Parameter(f"{name}.head{h}.q_bias",
                                           np.zeros(cfg.c_qkv), dtype=dtype))
            self.k_weights.append(Parameter(f"{name}.head{h}.k_weight",
                                            _init_conv(rng, cfg.c_qkv, cfg.c_in), dtype=dtype))
            self.k_biases.append(Parameter(f"{name}.head{h}.k_bias",
                                           np.zeros(cfg.c_qkv), dtype=dtype))
            # tanh-dominated start: zero M, unit balance factor
            self.alphas.append(Parameter(f"{name}.head{h}.alpha", np.ones(()), dtype=dtype))
            self.ms.append(Parameter(f"{name}.head{h}.m",
                                     np.zeros((num_tokens, num_tokens)), dtype=dtype))

        self.ffn_conv_weight = Parameter(f"{name}.ffn_conv.weight",
                                         _init_conv(rng, cfg.c_out, cfg.c_in, cfg.k_u), dtype=dtype)
        self.ffn_conv_bias = Parameter(f"{name}.ffn_conv.bias", np.zeros(cfg.c_out), dtype=dtype)
        self.ffn_norm = BatchNormState(f"{name}.ffn_norm", cfg.c_out, dtype=dtype)
        self.ffn_pw_weight = Parameter(f"{name}.ffn_pw.weight",
                                       _init_conv(rng, cfg.c_out, cfg.c_out), dtype=dtype)
        self.ffn_pw_bias = Parameter(f"{name}.ffn_pw.bias", np.zeros(cfg.c_out), dtype=dtype)
        if cfg.c_out != cfg.c_in:
            self.res_weight = Parameter(f"{name}.res.weight",
                                        _init_conv(rng, cfg.c_out, cfg.c_in), dtype=dtype)
            self.res_bias = Parameter(f"{name}.res.bias", np.zeros(cfg.c_out), dtype=dtype)
        else:
            self.res_weight = None
            self.res_bias = None
        self.ta_weight = Parameter(f"{name}.ta.weight",
                                   _init_conv(rng, cfg.c_out, cfg.c_out, cfg.k_t), dtype=dtype)
        self.ta_bias = Parameter(f"{name}.ta.bias", np.zeros(cfg.c_out), dtype=dtype)
        self.ta_norm = BatchNormState(f"{name}.ta_norm", cfg.c_out, dtype=dtype)

    def parameters(self):
        params = []
        for h in range(self.config.heads):
            params += [self.q_weights[h], self.q_biases[h],
                       self.k_weights[h], self.k_biases[h],
                       self.alphas[h], self.ms[h]]
        params += [self.ffn_conv_weight, self.ffn_conv_bias]
        params += self.ffn_norm.parameters()
        params += [self.ffn_pw_weight, self.ffn_pw_bias]
        if self.res_weight is not None:
            params += [self.res_weight, self.res_bias]
        params += [self.ta_weight, self.ta_bias]
        params += self.ta_norm.parameters()
        return params

    def buffers(self):
        return self.ffn_norm.buffers() + self.ta_norm.buffers()

    def c_beta(self, t_w, s):
        # per-head feature length: T_w * J_w * E_w * c_qkv, with S = J_w*E_w
        return t_w * s * self.config.c_qkv


def qkv_project(x, params, h):
    """Per-head Q/K projections of (input + positional encoding); V is the
    h-th unprojected channel slice of the input."""
    x = engine.astensor(x)
    batched = x.ndim == 5
    c, t_w, s, u = x.shape[1:] if batched else x.shape
    pe = positional_encoding(c, t_w, s, u, dtype=x.dtype)
    xpe = engine.add(x, engine.Tensor(pe))
    q = pointwise_conv3d(xpe, params.q_weights[h], params.q_biases[h])
    k = pointwise_conv3d(xpe, params.k_weights[h], params.k_biases[h])
    vc = params.config.v_channels
    sl = (slice(None), slice(h * vc, (h + 1) * vc)) if batched else slice(h * vc, (h + 1) * vc)
    v = x[sl]
    return q, k, v


def attention_scores(q, k, alpha, m, c_beta):
    """scores = alpha * tanh(QK^T / sqrt(c_beta)) + M.

    The tanh range keeps every entry within +-|alpha| of M; the final
    rounding of the addition is corrected by at most one ulp so the bound
    also holds exactly in floating point.
    """
    gram = attention_contract(q, k)
    scaled = mul(gram, 1.0 / np.sqrt(c_beta))
    raw = engine.add(mul(tanh(scaled), alpha), m)
    return _clamp_to_band(raw, m.data if isinstance(m, engine.Tensor) else np.asarray(m),
                          abs(float(alpha.data if isinstance(alpha, engine.Tensor) else alpha)))


def _clamp_to_band(scores, center, radius):
    """Nudge entries of `scores` toward `center` (by ulps) until
    |scores - center| <= radius holds in float; identity for gradients."""
    data = np.array(scores.data)
    over = np.abs(data - center) > radius
    while over.any():
        data[over] = np.nextafter(data[over],
                                  np.broadcast_to(center, data.shape)[over])
        over = np.abs(data - center) > radius
    return engine._make(data, (scores,), lambda g: (g,))


def temporal_aggregate(x, weight, bias, k_t):
    """Convolution along the within-window time axis plus identity residual."""
    return engine.add(conv3d_axis(x, weight, bias, axis="T", k=k_t), x)


def tsa_block_forward(x, params, config, mode, score_sink=None):
    """One block: multi-head scores on values, head concat, token-axis FFN
    with residuals, then temporal aggregation. Accepts (C,T_w,S,U) or a
    batched (N,C,T_w,S,U) input; output has c_out channels, other axes kept.

    If `score_sink` is a list, the per-head score arrays are appended to it
    (for attention export).
    """
    x = engine.astensor(x)
    batched = x.ndim == 5
    t_w, s = (x.shape[2], x.shape[3]) if batched else (x.shape[1], x.shape[2])
    cb = params.c_beta(t_w, s)
    ch_axis = 1 if batched else 0

    heads = []
    for h in range(config.heads):
        q, k, v = qkv_project(x, params, h)
        scores = attention_scores(q, k, params.alphas[h], params.ms[h], cb)
        if score_sink is not None:
            score_sink.append(np.array(scores.data))
        heads.append(apply_scores(scores, v))
    xh = concat(heads, axis=ch_axis) if len(heads) > 1 else heads[0]

    # token-axis convolution, normalized and activated
    xhat = conv3d_axis(xh, params.ffn_conv_weight, params.ffn_conv_bias,
                       axis="U", k=config.k_u)
    xhat = leaky_relu(batchnorm(xhat, params.ffn_norm, mode), config.gamma)

    if params.res_weight is not None:
        res = pointwise_conv3d(x, params.res_weight, params.res_bias)
    else:
        res = x
    ffn_in = engine.add(xhat, res)
    xacc = engine.add(pointwise_conv3d(ffn_in, params.ffn_pw_weight, params.ffn_pw_bias), res)

    out = temporal_aggregate(xacc, params.ta_weight, params.ta_bias, config.k_t)
    return leaky_relu(batchnorm(out, params.ta_norm, mode), config.gamma)
