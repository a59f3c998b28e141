"""Full network assembly: tokenizer embedding, a chain of token
self-attention blocks, global average pooling and a linear classifier,
plus the loss, optimizer step and schedule used for training.
"""

from dataclasses import dataclass

import numpy as np

from . import engine
from .attention import TSABlockConfig, TSABlockParams, tsa_block_forward
from .engine import (ConfigurationError, Parameter, UsageError,
                     log_softmax, linear)
from .tokenizer import EmbedParams, WindowSpec, embed, entity_rearrange, tokenize


@dataclass
class ModelConfig:
    window: tuple
    in_channels: int
    frames: int
    joints: int
    entities: int
    embed_channels: int
    gamma: float
    blocks: list
    num_classes: int
    frozen_entities: tuple = ()

    def __post_init__(self):
        self.window = tuple(self.window)
        self.blocks = [b if isinstance(b, TSABlockConfig) else TSABlockConfig(**b)
                       for b in self.blocks]
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        prev = self.embed_channels
        for i, b in enumerate(self.blocks):
            if b.c_in != prev:
                raise ConfigurationError(
                    f"block {i} expects c_in={b.c_in} but the chain provides {prev}")
            prev = b.c_out

    @property
    def window_spec(self):
        return WindowSpec(*self.window)

    def u_layout(self):
        return self.window_spec.u_layout(self.frames, self.joints, self.entities)

    def num_tokens(self):
        nt, nj, ne = self.u_layout()
        return nt * nj * ne

    def to_dict(self):
        return {
            "window": list(self.window),
            "in_channels": self.in_channels,
            "frames": self.frames,
            "joints": self.joints,
            "entities": self.entities,
            "embed_channels": self.embed_channels,
            "gamma": self.gamma,
            "blocks": [{"c_in": b.c_in, "c_out": b.c_out, "heads": b.heads,
                        "c_qkv": b.c_qkv, "k_u": b.k_u, "k_t": b.k_t,
                        "gamma": b.gamma} for b in self.blocks],
            "num_classes": self.num_classes,
            "frozen_entities": list(self.frozen_entities),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["frozen_entities"] = tuple(d.get("frozen_entities", ()))
        return cls(**d)


def default_block_plan(embed_channels, depth=6, heads=4, k_u=3, k_t=3, gamma=0.1,
                       double_at=(2, 4)):
    """Channel plan [C',C',2C',2C',4C',4C'] for depth 6; doubling blocks are
    listed by index."""
    blocks = []
    c = embed_channels
    for i in range(depth):
        c_out = 2 * c if i in double_at else c
        blocks.append(TSABlockConfig(c_in=c, c_out=c_out, heads=heads,
                                     c_qkv=max(1, c // 4), k_u=k_u, k_t=k_t,
                                     gamma=gamma))
        c = c_out
    return blocks


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 0.1
    decay_epochs: tuple = (60, 90)
    batch_size: int = 32
    epochs: int = 110
    label_smoothing: float = 0.1
    temperature: float = 1.0
    er_enabled: bool = True
    seed: int = 0
    checkpoint_interval: int = 1

    def __post_init__(self):
        self.decay_epochs = tuple(self.decay_epochs)
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError(
                f"label smoothing must be in [0,1), got {self.label_smoothing}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0,1), got {self.momentum}")

    def to_dict(self):
        d = dict(self.__dict__)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ISTANet:
    """The network: embed -> L TSA blocks -> GAP over (T_w,S,U) -> FC."""

    def __init__(self, config, rng=None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = rng if rng is not None else np.random.default_rng(0)
        u = config.num_tokens()
        self.embed_params = EmbedParams(config.in_channels, config.embed_channels,
                                        config.gamma, rng=rng, dtype=dtype)
        self.blocks = [TSABlockParams(b, u, rng=rng, dtype=dtype, name=f"blocks.{i}")
                       for i, b in enumerate(config.blocks)]
        c_last = config.blocks[-1].c_out if config.blocks else config.embed_channels
        bound = 1.0 / np.sqrt(c_last)
        self.fc_weight = Parameter("fc.weight",
                                   rng.uniform(-bound, bound,
                                               size=(config.num_classes, c_last)),
                                   dtype=dtype)
        self.fc_bias = Parameter("fc.bias", np.zeros(config.num_classes), dtype=dtype)

    def parameters(self):
        params = self.embed_params.parameters()
        for b in self.blocks:
            params += b.parameters()
        params += [self.fc_weight, self.fc_bias]
        names = [p.name for p in params]
        assert len(names) == len(set(names)), "duplicate parameter names"
        return params

    def buffers(self):
        bufs = list(self.embed_params.buffers())
        for b in self.blocks:
            bufs += b.buffers()
        return bufs

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def tokenize_sample(self, seq, mode, rng=None):
        """seq -> raw (C,T_w,S,U) token array; applies ER in train mode."""
        cfg = self.config
        c, t, j, e = seq.data.shape
        if (c, t, j, e) != (cfg.in_channels, cfg.frames, cfg.joints, cfg.entities):
            raise ConfigurationError(
                f"sequence dims {(c, t, j, e)} do not match model config "
                f"{(cfg.in_channels, cfg.frames, cfg.joints, cfg.entities)}")
        if mode == "train":
            if rng is None:
                raise UsageError("train-mode tokenization needs an rng for ER")
            seq = entity_rearrange(seq, rng, enabled=True,
                                   frozen=cfg.frozen_entities)
        tokens, _ = tokenize(seq.data, cfg.window_spec)
        return tokens.astype(self.dtype)

    def forward_tokens(self, tokens, mode, score_sink=None):
        """Raw token array (or batch) -> logits Tensor."""
        x = embed(engine.Tensor(tokens), self.embed_params, mode)
        for params, bcfg in zip(self.blocks, self.config.blocks):
            sink = None
            if score_sink is not None:
                sink = []
                score_sink.append(sink)
            x = tsa_block_forward(x, params, bcfg, mode, score_sink=sink)
        batched = x.ndim == 5
        axes = (2, 3, 4) if batched else (1, 2, 3)
        pooled = x.mean(axis=axes)
        return linear(pooled, self.fc_weight, self.fc_bias)

    def forward_classify(self, seq, mode, rng=None):
        """Single sequence -> logits (num_classes,). ER only in train mode."""
        tokens = self.tokenize_sample(seq, mode, rng=rng)
        return self.forward_tokens(tokens, mode)

    def forward_batch(self, seqs, mode, rng=None):
        tokens = np.stack([self.tokenize_sample(s, mode, rng=rng) for s in seqs])
        return self.forward_tokens(tokens, mode)


def ce_label_smoothing(logits, labels, smoothing, temperature):
    """Cross entropy with smoothed targets over tempered softmax.

    logits: (K,) or (N,K); labels: int or (N,) ints. Returns the mean loss.
    """
    logits = engine.astensor(logits)
    single = logits.ndim == 1
    if single:
        logits = logits.reshape(1, -1)
        labels = np.array([labels])
    else:
        labels = np.asarray(labels)
    n, k = logits.shape
    if (labels < 0).any() or (labels >= k).any():
        raise UsageError(f"labels must lie in [0,{k}), got {labels}")
    logp = log_softmax(engine.mul(logits, 1.0 / temperature), axis=-1)
    target = np.full((n, k), smoothing / k, dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - smoothing
    per_sample = engine.tensor_sum(engine.mul(logp, engine.Tensor(-target)), axis=-1)
    return per_sample.mean()


class NesterovSGD:
    """SGD with Nesterov momentum:  v <- mu*v + g;  w <- w - lr*(g + mu*v)."""

    def __init__(self, params, momentum=0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr):
        mu = self.momentum
        for p in self.params:
            if p.grad is None:
                raise UsageError(f"parameter {p.name} has no gradient; run backward first")
            g = p.grad.astype(p.data.dtype)
            v = mu * self.velocity[p.name] + g
            self.velocity[p.name] = v
            p.data = p.data - lr * (g + mu * v)

    def state_blobs(self):
        return [(f"opt.{p.name}", self.velocity[p.name]) for p in self.params]

    def load_state(self, name, value):
        key = name[len("opt."):]
        if key not in self.velocity:
            raise UsageError(f"unknown optimizer state {name!r}")
        self.velocity[key] = value.astype(self.velocity[key].dtype)


def lr_schedule(epoch, train_config):
    """Step decay: initial lr times decay^(milestones passed)."""
    passed = sum(1 for m in train_config.decay_epochs if epoch >= m)
    return train_config.lr * (train_config.lr_decay ** passed)


def evaluate_topk(model, manifest, entries, k=1, preprocess=None):
    """Top-k accuracy of eval-mode predictions over manifest entries."""
    if not entries:
        raise UsageError("cannot evaluate an empty split")
    hits = 0
    per_class = np.zeros((model.config.num_classes, 2), dtype=int)  # [hits, total]
    for entry in entries:
        seq = manifest.load(entry)
        if preprocess is not None:
            seq = preprocess(seq)
        logits = model.forward_classify(seq, mode="infer").data.reshape(-1)
        topk = np.argsort(logits)[::-1][:k]
        hit = int(entry.label in topk)
        hits += hit
        per_class[entry.label] += (hit, 1)
    return hits / len(entries), per_class
