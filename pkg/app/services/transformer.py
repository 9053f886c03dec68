"""
Reference forward pass for a stack of classic post-norm transformer layers:

    Q, K, V = x W_q, x W_k, x W_v
    o = softmax(Q K^T / sqrt(d/h) + M) V W_o        (per head, concatenated)
    y = LN(x + o; gamma1, beta1)
    m = ReLU(y W_m + b_m)
    n = m W_n + b_n
    z = LN(y + n; gamma2, beta2)

plus the closed-form FLOPs model used by the overhead estimates.
"""
import logging
from dataclasses import dataclass, field, fields, replace, asdict
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from app.errors import ConfigError, InputError, NumericError, SizeError
from app.services.linalg import (
    DTYPE, add_bias, causal_mask, encoder_mask, layer_norm, masked_softmax, matmul, relu,
)

logger = logging.getLogger(__name__)

LAYER_TENSORS = (
    "w_q", "w_k", "w_v", "w_o", "gamma1", "beta1",
    "w_m", "b_m", "w_n", "b_n", "gamma2", "beta2",
)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_model: int
    num_heads: int
    d_ffn: int
    seq_len: int
    vocab_size: int
    causal: bool = True
    auth_position: Optional[int] = None
    # d x d_ffn projections per FFN; accounting only, the engine runs 2
    ffn_projections: int = 2

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_heads", "d_ffn", "seq_len", "vocab_size", "ffn_projections"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.auth_position is not None and not 1 <= self.auth_position <= self.num_layers - 1:
            raise ConfigError(
                f"auth_position={self.auth_position} outside [1, {self.num_layers - 1}]"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def resolved_auth_position(self) -> int:
        """Configured L0, or the middle of the stack."""
        if self.auth_position is not None:
            return self.auth_position
        if self.num_layers < 2:
            raise ConfigError("a model needs at least 2 layers to place an authorization point")
        return max(1, self.num_layers // 2)

    def mask(self) -> np.ndarray:
        return causal_mask(self.seq_len) if self.causal else encoder_mask(self.seq_len)

    def layer_parameter_count(self) -> int:
        d, f = self.d_model, self.d_ffn
        return 4 * d * d + 4 * d + 2 * d * f + f + d

    def parameter_count(self) -> int:
        return 2 * self.vocab_size * self.d_model + self.num_layers * self.layer_parameter_count()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"incomplete model config: {e}") from e

    def with_overrides(self, **overrides) -> "ModelConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


@dataclass(frozen=True)
class TransformerLayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    gamma1: np.ndarray
    beta1: np.ndarray
    w_m: np.ndarray
    b_m: np.ndarray
    w_n: np.ndarray
    b_n: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray

    def expected_shapes(self, cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
        return layer_shapes(cfg)

    def validate(self, cfg: ModelConfig, where: str = "layer") -> None:
        for name, shape in layer_shapes(cfg).items():
            t = getattr(self, name)
            if t.shape != shape:
                raise SizeError(f"{where}.{name}: shape {t.shape} != expected {shape}")
            if not np.all(np.isfinite(t)):
                raise NumericError(f"{where}.{name}: non-finite entries")

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in LAYER_TENSORS}

    def replace(self, **changes) -> "TransformerLayerWeights":
        return replace(self, **changes)


def layer_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ffn
    return {
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
        "gamma1": (d,), "beta1": (d,),
        "w_m": (d, f), "b_m": (f,), "w_n": (f, d), "b_n": (d,),
        "gamma2": (d,), "beta2": (d,),
    }


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    embedding: np.ndarray
    layers: Tuple[TransformerLayerWeights, ...]
    output_head: np.ndarray

    def __post_init__(self):
        cfg = self.config
        if cfg.ffn_projections != 2:
            raise ConfigError("the forward engine runs two-projection ReLU FFNs only (ffn_projections=2)")
        if len(self.layers) != cfg.num_layers:
            raise ConfigError(f"model has {len(self.layers)} layers, config says {cfg.num_layers}")
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.embedding.shape != (cfg.vocab_size, cfg.d_model):
            raise SizeError(f"embedding shape {self.embedding.shape} != {(cfg.vocab_size, cfg.d_model)}")
        if self.output_head.shape != (cfg.d_model, cfg.vocab_size):
            raise SizeError(f"output_head shape {self.output_head.shape} != {(cfg.d_model, cfg.vocab_size)}")
        for i, layer in enumerate(self.layers):
            layer.validate(cfg, where=f"layers.{i}")
        for name in ("embedding", "output_head"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"{name}: non-finite entries")


@dataclass
class LayerTrace:
    """Intermediates of one layer, in equation order."""
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    y: np.ndarray
    m: np.ndarray
    n: np.ndarray
    z: np.ndarray

    def lines(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in ("q", "k", "v", "o", "y", "m", "n", "z"):
            yield name, getattr(self, name)


# ---------- random tiny models ----------

# FFN branch std relative to the unit-scale residual it is added to
FFN_GAIN = 2.5
# spread of the layer-norm affines around (1, 0)
NORM_JITTER = 0.05
# mean and std of |g| for g ~ N(0, 1)
_ABS_MEAN = np.sqrt(2.0 / np.pi)
_ABS_STD = np.sqrt(1.0 - 2.0 / np.pi)


def _orthonormal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random matrix with orthonormal columns (rows >= cols) or orthonormal rows."""
    q, r = np.linalg.qr(rng.normal(size=(max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def init_layer(cfg: ModelConfig, rng: np.random.Generator) -> TransformerLayerWeights:
    """
    Random layer in a non-collapsing regime.

    Attention projections are dense Gaussian. FFN units come in pairs,
    W_m = [U, -U] and W_n = [V; V] with b_m = 0, so the branch computes
    |y U| V: even in y, with b_n removing its mean. It therefore has no
    affine component in y and no offset shared by every token, and V is
    scaled so the branch outweighs the residual by FFN_GAIN.
    """
    d, f = cfg.d_model, cfg.d_ffn
    half = f // 2

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)).astype(DTYPE)

    def vec(n, center):
        return (center + rng.normal(0.0, NORM_JITTER, size=n)).astype(DTYPE)

    if half:
        u = _orthonormal(d, half, rng)
        u = u / np.linalg.norm(u, axis=0)
        v = _orthonormal(half, d, rng) * (FFN_GAIN / _ABS_STD)
    else:
        u, v = np.zeros((d, 0)), np.zeros((0, d))
    spare = f - 2 * half  # odd d_ffn leaves one idle unit
    w_m = np.hstack([u, -u, np.zeros((d, spare))]).astype(DTYPE)
    w_n = np.vstack([v, v, np.zeros((spare, d))]).astype(DTYPE)
    b_n = (-_ABS_MEAN * v.sum(axis=0)).astype(DTYPE)

    w_q, w_k, w_v, w_o = (dense(d, d) for _ in range(4))
    return TransformerLayerWeights(
        w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o,
        gamma1=vec(d, 1.0), beta1=vec(d, 0.0),
        w_m=w_m, b_m=np.zeros(f, dtype=DTYPE),
        w_n=w_n, b_n=b_n,
        gamma2=vec(d, 1.0), beta2=vec(d, 0.0),
    )


def init_model(cfg: ModelConfig, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    embedding = rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.d_model)).astype(DTYPE)
    layers = tuple(init_layer(cfg, rng) for _ in range(cfg.num_layers))
    # unit-norm columns: no token wins on scale alone
    head = rng.normal(0.0, 1.0, size=(cfg.d_model, cfg.vocab_size))
    head = (head / np.linalg.norm(head, axis=0)).astype(DTYPE)
    logger.info(
        "Initialised random model L=%s d=%s h=%s d_ffn=%s vocab=%s (seed=%s)",
        cfg.num_layers, cfg.d_model, cfg.num_heads, cfg.d_ffn, cfg.vocab_size, seed,
    )
    return Model(config=cfg, embedding=embedding, layers=layers, output_head=head)


# ---------- forward pass ----------

def _split_heads(t: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    # (..., l, d) -> (..., h, l, d/h)
    lead = t.shape[:-2]
    t = t.reshape(*lead, t.shape[-2], cfg.num_heads, cfg.head_dim)
    return np.swapaxes(t, -3, -2)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    t = np.swapaxes(t, -3, -2)
    return t.reshape(*t.shape[:-2], t.shape[-2] * t.shape[-1])


def attention_weights(q: np.ndarray, k: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    qh, kh = _split_heads(q, cfg), _split_heads(k, cfg)
    scores = matmul(qh, np.swapaxes(kh, -1, -2)) * DTYPE(1.0 / np.sqrt(cfg.head_dim))
    return masked_softmax(scores, cfg.mask())


def _check_finite(t: np.ndarray, what: str, layer_index: Optional[int]) -> np.ndarray:
    if not np.all(np.isfinite(t)):
        where = f"layer {layer_index}" if layer_index is not None else "layer"
        raise NumericError(f"non-finite {what} in {where}", layer_index=layer_index)
    return t


def attention_block(w: TransformerLayerWeights, x: np.ndarray, cfg: ModelConfig,
                    layer_index: Optional[int] = None) -> Tuple[np.ndarray, ...]:
    """Lines 1-5: returns (Q, K, V, o, y)."""
    q, k, v = matmul(x, w.w_q), matmul(x, w.w_k), matmul(x, w.w_v)
    att = attention_weights(q, k, cfg)
    ctx = _merge_heads(matmul(att, _split_heads(v, cfg)))
    o = _check_finite(matmul(ctx, w.w_o), "attention output", layer_index)
    y = _check_finite(layer_norm(x + o, w.gamma1, w.beta1), "first add-norm", layer_index)
    return q, k, v, o, y


def ffn_input(w_m: np.ndarray, b_m: np.ndarray, y: np.ndarray) -> np.ndarray:
    return relu(add_bias(matmul(y, w_m), b_m))


def ffn_output(w_n: np.ndarray, b_n: np.ndarray, m: np.ndarray) -> np.ndarray:
    return add_bias(matmul(m, w_n), b_n)


def layer_trace(w: TransformerLayerWeights, x: np.ndarray, cfg: ModelConfig,
                layer_index: Optional[int] = None) -> LayerTrace:
    q, k, v, o, y = attention_block(w, x, cfg, layer_index)
    m = ffn_input(w.w_m, w.b_m, y)
    n = _check_finite(ffn_output(w.w_n, w.b_n, m), "FFN output", layer_index)
    z = _check_finite(layer_norm(y + n, w.gamma2, w.beta2), "second add-norm", layer_index)
    return LayerTrace(q=q, k=k, v=v, o=o, y=y, m=m, n=n, z=z)


def layer_forward(w: TransformerLayerWeights, x: np.ndarray, cfg: ModelConfig,
                  layer_index: Optional[int] = None) -> np.ndarray:
    if x.shape[-2:] != (cfg.seq_len, cfg.d_model):
        raise SizeError(f"layer input shape {x.shape[-2:]} != {(cfg.seq_len, cfg.d_model)}")
    _check_finite(x, "input", layer_index)
    return layer_trace(w, x, cfg, layer_index).z


def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    toks = np.asarray(tokens)
    if toks.ndim not in (1, 2) or not np.issubdtype(toks.dtype, np.integer):
        raise InputError("tokens must be a 1-D or 2-D integer array")
    if toks.shape[-1] != cfg.seq_len:
        raise InputError(f"sequence length {toks.shape[-1]} != seq_len {cfg.seq_len}")
    if toks.size and (toks.min() < 0 or toks.max() >= cfg.vocab_size):
        raise InputError(f"token index outside [0, {cfg.vocab_size})")
    return toks


def embed(embedding: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    return embedding[tokens]


def run_layers(layers: Sequence[TransformerLayerWeights], x: np.ndarray, cfg: ModelConfig,
               offset: int = 0) -> np.ndarray:
    for i, w in enumerate(layers):
        x = layer_forward(w, x, cfg, layer_index=offset + i)
    return x


def model_forward(m: Model, tokens) -> np.ndarray:
    """Logits of shape (l, vocab), or (B, l, vocab) for a batch of sequences."""
    toks = check_tokens(tokens, m.config)
    x = run_layers(m.layers, embed(m.embedding, toks), m.config)
    return matmul(x, m.output_head)


def hidden_states(m: Model, tokens, upto: int) -> np.ndarray:
    """Output of layers [0, upto)."""
    toks = check_tokens(tokens, m.config)
    return run_layers(m.layers[:upto], embed(m.embedding, toks), m.config)


def argmax_agreement(logits_a: np.ndarray, logits_b: np.ndarray) -> float:
    if logits_a.shape != logits_b.shape:
        raise SizeError(f"logit shapes differ: {logits_a.shape} vs {logits_b.shape}")
    return float(np.mean(np.argmax(logits_a, axis=-1) == np.argmax(logits_b, axis=-1)))


def mean_cosine_similarity(logits_a: np.ndarray, logits_b: np.ndarray) -> float:
    a = logits_a.reshape(-1, logits_a.shape[-1]).astype(np.float64)
    b = logits_b.reshape(-1, logits_b.shape[-1]).astype(np.float64)
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return float(np.mean(num / np.maximum(den, 1e-12)))


# ---------- FLOPs ----------

@dataclass(frozen=True)
class FlopsReport:
    matmul: int
    attention: int
    elementwise: int
    per_layer: int
    total: int
    head: int
    terms: Dict[str, int] = field(default_factory=dict)


def count_flops(cfg: ModelConfig) -> FlopsReport:
    """
    Closed form, per layer (P = ffn_projections):
      weight matmuls   2*l*(4*d*d + P*d*d_ffn)
      attention        2*l*l*d (QK^T) + 2*l*l*d (AV)
      element-wise     5*h*l*l   scale, mask, exp, row-sum, divide
                       2*l*d     residual adds
                       14*l*d    two layer norms, 7 ops per element
                       l*d       b_n
                       P*l*d_ffn b_m, activation, gate product when P=3
    total = L * per_layer; the output head (2*l*d*vocab) is reported apart.
    """
    l, d, h, f, p = cfg.seq_len, cfg.d_model, cfg.num_heads, cfg.d_ffn, cfg.ffn_projections
    terms = {
        "qkvo": 2 * l * 4 * d * d,
        "ffn": 2 * l * p * d * f,
        "scores": 2 * l * l * d,
        "values": 2 * l * l * d,
        "softmax": 5 * h * l * l,
        "residual": 2 * l * d,
        "layer_norm": 14 * l * d,
        "bias_n": l * d,
        "ffn_elementwise": p * l * f,
    }
    mm = terms["qkvo"] + terms["ffn"]
    att = terms["scores"] + terms["values"]
    ew = terms["softmax"] + terms["residual"] + terms["layer_norm"] + terms["bias_n"] + terms["ffn_elementwise"]
    per_layer = mm + att + ew
    return FlopsReport(
        matmul=mm, attention=att, elementwise=ew, per_layer=per_layer,
        total=cfg.num_layers * per_layer, head=2 * l * d * cfg.vocab_size, terms=terms,
    )
