"""Standard and inverted-bottleneck MLPs with hand-written backprop.

Weights are stored output-by-input, so a layer maps a batch ``X`` (B x d_in)
to ``X @ W.T + b``. Images are flattened row-major in (h, w, c) order.
"""

from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from .tensor import TRAIN_DTYPE, rand_init

LN_EPS = 1e-5
BLOCK_KINDS = ("standard", "inverted_bottleneck")
ACTIVATIONS = ("relu", "gelu")

_NOTATION = re.compile(r"^B-(\d+)/Wi-(\d+)$")


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    width: int
    expansion: int = 4
    image_shape: tuple[int, int, int] = (64, 64, 3)
    num_classes: int = 1000
    block_kind: str = "inverted_bottleneck"
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ValueError(f"image_shape must be (h, w, c) with positive extents, got {self.image_shape}")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def in_features(self) -> int:
        h, w, c = self.image_shape
        return h * w * c

    @property
    def notation(self) -> str:
        return format_notation(self.depth, self.width)

    @classmethod
    def from_notation(cls, notation: str, **kwargs) -> "ModelConfig":
        depth, width = parse_notation(notation)
        return cls(depth=depth, width=width, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "image_shape": tuple(d["image_shape"])})


def parse_notation(notation: str) -> tuple[int, int]:
    """``"B-6/Wi-1024"`` -> ``(6, 1024)``."""
    m = _NOTATION.match(notation.strip())
    if m is None:
        raise ValueError(f"not a B-L/Wi-m model notation: {notation!r}")
    return int(m.group(1)), int(m.group(2))


def format_notation(depth: int, width: int) -> str:
    return f"B-{depth}/Wi-{width}"


# ---------------------------------------------------------------------------
# accounting


def param_count(depth, width, expansion, in_features, num_classes, block_kind) -> int:
    m, L, k, K = width, depth, expansion, num_classes
    if block_kind == "standard":
        per_block = m * m + m + 2 * m
    else:
        per_block = 2 * k * m * m + k * m + m + 2 * m
    return in_features * m + m + L * per_block + K * m + K


def forward_flops(depth, width, expansion, in_features, num_classes, block_kind) -> int:
    """Multiply-accumulates of the weight matrices for one example, one FLOP each."""
    m, L, k, K = width, depth, expansion, num_classes
    per_block = m * m if block_kind == "standard" else 2 * k * m * m
    return in_features * m + L * per_block + K * m


def count_params(config: ModelConfig) -> int:
    return param_count(config.depth, config.width, config.expansion, config.in_features,
                       config.num_classes, config.block_kind)


def count_forward_flops(config: ModelConfig) -> int:
    return forward_flops(config.depth, config.width, config.expansion, config.in_features,
                         config.num_classes, config.block_kind)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable tensor."""
    m, K = config.width, config.num_classes
    shapes = {"emb.W": (m, config.in_features), "emb.b": (m,)}
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes[p + "ln.g"] = (m,)
        shapes[p + "ln.b"] = (m,)
        if config.block_kind == "standard":
            shapes[p + "W"] = (m, m)
            shapes[p + "b"] = (m,)
        else:
            km = config.expansion * m
            shapes[p + "We"] = (km, m)
            shapes[p + "be"] = (km,)
            shapes[p + "Wc"] = (m, km)
            shapes[p + "bc"] = (m,)
    shapes["head.W"] = (K, m)
    shapes["head.b"] = (K,)
    return shapes


@dataclass
class MlpModel:
    """Materialised parameters plus the input normalisation they were trained with."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    generation: int = 0

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.params) != list(expected):
            raise ValueError("parameter names do not match the model config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @property
    def dtype(self):
        return self.params["emb.W"].dtype

    @property
    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def touch(self) -> None:
        """Mark parameters as modified; older forward caches become stale."""
        self.generation += 1

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "MlpModel":
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        return out


def init_model(config: ModelConfig, rng: np.random.Generator, dtype=TRAIN_DTYPE) -> MlpModel:
    """He (fan-in) weights, zero biases, unit LayerNorm gains."""
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf.startswith("W"):
            params[name] = rand_init(shape, "he_fan_in", rng, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return MlpModel(config, params)


def fresh_head(model: MlpModel, num_classes: int, rng: np.random.Generator) -> MlpModel:
    """Copy of ``model`` with a newly initialised K'-way classifier."""
    cfg = ModelConfig.from_dict({**model.config.to_dict(), "num_classes": num_classes})
    params = {k: v.copy() for k, v in model.params.items() if not k.startswith("head.")}
    params["head.W"] = rand_init((num_classes, cfg.width), "he_fan_in", rng, dtype=model.dtype)
    params["head.b"] = np.zeros(num_classes, dtype=model.dtype)
    return MlpModel(cfg, params, model.norm_mean, model.norm_std)


def permute_emb_columns(model: MlpModel, perm) -> MlpModel:
    """Model whose embedding reads input position ``j`` from former position ``perm[j]``."""
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(model.config.in_features)):
        raise ValueError("perm must be a permutation of the input positions")
    out = model.copy()
    out.params["emb.W"] = np.ascontiguousarray(model.params["emb.W"][:, perm])
    return out


# ---------------------------------------------------------------------------
# elementwise pieces


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    return (x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype, copy=False)


def activate_grad(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return (cdf + x * pdf).astype(x.dtype, copy=False)


def layer_norm(z: np.ndarray, gain=None, bias=None):
    """Normalise over the last axis; returns ``(y, xhat, rstd)``."""
    mean = z.mean(axis=-1, keepdims=True)
    centered = z - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * rstd
    y = xhat if gain is None else xhat * gain + bias
    return y, xhat, rstd


def layer_norm_backward(dy, xhat, rstd, gain):
    dxhat = dy * gain
    m = xhat.shape[-1]
    dx = rstd * (dxhat - dxhat.sum(-1, keepdims=True) / m
                 - xhat * (dxhat * xhat).sum(-1, keepdims=True) / m)
    return dx, (dy * xhat).sum(0), dy.sum(0)


def _dropout_mask(shape, rate, rng, dtype):
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


# ---------------------------------------------------------------------------
# single-example building blocks


def flatten_embed(model: MlpModel, image) -> np.ndarray:
    """``W_emb @ vec(image) + b`` for one h x w x c image."""
    image = np.asarray(image)
    if image.shape != model.config.image_shape:
        raise ValueError(f"image shape {image.shape} does not match config {model.config.image_shape}")
    x = image.reshape(-1).astype(model.dtype)
    return model.params["emb.W"] @ x + model.params["emb.b"]


def _block_params(params, i):
    p = f"blocks.{i}."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def standard_block_forward(z, bp, activation="relu") -> np.ndarray:
    """``sigma(W LN(z) + b)`` for a single width-m vector."""
    z = np.asarray(z)
    if z.shape != bp["ln.g"].shape:
        raise ValueError(f"block input has shape {z.shape}, expected {bp['ln.g'].shape}")
    y, _, _ = layer_norm(z, bp["ln.g"], bp["ln.b"])
    return activate(bp["W"] @ y + bp["b"], activation)


def bottleneck_block_forward(z, bp, activation="relu") -> np.ndarray:
    """``z + Wc sigma(We LN(z) + be) + bc`` for a single width-m vector."""
    z = np.asarray(z)
    if z.shape != bp["ln.g"].shape:
        raise ValueError(f"block input has shape {z.shape}, expected {bp['ln.g'].shape}")
    y, _, _ = layer_norm(z, bp["ln.g"], bp["ln.b"])
    a = activate(bp["We"] @ y + bp["be"], activation)
    return z + bp["Wc"] @ a + bp["bc"]


# ---------------------------------------------------------------------------
# batched forward / backward


@dataclass
class ForwardCache:
    model_id: int
    generation: int
    inputs: np.ndarray
    blocks: list = field(default_factory=list)
    features: np.ndarray | None = None


def _as_batch(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x)
    d = model.config.in_features
    if x.ndim == 4 and x.shape[1:] == model.config.image_shape:
        x = x.reshape(len(x), d)
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected a batch of shape (B, {d}) or (B, *{model.config.image_shape}), got {x.shape}")
    return x.astype(model.dtype, copy=False)


def forward(model: MlpModel, x, train: bool = False, rng: np.random.Generator | None = None):
    """Logits for a batch plus everything :func:`backward` needs.

    Dropout is active only when ``train`` is set and the config rate is
    non-zero; it then requires ``rng``.
    """
    cfg = model.config
    P = model.params
    x = _as_batch(model, x)
    rate = cfg.dropout if train else 0.0
    if rate > 0 and rng is None:
        raise ValueError("dropout in training mode needs an rng")

    h = x @ P["emb.W"].T + P["emb.b"]
    cache = ForwardCache(id(model), model.generation, x)
    for i in range(cfg.depth):
        bp = _block_params(P, i)
        y, xhat, rstd = layer_norm(h, bp["ln.g"], bp["ln.b"])
        entry = {"block_in": h, "ln_out": y, "xhat": xhat, "rstd": rstd}
        if cfg.block_kind == "standard":
            pre = y @ bp["W"].T + bp["b"]
            act = activate(pre, cfg.activation)
            if rate > 0:
                entry["mask"] = _dropout_mask(act.shape, rate, rng, act.dtype)
                act = act * entry["mask"]
            h = act
        else:
            pre = y @ bp["We"].T + bp["be"]
            act = activate(pre, cfg.activation)
            if rate > 0:
                entry["mask_e"] = _dropout_mask(act.shape, rate, rng, act.dtype)
                act = act * entry["mask_e"]
            out = act @ bp["Wc"].T + bp["bc"]
            if rate > 0:
                entry["mask_c"] = _dropout_mask(out.shape, rate, rng, out.dtype)
                out = out * entry["mask_c"]
            h = h + out
        entry["pre"] = pre
        entry["act"] = act
        cache.blocks.append(entry)
    cache.features = h
    logits = h @ P["head.W"].T + P["head.b"]
    return logits, cache


def features(model: MlpModel, x) -> np.ndarray:
    """Output of the final block (pre-head), without dropout."""
    _, cache = forward(model, x)
    return cache.features


def backward(model: MlpModel, cache: ForwardCache, dlogits) -> dict[str, np.ndarray]:
    """Gradients of every parameter given the gradient w.r.t. the logits."""
    if cache.model_id != id(model) or cache.generation != model.generation:
        raise ValueError("forward cache is stale or belongs to a different model")
    cfg = model.config
    P = model.params
    dlogits = np.asarray(dlogits, dtype=model.dtype)
    if dlogits.shape != (len(cache.inputs), cfg.num_classes):
        raise ValueError(f"dlogits shape {dlogits.shape} does not match cache batch "
                         f"({len(cache.inputs)}, {cfg.num_classes})")

    grads: dict[str, np.ndarray] = {}
    grads["head.W"] = dlogits.T @ cache.features
    grads["head.b"] = dlogits.sum(0)
    dh = dlogits @ P["head.W"]
    for i in reversed(range(cfg.depth)):
        p = f"blocks.{i}."
        e = cache.blocks[i]
        if cfg.block_kind == "standard":
            dact = dh
            if "mask" in e:
                dact = dact * e["mask"]
            dpre = dact * activate_grad(e["pre"], cfg.activation)
            grads[p + "W"] = dpre.T @ e["ln_out"]
            grads[p + "b"] = dpre.sum(0)
            dy = dpre @ P[p + "W"]
            dres = 0.0
        else:
            dout = dh
            if "mask_c" in e:
                dout = dout * e["mask_c"]
            grads[p + "Wc"] = dout.T @ e["act"]
            grads[p + "bc"] = dout.sum(0)
            dact = dout @ P[p + "Wc"]
            if "mask_e" in e:
                dact = dact * e["mask_e"]
            dpre = dact * activate_grad(e["pre"], cfg.activation)
            grads[p + "We"] = dpre.T @ e["ln_out"]
            grads[p + "be"] = dpre.sum(0)
            dy = dpre @ P[p + "We"]
            dres = dh
        dz, grads[p + "ln.g"], grads[p + "ln.b"] = layer_norm_backward(dy, e["xhat"], e["rstd"], P[p + "ln.g"])
        dh = dz + dres
    grads["emb.W"] = dh.T @ cache.inputs
    grads["emb.b"] = dh.sum(0)
    return {name: grads[name] for name in P}


# ---------------------------------------------------------------------------
# convolution as a structured matrix


def conv_reference(filt, image) -> tuple[np.ndarray, np.ndarray]:
    """Valid 2-D cross-correlation written as a sparse, weight-sharing matrix.

    Returns ``(W_f, W_f @ vec(image))`` with row-major ``vec``. For a 2x2
    filter on a 2x3 image ``W_f`` is the 2x6 matrix with rows
    ``[f1 f2 0 f3 f4 0]`` and ``[0 f1 f2 0 f3 f4]``.
    """
    f = np.asarray(filt, dtype=np.float64)
    x = np.asarray(image, dtype=np.float64)
    if f.ndim != 2 or x.ndim != 2:
        raise ValueError(f"filter and image must be 2-D, got {f.shape} and {x.shape}")
    fh, fw = f.shape
    ih, iw = x.shape
    if fh > ih or fw > iw or fh < 1 or fw < 1:
        raise ValueError(f"filter {f.shape} does not fit inside image {x.shape}")
    oh, ow = ih - fh + 1, iw - fw + 1
    W = np.zeros((oh * ow, ih * iw))
    for oi in range(oh):
        for oj in range(ow):
            row = oi * ow + oj
            for a in range(fh):
                for b in range(fw):
                    W[row, (oi + a) * iw + (oj + b)] = f[a, b]
    return W, W @ x.reshape(-1)
