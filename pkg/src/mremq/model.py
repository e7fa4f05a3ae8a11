"""Toy post-norm transformer encoder and its fake-quantized twin."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .quant import (
    ASYMMETRIC,
    PER_CHANNEL,
    PER_TENSOR,
    SYMMETRIC,
    TERNARY,
    QuantSpec,
    fake_quant,
    init_step_per_channel,
    init_step_size,
    quantize_weight,
)

LN_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 8
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64
    vocab: int = 64
    max_seq_len: int = 16
    num_classes: int = 2

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if int(v) <= 0:
                raise ValueError(f"ModelConfig.{k} must be positive, got {v}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class Bits:
    """Bit-widths for (transformer weights, embedding, activations); None = off."""

    weight: Optional[int] = 4
    embed: Optional[int] = 4
    act: Optional[int] = 8

    @classmethod
    def parse(cls, text: str) -> "Bits":
        parts = [p.strip() for p in str(text).replace("-", ",").split(",")]
        if len(parts) != 3:
            raise ValueError(f"bits must look like 'W,E,A', got {text!r}")
        vals = [None if p.lower() in ("off", "none", "0", "32") else int(p) for p in parts]
        return cls(*vals)

    @classmethod
    def off(cls) -> "Bits":
        return cls(None, None, None)

    def __str__(self) -> str:
        return ",".join("off" if b is None else str(b) for b in (self.weight, self.embed, self.act))


# -------------------------------------------------------------- placement

LAYER_WEIGHTS = ("wq", "wk", "wv", "wo", "w1", "w2")

# Matrix multiplications of one layer in forward order:
# (unit, weight param or None, activation sites feeding it).
MATMULS: Tuple[Tuple[str, Optional[str], Tuple[str, ...]], ...] = (
    ("wq", "wq", ("in",)),
    ("wk", "wk", ("in",)),
    ("wv", "wv", ("in",)),
    ("qk", None, ("q", "k")),
    ("pv", None, ("probs", "v")),
    ("wo", "wo", ("ctx",)),
    ("w1", "w1", ("ffn_in",)),
    ("w2", "w2", ("gelu",)),
)

ASYMMETRIC_ACTS = ("probs", "gelu")


@dataclass(frozen=True)
class Site:
    name: str
    kind: str  # weight | activation_symmetric | activation_asymmetric
    role: str  # w | e | a  (which bit-width applies)


def act_site(l: int, act: str) -> str:
    return f"layer{l}/act/{act}"


def placement_sites(cfg: ModelConfig) -> List[Site]:
    """Quantization sites in order of first use during a forward pass."""
    sites = [Site("embed/tok", "weight", "e")]
    for l in range(cfg.layers):
        seen = set()
        for _, w, acts in MATMULS:
            for a in acts:
                if a not in seen:
                    seen.add(a)
                    kind = "activation_asymmetric" if a in ASYMMETRIC_ACTS else "activation_symmetric"
                    sites.append(Site(act_site(l, a), kind, "a"))
            if w is not None:
                sites.append(Site(f"layer{l}/{w}", "weight", "w"))
    return sites


def skipped_components(cfg: ModelConfig) -> List[str]:
    """Parts of the network that stay full precision."""
    out = ["embed/pos"]
    for l in range(cfg.layers):
        out += [f"layer{l}/{b}" for b in ("bq", "bk", "bv", "bo", "b1", "b2")]
        out += [f"layer{l}/{n}/{p}" for n in ("ln1", "ln2") for p in ("gamma", "beta")]
        out += [f"layer{l}/residual1", f"layer{l}/residual2"]
    out += ["head/w", "head/b"]
    return out


# ----------------------------------------------------------------- params


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"embed/tok": (cfg.vocab, d), "embed/pos": (cfg.max_seq_len, d)}
    for l in range(cfg.layers):
        p = f"layer{l}/"
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (d, d)
            shapes[p + "b" + w[1]] = (d,)
        shapes[p + "w1"] = (d, f)
        shapes[p + "b1"] = (f,)
        shapes[p + "w2"] = (f, d)
        shapes[p + "b2"] = (d,)
        for n in ("ln1", "ln2"):
            shapes[f"{p}{n}/gamma"] = (d,)
            shapes[f"{p}{n}/beta"] = (d,)
    shapes["head/w"] = (d, cfg.num_classes)
    shapes["head/b"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Dict[str, np.ndarray]:
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit("/", 1)[-1]
        if leaf == "gamma":
            v = np.ones(shape)
        elif leaf == "beta" or (leaf.startswith("b") and len(shape) == 1):
            v = np.zeros(shape)
        elif name == "embed/tok":
            v = rng.normal(0.0, 1.0, shape)
        elif name == "embed/pos":
            v = rng.normal(0.0, 0.1, shape)
        else:
            v = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        out[name] = v.astype(dtype)
    return out


class Encoder:
    """Full-precision encoder. Parameters are leaf Tensors keyed by name."""

    def __init__(self, cfg: ModelConfig, params: Dict[str, np.ndarray], trainable: bool = False):
        shapes = param_shapes(cfg)
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise ValueError(f"parameter mismatch: missing={missing[:3]} extra={extra[:3]}")
        self.cfg = cfg
        self.params: Dict[str, Tensor] = {}
        for k in shapes:
            v = np.array(params[k], copy=True)
            if v.shape != shapes[k]:
                raise ValueError(f"{k}: expected shape {shapes[k]}, got {v.shape}")
            self.params[k] = Tensor(v, requires_grad=trainable, name=k)

    @classmethod
    def random(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32, trainable=False) -> "Encoder":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed), dtype), trainable)

    @property
    def dtype(self):
        return self.params["embed/tok"].dtype

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def astype(self, dtype) -> "Encoder":
        return Encoder(self.cfg, {k: v.astype(dtype) for k, v in self.arrays().items()})

    # Hooks the forward code calls at every placement site; identity here.
    def act(self, name: str, x: Tensor) -> Tensor:
        return x

    def weight(self, name: str) -> Tensor:
        return self.params[name]


class QuantizedModel(Encoder):
    """Latent full-precision weights plus one :class:`QuantSpec` per site.

    A site whose bit-width is ``None`` is disabled and passes values through
    untouched. ``audit`` counts site visits, for placement checks.
    """

    def __init__(self, cfg: ModelConfig, params: Dict[str, np.ndarray], bits: Bits, pcq: bool = False):
        super().__init__(cfg, params, trainable=True)
        self.bits = bits
        self.pcq = pcq
        self.sites: Dict[str, Optional[QuantSpec]] = {}
        self.audit: Counter = Counter()
        self._uninit: set = set()
        self._calibrating = False
        # site name -> list of pre-quantization inputs, filled by act() when set
        self.recording: Optional[Dict[str, list]] = None
        for site in placement_sites(cfg):
            self.sites[site.name] = self._make_spec(site)

    @classmethod
    def from_fp(cls, fp: Encoder, bits: Bits, pcq: bool = False) -> "QuantizedModel":
        return cls(fp.cfg, fp.arrays(), bits, pcq)

    def _make_spec(self, site: Site) -> Optional[QuantSpec]:
        b = {"w": self.bits.weight, "e": self.bits.embed, "a": self.bits.act}[site.role]
        if b is None:
            return None
        dt = self.dtype
        if site.kind == "weight":
            w = self.params[site.name].data
            # embedding rows are tokens; other weights are (d_in, d_out)
            axis = 0 if site.role == "e" else 1
            gran = PER_CHANNEL if self.pcq else PER_TENSOR
            if b == 2:
                return QuantSpec(2, TERNARY, gran, None, False, axis if self.pcq else None, site.name)
            if self.pcq:
                s = init_step_per_channel(w, b, SYMMETRIC, axis)
            else:
                s = np.asarray(init_step_size(w, b, SYMMETRIC), dtype=dt)
            st = Tensor(s.astype(dt), requires_grad=True, name="qspec/" + site.name)
            return QuantSpec(b, SYMMETRIC, gran, st, True, axis if self.pcq else None, site.name)
        mode = ASYMMETRIC if site.kind == "activation_asymmetric" else SYMMETRIC
        st = Tensor(np.asarray(1.0, dtype=dt), requires_grad=True, name="qspec/" + site.name)
        self._uninit.add(site.name)
        return QuantSpec(b, mode, PER_TENSOR, st, True, None, site.name)

    # ------------------------------------------------------------ site hooks

    def act(self, name: str, x: Tensor) -> Tensor:
        self.audit[name] += 1
        if self.recording is not None and name in self.recording:
            self.recording[name].append(x.data)
        spec = self.sites[name]
        if spec is None:
            return x
        if name in self._uninit:
            if not self._calibrating:
                raise RuntimeError(f"activation step {name} used before calibrate()")
            spec.step.data[...] = init_step_size(x.data, spec.bits, spec.mode)
            self._uninit.discard(name)
        return fake_quant(x, spec)

    def weight(self, name: str) -> Tensor:
        self.audit[name] += 1
        spec = self.sites[name]
        w = self.params[name]
        if spec is None:
            return w
        return quantize_weight(w, spec)

    def calibrate(self, tokens: np.ndarray) -> None:
        """Initialize every activation step from the activations it first sees."""
        self._calibrating = True
        try:
            with ag.no_grad():
                forward_fp(self, tokens)
        finally:
            self._calibrating = False

    @property
    def calibrated(self) -> bool:
        return not self._uninit

    def step_tensors(self) -> Dict[str, Tensor]:
        return {
            "qspec/" + k: s.step
            for k, s in self.sites.items()
            if s is not None and s.step is not None
        }

    def trainable(self) -> Dict[str, Tensor]:
        out = dict(self.params)
        out.update({k: t for k, t in self.step_tensors().items() if t.requires_grad})
        return out

    def reset_audit(self) -> None:
        self.audit.clear()


# ---------------------------------------------------------------- forward


def check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, len], got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise IndexError(f"token ids must lie in [0, {cfg.vocab})")
    return tokens


def as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def embed(model: Encoder, tokens) -> Tensor:
    tokens = check_tokens(model.cfg, tokens)
    table = model.weight("embed/tok")
    pos = model.params["embed/pos"]
    s = tokens.shape[1]
    pe = pos if s == pos.shape[0] else ag.embedding(pos, np.arange(s))
    return ag.add(ag.embedding(table, tokens), pe)


def layer_forward(model: Encoder, l: int, x) -> Tensor:
    cfg = model.cfg
    x = as_tensor(x, model.dtype)
    P = model.params
    p = f"layer{l}/"
    B, S, d = x.shape
    h, dh = cfg.heads, cfg.head_dim

    def heads(t):
        return ag.transpose(ag.reshape(t, (B, S, h, dh)), (0, 2, 1, 3))

    xq = model.act(p + "act/in", x)
    q = ag.add(ag.matmul(xq, model.weight(p + "wq")), P[p + "bq"])
    k = ag.add(ag.matmul(xq, model.weight(p + "wk")), P[p + "bk"])
    v = ag.add(ag.matmul(xq, model.weight(p + "wv")), P[p + "bv"])
    qh = model.act(p + "act/q", heads(q))
    kh = model.act(p + "act/k", heads(k))
    scores = ag.scale(ag.matmul(qh, ag.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = model.act(p + "act/probs", ag.softmax_rows(scores))
    vh = model.act(p + "act/v", heads(v))
    ctx = ag.reshape(ag.transpose(ag.matmul(probs, vh), (0, 2, 1, 3)), (B, S, d))
    ctx = model.act(p + "act/ctx", ctx)
    attn = ag.add(ag.matmul(ctx, model.weight(p + "wo")), P[p + "bo"])
    x1 = ag.layer_norm(ag.add(x, attn), P[p + "ln1/gamma"], P[p + "ln1/beta"], LN_EPS)
    fi = model.act(p + "act/ffn_in", x1)
    hid = ag.gelu(ag.add(ag.matmul(fi, model.weight(p + "w1")), P[p + "b1"]))
    hid = model.act(p + "act/gelu", hid)
    ffn = ag.add(ag.matmul(hid, model.weight(p + "w2")), P[p + "b2"])
    return ag.layer_norm(ag.add(x1, ffn), P[p + "ln2/gamma"], P[p + "ln2/beta"], LN_EPS)


def classify(model: Encoder, hidden) -> Tensor:
    """Mean-pool over positions, then the (never quantized) affine head."""
    hidden = as_tensor(hidden, model.dtype)
    pooled = ag.mean_axis(hidden, 1)
    return ag.add(ag.matmul(pooled, model.params["head/w"]), model.params["head/b"])


def forward_fp(model: Encoder, tokens) -> Tuple[List[Tensor], Tensor]:
    """Hidden states ``f_0`` (embedding) .. ``f_L`` and the logits."""
    hs = [embed(model, tokens)]
    for l in range(model.cfg.layers):
        hs.append(layer_forward(model, l, hs[-1]))
    return hs, classify(model, hs[-1])


def forward_quantized(model: Encoder, state, layer_range: Sequence[int]) -> List[Tensor]:
    """Run layers ``[a, b)`` starting from hidden ``state``; returns each layer's output."""
    a, b = layer_range
    if not (0 <= a < b <= model.cfg.layers):
        raise ValueError(f"invalid layer range [{a}, {b}) for {model.cfg.layers} layers")
    outs = []
    x = state
    for l in range(a, b):
        x = layer_forward(model, l, x)
        outs.append(x)
    return outs


def logits(model: Encoder, tokens, batch: int = 512) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(tokens), batch):
            out.append(forward_fp(model, tokens[i:i + batch])[1].data)
    return np.concatenate(out)


def hidden_states(model: Encoder, tokens, batch: int = 512) -> List[np.ndarray]:
    """All of ``f_0 .. f_L`` plus logits (last entry) as arrays, evaluated in chunks."""
    chunks = []
    with ag.no_grad():
        for i in range(0, len(tokens), batch):
            hs, lg = forward_fp(model, tokens[i:i + batch])
            chunks.append([h.data for h in hs] + [lg.data])
    return [np.concatenate(c) for c in zip(*chunks)]
