"""Multi-head MLP with hand-written reverse-mode gradients.

The network maps a state feature vector to one output block per head:
a scalar for expected-value heads, or a softmax over n_atoms for
categorical heads. Parameters live in one flat float64 vector so the
optimizer, the soft-updated target copy and checkpointing all operate on
a single array. Gradients are computed by explicit backpropagation (the
test suite checks them against central finite differences).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CompatError, DimMismatch, LayoutMismatch

CKPT_MAGIC = b"CDGCKPT\x00"  # 8 bytes
CKPT_VERSION = 1

SCALAR = "scalar"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_layers: tuple[int, ...]
    activation: str  # "relu" | "tanh"
    n_heads: int
    head_kind: str  # "scalar" | "categorical"
    n_atoms: int = 1

    def __post_init__(self):
        if self.input_dim < 1 or self.n_heads < 1:
            raise ValueError("input_dim and n_heads must be >= 1")
        if any(w < 1 for w in self.hidden_layers):
            raise ValueError("hidden widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head_kind not in (SCALAR, CATEGORICAL):
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        if self.head_kind == CATEGORICAL and self.n_atoms < 2:
            raise ValueError("categorical heads need n_atoms >= 2")

    @property
    def output_dim(self) -> int:
        per_head = self.n_atoms if self.head_kind == CATEGORICAL else 1
        return self.n_heads * per_head

    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden_layers, self.output_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims())

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "activation": self.activation,
            "n_heads": self.n_heads,
            "head_kind": self.head_kind,
            "n_atoms": self.n_atoms,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetSpec":
        return NetSpec(
            input_dim=int(d["input_dim"]),
            hidden_layers=tuple(int(w) for w in d["hidden_layers"]),
            activation=d["activation"],
            n_heads=int(d["n_heads"]),
            head_kind=d["head_kind"],
            n_atoms=int(d["n_atoms"]),
        )


@dataclass
class Params:
    """Flat parameter vector plus cached per-layer views into it."""

    spec: NetSpec
    flat: np.ndarray
    _views: list[tuple[np.ndarray, np.ndarray]] = field(init=False, repr=False)

    def __post_init__(self):
        if self.flat.shape != (self.spec.n_params(),):
            raise LayoutMismatch(f"flat vector has {self.flat.shape}, spec needs ({self.spec.n_params()},)")
        self._views = _layer_views(self.spec, self.flat)

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self._views

    def copy(self) -> "Params":
        return Params(self.spec, self.flat.copy())


def _layer_views(spec: NetSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    views = []
    off = 0
    for n_in, n_out in spec.layer_dims():
        w = flat[off : off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = flat[off : off + n_out]
        off += n_out
        views.append((w, b))
    return views


def init_params(spec: NetSpec, rng: np.random.Generator) -> Params:
    """Uniform fan-in init: He-style limits for relu, Xavier-style for tanh.
    Biases start at zero, so zero-weight categorical heads emit uniforms."""
    flat = np.zeros(spec.n_params())
    params = Params(spec, flat)
    for (w, b), (n_in, n_out) in zip(params.layers, spec.layer_dims()):
        if spec.activation == "relu":
            limit = np.sqrt(6.0 / n_in)
        else:
            limit = np.sqrt(6.0 / (n_in + n_out))
        w[...] = rng.uniform(-limit, limit, size=(n_in, n_out))
        b[...] = 0.0
    return params


def zero_params(spec: NetSpec) -> Params:
    return Params(spec, np.zeros(spec.n_params()))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    x: np.ndarray  # (B, input_dim)
    pre: list[np.ndarray]  # pre-activations per layer
    post: list[np.ndarray]  # post-activations per hidden layer
    outputs: np.ndarray  # (B, n_heads) or (B, n_heads, n_atoms)


def _check_input(spec: NetSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimMismatch(f"input has shape {x.shape}, expected (*, {spec.input_dim})")
    return x, squeeze


def forward_cached(spec: NetSpec, params: Params, x: np.ndarray) -> ForwardCache:
    x2, _ = _check_input(spec, x)
    h = x2
    pre, post = [], []
    n_layers = len(params.layers)
    for li, (w, b) in enumerate(params.layers):
        z = h @ w + b
        pre.append(z)
        if li < n_layers - 1:
            h = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
            post.append(h)
    if spec.head_kind == CATEGORICAL:
        logits = pre[-1].reshape(-1, spec.n_heads, spec.n_atoms)
        outputs = _softmax_rows(logits)
    else:
        outputs = pre[-1].reshape(-1, spec.n_heads)
    return ForwardCache(x=x2, pre=pre, post=post, outputs=outputs)


def forward(spec: NetSpec, params: Params, x: np.ndarray) -> np.ndarray:
    """Head outputs: (B, n_heads) scalars or (B, n_heads, n_atoms) probabilities.
    A 1-D input returns the unbatched shape."""
    _, squeeze = _check_input(spec, x)
    out = forward_cached(spec, params, x).outputs
    return out[0] if squeeze else out


def backward_from_cache(spec: NetSpec, params: Params, cache: ForwardCache, upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum(upstream * outputs) w.r.t. the flat parameters.

    upstream matches cache.outputs in shape. For categorical heads the
    softmax Jacobian is applied here, so callers supply gradients with
    respect to the emitted probabilities.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.outputs.shape:
        raise DimMismatch(f"upstream has shape {upstream.shape}, outputs are {cache.outputs.shape}")
    if spec.head_kind == CATEGORICAL:
        p = cache.outputs
        inner = (upstream * p).sum(axis=-1, keepdims=True)
        d_logits = p * (upstream - inner)
        delta = d_logits.reshape(d_logits.shape[0], -1)
    else:
        delta = upstream.reshape(upstream.shape[0], -1)

    grad_flat = np.zeros_like(params.flat)
    grads = _layer_views(spec, grad_flat)
    n_layers = len(params.layers)
    for li in range(n_layers - 1, -1, -1):
        w, _ = params.layers[li]
        gw, gb = grads[li]
        h_in = cache.x if li == 0 else cache.post[li - 1]
        gw += h_in.T @ delta
        gb += delta.sum(axis=0)
        if li > 0:
            delta = delta @ w.T
            z = cache.pre[li - 1]
            if spec.activation == "relu":
                delta = delta * (z > 0)
            else:
                delta = delta * (1.0 - np.tanh(z) ** 2)
    return grad_flat


def backward(spec: NetSpec, params: Params, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Convenience wrapper: forward pass then backprop of the given
    output-space gradients (unbatched input accepted)."""
    x2, squeeze = _check_input(spec, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if squeeze:
        upstream = upstream[None, ...]
    cache = forward_cached(spec, params, x2)
    return backward_from_cache(spec, params, cache, upstream)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: Params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return AdamState(np.zeros_like(params.flat), np.zeros_like(params.flat), 0, beta1, beta2, eps)


def adam_step(state: AdamState, params: Params, grads: np.ndarray, lr: float) -> tuple[Params, AdamState]:
    """One bias-corrected adaptive-moment update, in place on params.flat."""
    if grads.shape != params.flat.shape:
        raise LayoutMismatch(f"grads shape {grads.shape} != params shape {params.flat.shape}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    params.flat -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class TargetNet:
    """Slowly tracking copy of the online parameters."""

    params: Params
    tau: float

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")


def soft_update(target: TargetNet, online: Params) -> TargetNet:
    """target <- tau * online + (1 - tau) * target, componentwise."""
    if target.params.flat.shape != online.flat.shape:
        raise LayoutMismatch("target and online parameter layouts differ")
    target.params.flat *= 1.0 - target.tau
    target.params.flat += target.tau * online.flat
    return target


def save_checkpoint(
    path: str | Path,
    spec: NetSpec,
    params: Params,
    adam: AdamState,
    step: int,
    rng_states: dict | None = None,
    target_params: Params | None = None,
    run_config: dict | None = None,
) -> None:
    """Binary checkpoint; float64 arrays are stored raw so the round trip
    is bit exact."""
    header = {
        "spec": spec.to_dict(),
        "step": int(step),
        "adam": {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "rng_states": rng_states or {},
        "has_target": target_params is not None,
        "run_config": run_config or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(params.flat)))
        fh.write(params.flat.astype("<f8").tobytes())
        fh.write(adam.m.astype("<f8").tobytes())
        fh.write(adam.v.astype("<f8").tobytes())
        if target_params is not None:
            fh.write(target_params.flat.astype("<f8").tobytes())


@dataclass
class Checkpoint:
    spec: NetSpec
    params: Params
    adam: AdamState
    step: int
    rng_states: dict
    target_params: Params | None
    run_config: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CompatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CKPT_VERSION:
        raise CompatError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[off : off + hlen])
    off += hlen
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8

    def take() -> np.ndarray:
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += n * 8
        return arr

    spec = NetSpec.from_dict(header["spec"])
    params = Params(spec, take())
    a = header["adam"]
    adam = AdamState(take(), take(), int(a["t"]), float(a["beta1"]), float(a["beta2"]), float(a["eps"]))
    target = Params(spec, take()) if header["has_target"] else None
    return Checkpoint(
        spec=spec,
        params=params,
        adam=adam,
        step=int(header["step"]),
        rng_states=header["rng_states"],
        target_params=target,
        run_config=header.get("run_config", {}),
    )
