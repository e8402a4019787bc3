"""Per-layer optimizer state and the preconditioned mapping for Sophia, Muon and SOAP.

A :class:`PreconditionerState` bundles the per-layer state of one optimizer
family. Every function here returns a fresh state; nothing is updated in place,
so a state can be shared between a client and the server without copies.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .linalg import as_matrix, newton_schulz, qr_eigenvectors, qr_orthonormal, spectral_norm, truncated_svd

VARIANTS = ("sophia", "muon", "soap")

# State tensors that are averaged across clients and enter the drift distance.
# SOAP's eigenbases Q_L/Q_R are derived from L/R and are excluded from both.
AVERAGED_FIELDS = {
    "sophia": ("m", "h"),
    "muon": ("m",),
    "soap": ("L", "R", "M", "V"),
}
ALL_FIELDS = {
    "sophia": ("m", "h"),
    "muon": ("m",),
    "soap": ("L", "R", "Q_L", "Q_R", "M", "V"),
}
# Tensors whose layer-wise spectral distance is reported.
SPECTRAL_FIELDS = {
    "sophia": ("h",),
    "muon": ("m",),
    "soap": ("L", "R"),
}


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerHyper:
    beta1: float
    beta2: float
    eps: float
    clip_rho: float = 1.0
    precond_freq: int = 10
    hessian_freq: int = 1
    ns_steps: int = 5
    ns_variant: str = "quintic"
    dim_scaling: bool = True
    bias_correction: bool = False

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0 or self.clip_rho <= 0:
            raise ValueError("eps and clip_rho must be positive")
        if min(self.precond_freq, self.hessian_freq, self.ns_steps) < 1:
            raise ValueError("frequencies and ns_steps must be >= 1")


# (beta1, beta2) per the published hyperparameter tables; eps/rho/frequencies are desk-scale choices.
DEFAULT_HYPER = {
    "sophia": OptimizerHyper(beta1=0.9, beta2=0.99, eps=1e-12, clip_rho=1.0, hessian_freq=1),
    "muon": OptimizerHyper(beta1=0.9, beta2=0.95, eps=1e-7, ns_steps=5),
    "soap": OptimizerHyper(beta1=0.95, beta2=0.95, eps=1e-8, precond_freq=10),
}


def default_hyper(variant: str, **overrides) -> OptimizerHyper:
    if variant not in DEFAULT_HYPER:
        raise ValueError(f"unknown optimizer variant {variant!r}")
    return replace(DEFAULT_HYPER[variant], **overrides)


@dataclass(frozen=True)
class PreconditionerState:
    variant: str
    layers: tuple  # one dict[str, ndarray] per model layer
    hyper: OptimizerHyper
    step_count: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise StateError(f"unknown variant {self.variant!r}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        key = "M" if self.variant == "soap" else "m"
        return [layer[key].shape for layer in self.layers]

    def tensors(self, fields: Sequence[str] | None = None):
        names = ALL_FIELDS[self.variant] if fields is None else fields
        for layer in self.layers:
            for name in names:
                yield layer[name]


def _is_vector(shape) -> bool:
    return min(shape) == 1


def init_state(variant: str, shapes: Sequence[tuple[int, int]], hyper: OptimizerHyper | None = None) -> PreconditionerState:
    """Zero state (identity eigenbases for SOAP) for a model with the given layer shapes."""
    hyper = hyper or default_hyper(variant)
    layers = []
    for rows, cols in shapes:
        z = np.zeros((rows, cols))
        if variant == "sophia":
            layers.append({"m": z, "h": z.copy()})
        elif variant == "muon":
            layers.append({"m": z})
        elif variant == "soap":
            layers.append({
                "L": np.zeros((rows, rows)),
                "R": np.zeros((cols, cols)),
                "Q_L": np.eye(rows),
                "Q_R": np.eye(cols),
                "M": z,
                "V": z.copy(),
            })
        else:
            raise StateError(f"unknown variant {variant!r}")
    return PreconditionerState(variant, tuple(layers), hyper, 0)


def _check_grads(state: PreconditionerState, grads) -> list[np.ndarray]:
    grads = [as_matrix(g) for g in grads]
    if len(grads) != len(state.layers):
        raise StateError(f"expected {len(state.layers)} gradient tensors, got {len(grads)}")
    for g, shape in zip(grads, state.shapes):
        if g.shape != shape:
            raise StateError(f"shape mismatch: gradient {g.shape} vs state {shape}")
    return grads


def update_state(
    state: PreconditionerState,
    grads,
    hvp_oracle: Callable[[list[np.ndarray]], list[np.ndarray]] | None = None,
    rng: np.random.Generator | None = None,
) -> PreconditionerState:
    """Fold one gradient into the state (UpdateState)."""
    grads = _check_grads(state, grads)
    hp = state.hyper
    b1, b2 = hp.beta1, hp.beta2
    t = state.step_count
    new_layers = []

    if state.variant == "sophia":
        refresh = t % hp.hessian_freq == 0
        h_hat = None
        if refresh:
            if hvp_oracle is None:
                raise StateError(f"Sophia needs an hvp_oracle at refresh step {t}")
            if rng is None:
                raise StateError("Sophia needs an rng for Rademacher probes")
            probes = [rng.choice((-1.0, 1.0), size=g.shape) for g in grads]
            hv = hvp_oracle(probes)
            h_hat = [u * as_matrix(w) for u, w in zip(probes, hv)]
        for i, (layer, g) in enumerate(zip(state.layers, grads)):
            m = b1 * layer["m"] + (1.0 - b1) * g
            h = layer["h"]
            if refresh:
                h = b2 * h + (1.0 - b2) * np.maximum(h_hat[i], 0.0)
            new_layers.append({"m": m, "h": h})

    elif state.variant == "muon":
        for layer, g in zip(state.layers, grads):
            new_layers.append({"m": b1 * layer["m"] + (1.0 - b1) * g})

    else:
        refresh = t % hp.precond_freq == 0
        for layer, g in zip(state.layers, grads):
            L = b2 * layer["L"] + (1.0 - b2) * (g @ g.T)
            R = b2 * layer["R"] + (1.0 - b2) * (g.T @ g)
            Q_L, Q_R = layer["Q_L"], layer["Q_R"]
            if refresh:
                Q_L = _refresh(L, Q_L)
                Q_R = _refresh(R, Q_R)
            g_rot = Q_L.T @ g @ Q_R
            M = b1 * layer["M"] + (1.0 - b1) * g_rot
            V = b2 * layer["V"] + (1.0 - b2) * (g_rot * g_rot)
            new_layers.append({"L": L, "R": R, "Q_L": Q_L, "Q_R": Q_R, "M": M, "V": V})

    return PreconditionerState(state.variant, tuple(new_layers), hp, t + 1)


def _refresh(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    if not np.any(P):
        return Q
    return qr_eigenvectors(P, Q)


def apply_precond(state: PreconditionerState, grads) -> list[np.ndarray]:
    """The preconditioned direction P_Theta(g) read from an already-updated state."""
    grads = _check_grads(state, grads)
    if state.step_count == 0:
        raise StateError("uninitialized state: call update_state before apply_precond")
    hp = state.hyper
    out = []
    if state.variant == "sophia":
        for layer in state.layers:
            out.append(np.clip(layer["m"] / (layer["h"] + hp.eps), -hp.clip_rho, hp.clip_rho))
    elif state.variant == "muon":
        for layer in state.layers:
            m = layer["m"]
            if _is_vector(m.shape):
                out.append(m.copy())
            elif not np.any(m):
                out.append(np.zeros_like(m))
            else:
                gamma = math.sqrt(m.shape[0] / m.shape[1]) if hp.dim_scaling else 1.0
                out.append(gamma * newton_schulz(m, hp.ns_steps, hp.eps, hp.ns_variant))
    else:
        t = state.step_count
        for layer in state.layers:
            M, V = layer["M"], layer["V"]
            if hp.bias_correction:
                M = M / (1.0 - hp.beta1**t)
                V = V / (1.0 - hp.beta2**t)
            N = M / (np.sqrt(V) + hp.eps)
            out.append(layer["Q_L"] @ N @ layer["Q_R"].T)
    return out


def _check_homogeneous(states: Sequence[PreconditionerState]) -> None:
    if not states:
        raise StateError("need at least one state")
    first = states[0]
    for s in states[1:]:
        if s.variant != first.variant:
            raise StateError(f"heterogeneous variants: {first.variant} vs {s.variant}")
        if s.shapes != first.shapes:
            raise StateError("heterogeneous layer shapes")


def _mean(tensors: list[np.ndarray]) -> np.ndarray:
    # identical inputs must average to themselves bit for bit (zero drift under replication)
    if all(np.array_equal(tensors[0], t) for t in tensors[1:]):
        return tensors[0].copy()
    return np.mean(np.stack(tensors), axis=0)


def state_average(states: Sequence[PreconditionerState]) -> PreconditionerState:
    """Entrywise mean of client states.

    SOAP eigenbases cannot be averaged entrywise without losing orthonormality;
    they are recomputed by one refresh against the averaged L/R, seeded with
    the orthonormalized mean of the client bases (which keeps the result
    independent of client order).
    """
    states = list(states)
    _check_homogeneous(states)
    first = states[0]
    layers = []
    for idx in range(len(first.layers)):
        layer = {}
        for name in AVERAGED_FIELDS[first.variant]:
            layer[name] = _mean([s.layers[idx][name] for s in states])
        if first.variant == "soap":
            for basis, stat in (("Q_L", "L"), ("Q_R", "R")):
                seed = qr_orthonormal(_mean([s.layers[idx][basis] for s in states]))
                layer[basis] = _refresh(layer[stat], seed)
        layers.append(layer)
    return PreconditionerState(first.variant, tuple(layers), first.hyper, max(s.step_count for s in states))


def state_distance(a: PreconditionerState, b: PreconditionerState, mode: str = "frobenius"):
    """Squared Frobenius distance (float) or layer-wise spectral distances (list)."""
    _check_homogeneous([a, b])
    if mode == "frobenius":
        total = 0.0
        for ta, tb in zip(a.tensors(AVERAGED_FIELDS[a.variant]), b.tensors(AVERAGED_FIELDS[a.variant])):
            d = ta - tb
            total += float(np.sum(d * d))
        return total
    if mode == "spectral_layerwise":
        out = []
        for la, lb in zip(a.layers, b.layers):
            for name in SPECTRAL_FIELDS[a.variant]:
                out.append(spectral_norm(la[name] - lb[name]))
        return out
    raise ValueError(f"unknown distance mode {mode!r}")


# -- compression -----------------------------------------------------------

@dataclass(frozen=True)
class CompressedState:
    """Low-rank upload form of a state. SOAP eigenbases are not transmitted."""

    variant: str
    layers: tuple  # one dict[name, (U, s, V)] per layer
    hyper: OptimizerHyper
    step_count: int
    nbytes: int = 0


def compressed_rank(shape, rank_fraction: float) -> int:
    return max(1, math.ceil(rank_fraction * min(shape)))


def compress_state(state: PreconditionerState, rank_fraction: float) -> tuple[CompressedState, int]:
    if not 0.0 < rank_fraction <= 1.0:
        raise ValueError("rank_fraction must lie in (0, 1]")
    layers = []
    nbytes = 0
    for layer in state.layers:
        packed = {}
        for name in AVERAGED_FIELDS[state.variant]:
            A = layer[name]
            r = compressed_rank(A.shape, rank_fraction)
            U, s, V = truncated_svd(A, r)
            packed[name] = (U, s, V)
            nbytes += 8 * (U.size + s.size + V.size)
        layers.append(packed)
    return CompressedState(state.variant, tuple(layers), state.hyper, state.step_count, nbytes), nbytes


def decompress_state(cs: CompressedState, reference: PreconditionerState | None = None) -> PreconditionerState:
    """Rebuild a full state; SOAP bases come from ``reference`` (identity when absent)."""
    layers = []
    for idx, packed in enumerate(cs.layers):
        layer = {name: (U * s) @ V.T for name, (U, s, V) in packed.items()}
        if cs.variant == "soap":
            if reference is not None:
                layer["Q_L"] = reference.layers[idx]["Q_L"].copy()
                layer["Q_R"] = reference.layers[idx]["Q_R"].copy()
            else:
                layer["Q_L"] = np.eye(layer["L"].shape[0])
                layer["Q_R"] = np.eye(layer["R"].shape[0])
        layers.append(layer)
    return PreconditionerState(cs.variant, tuple(layers), cs.hyper, cs.step_count)


def state_nbytes(state: PreconditionerState, fields: Sequence[str] | None = None) -> int:
    return 8 * sum(t.size for t in state.tensors(fields))


# -- binary serialization --------------------------------------------------
#
# Layout (all little-endian):
#   b"FPST" | u32 version | u8 variant tag | u32 layer count | u64 step_count
#   | u32 hyper-json length | hyper json (utf-8)
#   then per layer: u32 tensor count, and per tensor: u32 rows, u32 cols, rows*cols f64

MAGIC = b"FPST"
FORMAT_VERSION = 1
_TAGS = {name: i for i, name in enumerate(VARIANTS)}


def write_tensor(buf: bytearray, a: np.ndarray) -> None:
    a = as_matrix(a)
    buf += struct.pack("<II", *a.shape)
    buf += np.ascontiguousarray(a, dtype="<f8").tobytes()


def read_tensor(data: bytes, offset: int) -> tuple[np.ndarray, int]:
    rows, cols = struct.unpack_from("<II", data, offset)
    offset += 8
    n = rows * cols
    a = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(rows, cols).astype(np.float64)
    return a, offset + 8 * n


def serialize_state(state: PreconditionerState) -> bytes:
    hyper = json.dumps(state.hyper.__dict__, sort_keys=True).encode()
    buf = bytearray(MAGIC)
    buf += struct.pack("<IBIQI", FORMAT_VERSION, _TAGS[state.variant], len(state.layers), state.step_count, len(hyper))
    buf += hyper
    names = ALL_FIELDS[state.variant]
    for layer in state.layers:
        buf += struct.pack("<I", len(names))
        for name in names:
            write_tensor(buf, layer[name])
    return bytes(buf)


def deserialize_state(data: bytes, offset: int = 0) -> tuple[PreconditionerState, int]:
    if data[offset:offset + 4] != MAGIC:
        raise StateError("not a serialized preconditioner state")
    offset += 4
    version, tag, n_layers, step_count, hlen = struct.unpack_from("<IBIQI", data, offset)
    offset += struct.calcsize("<IBIQI")
    if version != FORMAT_VERSION:
        raise StateError(f"unsupported state format version {version}")
    variant = VARIANTS[tag]
    hyper = OptimizerHyper(**json.loads(data[offset:offset + hlen].decode()))
    offset += hlen
    names = ALL_FIELDS[variant]
    layers = []
    for _ in range(n_layers):
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if count != len(names):
            raise StateError(f"expected {len(names)} tensors per {variant} layer, found {count}")
        layer = {}
        for name in names:
            layer[name], offset = read_tensor(data, offset)
        layers.append(layer)
    return PreconditionerState(variant, tuple(layers), hyper, step_count), offset
