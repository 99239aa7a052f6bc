"""Stacked LSTM regressor in plain numpy: init, forward, BPTT, checkpoints.

Gate blocks inside every ``4H`` weight/bias are ordered input, forget,
candidate, output.  All entry points accept either a single window
``(T, D)`` or a batch ``(B, T, D)``; hidden and cell states start at zero
for every window.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .loss import mse_loss

GATE_ORDER = "ifgo"
HIDDEN = 42
N_LAYERS = 3
CHECKPOINT_MAGIC = b"FDLSTM\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LstmLayerParams:
    W_x: np.ndarray  # (4H, D_in)
    W_h: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.W_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_x.shape[1]


@dataclass
class DenseParams:
    W: np.ndarray  # (n_out, H)
    b: np.ndarray  # (n_out,)


class _ParamTree:
    layers: list[LstmLayerParams]
    head: DenseParams

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for k, layer in enumerate(self.layers):
            yield f"layer{k}.W_x", layer.W_x
            yield f"layer{k}.W_h", layer.W_h
            yield f"layer{k}.b", layer.b
        yield "head.W", self.head.W
        yield "head.b", self.head.b

    def arrays(self) -> list[np.ndarray]:
        return [arr for _, arr in self.named_arrays()]

    def n_params(self) -> int:
        return sum(arr.size for arr in self.arrays())


@dataclass
class LstmModel(_ParamTree):
    layers: list[LstmLayerParams]
    head: DenseParams
    rng_seed: int = 0

    @property
    def hidden_size(self) -> int:
        return self.layers[0].hidden_size

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @property
    def output_size(self) -> int:
        return self.head.W.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.head.W.dtype

    def copy(self) -> "LstmModel":
        return LstmModel(
            [LstmLayerParams(p.W_x.copy(), p.W_h.copy(), p.b.copy()) for p in self.layers],
            DenseParams(self.head.W.copy(), self.head.b.copy()),
            self.rng_seed,
        )

    def zeros_like(self) -> "Gradients":
        return Gradients(
            [LstmLayerParams(np.zeros_like(p.W_x), np.zeros_like(p.W_h), np.zeros_like(p.b)) for p in self.layers],
            DenseParams(np.zeros_like(self.head.W), np.zeros_like(self.head.b)),
        )


@dataclass
class Gradients(_ParamTree):
    layers: list[LstmLayerParams]
    head: DenseParams


def init_params(
    seed: int,
    input_size: int = 243,
    hidden_size: int = HIDDEN,
    n_layers: int = N_LAYERS,
    output_size: int = 2,
    dtype=np.float64,
) -> LstmModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, forget bias 1."""
    rng = np.random.default_rng(seed)
    H = hidden_size

    def uniform(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)

    layers = []
    d_in = input_size
    for _ in range(n_layers):
        W_x = uniform(4 * H, d_in)
        W_h = uniform(4 * H, H)
        b = np.zeros(4 * H, dtype=dtype)
        b[H:2 * H] = 1.0
        layers.append(LstmLayerParams(W_x, W_h, b))
        d_in = H
    head = DenseParams(uniform(output_size, H), np.zeros(output_size, dtype=dtype))
    return LstmModel(layers, head, int(seed))


# ---------------------------------------------------------------------------
# forward

@dataclass
class CellCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    z: np.ndarray  # pre-activations
    gates: np.ndarray  # [i, f, g, o] activations
    c: np.ndarray
    tanh_c: np.ndarray


def _cell_step(params: LstmLayerParams, xz: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    """One step given the input projection ``xz = x @ W_x.T + b``."""
    H = params.hidden_size
    z = xz + h_prev @ params.W_h.T
    gates = np.empty_like(z)
    gates[..., :2 * H] = sigmoid(z[..., :2 * H])
    gates[..., 2 * H:3 * H] = np.tanh(z[..., 2 * H:3 * H])
    gates[..., 3 * H:] = sigmoid(z[..., 3 * H:])
    i, f, g, o = (gates[..., k * H:(k + 1) * H] for k in range(4))
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    return o * tanh_c, c, z, gates, tanh_c


def lstm_cell_forward(params: LstmLayerParams, x, h_prev, c_prev):
    """Single LSTM step; returns ``(h, c, cache)``."""
    x, h_prev, c_prev = (np.asarray(a, dtype=params.W_x.dtype) for a in (x, h_prev, c_prev))
    if not (np.isfinite(x).all() and np.isfinite(h_prev).all() and np.isfinite(c_prev).all()):
        raise ValueError("non-finite input to LSTM cell")
    if x.shape[-1] != params.input_size or h_prev.shape[-1] != params.hidden_size or c_prev.shape != h_prev.shape:
        raise ValueError(f"cell shapes x={x.shape} h={h_prev.shape} c={c_prev.shape} do not match parameters")
    h, c, z, gates, tanh_c = _cell_step(params, x @ params.W_x.T + params.b, h_prev, c_prev)
    return h, c, CellCache(x, h_prev, c_prev, z, gates, c, tanh_c)


@dataclass
class LayerCache:
    inputs: np.ndarray  # (T, B, D_in)
    z: np.ndarray  # (T, B, 4H)
    gates: np.ndarray  # (T, B, 4H)
    c: np.ndarray  # (T+1, B, H), c[0] is the zero initial state
    h: np.ndarray  # (T+1, B, H)
    tanh_c: np.ndarray  # (T, B, H)


@dataclass
class ForwardCache:
    layers: list[LayerCache] = field(default_factory=list)
    head_input: np.ndarray | None = None  # top-layer h at the last step, (B, H)
    batched: bool = True


def model_forward(model: LstmModel, window) -> tuple[np.ndarray, ForwardCache]:
    """Run the window through the stack and the linear head.

    Returns ``y_hat`` of shape ``(2,)`` for a single window or ``(B, 2)``
    for a batch, plus the cache needed by :func:`model_backward`.
    """
    x = np.asarray(window, dtype=model.dtype)
    batched = x.ndim == 3
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != model.input_size or x.shape[1] < 1:
        raise ValueError(f"window shape {np.shape(window)} incompatible with input size {model.input_size}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite value in input window")
    B, T, _ = x.shape
    seq = x.transpose(1, 0, 2)  # time-major
    cache = ForwardCache(batched=batched)
    for params in model.layers:
        H = params.hidden_size
        xz = seq @ params.W_x.T + params.b
        h = np.zeros((T + 1, B, H), dtype=model.dtype)
        c = np.zeros((T + 1, B, H), dtype=model.dtype)
        z = np.empty((T, B, 4 * H), dtype=model.dtype)
        gates = np.empty_like(z)
        tanh_c = np.empty((T, B, H), dtype=model.dtype)
        for t in range(T):
            h[t + 1], c[t + 1], z[t], gates[t], tanh_c[t] = _cell_step(params, xz[t], h[t], c[t])
        cache.layers.append(LayerCache(seq, z, gates, c, h, tanh_c))
        seq = h[1:]
    cache.head_input = seq[-1]
    y_hat = cache.head_input @ model.head.W.T + model.head.b
    return (y_hat if batched else y_hat[0]), cache


def predict(model: LstmModel, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Batched inference over ``(N, T, D)`` inputs."""
    out = [model_forward(model, inputs[k:k + batch_size])[0] for k in range(0, len(inputs), batch_size)]
    return np.concatenate(out, axis=0) if out else np.empty((0, model.output_size))


# ---------------------------------------------------------------------------
# backward

def model_backward(model: LstmModel, cache: ForwardCache, dL_dy) -> Gradients:
    """Exact gradients of the loss w.r.t. every parameter, by BPTT.

    ``dL_dy`` is the upstream gradient w.r.t. ``y_hat`` with the same shape
    the forward pass returned; batch contributions are summed.
    """
    dy = np.asarray(dL_dy, dtype=model.dtype)
    if not cache.batched:
        dy = dy[None]
    if dy.shape != (cache.head_input.shape[0], model.output_size):
        raise ValueError(f"upstream gradient shape {np.shape(dL_dy)} does not match forward output")
    if not np.isfinite(dy).all():
        raise ValueError("non-finite upstream gradient")
    grads = model.zeros_like()
    grads.head.W[...] = dy.T @ cache.head_input
    grads.head.b[...] = dy.sum(axis=0)

    top = cache.layers[-1]
    T, B, _ = top.z.shape
    dh_seq = np.zeros((T, B, model.hidden_size), dtype=model.dtype)
    dh_seq[-1] = dy @ model.head.W
    for params, lc, g in zip(reversed(model.layers), reversed(cache.layers), reversed(grads.layers)):
        H = params.hidden_size
        dz = np.empty_like(lc.z)
        dh_next = np.zeros((B, H), dtype=model.dtype)
        dc_next = np.zeros((B, H), dtype=model.dtype)
        for t in reversed(range(T)):
            i, f, gg, o = (lc.gates[t, :, k * H:(k + 1) * H] for k in range(4))
            dh = dh_seq[t] + dh_next
            tc = lc.tanh_c[t]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz[t, :, :H] = dc * gg * i * (1.0 - i)
            dz[t, :, H:2 * H] = dc * lc.c[t] * f * (1.0 - f)
            dz[t, :, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            dz[t, :, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz[t] @ params.W_h
        flat_dz = dz.reshape(T * B, 4 * H)
        g.W_x[...] = flat_dz.T @ lc.inputs.reshape(T * B, -1)
        g.W_h[...] = flat_dz.T @ lc.h[:-1].reshape(T * B, H)
        g.b[...] = flat_dz.sum(axis=0)
        dh_seq = dz @ params.W_x
    return grads


# ---------------------------------------------------------------------------
# finite differences

def central_difference(f: Callable[[], float], arrays: list[np.ndarray], eps: float) -> list[np.ndarray]:
    """Estimate df/dθ for every scalar θ in ``arrays`` by perturbing in place.

    ``f`` must read the arrays when called; each entry is restored afterwards.
    """
    if not eps > 0:
        raise ValueError("finite-difference step must be positive")
    out = []
    for arr in arrays:
        grad = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            plus = f()
            flat[k] = orig - eps
            minus = f()
            flat[k] = orig
            gflat[k] = (plus - minus) / (2.0 * eps)
        out.append(grad)
    return out


def numerical_gradient(model: LstmModel, window, target, eps: float = 1e-5, loss=mse_loss) -> Gradients:
    """Central-difference estimate of d loss(model(window), target) / dΘ."""
    work = model.copy()
    target = np.asarray(target, dtype=float)
    estimates = central_difference(lambda: loss(model_forward(work, window)[0], target), work.arrays(), eps)
    grads = work.zeros_like()
    for dst, src in zip(grads.arrays(), estimates):
        dst[...] = src
    return grads


# ---------------------------------------------------------------------------
# checkpoints

def _header(model: LstmModel) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "gate_order": GATE_ORDER,
        "input_size": model.input_size,
        "hidden_size": model.hidden_size,
        "n_layers": len(model.layers),
        "output_size": model.output_size,
        "seed": model.rng_seed,
        "dtype": np.dtype(model.dtype).newbyteorder("<").str,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in model.named_arrays()],
    }


def save_checkpoint(model: LstmModel, path: str | Path) -> None:
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    dtype = np.dtype(model.dtype).newbyteorder("<")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header + b"\n")
        for arr in model.arrays():
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path: str | Path) -> LstmModel:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a model checkpoint")
    end = blob.index(b"\n", len(CHECKPOINT_MAGIC))
    try:
        header = json.loads(blob[len(CHECKPOINT_MAGIC):end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if header.get("gate_order") != GATE_ORDER:
        raise CheckpointError(f"{path}: gate order {header.get('gate_order')!r} != {GATE_ORDER!r}")
    dtype = np.dtype(header["dtype"])
    # expected layout recomputed from the declared dimensions
    template = init_params(0, header["input_size"], header["hidden_size"], header["n_layers"], header["output_size"])
    expected = [(name, list(arr.shape)) for name, arr in template.named_arrays()]
    declared = [(a["name"], a["shape"]) for a in header["arrays"]]
    if declared != expected:
        raise CheckpointError(f"{path}: array layout does not match declared dimensions")
    payload = blob[end + 1:]
    total = sum(int(np.prod(shape)) for _, shape in expected) * dtype.itemsize
    if len(payload) != total:
        raise CheckpointError(f"{path}: expected {total} bytes of parameters, found {len(payload)}")
    offset = 0
    arrays = []
    for _, shape in expected:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype=dtype, count=n, offset=offset).reshape(shape)
        arrays.append(arr.astype(dtype.newbyteorder("="), copy=True))
        offset += n * dtype.itemsize
    if not all(np.isfinite(a).all() for a in arrays):
        raise CheckpointError(f"{path}: non-finite parameter values")
    layers = [LstmLayerParams(*arrays[3 * k:3 * k + 3]) for k in range(header["n_layers"])]
    return LstmModel(layers, DenseParams(arrays[-2], arrays[-1]), int(header["seed"]))
