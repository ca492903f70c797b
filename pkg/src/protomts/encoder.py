"""Per-variable LSTM encoders.

The recurrence runs as one fused autodiff node (:func:`lstm_last_hidden`):
the forward pass keeps the gate activations of every step and the backward
pass is hand-written backpropagation through time. This keeps the tape a
handful of nodes long regardless of series length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor

DEFAULT_HIDDEN = 32


@dataclass
class EncoderParams:
    """Weights of one single-layer LSTM with scalar input.

    Gates are packed as [input, forget, output, candidate] along the last axis.
    """

    variable: int
    hidden: int
    W_in: Tensor  # (1, 4h)
    W_rec: Tensor  # (h, 4h)
    bias: Tensor  # (4h,)

    def parameters(self) -> list[Tensor]:
        return [self.W_in, self.W_rec, self.bias]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W_in": self.W_in.data, "W_rec": self.W_rec.data, "bias": self.bias.data}


def init_encoder(k: int, f_k: int = DEFAULT_HIDDEN, seed: int = 0, chrono_steps: int | None = None) -> EncoderParams:
    """Uniform(-1/sqrt(f_k), 1/sqrt(f_k)) initialization, deterministic in ``seed``.

    With ``chrono_steps`` = T the forget-gate biases are instead set to
    log(u), u ~ Uniform(1, T - 1), and the input-gate biases to their
    negatives ("chrono" initialization). Forget gates then start near 1 with
    memory time scales spread up to about T steps, which the plain uniform
    draw (forget gate near 0.5) does not give.
    """
    if f_k < 1:
        raise ContractError(f"hidden size must be positive, got {f_k}")
    s = 1.0 / np.sqrt(f_k)
    rng = np.random.default_rng([seed, k])
    bias = rng.uniform(-s, s, size=(4 * f_k,))
    params = EncoderParams(
        variable=k,
        hidden=f_k,
        W_in=Tensor(rng.uniform(-s, s, size=(1, 4 * f_k)), requires_grad=True),
        W_rec=Tensor(rng.uniform(-s, s, size=(f_k, 4 * f_k)), requires_grad=True),
        bias=Tensor(bias, requires_grad=True),
    )
    if chrono_steps is not None:
        if chrono_steps < 3:
            raise ContractError(f"chrono initialization needs at least 3 steps, got {chrono_steps}")
        forget = np.log(rng.uniform(1.0, chrono_steps - 1.0, size=f_k))
        params.bias.data[f_k : 2 * f_k] = forget
        params.bias.data[:f_k] = -forget
    return params


@nb.njit(cache=True)
def _lstm_bptt(acts, cells, tanh_c, w_rec_t, g, dz):  # pragma: no cover - compiled
    # Fills dz[t] = dLoss/d(pre-activation) at step t; sigmoid gates i, f, o first.
    T, B, G = acts.shape
    H = G // 4
    dh = g.copy()
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        for r in range(B):
            for j in range(H):
                i = acts[t, r, j]
                f = acts[t, r, H + j]
                o = acts[t, r, 2 * H + j]
                cand = acts[t, r, 3 * H + j]
                tc = tanh_c[t, r, j]
                dcv = dc[r, j] + dh[r, j] * o * (1.0 - tc * tc)
                dz[t, r, j] = dcv * cand * i * (1.0 - i)
                dz[t, r, H + j] = dcv * cells[t, r, j] * f * (1.0 - f)
                dz[t, r, 2 * H + j] = dh[r, j] * tc * o * (1.0 - o)
                dz[t, r, 3 * H + j] = dcv * i * (1.0 - cand * cand)
                dc[r, j] = dcv * f
        dh = dz[t] @ w_rec_t


def lstm_last_hidden(x: Tensor, W_in: Tensor, W_rec: Tensor, bias: Tensor) -> Tensor:
    """Final hidden state of an LSTM run over ``x`` of shape (batch, steps)."""
    if x.data.ndim != 2:
        raise DimensionError(f"expected input of shape (batch, steps), got {x.shape}")
    B, T = x.shape
    H = W_rec.shape[0]
    if W_in.shape != (1, 4 * H) or W_rec.shape != (H, 4 * H) or bias.shape != (4 * H,):
        raise DimensionError(f"inconsistent LSTM weights {W_in.shape}, {W_rec.shape}, {bias.shape}")
    xs = x.data
    S = 3 * H  # sigmoid gates i, f, o come first; the tanh candidate last

    # One matmul per step: state rows are [h_t, x_t, 1] against [W_rec; W_in; bias].
    # Sigmoid columns are pre-halved so a single tanh serves every gate:
    # sigmoid(z) = (1 + tanh(z / 2)) / 2.
    half = np.full(4 * H, 0.5)
    half[S:] = 1.0
    w_aug = np.vstack([W_rec.data, W_in.data, bias.data[None, :]]) * half
    state = np.empty((T + 1, B, H + 2))
    state[:, :, :H] = 0.0
    state[:T, :, H] = xs.T
    state[T, :, H] = 0.0
    state[:, :, H + 1] = 1.0

    acts = np.empty((T, B, 4 * H))
    cells = np.zeros((T + 1, B, H))
    tanh_c = np.empty((T, B, H))
    ig = np.empty((B, H))
    for t in range(T):
        a = acts[t]
        np.matmul(state[t], w_aug, out=a)
        np.tanh(a, out=a)
        sg = a[:, :S]
        sg *= 0.5
        sg += 0.5
        c = cells[t + 1]
        np.multiply(a[:, H : 2 * H], cells[t], out=c)
        np.multiply(a[:, :H], a[:, S:], out=ig)
        c += ig
        np.tanh(c, out=tanh_c[t])
        np.multiply(a[:, 2 * H : S], tanh_c[t], out=state[t + 1, :, :H])
    last = state[T, :, :H].copy()

    def backward(g):
        dz = np.empty((T, B, 4 * H))
        _lstm_bptt(acts, cells, tanh_c, np.ascontiguousarray(W_rec.data.T), np.ascontiguousarray(g), dz)
        flat = dz.reshape(T * B, 4 * H)
        d_rec = state[:T, :, :H].reshape(T * B, H).T @ flat
        d_b = flat.sum(axis=0)
        d_in = xs.T.reshape(T * B) @ flat
        d_x = (dz @ W_in.data[0]).T if x.requires_grad else None
        return d_x, d_in[None, :], d_rec, d_b

    return Tensor._make(last, (x, W_in, W_rec, bias), backward, "lstm")


def _check_series(x: np.ndarray) -> None:
    if x.shape[-1] == 0:
        raise ContractError("cannot encode an empty series")
    if not np.all(np.isfinite(x)):
        raise ContractError("series contains NaN or infinite values")


def encode(params: EncoderParams, series) -> Tensor:
    """Encode one length-n series into a vector of length ``params.hidden``."""
    if isinstance(series, Tensor):
        x = series.reshape(1, -1)
    else:
        x = Tensor(np.asarray(series, dtype=np.float64).reshape(1, -1))
    _check_series(x.data)
    return lstm_last_hidden(x, params.W_in, params.W_rec, params.bias).reshape(params.hidden)


def encode_batch(params: EncoderParams, series) -> Tensor:
    """Encode a (batch, n) array; returns (batch, hidden)."""
    x = series if isinstance(series, Tensor) else Tensor(np.asarray(series, dtype=np.float64))
    _check_series(x.data)
    return lstm_last_hidden(x, params.W_in, params.W_rec, params.bias)


def encode_array(params: EncoderParams, series: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Gradient-free encoding of many series, chunked to bound memory."""
    series = np.asarray(series, dtype=np.float64)
    _check_series(series)
    frozen = [Tensor(p.data) for p in params.parameters()]
    out = [
        lstm_last_hidden(Tensor(series[s : s + chunk]), *frozen).data
        for s in range(0, series.shape[0], chunk)
    ]
    return np.concatenate(out) if out else np.zeros((0, params.hidden))
