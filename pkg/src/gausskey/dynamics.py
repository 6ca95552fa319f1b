"""Residual-state LSTM for pose dynamics.

At every step the model reads ``[s_t, r_t]`` (the packed state and the
residual ``r_t = s_t - s_{t-1}``, zero at the first step of a window) and
emits the next residual; the predicted state is ``s_t + r_{t+1}``. During
the teacher-forced prefix inputs come from data; afterwards the model's
own state and residual are fed back.

Parameters live in one flat float64 vector ``theta``; ``param_layout``
gives the order, which is also the checkpoint order::

    for each layer l:  lstm.l.w_ih (4H, in_l), lstm.l.w_hh (4H, H), lstm.l.b (4H)
    head.w (D, H), head.b (D)

Gate blocks inside each ``4H`` axis are ordered input, forget, cell
candidate, output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import rng as _rng
from .errors import DivergenceError, FormatError, GradientError, RolloutError, ShapeError
from .optim import AdamW
from .state import STATE_WIDTH, StateSequence

CHECKPOINT_MAGIC = b"GKLSTM01"
DEFAULT_HIDDEN = 256
DEFAULT_LAYERS = 3
FORGET_BIAS = 1.0
# Residual inputs are multiplied by this gain and head outputs divided by
# it. Per-frame motion in normalized units is ~1e-2, far below the O(1)
# state entries; the gain puts both halves of the input on one scale.
RESIDUAL_SCALE = 100.0
# squared errors are measured in residual units; raw state MSE is ~1e-6,
# which puts per-parameter gradients at the scale of Adam's eps
LOSS_SCALE = RESIDUAL_SCALE**2


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


def param_layout(state_dim: int, hidden: int, layers: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for l in range(layers):
        in_dim = 2 * state_dim if l == 0 else hidden
        out += [
            (f"lstm.{l}.w_ih", (4 * hidden, in_dim)),
            (f"lstm.{l}.w_hh", (4 * hidden, hidden)),
            (f"lstm.{l}.b", (4 * hidden,)),
        ]
    out += [("head.w", (state_dim, hidden)), ("head.b", (state_dim,))]
    return out


def param_count(state_dim: int, hidden: int, layers: int) -> int:
    return sum(int(np.prod(s)) for _, s in param_layout(state_dim, hidden, layers))


class LstmModel:
    """Stacked LSTM plus linear head over packed pose states.

    ``params`` maps names to views into ``theta``; writing through a view
    updates the flat vector.
    """

    def __init__(self, num_landmarks: int, hidden: int = DEFAULT_HIDDEN, layers: int = DEFAULT_LAYERS, theta=None):
        if num_landmarks < 1 or hidden < 1 or layers < 1:
            raise ValueError("num_landmarks, hidden and layers must be positive")
        self.num_landmarks = int(num_landmarks)
        self.hidden = int(hidden)
        self.layers = int(layers)
        n = param_count(self.state_dim, self.hidden, self.layers)
        if theta is None:
            theta = np.zeros(n)
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise ShapeError(f"expected {n} parameters, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ShapeError("model parameters must be finite")
        self.theta = theta
        self.params = _split(theta, self)

    @property
    def state_dim(self) -> int:
        return STATE_WIDTH * self.num_landmarks

    @property
    def input_dim(self) -> int:
        return 2 * self.state_dim

    def copy(self) -> "LstmModel":
        return LstmModel(self.num_landmarks, self.hidden, self.layers, self.theta.copy())

    def layer(self, l):
        p = self.params
        return p[f"lstm.{l}.w_ih"], p[f"lstm.{l}.w_hh"], p[f"lstm.{l}.b"]

    def __repr__(self):
        return f"LstmModel(K={self.num_landmarks}, hidden={self.hidden}, layers={self.layers})"


def init_model(
    num_landmarks: int,
    hidden: int = DEFAULT_HIDDEN,
    layers: int = DEFAULT_LAYERS,
    seed: int = 0,
    zero_head: bool = True,
) -> LstmModel:
    """Orthogonal recurrent blocks, U(+-1/sqrt(fan_in)) input weights, forget bias 1.

    With ``zero_head`` the head starts at zero, so the untrained model
    predicts zero residuals (it holds the last state).
    """
    model = LstmModel(num_landmarks, hidden, layers)
    gen = _rng.stream(seed, "dynamics.init")
    H = hidden
    for l in range(layers):
        w_ih, w_hh, b = model.layer(l)
        bound = 1.0 / np.sqrt(w_ih.shape[1])
        w_ih[...] = gen.uniform(-bound, bound, size=w_ih.shape)
        for g in range(4):
            q, r = np.linalg.qr(gen.normal(size=(H, H)))
            w_hh[g * H : (g + 1) * H] = q * np.sign(np.diag(r))
        b[...] = 0.0
        b[H : 2 * H] = FORGET_BIAS
    if not zero_head:
        bound = 1.0 / np.sqrt(H)
        model.params["head.w"][...] = gen.uniform(-bound, bound, size=model.params["head.w"].shape)
        model.params["head.b"][...] = gen.uniform(-bound, bound, size=model.params["head.b"].shape)
    return model


def zero_hidden(model: LstmModel, batch: int | None = None):
    shape = (model.layers, model.hidden) if batch is None else (model.layers, batch, model.hidden)
    return np.zeros(shape), np.zeros(shape)


def _cell(w_ih, w_hh, b, x, h, c):
    H = h.shape[-1]
    z = x @ w_ih.T + h @ w_hh.T + b
    i = expit(z[..., :H])
    f = expit(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = expit(z[..., 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (x, h, c, i, f, g, o, tc)


def _split(theta, model: "LstmModel") -> dict:
    """Named views into a flat parameter vector laid out like ``model``."""
    theta = np.asarray(theta)
    if theta.shape != model.theta.shape:
        raise ShapeError(f"expected {model.theta.size} parameters, got {theta.shape}")
    out = {}
    off = 0
    for name, shape in param_layout(model.state_dim, model.hidden, model.layers):
        size = int(np.prod(shape))
        out[name] = theta[off : off + size].reshape(shape)
        off += size
    return out


class _Weights:
    """Per-layer ``(w_ih, w_hh, b)`` and head ``(w, b)`` in one compute dtype."""

    def __init__(self, model: "LstmModel", dtype=np.float64, theta=None):
        p = model.params
        if theta is not None:
            p = _split(theta, model)
        cast = (lambda a: a) if np.asarray(next(iter(p.values()))).dtype == np.dtype(dtype) else (lambda a: a.astype(dtype))
        self.dtype = np.dtype(dtype)
        self.layers = [
            tuple(cast(p[f"lstm.{l}.{n}"]) for n in ("w_ih", "w_hh", "b")) for l in range(model.layers)
        ]
        self.head = (cast(p["head.w"]), cast(p["head.b"]))
        self.hidden = model.hidden
        self.state_dim = model.state_dim


def _forward_step(w: _Weights, h, c, x, caches=None):
    h_new = np.empty_like(h)
    c_new = np.empty_like(c)
    inp = x
    step_cache = []
    for l, layer in enumerate(w.layers):
        inp, c_new[l], cache = _cell(*layer, inp, h[l], c[l])
        h_new[l] = inp
        step_cache.append(cache)
    y = inp @ w.head[0].T + w.head[1]
    if caches is not None:
        caches.append(step_cache)
    return y, h_new, c_new


def lstm_step(model: LstmModel, hidden, x):
    """One recurrent step. Returns ``(output, (h, c))``.

    ``x`` is a 2D-vector (or a (B, 2D) batch); ``hidden`` is the pair from
    ``zero_hidden`` or a previous call.
    """
    x = np.asarray(x, dtype=np.float64)
    h, c = hidden
    if x.shape[-1] != model.input_dim:
        raise ShapeError(f"input width {x.shape[-1]} != 2D = {model.input_dim}")
    if h.shape[0] != model.layers or h.shape[-1] != model.hidden or h.shape != c.shape:
        raise ShapeError(f"hidden state shape {h.shape} does not fit {model!r}")
    if h.shape[1:-1] != x.shape[:-1]:
        raise ShapeError(f"hidden batch {h.shape[1:-1]} != input batch {x.shape[:-1]}")
    y, h, c = _forward_step(_Weights(model), h, c, x)
    return y, (h, c)


# --------------------------------------------------------------------------
# Unrolling
# --------------------------------------------------------------------------


@dataclass
class Trace:
    """Everything one unroll produced.

    ``preds[:, t]`` is the state predicted for time ``t + 1`` and
    ``outputs[:, t]`` the residual emitted at step ``t``; ``fed_back[t]``
    records whether step ``t`` consumed the model's own output.
    """

    preds: np.ndarray
    outputs: np.ndarray
    fed_back: list[bool]
    caches: list = field(default_factory=list)
    top_hidden: list = field(default_factory=list)


def _unroll(w: _Weights, frames: np.ndarray, n_teacher: int, n_steps: int, keep_cache: bool = False) -> Trace:
    """Run ``n_steps`` steps over (B, >= n_teacher, D) ground-truth frames."""
    B, _, D = frames.shape
    if D != w.state_dim:
        raise ShapeError(f"state width {D} does not match model D={w.state_dim}")
    frames = frames.astype(w.dtype, copy=False)
    h = np.zeros((len(w.layers), B, w.hidden), dtype=w.dtype)
    c = np.zeros_like(h)
    preds = np.empty((B, n_steps, D), dtype=w.dtype)
    outputs = np.empty((B, n_steps, D), dtype=w.dtype)
    fed = []
    caches = [] if keep_cache else None
    tops = []
    x = np.empty((B, 2 * D), dtype=w.dtype)
    for t in range(n_steps):
        if t < n_teacher:
            xs = frames[:, t]
            x[:, :D] = xs
            x[:, D:] = (frames[:, t] - frames[:, t - 1]) * RESIDUAL_SCALE if t > 0 else 0.0
            fed.append(False)
        else:
            xs = preds[:, t - 1]
            x[:, :D] = xs
            x[:, D:] = outputs[:, t - 1] * RESIDUAL_SCALE
            fed.append(True)
        y, h, c = _forward_step(w, h, c, x.copy() if keep_cache else x, caches)
        y = y / RESIDUAL_SCALE
        if not np.all(np.isfinite(y)):
            raise RolloutError(f"non-finite model output at step {t}", step=t)
        outputs[:, t] = y
        preds[:, t] = xs + y
        if keep_cache:
            tops.append(h[-1].copy())
    return Trace(preds, outputs, fed, caches or [], tops)


def _as_frames(seq) -> np.ndarray:
    if isinstance(seq, StateSequence):
        return seq.packed()
    a = np.asarray(seq, dtype=np.float64)
    return a.reshape(a.shape[0], -1)


@dataclass(frozen=True)
class RolloutResult:
    states: StateSequence
    residuals: np.ndarray  # (horizon, D) emitted residuals for the predicted frames
    fed_back: tuple[bool, ...]


def rollout_detailed(model: LstmModel, seeds, horizon: int) -> RolloutResult:
    frames = _as_frames(seeds)
    n = frames.shape[0]
    if n < 2:
        raise ValueError("rollout needs at least 2 seed states")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    D = frames.shape[1]
    if D != model.state_dim:
        raise ShapeError(f"seed K={D // STATE_WIDTH} does not match model K={model.num_landmarks}")
    if horizon == 0:
        out = frames
        res = np.empty((0, D))
        fed = ()
    else:
        tr = _unroll(_Weights(model), frames[None], n, n + horizon - 1)
        out = np.concatenate([frames, tr.preds[0, n - 1 :]], axis=0)
        res = tr.outputs[0, n - 1 :]
        fed = tuple(tr.fed_back)
    return RolloutResult(StateSequence(out.reshape(len(out), -1, STATE_WIDTH)), res, fed)


def rollout(model: LstmModel, seeds, horizon: int) -> StateSequence:
    """Teacher-force the seed states, then predict ``horizon`` frames.

    Returns the seeds followed by the predictions. Predicted factors are
    not projected back to valid Cholesky factors; consume their
    covariances through ``factor_to_cov(..., allow_invalid=True)``.
    """
    return rollout_detailed(model, seeds, horizon).states


# --------------------------------------------------------------------------
# Loss and gradients
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutConfig:
    n_inputs: int = 10
    m_future: int = 10

    def __post_init__(self):
        if self.n_inputs < 2:
            raise ValueError("n_inputs must be >= 2 (the first residual needs two states)")
        if self.m_future < 0:
            raise ValueError("m_future must be >= 0")

    @property
    def window(self) -> int:
        return self.n_inputs + self.m_future

    @property
    def supervised(self) -> int:
        return self.n_inputs + self.m_future - 1


def loss(predicted, target) -> float:
    """Mean squared error over every packed parameter and timestep, times ``LOSS_SCALE``."""
    p = _as_frames(predicted)
    t = _as_frames(target)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    return float(LOSS_SCALE * np.mean((p - t) ** 2))


def _batch_frames(batch) -> np.ndarray:
    b = np.asarray(batch, dtype=np.float64)
    if b.ndim == 4:
        b = b.reshape(b.shape[0], b.shape[1], -1)
    if b.ndim != 3:
        raise ShapeError(f"batch must be (B, T, D) or (B, T, K, 5), got {b.shape}")
    return b


def forward_loss(model: LstmModel, batch, cfg: RolloutConfig, dtype=np.float64, theta=None):
    """Training loss of ``batch`` without gradients.

    ``dtype`` selects the arithmetic and ``theta`` (laid out like
    ``model.theta``) overrides the parameters. The result is a scalar of
    ``dtype``, so extended precision survives for finite-difference checks.
    """
    frames = _batch_frames(batch)
    if frames.shape[1] < cfg.window:
        raise ShapeError(f"windows have {frames.shape[1]} frames, need {cfg.window}")
    w = _Weights(model, dtype, theta)
    tr = _unroll(w, frames, cfg.n_inputs, cfg.supervised)
    diff = tr.preds - frames[:, 1 : cfg.window].astype(w.dtype)
    return w.dtype.type(LOSS_SCALE) * np.mean(diff * diff)


def clip_by_norm(grads: dict, max_norm: float | None) -> float:
    """Scale ``grads`` in place to global norm <= ``max_norm``; returns the raw norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def backward(
    model: LstmModel,
    batch,
    cfg: RolloutConfig,
    grad_clip: float | None = None,
    detach_feedback: bool = False,
    dtype=np.float64,
) -> tuple[float, dict]:
    """Loss and its gradient for every parameter, by backpropagation through time.

    Self-fed steps pass gradient back into the states and residuals that
    produced them; ``detach_feedback`` treats those inputs as constants.
    ``dtype`` selects the arithmetic of the pass; returned gradients are
    always float64.
    """
    frames = _batch_frames(batch)
    if frames.shape[1] < cfg.window:
        raise ShapeError(f"windows have {frames.shape[1]} frames, need {cfg.window}")
    frames = frames[:, : cfg.window]
    B, _, D = frames.shape
    S = cfg.supervised
    w = _Weights(model, dtype)
    tr = _unroll(w, frames, cfg.n_inputs, S, keep_cache=True)
    diff = tr.preds - frames[:, 1:].astype(w.dtype)
    value = float(LOSS_SCALE * np.mean(diff.astype(np.float64) ** 2))
    if not np.isfinite(value):
        raise GradientError("loss is not finite", parameter=None)

    grads = {}
    w_out = w.head[0]
    L, H = model.layers, model.hidden
    dh_next = np.zeros((L, B, H), dtype=w.dtype)
    dc_next = np.zeros((L, B, H), dtype=w.dtype)
    gpred = diff * w.dtype.type(2.0 * LOSS_SCALE / diff.size)
    gy_extra = np.zeros_like(gpred)

    dz_all = np.empty((L, S, B, 4 * H), dtype=w.dtype)
    dy_all = np.empty((S, B, D), dtype=w.dtype)
    for t in reversed(range(S)):
        dy = (gpred[:, t] + gy_extra[:, t]) / RESIDUAL_SCALE
        dy_all[t] = dy
        dh = dy @ w_out
        for l in reversed(range(L)):
            x, h_prev, c_prev, i, f, g, o, tc = tr.caches[t][l]
            w_ih, w_hh, _ = w.layers[l]
            dh = dh + dh_next[l]
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next[l]
            dz = dz_all[l, t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H :] = do * o * (1.0 - o)
            dh_next[l] = dz @ w_hh
            dc_next[l] = dc * f
            dh = dz @ w_ih
        if tr.fed_back[t] and not detach_feedback:
            # input state was preds[t-1]; it also reaches preds[t] directly
            gpred[:, t - 1] += dh[:, :D] + gpred[:, t]
            gy_extra[:, t - 1] += dh[:, D:] * RESIDUAL_SCALE

    # weight gradients as one product over all timesteps
    tops = np.stack(tr.top_hidden).reshape(S * B, H)
    grads["head.w"] = dy_all.reshape(S * B, D).T @ tops
    grads["head.b"] = dy_all.reshape(S * B, D).sum(axis=0)
    for l in range(L):
        xs = np.stack([tr.caches[t][l][0] for t in range(S)]).reshape(S * B, -1)
        hs = np.stack([tr.caches[t][l][1] for t in range(S)]).reshape(S * B, H)
        dz = dz_all[l].reshape(S * B, 4 * H)
        grads[f"lstm.{l}.w_ih"] = dz.T @ xs
        grads[f"lstm.{l}.w_hh"] = dz.T @ hs
        grads[f"lstm.{l}.b"] = dz.sum(axis=0)

    grads = {name: g.astype(np.float64, copy=False) for name, g in grads.items()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for {name}", parameter=name)
    clip_by_norm(grads, grad_clip)
    return value, grads


def flatten_grads(model: LstmModel, grads: dict) -> np.ndarray:
    return np.concatenate([grads[name].ravel() for name, _ in param_layout(model.state_dim, model.hidden, model.layers)])


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    max_steps: int = 1000
    seed: int = 0
    grad_clip: float | None = 5.0
    divergence_loss: float = 1e6
    # arithmetic of the forward/backward passes; parameters and Adam state stay float64
    compute_dtype: str = "float32"

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.weight_decay >= 0 and self.adam_eps > 0):
            raise ValueError("learning rate and eps must be positive, weight decay nonnegative")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")


def make_windows(dataset: Iterable, window: int) -> np.ndarray:
    """Every length-``window`` slice of every sequence, as (N, window, D)."""
    out = []
    K = None
    for i, seq in enumerate(dataset):
        frames = _as_frames(seq)
        if K is None:
            K = frames.shape[1]
        elif frames.shape[1] != K:
            raise ShapeError(f"sequence {i} has state width {frames.shape[1]}, expected {K}")
        if frames.shape[0] < window:
            raise ShapeError(f"sequence {i} has {frames.shape[0]} frames, needs >= {window}")
        for s in range(frames.shape[0] - window + 1):
            out.append(frames[s : s + window])
    if not out:
        raise ShapeError("empty dataset")
    return np.stack(out)


def train(
    model: LstmModel,
    dataset: Sequence,
    rollout_cfg: RolloutConfig,
    train_cfg: TrainConfig,
    callback=None,
) -> tuple[LstmModel, np.ndarray]:
    """Fit ``model`` to windows of ``dataset`` with AdamW.

    Returns a trained copy and the per-step training loss. Batches are drawn
    by reshuffling the windows each epoch from the ``dynamics.batches``
    stream, so runs with equal seeds are identical. ``callback(step, loss)``
    is called after every update.
    """
    windows = make_windows(dataset, rollout_cfg.window)
    if windows.shape[2] != model.state_dim:
        raise ShapeError(f"dataset K={windows.shape[2] // STATE_WIDTH} does not match model K={model.num_landmarks}")
    model = model.copy()
    opt = AdamW(
        model.theta.size,
        lr=train_cfg.learning_rate,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.adam_eps,
        weight_decay=train_cfg.weight_decay,
    )
    gen = _rng.stream(train_cfg.seed, "dynamics.batches")
    n = len(windows)
    bs = min(train_cfg.batch_size, n)
    order = gen.permutation(n)
    pos = 0
    losses = np.empty(train_cfg.max_steps)
    for step in range(train_cfg.max_steps):
        if pos + bs > n:
            order = gen.permutation(n)
            pos = 0
        idx = order[pos : pos + bs]
        pos += bs
        value, grads = backward(
            model, windows[idx], rollout_cfg, grad_clip=train_cfg.grad_clip, dtype=train_cfg.compute_dtype
        )
        if not value <= train_cfg.divergence_loss:
            raise DivergenceError(f"training diverged at step {step}: loss {value:.6g}", step=step, loss=value)
        losses[step] = value
        opt.step(model.theta, flatten_grads(model, grads))
        if callback is not None:
            callback(step, value)
    return model, losses


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def checkpoint_bytes(model: LstmModel) -> bytes:
    head = CHECKPOINT_MAGIC + struct.pack("<4I", model.num_landmarks, model.state_dim, model.layers, model.hidden)
    return head + model.theta.astype("<f8").tobytes()


def model_from_bytes(data: bytes) -> LstmModel:
    hdr = len(CHECKPOINT_MAGIC) + 16
    if len(data) < hdr or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a GKLSTM01 checkpoint")
    K, D, layers, hidden = struct.unpack("<4I", data[len(CHECKPOINT_MAGIC) : hdr])
    if min(K, layers, hidden) < 1 or D != STATE_WIDTH * K:
        raise FormatError(f"invalid checkpoint header K={K}, D={D}, layers={layers}, hidden={hidden}")
    n = param_count(D, hidden, layers)
    body = data[hdr:]
    if len(body) != 8 * n:
        raise FormatError(f"checkpoint body has {len(body)} bytes, expected {8 * n}")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return LstmModel(K, hidden, layers, theta)


def save_checkpoint(model: LstmModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> LstmModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
