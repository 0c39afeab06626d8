"""Frame encoder, recurrent context network, and the InfoNCE objective.

The encoder is five strided 1-D convolutions (strides 5,4,2,2,2; kernels
10,8,4,4,4) with tanh activations, downsampling 16 kHz audio by 160x to a
100 Hz frame rate. Per-layer padding totals kernel - stride, which makes the
frame count exactly floor(samples/160). A single-layer GRU (or LSTM) turns
frames z into causal context vectors c. One affine head per prediction
offset k scores exp(head_k(c_n) . z_{n+k}) against negatives drawn from
other frames of the same utterance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import conv1d_forward, gru_forward, lstm_forward
from .errors import ContractError

FRAME_SAMPLES_FACTOR = 160


@dataclass
class ModelConfig:
    dim: int = 128
    conv_channels: tuple = (64, 128, 128, 128, 128)
    conv_kernels: tuple = (10, 8, 4, 4, 4)
    conv_strides: tuple = (5, 4, 2, 2, 2)
    cell: str = "gru"
    cpc_steps: int = 12
    cpc_negatives: int = 8
    boundary_hidden: int = 64
    boundary_kernel: int = 3

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.conv_kernels = tuple(self.conv_kernels)
        self.conv_strides = tuple(self.conv_strides)
        n = len(self.conv_channels)
        if len(self.conv_kernels) != n or len(self.conv_strides) != n:
            raise ContractError("conv channel/kernel/stride lists must align")
        if any(k < s for k, s in zip(self.conv_kernels, self.conv_strides)):
            raise ContractError("conv kernels must be at least as wide as strides")
        if self.conv_channels[-1] != self.dim:
            raise ContractError(
                f"last conv width {self.conv_channels[-1]} must equal dim {self.dim}"
            )
        if self.cell not in ("gru", "lstm"):
            raise ContractError(f"cell must be gru or lstm, got {self.cell!r}")
        if self.cpc_steps < 1 or self.cpc_negatives < 1:
            raise ContractError("cpc_steps and cpc_negatives must be >= 1")
        if self.boundary_kernel % 2 != 1:
            raise ContractError("boundary_kernel must be odd")

    @property
    def downsample(self):
        return int(np.prod(self.conv_strides))

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        return cls(**json.loads(s))


@dataclass
class FrameSequence:
    values: np.ndarray  # (N, dim) float32
    frame_rate: float = 100.0


@dataclass
class Model:
    config: ModelConfig
    params: dict

    def param_count(self):
        return sum(int(v.size) for v in self.params.values())


def _conv_pad(kernel, stride):
    total = kernel - stride  # gives t_out = floor(t_in / stride)
    return total // 2, total - total // 2


def init_model(config: ModelConfig, seed) -> Model:
    """Fresh parameters; prediction heads start near zero so a new model
    scores InfoNCE at chance and boundary probabilities sit near 0.5."""
    rng = np.random.default_rng([int(seed), 101])
    p = {}
    cin = 1
    for i, (ch, k) in enumerate(zip(config.conv_channels, config.conv_kernels)):
        p[f"enc{i}.w"] = rng.normal(0.0, 1.0 / np.sqrt(k * cin), size=(k, cin, ch))
        p[f"enc{i}.b"] = np.zeros(ch)
        cin = ch
    d = config.dim
    gates = 3 if config.cell == "gru" else 4
    s = 1.0 / np.sqrt(d)
    p["ar.w"] = rng.uniform(-s, s, size=(d, gates * d))
    p["ar.u"] = rng.uniform(-s, s, size=(d, gates * d))
    b = np.zeros(gates * d)
    if config.cell == "lstm":
        b[d : 2 * d] = 1.0  # forget gate bias
    p["ar.b"] = b
    for k in range(1, config.cpc_steps + 1):
        p[f"head{k:02d}.w"] = rng.normal(0.0, 0.02, size=(d, d))
        p[f"head{k:02d}.b"] = np.zeros(d)
    kb, hb = config.boundary_kernel, config.boundary_hidden
    p["bnd.conv.w"] = rng.normal(0.0, 1.0 / np.sqrt(kb * d), size=(kb, d, hb))
    p["bnd.conv.b"] = np.zeros(hb)
    p["bnd.out.w"] = rng.normal(0.0, 1.0 / np.sqrt(hb), size=(hb, 1))
    p["bnd.out.b"] = np.zeros(1)
    params = {k: v.astype(np.float32) for k, v in p.items()}
    return Model(config=config, params=params)


# ---- plain-numpy forward paths (evaluation; no graph) -----------------------


def _conv_stack_np(x, config, params):
    # x (B, T, 1) float32
    for i, (k, s) in enumerate(zip(config.conv_kernels, config.conv_strides)):
        x = conv1d_forward(x, params[f"enc{i}.w"], s, _conv_pad(k, s))
        x = np.tanh(x + params[f"enc{i}.b"])
    return x


def encode_frames(audio, model: Model) -> FrameSequence:
    """Audio to frame vectors z; exactly floor(samples/160) frames."""
    samples = getattr(audio, "samples", audio)
    sr = getattr(audio, "sample_rate", 16000)
    if sr != 16000:
        raise ContractError(f"encoder expects 16 kHz audio, got {sr} Hz")
    samples = np.asarray(samples, dtype=np.float32)
    down = model.config.downsample
    if samples.size < down:
        raise ContractError(
            f"need at least {down} samples for one frame, got {samples.size}"
        )
    x = samples.reshape(1, -1, 1)
    z = _conv_stack_np(x, model.config, model.params)[0]
    assert z.shape[0] == samples.size // down
    return FrameSequence(values=z, frame_rate=sr / down)


def contextualize(z: FrameSequence, model: Model) -> FrameSequence:
    """Causal context vectors c from frames z."""
    v = np.asarray(z.values, dtype=np.float32)[None]
    fwd = gru_forward if model.config.cell == "gru" else lstm_forward
    h, _ = fwd(v, model.params["ar.w"], model.params["ar.u"], model.params["ar.b"])
    return FrameSequence(values=h[0], frame_rate=z.frame_rate)


def sample_negative_offsets(rng, n_frames, count):
    """Offsets in 1..n_frames-1: adding one to the positive index (mod N)
    can land anywhere in the utterance except the positive frame itself."""
    if n_frames < 2:
        raise ContractError("need at least two frames to draw negatives")
    return rng.integers(1, n_frames, size=count)


def cpc_loss(z, c, model: Model, rng) -> float:
    """Mean InfoNCE over all valid (frame, offset) pairs.

    Valid positions are those where every offset has a target: n runs over
    the first N - K frames for each of the K offsets, so K*(N-K) terms are
    averaged. The positive for (n, k) is z[n+k]; negatives are cpc_negatives
    frames drawn uniformly from this utterance's other frames. A fresh model
    scores at chance: log(1 + cpc_negatives).
    """
    zv = np.asarray(getattr(z, "values", z), dtype=np.float64)
    cv = np.asarray(getattr(c, "values", c), dtype=np.float64)
    if zv.shape != cv.shape:
        raise ContractError(f"z and c shapes differ: {zv.shape} vs {cv.shape}")
    n_frames = zv.shape[0]
    cfg = model.config
    if n_frames <= cfg.cpc_steps:
        raise ContractError(
            f"{n_frames} frames cannot support prediction {cfg.cpc_steps} ahead"
        )
    nn = cfg.cpc_negatives
    s = n_frames - cfg.cpc_steps
    total = 0.0
    for k in range(1, cfg.cpc_steps + 1):
        w = model.params[f"head{k:02d}.w"].astype(np.float64)
        b = model.params[f"head{k:02d}.b"].astype(np.float64)
        pred = cv[:s] @ w + b                      # (S, d)
        pos_idx = np.arange(k, s + k)
        offs = sample_negative_offsets(rng, n_frames, s * nn)
        neg_idx = (pos_idx.repeat(nn) + offs) % n_frames
        pos_scores = np.sum(pred * zv[pos_idx], axis=1)                   # (S,)
        neg_scores = np.sum(
            pred.repeat(nn, axis=0) * zv[neg_idx], axis=1
        ).reshape(-1, nn)                                                  # (S, nn)
        scores = np.concatenate([pos_scores[:, None], neg_scores], axis=1)
        m = scores.max(axis=1, keepdims=True)
        lse = np.log(np.exp(scores - m).sum(axis=1)) + m[:, 0]
        total += float(np.sum(lse - pos_scores))
    return total / (s * cfg.cpc_steps)


# ---- graph builders (training) ----------------------------------------------


def declare_params(g, model: Model):
    """Register every model parameter with the graph, returning name->node."""
    return {name: g.parameter(name, value) for name, value in model.params.items()}


def build_conv_stack(g, x_node, config: ModelConfig, pnodes):
    h = x_node
    for i, (k, s) in enumerate(zip(config.conv_kernels, config.conv_strides)):
        h = g.conv1d(h, pnodes[f"enc{i}.w"], stride=s, pad=_conv_pad(k, s))
        h = g.tanh(g.add(h, pnodes[f"enc{i}.b"]))
    return h


def build_context(g, z_node, config: ModelConfig, pnodes):
    return g.recurrence(z_node, pnodes["ar.w"], pnodes["ar.u"], pnodes["ar.b"],
                        cell=config.cell)


def build_cpc_loss(g, z_node, c_node, config: ModelConfig, pnodes, neg_inputs):
    """InfoNCE over a batched graph.

    neg_inputs maps offset k to an integer input node of shape
    (B, (N-K) * cpc_negatives) holding negative frame indices. Positions are
    the first N-K frames for every k, matching cpc_loss. Returns the scalar
    mean loss node.
    """
    bsz, n_frames, d = g.nodes[z_node].shape
    nn = config.cpc_negatives
    s = n_frames - config.cpc_steps
    if s < 1:
        raise ContractError(
            f"{n_frames} frames cannot support prediction {config.cpc_steps} ahead"
        )
    ctx = g.take(c_node, g.constant(np.arange(s)))                     # (B,S,d)
    total = None
    for k in range(1, config.cpc_steps + 1):
        pred = g.affine(ctx, pnodes[f"head{k:02d}.w"], pnodes[f"head{k:02d}.b"])
        pos = g.take(z_node, g.constant(np.arange(k, s + k)))          # (B,S,d)
        pos_score = g.reduce_sum(g.mul(pred, pos), axis=2, keepdims=True)
        neg = g.take(z_node, neg_inputs[k])                            # (B,S*nn,d)
        neg = g.reshape(neg, (bsz, s, nn, d))
        neg_score = g.reduce_sum(g.mul(g.reshape(pred, (bsz, s, 1, d)), neg), axis=3)
        scores = g.concat([pos_score, neg_score], axis=2)              # (B,S,1+nn)
        lse = g.logsumexp(scores, axis=2)                              # (B,S)
        term = g.reduce_sum(g.sub(lse, g.reshape(pos_score, (bsz, s))))
        total = term if total is None else g.add(total, term)
    return g.div(total, float(bsz * s * config.cpc_steps))
