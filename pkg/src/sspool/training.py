"""Joint training: InfoNCE on the original stream plus the alignment
contrastive loss between original and augmented pooled sequences.

Each step samples fixed-length crops, augments a copy of every crop, and
takes one rectified-Adam step on L_cpc + lambda * L_contr. The augmented
waveforms are zero-padded to a shared length and their frames masked out of
pooling, so one static graph covers every step. Head count M always comes
from the original crop's frame count so both pooled sequences line up
index by index. Metrics go to a JSON-lines file every 50 steps and
checkpoints to a versioned binary every 1000 steps.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .alignment import AlignLossConfig, alignment_contrastive_loss, build_alignment_loss
from .audio import AudioBuffer, load_wav
from .augment import AugmentConfig, augment_utterance
from .autodiff import Graph
from .encoder import (
    Model,
    ModelConfig,
    build_context,
    build_conv_stack,
    build_cpc_loss,
    contextualize,
    cpc_loss,
    declare_params,
    encode_frames,
    init_model,
)
from .errors import ContractError, DataError, DegeneratePoolingError, NumericError
from .pooling import (
    LOG_KERNEL_FLOOR,
    AttentionConfig,
    build_boundary_probs,
    build_soft_pool,
    n_heads,
    predict_boundaries,
    soft_pool,
)
from .synth import load_manifest

log = logging.getLogger("sspool.train")

SAMPLE_RATE = 16000
FRAME = 160
METRICS_EVERY = 50
CHECKPOINT_EVERY = 1000
COLLAPSE_MEAN = 0.9
COLLAPSE_STEPS = 1000

CKPT_MAGIC = b"SSPOOLCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int
    lr: float = 0.001
    batch_size: int = 32
    lambda_contr: float = 1.0
    crop_seconds: float = 1.28
    seed: int = 0
    cpc_on: bool = True
    contr_on: bool = True
    tau: float = 0.1
    include_positive_in_denominator: bool = False
    n_segments: int = 3
    stretch_min: float = 0.8
    stretch_max: float = 1.25
    pitch_semitones: float = 2.0

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.lambda_contr < 0:
            raise ContractError("lambda_contr must be >= 0")
        if self.crop_frames < 8:
            raise ContractError(
                f"crop of {self.crop_seconds}s gives {self.crop_frames} frames; need >= 8"
            )
        if not (self.cpc_on or self.contr_on):
            raise ContractError("at least one of cpc_on / contr_on must be set")

    @property
    def crop_samples(self):
        return int(round(self.crop_seconds * SAMPLE_RATE))

    @property
    def crop_frames(self):
        return self.crop_samples // FRAME

    def augment_config(self):
        return AugmentConfig(
            n_segments=self.n_segments,
            stretch_min=self.stretch_min,
            stretch_max=self.stretch_max,
            pitch_semitones=self.pitch_semitones,
        )

    def align_config(self):
        return AlignLossConfig(
            tau=self.tau,
            include_positive_in_denominator=self.include_positive_in_denominator,
        )

    def to_jsonable(self):
        return asdict(self)

    @classmethod
    def from_jsonable(cls, d):
        return cls(**d)


def aug_pad_samples(config: TrainConfig, frame: int = FRAME) -> int:
    """Padded length for augmented crops: the slowest stretch plus per-segment
    rounding slack, rounded up to a whole frame."""
    worst = config.crop_samples / config.stretch_min + config.n_segments
    return int(-(-worst // frame)) * frame


# ---- rectified Adam ----------------------------------------------------------


@dataclass
class RAdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def radam_step(params, grads, state: RAdamState, lr=0.001, betas=(0.9, 0.999), eps=1e-8):
    """One rectified-Adam update in place; returns (params, state).

    Moments warm up as usual; while the variance-rectification term rho_t
    stays at or below 4 (the first four steps at beta2=0.999) only the
    bias-corrected momentum is applied, afterwards the rectified adaptive
    step takes over.
    """
    b1, b2 = betas
    t = state.step + 1
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2**t / (1.0 - b2**t)
    if rho_t > 4.0:
        r_t = np.sqrt(
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
    for name, gval in grads.items():
        g = np.asarray(gval)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        g = g.astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.m[name] = m
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        if rho_t > 4.0:
            v_hat = np.sqrt(v / (1.0 - b2**t))
            p -= (lr * r_t) * m_hat / (v_hat + eps)
        else:
            p -= lr * m_hat
    state.step = t
    return params, state


# ---- checkpoint format -------------------------------------------------------


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_array(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    out = [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(path, model: Model, step=0, train_config=None, opt_state=None):
    """Versioned binary: magic, version, config JSON blob, named f32 arrays."""
    meta = {
        "model": json.loads(model.config.to_json()),
        "train": train_config.to_jsonable() if train_config is not None else None,
        "step": int(step),
    }
    arrays = dict(model.params)
    if opt_state is not None:
        for k, v in opt_state.m.items():
            arrays[f"opt.m.{k}"] = v
        for k, v in opt_state.v.items():
            arrays[f"opt.v.{k}"] = v
        meta["opt_step"] = int(opt_state.step)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        parts.append(_pack_array(name, arrays[name]))
    _atomic_write(path, b"".join(parts))
    return path


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.data):
            raise DataError(f"truncated checkpoint {self.path}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Returns (model, step, train_config_or_None, opt_state_or_None)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    r = _Reader(data, path)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: bad config blob: {e}") from None
    (n_arrays,) = r.unpack("<I")
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    if r.off != len(data):
        raise DataError(f"{path}: {len(data) - r.off} trailing bytes")

    model_config = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                                  for k, v in meta["model"].items()})
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    model = Model(config=model_config, params=params)
    train_config = (
        TrainConfig.from_jsonable(meta["train"]) if meta.get("train") is not None else None
    )
    opt_state = None
    if "opt_step" in meta:
        opt_state = RAdamState(
            m={k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")},
            v={k[len("opt.v."):]: v for k, v in arrays.items() if k.startswith("opt.v.")},
            step=int(meta["opt_step"]),
        )
    return model, int(meta.get("step", 0)), train_config, opt_state


# ---- data --------------------------------------------------------------------


class CropSampler:
    """Holds decoded training audio and serves random fixed-length crops."""

    def __init__(self, manifest, crop_samples):
        entries = load_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else manifest
        self.crop_samples = crop_samples
        self.clips = []
        for e in entries:
            buf = load_wav(e["audio"]) if isinstance(e, dict) else AudioBuffer(e)
            if buf.samples.size >= crop_samples:
                self.clips.append(buf.samples.astype(np.float32))
        if not self.clips:
            raise DataError(
                f"no utterance is at least {crop_samples} samples long; "
                "lower crop_seconds or synthesize longer utterances"
            )

    def sample(self, rng, batch_size):
        out = np.empty((batch_size, self.crop_samples), dtype=np.float32)
        for i in range(batch_size):
            clip = self.clips[int(rng.integers(len(self.clips)))]
            start = int(rng.integers(clip.size - self.crop_samples + 1))
            out[i] = clip[start : start + self.crop_samples]
        return out


def augment_crops(crops, config: TrainConfig, seed, frame: int = FRAME):
    """Per-item augmented copies, zero-padded to a shared length.

    `frame` is the encoder's downsample factor; the mask marks whole frames
    that carry real audio. Returns (padded (B, T_aug) float32, frame mask
    (B, N_aug) float32).
    """
    t_aug = aug_pad_samples(config, frame)
    n_aug = t_aug // frame
    batch = crops.shape[0]
    padded = np.zeros((batch, t_aug), dtype=np.float32)
    mask = np.zeros((batch, n_aug), dtype=np.float32)
    acfg = config.augment_config()
    for i in range(batch):
        rng = np.random.default_rng([int(seed), 613, i])
        buf = AudioBuffer(np.asarray(crops[i], dtype=np.float64))
        aug, _ = augment_utterance(buf, acfg, rng)
        s = aug.samples[:t_aug]
        padded[i, : s.size] = s
        mask[i, : s.size // frame] = 1.0
    return padded, mask


def draw_negative_indices(rng, n_frames, model_config: ModelConfig, batch_size):
    """Graph bindings for the per-offset negative index inputs."""
    cfg = model_config
    s = n_frames - cfg.cpc_steps
    out = {}
    for k in range(1, cfg.cpc_steps + 1):
        pos = np.arange(k, s + k).repeat(cfg.cpc_negatives)
        offs = rng.integers(1, n_frames, size=(batch_size, s * cfg.cpc_negatives))
        out[f"neg{k}"] = (pos[None, :] + offs) % n_frames
    return out


# ---- losses ------------------------------------------------------------------


def forward_losses(crops, model: Model, config: TrainConfig, seed):
    """Batch-mean (L_cpc, L_contr) through the plain numpy paths.

    Augmentation and negative draws are deterministic in (seed, item index).
    Disabled losses are reported as 0.0.
    """
    crops = np.asarray(crops)
    if crops.ndim != 2:
        raise ContractError(f"crops must be (batch, samples), got {crops.shape}")
    acfg = config.augment_config()
    lcfg = config.align_config()
    att = AttentionConfig()
    cpc_terms, contr_terms = [], []
    for i in range(crops.shape[0]):
        # separate streams so ablating one loss cannot shift the other's draws
        neg_rng = np.random.default_rng([int(seed), 31, i])
        aug_rng = np.random.default_rng([int(seed), 613, i])
        z = encode_frames(crops[i].astype(np.float32), model)
        if config.cpc_on:
            c = contextualize(z, model)
            cpc_terms.append(cpc_loss(z, c, model, neg_rng))
        if config.contr_on:
            buf = AudioBuffer(np.asarray(crops[i], dtype=np.float64))
            aug, _ = augment_utterance(buf, acfg, aug_rng)
            z_aug = encode_frames(aug.samples.astype(np.float32), model)
            m = n_heads(z.values.shape[0], att)
            pooled = soft_pool(z, predict_boundaries(z, model), att)
            pooled_aug = soft_pool(
                z_aug, predict_boundaries(z_aug, model), att, heads=m
            )
            contr_terms.append(alignment_contrastive_loss(pooled, pooled_aug, lcfg))
    l_cpc = float(np.mean(cpc_terms)) if cpc_terms else 0.0
    l_contr = float(np.mean(contr_terms)) if contr_terms else 0.0
    return l_cpc, l_contr


def build_training_graph(model: Model, config: TrainConfig, dtype="float32",
                         input_grads=False):
    """One static graph per run; returns (graph, node-id dict).

    Nodes: joint (scalar objective), cpc, contr (absent losses map to None),
    mean_b, and the per-head rowmax nodes used for the degenerate check.
    """
    mc = model.config
    bsz = config.batch_size
    t = config.crop_samples
    n = t // mc.downsample
    g = Graph(dtype)
    nodes = {}
    x = g.input("x", (bsz, t, 1), differentiable=input_grads)
    pnodes = declare_params(g, model)
    z = build_conv_stack(g, x, mc, pnodes)
    b = build_boundary_probs(g, z, mc, pnodes)
    nodes["mean_b"] = g.mean(b)

    pieces = []
    if config.cpc_on:
        c = build_context(g, z, mc, pnodes)
        s = n - mc.cpc_steps
        neg_inputs = {
            k: g.input(f"neg{k}", (bsz, s * mc.cpc_negatives), integer=True)
            for k in range(1, mc.cpc_steps + 1)
        }
        nodes["cpc"] = build_cpc_loss(g, z, c, mc, pnodes, neg_inputs)
        pieces.append(nodes["cpc"])
    else:
        nodes["cpc"] = None

    if config.contr_on:
        t_aug = aug_pad_samples(config, mc.downsample)
        n_aug = t_aug // mc.downsample
        m = n_heads(n, AttentionConfig())
        x_aug = g.input("x_aug", (bsz, t_aug, 1), differentiable=input_grads)
        mask = g.input("mask", (bsz, n_aug))
        z_aug = build_conv_stack(g, x_aug, mc, pnodes)
        b_aug = build_boundary_probs(g, z_aug, mc, pnodes)
        pooled, rowmax = build_soft_pool(g, z, b, m, AttentionConfig().sigma)
        pooled_aug, rowmax_aug = build_soft_pool(
            g, z_aug, b_aug, m, AttentionConfig().sigma, mask_node=mask
        )
        nodes["contr"] = build_alignment_loss(g, pooled, pooled_aug, config.align_config())
        nodes["rowmax"] = rowmax
        nodes["rowmax_aug"] = rowmax_aug
        pieces.append(g.mul(nodes["contr"], float(config.lambda_contr)))
    else:
        nodes["contr"] = None

    joint = pieces[0]
    for p in pieces[1:]:
        joint = g.add(joint, p)
    nodes["joint"] = joint
    return g, nodes


def check_degenerate_heads(evaluation, nodes):
    for key in ("rowmax", "rowmax_aug"):
        node = nodes.get(key)
        if node is None:
            continue
        rm = evaluation.value(node)  # (B, M, 1)
        worst = rm.min(axis=(0, 2))
        bad = np.flatnonzero(worst < LOG_KERNEL_FLOOR)
        if bad.size:
            raise DegeneratePoolingError(int(bad[0]) + 1, float(worst[bad[0]]))


class CollapseMonitor:
    """Warns once per streak when mean boundary probability stays above 0.9
    for 1000 consecutive steps."""

    def __init__(self, threshold=COLLAPSE_MEAN, patience=COLLAPSE_STEPS):
        self.threshold = threshold
        self.patience = patience
        self.streak = 0
        self.warnings = 0

    def update(self, mean_b) -> bool:
        if mean_b > self.threshold:
            self.streak += 1
            if self.streak == self.patience:
                self.warnings += 1
                log.warning(
                    "boundary predictor may have collapsed: mean probability "
                    "> %.1f for %d consecutive steps",
                    self.threshold,
                    self.patience,
                )
                return True
        else:
            self.streak = 0
        return False


def train(config: TrainConfig, manifest, out_dir, model_config: ModelConfig = None,
          model: Model = None):
    """Run the training loop; returns a summary dict.

    Writes metrics.jsonl (every 50 steps and at the final step), periodic
    ckpt_NNNNNN.bin files every 1000 steps, and ckpt_final.bin.
    """
    os.makedirs(out_dir, exist_ok=True)
    if model is None:
        model = init_model(model_config or ModelConfig(), config.seed)
    sampler = CropSampler(manifest, config.crop_samples)
    graph, nodes = build_training_graph(model, config)
    opt = RAdamState()
    monitor = CollapseMonitor()
    metrics = []
    metrics_path = os.path.join(out_dir, "metrics.jsonl")

    def flush_metrics():
        payload = "".join(json.dumps(row, sort_keys=True) + "\n" for row in metrics)
        _atomic_write(metrics_path, payload.encode("utf-8"))

    flush_metrics()
    for step in range(1, config.steps + 1):
        rng = np.random.default_rng([config.seed, 31, step])
        crops = sampler.sample(rng, config.batch_size)
        bindings = {"x": crops[..., None]}
        if config.cpc_on:
            n_frames = config.crop_samples // model.config.downsample
            bindings.update(
                draw_negative_indices(rng, n_frames, model.config,
                                      config.batch_size)
            )
        if config.contr_on:
            item_seed = int(rng.integers(2**32))
            padded, mask = augment_crops(crops, config, item_seed,
                                         frame=model.config.downsample)
            bindings["x_aug"] = padded[..., None]
            bindings["mask"] = mask

        ev = graph.evaluate(bindings, params=model.params)
        loss = ev.value(nodes["joint"])
        if not np.isfinite(loss):
            ev.raise_first_nonfinite(nodes["joint"])
        check_degenerate_heads(ev, nodes)
        grads = ev.backward(nodes["joint"])
        radam_step(model.params, grads, opt, lr=config.lr)

        mean_b = float(ev.value(nodes["mean_b"]))
        monitor.update(mean_b)
        if step % METRICS_EVERY == 0 or step == config.steps:
            row = {
                "step": step,
                "L_cpc": float(ev.value(nodes["cpc"])) if nodes["cpc"] is not None else 0.0,
                "L_contr": float(ev.value(nodes["contr"])) if nodes["contr"] is not None else 0.0,
                "mean_boundary": mean_b,
            }
            if not metrics or metrics[-1]["step"] != step:
                metrics.append(row)
                flush_metrics()
        if step % CHECKPOINT_EVERY == 0:
            save_checkpoint(
                os.path.join(out_dir, f"ckpt_{step:06d}.bin"),
                model, step=step, train_config=config, opt_state=opt,
            )
    final = save_checkpoint(
        os.path.join(out_dir, "ckpt_final.bin"),
        model, step=config.steps, train_config=config, opt_state=opt,
    )
    return {
        "steps": config.steps,
        "checkpoint": final,
        "metrics": metrics_path,
        "final": metrics[-1] if metrics else None,
        "collapse_warnings": monitor.warnings,
    }
