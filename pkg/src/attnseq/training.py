"""Adam optimizer, the two-phase training procedure, evaluation, checkpoints.

Phase 1 ("repr") trains every parameter against the summed attribute
cross-entropy. Phase 2 ("class") drops the attribute heads from the graph,
freezes everything except the class head (fc weights/bias and the per-step
aggregation weights), and trains against the class cross-entropy. The
"no representation" ablation skips phase 1 and then trains all parameters
directly on the class loss.

Training is deterministic given (seed, config, dataset): one Generator
drives epoch shuffles and dropout masks, and its state rides along in
checkpoints so a resumed run continues the exact stream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Parameter, Tape, backward, dtype_for
from .errors import ContractError, FormatError, NumericError
from .features import ExtractorConfig, TinyConvExtractor
from .model import CLASS_HEAD_PARAMS, Model, ModelConfig
from .seeding import MODEL_INIT, TRAINING, derive_rng

CHECKPOINT_MAGIC = b"ASTC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState) -> AdamState:
    """One bias-corrected Adam update over the trainable params; zeroes grads."""
    live = [p for p in params if p.trainable]
    for p in live:
        if not np.isfinite(p.gradient.data).all():
            raise NumericError(f"non-finite gradient in {p.name}; aborting the step")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p in live:
        g = p.gradient.data
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        else:
            v = state.v[p.name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        p.value.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()
    return state


def clip_gradients(params: list[Parameter], max_norm: float):
    """Global-norm gradient clipping; no-op when under the threshold."""
    live = [p for p in params if p.trainable]
    total = float(np.sqrt(sum(float((p.gradient.data ** 2).sum()) for p in live)))
    if total > max_norm > 0:
        factor = max_norm / total
        for p in live:
            p.gradient.data *= factor
    return total


# ---------------------------------------------------------------------------
# configuration and state

@dataclass
class TrainConfig:
    epochs_phase1: int = 30
    epochs_phase2: int = 15
    batch_size: int = 8
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    attention_enabled: bool = True
    reverse_enabled: bool = True
    representation_phase_enabled: bool = True
    precision: str = "standard"

    def __post_init__(self):
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0 or self.batch_size < 1:
            raise ContractError("epoch counts must be >= 0 and batch size >= 1")


@dataclass
class TrainState:
    """Resumable cursor: which phase/epoch comes next, plus optimizer and rng."""

    phase: str
    epoch: int
    rng: np.random.Generator
    adam: AdamState | None = None
    history: list[str] = field(default_factory=list)


def fresh_state(cfg: TrainConfig) -> TrainState:
    phase = "repr" if cfg.representation_phase_enabled else "class"
    return TrainState(phase=phase, epoch=0, rng=derive_rng(cfg.seed, TRAINING))


def freeze_for_class_phase(model: Model):
    """Only the class head (fc and w_class) stays trainable."""
    for p in model.parameters():
        p.trainable = p.name in CLASS_HEAD_PARAMS


def unfreeze_all(model: Model):
    for p in model.parameters():
        p.trainable = True


def batch_inputs(samples):
    """(features, (class indices, attribute matrix)) for a sample batch."""
    if samples[0].features is not None:
        feats = [s.features for s in samples]
    else:
        feats = [s.frames for s in samples]
    cls = np.asarray([s.class_index for s in samples], dtype=np.int64)
    attrs = np.asarray([s.attributes.as_tuple() for s in samples], dtype=np.int64)
    return feats, (cls, attrs)


def _batches(order: np.ndarray, size: int):
    for lo in range(0, len(order), size):
        yield order[lo:lo + size]


def _train_epochs(model, samples, cfg, state, phase, epochs):
    params = model.parameters()
    if state.adam is None:
        state.adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    n = len(samples)
    if n == 0:
        raise ContractError("cannot train on an empty dataset")
    for epoch in range(state.epoch, epochs):
        order = state.rng.permutation(n)
        loss_sum = 0.0
        hits = np.zeros(4 if phase == "repr" else 1, dtype=np.int64)
        for chunk in _batches(order, cfg.batch_size):
            batch = [samples[i] for i in chunk]
            feats, labels = batch_inputs(batch)
            with Tape() as tape:
                loss, logits, _ = model.forward_full(feats, labels, phase,
                                                     training=True, rng=state.rng)
            backward(tape, loss)
            if cfg.grad_clip:
                clip_gradients(params, cfg.grad_clip)
            adam_step(params, state.adam)
            loss_sum += loss.item() * len(batch)
            if phase == "repr":
                for k in range(4):
                    preds = np.argmax(logits[k].data, axis=1)
                    hits[k] += int((preds == labels[1][:, k]).sum())
            else:
                preds = np.argmax(logits.data, axis=1)
                hits[0] += int((preds == labels[0]).sum())
        accs = " ".join(f"{h / n:.6f}" for h in hits)
        state.history.append(f"{epoch + 1} {phase} {loss_sum / n:.6f} {accs}")
        state.epoch = epoch + 1
    return state


def train_phase1(model: Model, samples, cfg: TrainConfig, state: TrainState | None = None) -> TrainState:
    """Representation phase: all parameters against the attribute loss."""
    state = state if state is not None else fresh_state(cfg)
    if not cfg.representation_phase_enabled:
        return state
    if state.phase != "repr":
        raise ContractError(f"state is in phase {state.phase!r}, not repr")
    unfreeze_all(model)
    return _train_epochs(model, samples, cfg, state, "repr", cfg.epochs_phase1)


def train_phase2(model: Model, samples, cfg: TrainConfig, state: TrainState | None = None) -> TrainState:
    """Class phase: frozen backbone unless the representation phase was ablated."""
    if state is None:
        state = fresh_state(cfg)
        state.phase = "class"
    if state.phase != "class":
        raise ContractError(f"state is in phase {state.phase!r}, not class")
    if cfg.representation_phase_enabled:
        freeze_for_class_phase(model)
    else:
        unfreeze_all(model)
    return _train_epochs(model, samples, cfg, state, "class", cfg.epochs_phase2)


def run_training(model: Model, samples, cfg: TrainConfig, state: TrainState | None = None) -> TrainState:
    """Both phases end to end, resumable from a loaded TrainState."""
    state = state if state is not None else fresh_state(cfg)
    if state.phase == "repr":
        train_phase1(model, samples, cfg, state)
        state.phase, state.epoch, state.adam = "class", 0, None
    if state.phase == "class":
        train_phase2(model, samples, cfg, state)
        state.phase, state.epoch, state.adam = "done", 0, None
    return state


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray
    attribute_accuracy: list[float] | None = None


def evaluate(model: Model, samples, batch_size: int = 64, attributes: bool = False) -> EvalReport:
    """Top-1 accuracy over argmax logits; ties break to the lowest class index."""
    if not samples:
        raise ContractError("cannot evaluate an empty dataset")
    c = model.cfg.class_count
    confusion = np.zeros((c, c), dtype=np.int64)
    attr_hits = np.zeros(4, dtype=np.int64)
    order = np.arange(len(samples))
    for chunk in _batches(order, batch_size):
        batch = [samples[i] for i in chunk]
        feats, labels = batch_inputs(batch)
        _, logits, _ = model.forward_full(feats, labels, "class", training=False)
        preds = np.argmax(logits.data, axis=1)
        for true, pred in zip(labels[0], preds):
            confusion[true, pred] += 1
        if attributes:
            _, attr_logits, _ = model.forward_full(feats, labels, "repr", training=False)
            for k in range(4):
                attr_hits[k] += int((np.argmax(attr_logits[k].data, axis=1) == labels[1][:, k]).sum())
    total = int(confusion.sum())
    per_class_n = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), per_class_n,
                          out=np.zeros(c, dtype=float), where=per_class_n > 0)
    report = EvalReport(accuracy=float(np.trace(confusion)) / total,
                        per_class=per_class, confusion=confusion)
    if attributes:
        report.attribute_accuracy = [float(h) / total for h in attr_hits]
    return report


# ---------------------------------------------------------------------------
# checkpoint format (little-endian)
#
#   magic "ASTC" | u32 version
#   u32 length + config JSON (model config, extractor config, phase, epoch,
#       history rows)
#   u32 parameter count, then per parameter:
#       u32 name length + name utf-8 | u32 rank | u32*rank extents
#       | u32 element width | raw element bytes
#   optimizer block: u32 present; when set: f64 lr, beta1, beta2, eps
#       | u64 step count | u32 entries, per entry: name | u32 width | m | v
#   rng block: u32 length + bit-generator state JSON

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"checkpoint truncated at byte {len(self.buf)} "
                              f"(needed {self.off + n})")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        n = self.u32()
        if n > len(self.buf):
            raise FormatError(f"implausible string length {n} at byte {self.off - 4}")
        return self.take(n).decode("utf-8")

    def done(self):
        if self.off != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.off} trailing bytes at byte {self.off}")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _pack_array(arr: np.ndarray) -> bytes:
    width = arr.dtype.itemsize
    out = struct.pack("<I", arr.ndim)
    out += b"".join(struct.pack("<I", e) for e in arr.shape)
    out += struct.pack("<I", width)
    dt = np.dtype("<f4") if width == 4 else np.dtype("<f8")
    return out + arr.astype(dt, copy=False).tobytes()


def _read_array(r: _Reader) -> np.ndarray:
    rank = r.u32()
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank} at byte {r.off - 4}")
    shape = tuple(r.u32() for _ in range(rank))
    width = r.u32()
    if width not in (4, 8):
        raise FormatError(f"bad element width {width} at byte {r.off - 4}")
    dt = np.dtype("<f4") if width == 4 else np.dtype("<f8")
    count = int(np.prod(shape)) if shape else 1
    raw = r.take(count * width)
    return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def save_checkpoint(model: Model, state: TrainState, path):
    cfg_block = {
        "model": asdict(model.cfg),
        "extractor": asdict(model.extractor.cfg) if model.extractor is not None else None,
        "phase": state.phase,
        "epoch": state.epoch,
        "history": state.history,
    }
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    out.append(_pack_str(json.dumps(cfg_block, sort_keys=True)))
    params = model.parameters()
    out.append(struct.pack("<I", len(params)))
    for p in params:
        out.append(_pack_str(p.name))
        out.append(_pack_array(p.value.data))
    if state.adam is not None:
        a = state.adam
        out.append(struct.pack("<I", 1))
        out.append(struct.pack("<dddd", a.lr, a.beta1, a.beta2, a.eps))
        out.append(struct.pack("<Q", a.t))
        names = sorted(a.m)
        out.append(struct.pack("<I", len(names)))
        for name in names:
            out.append(_pack_str(name))
            out.append(_pack_array(a.m[name]))
            out.append(_pack_array(a.v[name]))
    else:
        out.append(struct.pack("<I", 0))
    out.append(_pack_str(json.dumps(state.rng.bit_generator.state, sort_keys=True)))
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_checkpoint(path):
    """Rebuild (model, train state) from a checkpoint file."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic at byte 0")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        cfg_block = json.loads(r.string())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt config block: {e}") from None
    mc = dict(cfg_block["model"])
    mc["attribute_arities"] = tuple(mc["attribute_arities"])
    model_cfg = ModelConfig(**mc)
    extractor = None
    if cfg_block["extractor"] is not None:
        ec = dict(cfg_block["extractor"])
        ec["stage_widths"] = tuple(ec["stage_widths"])
        ext_cfg = ExtractorConfig(**ec)
        extractor = TinyConvExtractor(ext_cfg, derive_rng(0, MODEL_INIT), dtype_for(model_cfg.precision))
    model = Model(model_cfg, seed=0, extractor=extractor)
    by_name = model.param_dict()

    count = r.u32()
    seen = set()
    for _ in range(count):
        name = r.string()
        arr = _read_array(r)
        if name not in by_name:
            raise FormatError(f"unknown parameter {name!r} in checkpoint")
        p = by_name[name]
        if arr.shape != p.value.data.shape:
            raise FormatError(f"parameter {name!r} has shape {arr.shape}, expected {p.value.data.shape}")
        if arr.dtype != p.value.data.dtype:
            raise FormatError(f"parameter {name!r} width does not match precision "
                              f"{model_cfg.precision!r}")
        p.value.data[...] = arr
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise FormatError(f"checkpoint is missing parameters: {sorted(missing)[:3]}")

    adam = None
    if r.u32():
        lr, b1, b2, eps = (r.f64() for _ in range(4))
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=r.u64())
        for _ in range(r.u32()):
            name = r.string()
            if name not in by_name:
                raise FormatError(f"optimizer state for unknown parameter {name!r}")
            adam.m[name] = _read_array(r)
            adam.v[name] = _read_array(r)
    try:
        rng_state = json.loads(r.string())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt rng block: {e}") from None
    r.done()
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = rng_state

    state = TrainState(phase=cfg_block["phase"], epoch=int(cfg_block["epoch"]),
                       rng=rng, adam=adam, history=list(cfg_block["history"]))
    return model, state


def write_metrics(history: list[str], path):
    with open(path, "w") as f:
        for row in history:
            f.write(row + "\n")
