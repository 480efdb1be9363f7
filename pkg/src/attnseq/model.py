"""Encoder / attention network / decoder assembly and the two loss heads.

Data flow for one clip of N per-frame feature vectors f_1..f_N in R^m:

  encoder   consumes f_1..f_N from a zero state; its final hidden and cell
            states are the global context.
  attention consumes the features in reverse (f_N..f_1 by default), its
            state initialized from the context; each step's top hidden
            output goes through a fully connected layer (sigmoid-gated by
            default) to an attention vector a_t in R^m, and the consumed
            feature is gated elementwise: f_t * a_t.
  decoder   consumes the gated vectors in the same order, state initialized
            from the context through learned per-layer projections when the
            hidden sizes differ; emits one representation per step.
  heads     class head: logits = sum_n w_class[n] * fc(drop(rep_n));
            attribute heads: four such sums with their own fc_i and
            per-step weights, one per label factor.

All methods accept a single clip (vector activations) or a batch of clips
(row-matrix activations); batching only changes array shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (Parameter, Tensor, add, affine, dropout, dtype_for, hadamard,
                       sigmoid, sigmoid_cross_entropy, softmax_cross_entropy, weighted_sum)
from .errors import ContractError, DimensionError
from .features import FeatureSequence, FrameVolume
from .recurrent import (LSTMState, make_projections, make_stack, project_state,
                        run_sequence, zero_state)
from .seeding import MODEL_INIT, derive_rng

CLASS_HEAD_PARAMS = ("heads/fc/weight", "heads/fc/bias", "heads/w_class")
ATTRIBUTE_NAMES = ("takeoff", "somersault", "twist", "flight")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 1024
    encoder_hidden: int = 512
    attention_hidden: int = 512
    decoder_hidden: int = 256
    depth: int = 2
    num_frames: int = 64
    class_count: int = 48
    attribute_arities: tuple = (4, 8, 8, 4)
    dropout_rate: float = 0.2
    attention_enabled: bool = True
    reverse_enabled: bool = True
    final_activation: str = "softmax"       # or "sigmoid" (fidelity variant)
    attention_activation: str = "sigmoid"   # or "linear" (ablation/diagnostics)
    precision: str = "standard"

    def __post_init__(self):
        for name in ("feature_dim", "encoder_hidden", "attention_hidden",
                     "decoder_hidden", "depth", "num_frames", "class_count"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if len(self.attribute_arities) != 4 or any(a < 1 for a in self.attribute_arities):
            raise ContractError("attribute_arities must be 4 positive extents")
        if self.final_activation not in ("softmax", "sigmoid"):
            raise ContractError(f"unknown final_activation {self.final_activation!r}")
        if self.attention_activation not in ("sigmoid", "linear"):
            raise ContractError(f"unknown attention_activation {self.attention_activation!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ContractError("dropout_rate must be in [0,1)")


@dataclass
class AttentionOutput:
    """Attention vectors and gated features in decoder-consumption order.

    frame_order[t] is the 0-based index of the frame consumed at step t,
    so gated[t] = features[frame_order[t]] * a[t].
    """

    a: list[Tensor]
    gated: list[Tensor]
    frame_order: list[int]


@dataclass
class HeadWeights:
    fc_w: Parameter
    fc_b: Parameter
    w_class: Parameter
    attr_w: list[Parameter] = field(default_factory=list)
    attr_b: list[Parameter] = field(default_factory=list)
    w_attr: list[Parameter] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        return [self.fc_w, self.fc_b, self.w_class, *self.attr_w, *self.attr_b, *self.w_attr]


def _glorot_param(name, rng, shape, dtype):
    fan_out, fan_in = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(name, rng.uniform(-limit, limit, size=shape).astype(dtype))


class Model:
    """The full network. Parameters are built once and referenced by name."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, extractor=None):
        self.cfg = cfg
        self.dtype = dtype_for(cfg.precision)
        rng = derive_rng(seed, MODEL_INIT)
        m, n = cfg.feature_dim, cfg.num_frames

        self.encoder = make_stack("encoder", m, cfg.encoder_hidden, cfg.depth, rng, self.dtype)
        if cfg.attention_enabled:
            self.attention = make_stack("attention", m, cfg.attention_hidden, cfg.depth, rng, self.dtype)
            self.att_fc_w = _glorot_param("attention/fc/weight", rng, (m, cfg.attention_hidden), self.dtype)
            self.att_fc_b = Parameter("attention/fc/bias", np.zeros(m, dtype=self.dtype))
            self.att_proj = make_projections("proj/attention", cfg.encoder_hidden,
                                             cfg.attention_hidden, cfg.depth, rng, self.dtype)
        else:
            self.attention = None
            self.att_fc_w = self.att_fc_b = None
            self.att_proj = None
        self.decoder = make_stack("decoder", m, cfg.decoder_hidden, cfg.depth, rng, self.dtype)
        self.dec_proj = make_projections("proj/decoder", cfg.encoder_hidden,
                                         cfg.decoder_hidden, cfg.depth, rng, self.dtype)

        # per-step aggregation weights start at 1/N: the initial class and
        # attribute logits are temporal means
        p = cfg.decoder_hidden
        heads = HeadWeights(
            fc_w=_glorot_param("heads/fc/weight", rng, (cfg.class_count, p), self.dtype),
            fc_b=Parameter("heads/fc/bias", np.zeros(cfg.class_count, dtype=self.dtype)),
            w_class=Parameter("heads/w_class", np.full(n, 1.0 / n, dtype=self.dtype)),
        )
        for k, arity in enumerate(cfg.attribute_arities, start=1):
            heads.attr_w.append(_glorot_param(f"heads/fc{k}/weight", rng, (arity, p), self.dtype))
            heads.attr_b.append(Parameter(f"heads/fc{k}/bias", np.zeros(arity, dtype=self.dtype)))
            heads.w_attr.append(Parameter(f"heads/w_attr{k}", np.full(n, 1.0 / n, dtype=self.dtype)))
        self.heads = heads
        self.extractor = extractor

        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            dup = sorted({x for x in names if names.count(x) > 1})
            raise ContractError(f"duplicate parameter names: {dup}")

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> list[Parameter]:
        out = []
        if self.extractor is not None:
            out += self.extractor.parameters()
        out += self.encoder.parameters()
        if self.attention is not None:
            out += self.attention.parameters()
            out += [self.att_fc_w, self.att_fc_b]
            if self.att_proj is not None:
                out += [q for pair in self.att_proj for q in pair]
        out += self.decoder.parameters()
        if self.dec_proj is not None:
            out += [q for pair in self.dec_proj for q in pair]
        out += self.heads.parameters()
        return out

    def param_dict(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    # -- input normalization ------------------------------------------------

    def _as_steps(self, features) -> list[Tensor]:
        """Per-step feature tensors [m] (one clip) or [B, m] (a batch)."""
        cfg = self.cfg
        if isinstance(features, FeatureSequence):
            if features.step_tensors is not None:
                steps = list(features.step_tensors)
            else:
                arr = np.asarray(features.vectors, dtype=self.dtype)
                steps = [Tensor(arr[t]) for t in range(arr.shape[0])]
        elif isinstance(features, FrameVolume):
            steps = self._extract_steps([features], batched=False)
        elif isinstance(features, (list, tuple)):
            if not features:
                raise ContractError("empty feature batch")
            first = features[0]
            if isinstance(first, Tensor):
                steps = list(features)
            elif isinstance(first, FeatureSequence):
                mats = [np.asarray(s.vectors, dtype=self.dtype) for s in features]
                n = mats[0].shape[0]
                if any(m2.shape != mats[0].shape for m2 in mats):
                    raise DimensionError("feature sequences in a batch must share N and m")
                steps = [Tensor(np.stack([m2[t] for m2 in mats])) for t in range(n)]
            elif isinstance(first, FrameVolume):
                steps = self._extract_steps(list(features), batched=True)
            else:
                raise ContractError(f"cannot build model input from {type(first).__name__}")
        else:
            raise ContractError(f"cannot build model input from {type(features).__name__}")
        if len(steps) != cfg.num_frames:
            raise DimensionError(f"expected {cfg.num_frames} steps, got {len(steps)}")
        for s in steps:
            if s.shape[-1] != cfg.feature_dim:
                raise DimensionError(f"feature extent {s.shape[-1]} != feature_dim {cfg.feature_dim}")
        return steps

    def _extract_steps(self, volumes: list[FrameVolume], batched: bool) -> list[Tensor]:
        if self.extractor is None:
            raise ContractError("model has no feature extractor; give it feature sequences")
        n = volumes[0].frame_count
        if any(v.frame_count != n for v in volumes):
            raise DimensionError("frame volumes in a batch must share the frame count")
        steps = []
        for t in range(n):
            if batched:
                frames_t = np.stack([v.frames[t] for v in volumes])
            else:
                frames_t = volumes[0].frames[t]
            steps.append(self.extractor.step(frames_t))
        return steps

    def _batchness(self, steps) -> int | None:
        return steps[0].shape[0] if steps[0].data.ndim == 2 else None

    # -- operations ---------------------------------------------------------

    def encode(self, features) -> LSTMState:
        """Global context: encoder state after consuming f_1..f_N from zeros."""
        steps = features if isinstance(features, list) and isinstance(features[0], Tensor) \
            else self._as_steps(features)
        init = zero_state(self.encoder, self.dtype, batch=self._batchness(steps))
        _, ctx = run_sequence(self.encoder, steps, init, "forward")
        return ctx

    def attend(self, features, context: LSTMState, training: bool = False, rng=None) -> AttentionOutput:
        if self.attention is None:
            raise ContractError("attention is disabled in this model")
        steps = features if isinstance(features, list) and isinstance(features[0], Tensor) \
            else self._as_steps(features)
        order = list(range(len(steps)))
        if self.cfg.reverse_enabled:
            order.reverse()
        state = project_state(context, self.att_proj)
        a_list, gated = [], []
        for idx in order:
            x = steps[idx]
            top, state = self.attention.step(x, state)
            hid = dropout(top, self.cfg.dropout_rate, training, rng)
            z = affine(hid, self.att_fc_w, self.att_fc_b)
            a = sigmoid(z) if self.cfg.attention_activation == "sigmoid" else z
            a_list.append(a)
            gated.append(hadamard(x, a))
        return AttentionOutput(a_list, gated, order)

    def decode(self, gated: list[Tensor], context: LSTMState) -> list[Tensor]:
        """Per-step representations; `gated` must be in consumption order."""
        state = project_state(context, self.dec_proj)
        reps, _ = run_sequence(self.decoder, gated, state, "forward")
        return reps

    def classify(self, reps: list[Tensor], training: bool = False, rng=None) -> Tensor:
        """Class logits: sum_n w_class[n] * fc(drop(rep_n))."""
        per_step = []
        for r in reps:
            d = dropout(r, self.cfg.dropout_rate, training, rng)
            per_step.append(affine(d, self.heads.fc_w, self.heads.fc_b))
        return weighted_sum(per_step, self.heads.w_class)

    def attribute_heads(self, reps: list[Tensor], training: bool = False, rng=None) -> list[Tensor]:
        """Four logit tensors, one per attribute; one dropout draw per step."""
        dropped = [dropout(r, self.cfg.dropout_rate, training, rng) for r in reps]
        outs = []
        for k in range(4):
            per_step = [affine(d, self.heads.attr_w[k], self.heads.attr_b[k]) for d in dropped]
            outs.append(weighted_sum(per_step, self.heads.w_attr[k]))
        return outs

    def loss_representation(self, attr_logits: list[Tensor], attributes) -> Tensor:
        """Sum of the four attribute cross-entropies."""
        attrs = np.asarray(attributes, dtype=np.int64)
        single = attrs.ndim == 1
        if (single and attrs.shape != (4,)) or (not single and attrs.shape[1:] != (4,)):
            raise ContractError(f"attribute labels must have 4 entries, got shape {attrs.shape}")
        loss = None
        for k in range(4):
            lab = int(attrs[k]) if single else attrs[:, k]
            term = softmax_cross_entropy(attr_logits[k], lab)
            loss = term if loss is None else add(loss, term)
        return loss

    def class_loss(self, logits: Tensor, class_index) -> Tensor:
        if self.cfg.final_activation == "sigmoid":
            return sigmoid_cross_entropy(logits, class_index)
        return softmax_cross_entropy(logits, class_index)

    def decoder_inputs(self, features, context, training=False, rng=None):
        """(AttentionOutput or None, decoder input list in consumption order)."""
        steps = features if isinstance(features, list) and isinstance(features[0], Tensor) \
            else self._as_steps(features)
        if self.cfg.attention_enabled:
            att = self.attend(steps, context, training, rng)
            return att, att.gated
        order = list(range(len(steps)))
        if self.cfg.reverse_enabled:
            order.reverse()
        return None, [steps[i] for i in order]

    def forward_full(self, features, labels, phase: str, training: bool = False, rng=None):
        """End-to-end forward; returns (loss, logits, attention or None).

        labels is (class_index, attributes): ints/[4] for one clip, arrays
        [B] / [B,4] for a batch. phase "repr" uses the attribute heads and
        their summed cross-entropy; phase "class" uses the class head.
        """
        if phase not in ("repr", "class"):
            raise ContractError(f"unknown phase {phase!r}")
        steps = self._as_steps(features)
        class_index, attributes = labels
        context = self.encode(steps)
        att, dec_in = self.decoder_inputs(steps, context, training, rng)
        reps = self.decode(dec_in, context)
        if phase == "repr":
            logits = self.attribute_heads(reps, training, rng)
            loss = self.loss_representation(logits, attributes)
        else:
            logits = self.classify(reps, training, rng)
            loss = self.class_loss(logits, class_index)
        return loss, logits, att

    # -- configuration tweaks ------------------------------------------------

    def reconfigure(self, **kw) -> "Model":
        """Flip forward-time flags in place, keeping all parameters."""
        self.cfg = replace(self.cfg, **kw)
        return self
