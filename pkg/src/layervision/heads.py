"""Parameter-efficient heads over multi-layer activation stacks.

A `LayerStack` is one example's activations: (T tokens, H hidden, C
channels), where channels run from the input embeddings (first) to the
final encoder layer (last).  The heads below contract that block down to
span logits or a single classification logit:

  * learned pooling  - softmax-weighted channel mix with a global scale
  * average pooling  - the same mix with frozen uniform weights
  * adapter          - per-channel down-projection H -> A (optionally one
                       shared projection for all channels) + nonlinearity
  * span head        - flatten features per token, optionally concatenate
                       the final encoder layer (skip), dense down to 2
                       columns: start and end logits
  * cls head         - channel mix at the lone CLS position + dense to one
                       raw logit (> 0 means "has answer")
  * conv head        - 1xN convolution that compresses the hidden axis and
                       never the token axis

All forwards build autodiff graphs, so `backward`/`finite_diff_check` work
on any of them.  Forwards accept a single stack (T, H, C) or a batch
(B, T, H, C).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ConfigError, ContractError, DimensionError

#: Total trainable parameters of the reference large encoder; head sizes are
#: reported as a fraction of this.
ENCODER_TOTAL_PARAMS = 335_141_888

INIT_STD = 0.02


@dataclass(frozen=True)
class LayerStack:
    """One example's activation block, shape (T, H, C), float32."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise DimensionError(f"LayerStack must be (T, H, C), got shape {v.shape}")
        t, h, c = v.shape
        if t < 1 or h < 1 or c < 2:
            raise DimensionError(f"LayerStack needs T>=1, H>=1, C>=2, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def tokens(self) -> int:
        return self.values.shape[0]

    @property
    def hidden(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class PoolParams:
    """Learned channel-mix: raw scores (softmaxed) plus a global scale."""

    scores: Tensor  # (C,)
    gamma: Tensor  # ()

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "PoolParams":
        # zero scores start the mix exactly at the uniform average
        return cls(
            scores=ad.parameter(np.zeros(channels, dtype=dtype)),
            gamma=ad.parameter(np.asarray(1.0, dtype=dtype)),
        )


@dataclass
class AdapterParams:
    """Down-projection H -> A; one (W, b) pair, or one per channel."""

    weights: list[Tensor]  # length 1 when shared, else C
    biases: list[Tensor]
    shared: bool

    def __post_init__(self):
        if self.shared and (len(self.weights) != 1 or len(self.biases) != 1):
            raise ContractError("shared adapter must hold exactly one (W, b) pair")
        if len(self.weights) != len(self.biases):
            raise ContractError("adapter weights/biases length mismatch")

    @property
    def size(self) -> int:
        return self.weights[0].shape[1]


@dataclass
class SpanHeadParams:
    """Dense projection of per-token features down to (start, end) logits."""

    dense_w: Tensor  # (F, 2)
    dense_b: Tensor  # (2,)
    use_skip: bool = False


@dataclass
class ClsHeadParams:
    """Channel mix plus a single-output dense layer, no squashing."""

    mix: PoolParams
    dense_w: Tensor  # (H, 1)
    dense_b: Tensor  # (1,)


def _stack_node(stack) -> tuple[Tensor, bool]:
    """Accept LayerStack, ndarray (T,H,C) or (B,T,H,C), or a graph Tensor."""
    if isinstance(stack, LayerStack):
        arr = stack.values
    elif isinstance(stack, Tensor):
        if stack.data.ndim not in (3, 4):
            raise DimensionError(f"stack must be (T,H,C) or (B,T,H,C), got {stack.shape}")
        return stack, stack.data.ndim == 4
    else:
        arr = np.asarray(stack, dtype=np.float32)
    if arr.ndim == 3:
        return ad.constant(arr), False
    if arr.ndim == 4:
        return ad.constant(arr), True
    raise DimensionError(f"stack must be (T,H,C) or (B,T,H,C), got shape {arr.shape}")


def learned_pool(stack, p: PoolParams) -> Tensor:
    """gamma * sum_c softmax(scores)[c] * stack[..., c]  ->  (..., T, H)."""
    node, _ = _stack_node(stack)
    c = node.shape[-1]
    if p.scores.shape != (c,):
        raise DimensionError(
            f"pool scores shape {p.scores.shape} does not match {c} channels"
        )
    w = ad.softmax(p.scores, axis=0)
    return ad.scale_by(ad.channel_mix(node, w), p.gamma)


def average_pool(stack) -> Tensor:
    """Uniform channel mix (every layer weighted equally)."""
    node, _ = _stack_node(stack)
    c = node.shape[-1]
    w = ad.constant(np.full(c, 1.0 / c), dtype=node.dtype)
    return ad.channel_mix(node, w)


def adapter_apply(stack, p: AdapterParams, activation: str = "gelu") -> Tensor:
    """Project the hidden axis of every channel: (..., T, H, C) -> (..., T, A, C).

    `activation` is "gelu" (default) or "identity"; identity exists for
    tests that want the bare projection.
    """
    if activation not in ("gelu", "identity"):
        raise ConfigError(f"unknown adapter activation {activation!r}")
    node, _ = _stack_node(stack)
    h, c = node.shape[-2], node.shape[-1]
    if not p.shared and len(p.weights) != c:
        raise DimensionError(
            f"unshared adapter has {len(p.weights)} channel pairs, stack has {c}"
        )
    for w in p.weights:
        if w.shape[0] != h:
            raise DimensionError(
                f"adapter weight shape {w.shape} does not match hidden width {h}"
            )
    if p.shared:
        channels_first = ad.swap_last2(node)  # (..., C, H)
        projected = ad.affine(channels_first, p.weights[0], p.biases[0])
        projected = ad.swap_last2(projected)  # (..., A, C)
    else:
        per_channel = [
            ad.affine(ad.index_last(node, ci), p.weights[ci], p.biases[ci])
            for ci in range(c)
        ]
        projected = ad.stack_last(per_channel)  # (..., A, C)
    if activation == "gelu":
        projected = ad.gelu(projected)
    return projected


def span_head_forward(
    features: Tensor,
    p: SpanHeadParams,
    final_layer: Optional[Tensor] = None,
    flatten: Optional[bool] = None,
) -> tuple[Tensor, Tensor]:
    """Flatten per-token features, optionally concat the final layer, dense to 2.

    `features` is (..., T, A, C) (flattened here) or already (..., T, F).
    Returns (start_logits, end_logits), each (..., T).  The token axis is
    always preserved.  `flatten` forces/suppresses the (A, C) -> A*C step;
    by default it is inferred from the dense weight width.
    """
    if flatten is None:
        flatten = features.data.ndim >= 3 and p.dense_w.shape[0] != features.shape[-1]
    flat = ad.flatten_last2(features) if flatten else features
    if p.use_skip:
        if final_layer is None:
            raise ContractError("use_skip=True requires the final encoder layer")
        if not isinstance(final_layer, Tensor):
            final_layer = ad.constant(np.asarray(final_layer, dtype=np.float32))
        if final_layer.shape[:-1] != flat.shape[:-1]:
            raise DimensionError(
                f"skip connection shape {final_layer.shape} does not align with "
                f"features shape {flat.shape}"
            )
        flat = ad.concat_last([flat, final_layer])
    if p.dense_w.shape != (flat.shape[-1], 2):
        raise DimensionError(
            f"span dense weight shape {p.dense_w.shape} does not match feature "
            f"width {flat.shape[-1]}"
        )
    logits = ad.affine(flat, p.dense_w, p.dense_b)  # (..., T, 2)
    return ad.index_last(logits, 0), ad.index_last(logits, 1)


def cls_head_forward(stack, p: ClsHeadParams) -> Tensor:
    """Raw classification logit for a (1, H, C) stack (or a batch of them)."""
    node, batched = _stack_node(stack)
    t = node.shape[-3]
    if t != 1:
        raise ContractError(f"classification stacks must have T == 1, got T={t}")
    pooled = learned_pool(node, p.mix)  # (..., 1, H)
    logit = ad.affine(pooled, p.dense_w, p.dense_b)  # (..., 1, 1)
    if batched:
        return ad.reshape(logit, (node.shape[0],))
    return ad.reshape(logit, ())


def conv_seq_head_forward(stack, kernel: Tensor) -> Tensor:
    """Token-preserving convolution head: (..., T, H, C) -> (..., T, H', C_out)."""
    node, batched = _stack_node(stack)
    if not isinstance(kernel, Tensor):
        kernel = ad.constant(np.asarray(kernel, dtype=np.float32))
    x = node if batched else ad.reshape(node, (1,) + node.shape)
    out = ad.conv_seq(x, kernel)
    if not batched:
        out = ad.reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------------------
# model descriptions, construction and parameter accounting
# ---------------------------------------------------------------------------

HEAD_KINDS = ("lp", "ap", "adapter", "conv")
TASKS = ("span", "class")


@dataclass(frozen=True)
class ModelSpec:
    """Serializable description of one head model."""

    task: str  # "span" | "class"
    kind: str  # "lp" | "ap" | "adapter" | "conv"
    tokens: int
    hidden: int
    channels: int
    adapter_size: int = 0
    shared: bool = True
    use_skip: bool = False
    adapter_activation: str = "gelu"
    conv_kernel_h: int = 0  # 0 means the full hidden width
    conv_channels: int = 64

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.task == "class" and self.kind not in ("lp", "ap"):
            raise ConfigError(
                f"classification supports lp/ap heads only, got {self.kind!r}"
            )
        if self.task == "class" and self.tokens != 1:
            raise ConfigError("classification stacks have T == 1")
        if self.kind == "adapter" and self.adapter_size < 1:
            raise ConfigError("adapter head needs adapter_size >= 1")

    @property
    def kernel_h(self) -> int:
        return self.conv_kernel_h or self.hidden

    def span_feature_width(self) -> int:
        if self.task != "span":
            raise ConfigError("feature width is a span-model property")
        if self.kind in ("lp", "ap"):
            width = self.hidden
        elif self.kind == "adapter":
            width = self.adapter_size * self.channels
        else:  # conv
            width = (self.hidden - self.kernel_h + 1) * self.conv_channels
        if self.use_skip:
            width += self.hidden
        return width

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "kind": self.kind,
            "T": self.tokens,
            "H": self.hidden,
            "C": self.channels,
            "A": self.adapter_size,
            "shared": self.shared,
            "use_skip": self.use_skip,
            "adapter_activation": self.adapter_activation,
            "conv_kernel_h": self.conv_kernel_h,
            "conv_channels": self.conv_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            task=d["task"],
            kind=d["kind"],
            tokens=int(d["T"]),
            hidden=int(d["H"]),
            channels=int(d["C"]),
            adapter_size=int(d.get("A", 0)),
            shared=bool(d.get("shared", True)),
            use_skip=bool(d.get("use_skip", False)),
            adapter_activation=d.get("adapter_activation", "gelu"),
            conv_kernel_h=int(d.get("conv_kernel_h", 0)),
            conv_channels=int(d.get("conv_channels", 64)),
        )


def count_params(spec: ModelSpec) -> tuple[int, float]:
    """Exact trainable-scalar count and its fraction of the large encoder.

    The fraction is count / 335,141,888; format with `percent_of_encoder`
    to get the conventional 3-decimal percentage.
    """
    h, c = spec.hidden, spec.channels
    if spec.task == "class":
        count = (c + 1) + (h * 1 + 1)  # mix scores + gamma + dense
        if spec.kind == "ap":
            count -= c + 1  # frozen uniform mix
        return count, count / ENCODER_TOTAL_PARAMS

    if spec.kind == "lp":
        count = (c + 1) + (h * 2 + 2)
    elif spec.kind == "ap":
        count = h * 2 + 2
    elif spec.kind == "adapter":
        pairs = 1 if spec.shared else c
        adapter = pairs * (h * spec.adapter_size + spec.adapter_size)
        count = adapter + spec.span_feature_width() * 2 + 2
    else:  # conv
        kernel = 1 * spec.kernel_h * c * spec.conv_channels
        count = kernel + spec.span_feature_width() * 2 + 2
    return count, count / ENCODER_TOTAL_PARAMS


def percent_of_encoder(count: int) -> str:
    """Render a parameter count as the conventional percentage string."""
    return f"{100.0 * count / ENCODER_TOTAL_PARAMS:.3f}%"


def _trunc_normal(rng: np.random.Generator, shape, std=INIT_STD) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng).astype(
        np.float32
    )


class HeadModel:
    """A ModelSpec plus its ParamSet, with graph-building forwards.

    The parameter container is only ever replaced wholesale (the training
    loop builds a fresh graph per step), so concurrent forward passes over
    a frozen model are safe.
    """

    def __init__(self, spec: ModelSpec, params: ParamSet):
        self.spec = spec
        self.params = params

    # -- construction -------------------------------------------------

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int) -> "HeadModel":
        rng = np.random.default_rng(seed)
        params = ParamSet()
        if spec.kind == "lp":
            params.add("pool.scores", ad.parameter(np.zeros(spec.channels, np.float32)))
            params.add("pool.gamma", ad.parameter(np.asarray(1.0, np.float32)))
        if spec.kind == "adapter":
            pairs = 1 if spec.shared else spec.channels
            for i in range(pairs):
                tag = "shared" if spec.shared else f"{i:02d}"
                params.add(
                    f"adapter.w.{tag}",
                    ad.parameter(_trunc_normal(rng, (spec.hidden, spec.adapter_size))),
                )
                params.add(
                    f"adapter.b.{tag}",
                    ad.parameter(np.zeros(spec.adapter_size, np.float32)),
                )
        if spec.kind == "conv" and spec.task == "span":
            params.add(
                "conv.kernel",
                ad.parameter(
                    _trunc_normal(rng, (1, spec.kernel_h, spec.channels, spec.conv_channels))
                ),
            )
        if spec.task == "span":
            width = spec.span_feature_width()
            params.add("dense.w", ad.parameter(_trunc_normal(rng, (width, 2))))
            params.add("dense.b", ad.parameter(np.zeros(2, np.float32)))
        else:
            params.add("dense.w", ad.parameter(_trunc_normal(rng, (spec.hidden, 1))))
            params.add("dense.b", ad.parameter(np.zeros(1, np.float32)))
        return cls(spec, params)

    # -- parameter views ----------------------------------------------

    def pool_params(self, params: ParamSet | None = None) -> PoolParams:
        ps = params or self.params
        return PoolParams(scores=ps["pool.scores"], gamma=ps["pool.gamma"])

    def adapter_params(self, params: ParamSet | None = None) -> AdapterParams:
        ps = params or self.params
        if self.spec.shared:
            return AdapterParams(
                weights=[ps["adapter.w.shared"]],
                biases=[ps["adapter.b.shared"]],
                shared=True,
            )
        c = self.spec.channels
        return AdapterParams(
            weights=[ps[f"adapter.w.{i:02d}"] for i in range(c)],
            biases=[ps[f"adapter.b.{i:02d}"] for i in range(c)],
            shared=False,
        )

    def span_params(self, params: ParamSet | None = None) -> SpanHeadParams:
        ps = params or self.params
        return SpanHeadParams(
            dense_w=ps["dense.w"], dense_b=ps["dense.b"], use_skip=self.spec.use_skip
        )

    def cls_params(self, params: ParamSet | None = None) -> ClsHeadParams:
        ps = params or self.params
        return ClsHeadParams(
            mix=self.pool_params(ps), dense_w=ps["dense.w"], dense_b=ps["dense.b"]
        )

    # -- forwards ------------------------------------------------------

    def span_logits(self, stacks, params: ParamSet | None = None) -> tuple[Tensor, Tensor]:
        """(start_logits, end_logits) for one stack (T,) or a batch (B, T)."""
        if self.spec.task != "span":
            raise ContractError("span_logits called on a classification model")
        ps = params or self.params
        node, _ = _stack_node(stacks)
        kind = self.spec.kind
        if kind == "lp":
            features = learned_pool(node, self.pool_params(ps))
        elif kind == "ap":
            features = average_pool(node)
        elif kind == "adapter":
            features = adapter_apply(
                node, self.adapter_params(ps), activation=self.spec.adapter_activation
            )
        else:
            features = conv_seq_head_forward(node, ps["conv.kernel"])
        final_layer = None
        if self.spec.use_skip:
            final_layer = ad.index_last(node, self.spec.channels - 1)  # (..., T, H)
        return span_head_forward(
            features,
            self.span_params(ps),
            final_layer,
            flatten=kind in ("adapter", "conv"),
        )

    def class_logits(self, stacks, params: ParamSet | None = None) -> Tensor:
        """Raw logit(s): () for one stack, (B,) for a batch."""
        if self.spec.task != "class":
            raise ContractError("class_logits called on a span model")
        ps = params or self.params
        node, batched = _stack_node(stacks)
        if self.spec.kind == "ap":
            pooled = average_pool(node)
            logit = ad.affine(pooled, ps["dense.w"], ps["dense.b"])
            shape = (node.shape[0],) if batched else ()
            return ad.reshape(logit, shape)
        return cls_head_forward(node, self.cls_params(ps))

    def loss(self, stacks, labels, params: ParamSet | None = None) -> Tensor:
        """Cross-entropy training loss for a batch.

        Span: CE over start positions + CE over end positions.
        Class: two-class CE against a zero reference logit (logistic loss).
        """
        labels = np.asarray(labels)
        if self.spec.task == "span":
            start_logits, end_logits = self.span_logits(stacks, params)
            if start_logits.data.ndim == 1:
                start_logits = ad.reshape(start_logits, (1,) + start_logits.shape)
                end_logits = ad.reshape(end_logits, (1,) + end_logits.shape)
                labels = labels.reshape(1, 2)
            return ad.add(
                ad.cross_entropy(start_logits, labels[:, 0].astype(np.int64)),
                ad.cross_entropy(end_logits, labels[:, 1].astype(np.int64)),
            )
        logits = self.class_logits(stacks, params)
        if logits.data.ndim == 0:
            logits = ad.reshape(logits, (1,))
        labels = labels.reshape(-1)
        n = logits.shape[0]
        two_class = ad.concat_last(
            [
                ad.reshape(ad.constant(np.zeros(n), dtype=logits.dtype), (n, 1)),
                ad.reshape(logits, (n, 1)),
            ]
        )
        return ad.cross_entropy(two_class, labels.astype(np.int64))

    def count_params(self) -> tuple[int, float]:
        return count_params(self.spec)

    def with_params(self, params: ParamSet) -> "HeadModel":
        return HeadModel(self.spec, params)


def classify(logit: float) -> int:
    """Decision rule for the classification head: logit > 0 means class 1."""
    return int(logit > 0)
