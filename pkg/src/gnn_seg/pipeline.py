"""Model assembly, structural feature reconstruction, pixel classification and training.

Data flow for one slice:

    normalize -> SNIC labeling -> region graph
    F_g -> gray FCN -> self-interaction ----\
    F_p -> position FCN -> self-interaction -+-> cat (O1)
    [F_g | F_p] -> GNN -> self-interaction ------------> O2
    mutual_interaction(O1, O2) -> final FCN -> n-vector
    min-max over nodes -> painted back onto pixels (I')
    [modalities | I'] -> 3x3 windowed pixel MLP -> 4 class logits
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from gnn_seg.artifacts import atomic_write_bytes
from gnn_seg.exceptions import (
    CheckpointError,
    ConfigError,
    ImageIOError,
    NumericalError,
    ValidationError,
)
from gnn_seg.graphbuild import RegionGraph, build_graph, node_input_features
from gnn_seg.imagecore import CLASS_IDS, FloatArray, LabelMask, Slice, normalize, require_same_shape
from gnn_seg.logger import JsonlLogger
from gnn_seg.neural import (
    ACTIVATIONS,
    GAT_COMBINES,
    AdamState,
    Fcn,
    GatLayer,
    GcnLayer,
    GradBuffer,
    GraphLayer,
    GraphStack,
    MutualInteraction,
    Parameter,
    SelfInteraction,
    adam_step,
    count_scalars,
    pack_parameters,
    unpack_parameters,
)
from gnn_seg.superpixel import AUTO_MODALITY, IntArray, SnicParams, SuperpixelLabeling, snic_segment

NUM_CLASSES = len(CLASS_IDS)
GNN_KINDS = ("gat", "gcn")
CLASSIFIER_MODES = ("joint", "frozen")


def _positive(name: str, widths: Sequence[int]) -> None:
    if not widths or any(int(w) < 1 for w in widths):
        raise ConfigError(f"{name} must be a non-empty list of positive widths", value=list(widths))


@dataclass(frozen=True)
class GnnSegConfig:
    modalities: int = 2
    gray_fcn: tuple[int, ...] = (20, 100)
    position_fcn: tuple[int, ...] = (20, 100)
    stream_interaction_width: int = 100
    gnn_kind: str = "gat"
    gnn_widths: tuple[int, ...] = (500, 10)
    heads: int = 5
    gat_hidden_combine: str = "average"
    gnn_interaction_width: int = 10
    mutual_widths: tuple[int, ...] = (200, 10)
    final_fcn: tuple[int, ...] = (100, 100, 50, 1)
    hidden_activation: str = "elu"
    classifier_hidden: tuple[int, ...] = (64, 32)
    classifier_window: int = 3
    superpixels: int = 200
    compactness: float = 10.0
    superpixel_modality: int | str = AUTO_MODALITY
    init_seed: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                object.__setattr__(self, f.name, tuple(int(v) for v in value))

    @staticmethod
    def tiny(modalities: int = 2) -> GnnSegConfig:
        """Every width of the default architecture divided by ten."""
        return GnnSegConfig(
            modalities=modalities,
            gray_fcn=(2, 10),
            position_fcn=(2, 10),
            stream_interaction_width=10,
            gnn_widths=(50, 1),
            gnn_interaction_width=1,
            mutual_widths=(20, 1),
            final_fcn=(10, 10, 5, 1),
            classifier_hidden=(16, 8),
            superpixels=20,
        )

    def validate(self) -> None:
        if self.modalities < 1:
            raise ConfigError("modalities must be >= 1", modalities=self.modalities)
        for name in ("gray_fcn", "position_fcn", "gnn_widths", "final_fcn", "classifier_hidden"):
            _positive(name, getattr(self, name))
        if self.gray_fcn[-1] != self.stream_interaction_width or self.position_fcn[-1] != self.stream_interaction_width:
            raise ConfigError(
                "gray_fcn and position_fcn must end at stream_interaction_width",
                stream_interaction_width=self.stream_interaction_width,
            )
        if self.gnn_kind not in GNN_KINDS:
            raise ConfigError("gnn_kind must be gat or gcn", gnn_kind=self.gnn_kind)
        if self.heads < 1:
            raise ConfigError("heads must be >= 1", heads=self.heads)
        if self.gat_hidden_combine not in GAT_COMBINES:
            raise ConfigError("gat_hidden_combine must be concat or average", value=self.gat_hidden_combine)
        if self.gnn_widths[-1] != self.gnn_interaction_width:
            raise ConfigError(
                "gnn_widths must end at gnn_interaction_width",
                gnn_interaction_width=self.gnn_interaction_width,
            )
        expected_mutual = (2 * self.stream_interaction_width, self.gnn_interaction_width)
        if tuple(self.mutual_widths) != expected_mutual:
            raise ConfigError(
                "mutual_widths must equal (2 * stream_interaction_width, gnn_interaction_width)",
                expected=list(expected_mutual),
                got=list(self.mutual_widths),
            )
        if self.final_fcn[-1] != 1:
            raise ConfigError("final_fcn must end in a single unit", final_fcn=list(self.final_fcn))
        if self.hidden_activation not in ACTIVATIONS:
            raise ConfigError("unknown hidden_activation", value=self.hidden_activation)
        if self.classifier_window < 1 or self.classifier_window % 2 == 0:
            raise ConfigError("classifier_window must be a positive odd number", value=self.classifier_window)
        try:
            self.snic_params().validate()
        except ValidationError as e:
            raise ConfigError(e.message, **e.details) from e

    def snic_params(self) -> SnicParams:
        return SnicParams(
            target_regions=self.superpixels,
            compactness=self.compactness,
            modality_index=self.superpixel_modality,
        )

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @staticmethod
    def from_dict(raw: dict[str, Any]) -> GnnSegConfig:
        known = {f.name for f in fields(GnnSegConfig)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError("unknown model config fields", fields=unknown)
        values = dict(raw)
        modality = values.get("superpixel_modality")
        try:
            if modality is not None and modality != AUTO_MODALITY:
                values["superpixel_modality"] = int(modality)
            config = GnnSegConfig(**values)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"malformed model config: {e}") from e
        config.validate()
        return config


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 200
    seed: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    classifier_mode: str = "joint"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1", epochs=self.epochs)
        if self.classifier_mode not in CLASSIFIER_MODES:
            raise ConfigError("classifier_mode must be joint or frozen", value=self.classifier_mode)
        self.adam_state().validate()

    def adam_state(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict[str, Any]) -> TrainSettings:
        known = {f.name for f in fields(TrainSettings)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError("unknown training fields", fields=unknown)
        try:
            settings = TrainSettings(**raw)
        except TypeError as e:
            raise ConfigError(f"malformed training config: {e}") from e
        settings.validate()
        return settings


# ---------------------------------------------------------------------------
# Pixel classifier
# ---------------------------------------------------------------------------


def window_index(height: int, width: int, window: int) -> list[IntArray]:
    """Flat pixel index of every window offset, edge-clamped, offsets row-major."""
    radius = window // 2
    rows, cols = np.indices((height, width))
    out: list[IntArray] = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ry = np.clip(rows + dy, 0, height - 1)
            rx = np.clip(cols + dx, 0, width - 1)
            out.append((ry * width + rx).ravel().astype(np.int64))
    return out


@dataclass
class PixelClassifier:
    """Per-pixel MLP over the channel vectors of a window around each pixel.

    Feature layout is offset-major: column o * channels + c holds channel c
    at window offset o.
    """

    fcn: Fcn
    channels: int
    window: int = 3

    @classmethod
    def init(
        cls,
        channels: int,
        hidden: Sequence[int],
        *,
        window: int = 3,
        activation: str = "elu",
        rng: np.random.Generator,
    ) -> PixelClassifier:
        fcn = Fcn.init(
            "classifier",
            window * window * channels,
            [*hidden, NUM_CLASSES],
            hidden_activation=activation,
            output_activation="identity",
            rng=rng,
        )
        return cls(fcn=fcn, channels=channels, window=window)

    def parameters(self) -> list[Parameter]:
        return self.fcn.parameters()

    def features(self, stack: FloatArray) -> tuple[FloatArray, list[IntArray]]:
        c, height, width = stack.shape
        if c != self.channels:
            raise ValidationError("classifier channel mismatch", expected=self.channels, got=c)
        index = window_index(height, width, self.window)
        flat = stack.reshape(c, height * width)
        feats = np.hstack([flat[:, idx].T for idx in index])
        return feats, index

    def forward(self, stack: FloatArray) -> tuple[FloatArray, tuple[Any, list[IntArray], tuple[int, ...]]]:
        feats, index = self.features(stack)
        logits, cache = self.fcn.forward(feats)
        return logits, (cache, index, stack.shape)

    def backward(
        self, cache: tuple[Any, list[IntArray], tuple[int, ...]], d_logits: FloatArray, grads: GradBuffer
    ) -> FloatArray:
        fcn_cache, index, shape = cache
        c, height, width = shape
        d_feats = self.fcn.backward(fcn_cache, d_logits, grads)
        d_flat = np.zeros((c, height * width), dtype=np.float64)
        for o, idx in enumerate(index):
            block = d_feats[:, o * c : (o + 1) * c]
            for ch in range(c):
                d_flat[ch] += np.bincount(idx, weights=block[:, ch], minlength=height * width)
        return d_flat.reshape(shape)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class GnnSegModel:
    config: GnnSegConfig
    gray_fcn: Fcn
    position_fcn: Fcn
    gray_interaction: SelfInteraction
    position_interaction: SelfInteraction
    gnn: GraphStack
    gnn_interaction: SelfInteraction
    mutual: MutualInteraction
    final_fcn: Fcn
    classifier: PixelClassifier

    @classmethod
    def build(cls, config: GnnSegConfig, *, seed: int | None = None) -> GnnSegModel:
        config.validate()
        rng = np.random.default_rng(config.init_seed if seed is None else seed)
        act = config.hidden_activation
        m = config.modalities
        stream = config.stream_interaction_width

        gray_fcn = Fcn.init("gray_fcn", m, config.gray_fcn, hidden_activation=act, rng=rng)
        position_fcn = Fcn.init("position_fcn", 2, config.position_fcn, hidden_activation=act, rng=rng)
        gray_interaction = SelfInteraction.init("gray_interaction", stream, activation=act, rng=rng)
        position_interaction = SelfInteraction.init("position_interaction", stream, activation=act, rng=rng)

        layers: list[GraphLayer] = []
        fan_in = m + 2
        for i, width in enumerate(config.gnn_widths):
            name = f"gnn.{i}"
            if config.gnn_kind == "gat":
                last = i == len(config.gnn_widths) - 1
                combine = "average" if last else config.gat_hidden_combine
                gat = GatLayer.init(name, fan_in, width, config.heads, combine=combine, rng=rng)
                layers.append(gat)
                fan_in = gat.n_out
            else:
                layers.append(GcnLayer.init(name, fan_in, width, rng=rng))
                fan_in = width
        gnn = GraphStack("gnn", layers)

        gnn_interaction = SelfInteraction.init(
            "gnn_interaction", config.gnn_interaction_width, activation=act, rng=rng
        )
        w1, w2 = config.mutual_widths
        mutual = MutualInteraction.init("mutual", w1, w2, activation=act, rng=rng)
        final_fcn = Fcn.init(
            "final_fcn",
            mutual.n_out,
            config.final_fcn,
            hidden_activation=act,
            output_activation="identity",
            rng=rng,
        )
        classifier = PixelClassifier.init(
            m + 1,
            config.classifier_hidden,
            window=config.classifier_window,
            activation=act,
            rng=rng,
        )
        return cls(
            config=config,
            gray_fcn=gray_fcn,
            position_fcn=position_fcn,
            gray_interaction=gray_interaction,
            position_interaction=position_interaction,
            gnn=gnn,
            gnn_interaction=gnn_interaction,
            mutual=mutual,
            final_fcn=final_fcn,
            classifier=classifier,
        )

    def blocks(self) -> dict[str, list[Parameter]]:
        return {
            "gray_fcn": self.gray_fcn.parameters(),
            "position_fcn": self.position_fcn.parameters(),
            "gray_interaction": self.gray_interaction.parameters(),
            "position_interaction": self.position_interaction.parameters(),
            "gnn": self.gnn.parameters(),
            "gnn_interaction": self.gnn_interaction.parameters(),
            "mutual": self.mutual.parameters(),
            "final_fcn": self.final_fcn.parameters(),
            "classifier": self.classifier.parameters(),
        }

    def structural_parameters(self) -> list[Parameter]:
        return [p for name, ps in self.blocks().items() if name != "classifier" for p in ps]

    def classifier_parameters(self) -> list[Parameter]:
        return self.classifier.parameters()

    def parameters(self) -> list[Parameter]:
        return self.structural_parameters() + self.classifier_parameters()

    def load_values(self, values: dict[str, FloatArray]) -> None:
        params = self.parameters()
        expected = {p.name for p in params}
        if set(values) != expected:
            raise CheckpointError(
                "checkpoint parameters do not match the architecture",
                missing=sorted(expected - set(values)),
                unexpected=sorted(set(values) - expected),
            )
        for p in params:
            v = values[p.name]
            if v.shape != p.value.shape:
                raise CheckpointError(
                    "checkpoint parameter shape mismatch", parameter=p.name, expected=p.shape, got=list(v.shape)
                )
            p.value[...] = v


@dataclass(frozen=True)
class ParameterCount:
    structural: int
    classifier: int
    breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.structural + self.classifier

    def to_dict(self) -> dict[str, Any]:
        return {
            "structural": self.structural,
            "classifier": self.classifier,
            "total": self.total,
            "breakdown": dict(self.breakdown),
        }


def count_parameters(model: Any) -> ParameterCount:
    """Trainable scalar counts; any object with `parameters()` counts as structural."""
    if isinstance(model, GnnSegModel):
        breakdown = {name: count_scalars(ps) for name, ps in model.blocks().items()}
        return ParameterCount(
            structural=count_scalars(model.structural_parameters()),
            classifier=count_scalars(model.classifier_parameters()),
            breakdown=breakdown,
        )
    return ParameterCount(structural=count_scalars(model.parameters()), classifier=0)


# ---------------------------------------------------------------------------
# Structural path
# ---------------------------------------------------------------------------


@dataclass
class StructuralCache:
    gray: Any
    position: Any
    gray_interaction: Any
    position_interaction: Any
    gnn: Any
    gnn_interaction: Any
    mutual: Any
    final: Any
    stream_width: int


def structural_pass(model: GnnSegModel, graph: RegionGraph) -> tuple[FloatArray, StructuralCache]:
    if graph.modalities != model.config.modalities:
        raise ValidationError(
            "graph modality count does not match the model",
            graph=graph.modalities,
            model=model.config.modalities,
        )
    a, c_gray = model.gray_fcn.forward(graph.F_g)
    a, c_gray_i = model.gray_interaction.forward(a)
    b, c_pos = model.position_fcn.forward(graph.F_p)
    b, c_pos_i = model.position_interaction.forward(b)
    g, c_gnn = model.gnn.forward(node_input_features(graph), graph)
    g, c_gnn_i = model.gnn_interaction.forward(g)
    o_tau, c_mutual = model.mutual.forward(np.hstack([a, b]), g)
    out, c_final = model.final_fcn.forward(o_tau)
    cache = StructuralCache(
        c_gray, c_pos, c_gray_i, c_pos_i, c_gnn, c_gnn_i, c_mutual, c_final, a.shape[1]
    )
    return out[:, 0], cache


def structural_backward(
    model: GnnSegModel, cache: StructuralCache, d_values: FloatArray, grads: GradBuffer
) -> None:
    d_tau = model.final_fcn.backward(cache.final, d_values[:, None], grads)
    d_o1, d_g = model.mutual.backward(cache.mutual, d_tau, grads)
    d_g = model.gnn_interaction.backward(cache.gnn_interaction, d_g, grads)
    model.gnn.backward(cache.gnn, d_g, grads)
    d_a = d_o1[:, : cache.stream_width]
    d_b = d_o1[:, cache.stream_width :]
    d_a = model.gray_interaction.backward(cache.gray_interaction, d_a, grads)
    model.gray_fcn.backward(cache.gray, d_a, grads)
    d_b = model.position_interaction.backward(cache.position_interaction, d_b, grads)
    model.position_fcn.backward(cache.position, d_b, grads)


def structural_forward(
    model: GnnSegModel, slc: Slice, labeling: SuperpixelLabeling, graph: RegionGraph
) -> FloatArray:
    """Per-superpixel structural feature (n-vector)."""
    require_same_shape(slc.shape, labeling.shape, what="structural_forward")
    if labeling.n != graph.n:
        raise ValidationError("graph does not match labeling", graph_n=graph.n, labeling_n=labeling.n)
    return structural_pass(model, graph)[0]


def normalize_node_values(values: FloatArray) -> tuple[FloatArray, tuple[int, int, float, FloatArray]]:
    """Min-max to [0, 1]; a constant vector maps to zeros."""
    lo_idx = int(np.argmin(values))
    hi_idx = int(np.argmax(values))
    span = float(values[hi_idx] - values[lo_idx])
    if span > 0:
        out = (values - values[lo_idx]) / span
    else:
        out = np.zeros_like(values)
    return out, (lo_idx, hi_idx, span, out)


def normalize_node_values_backward(
    cache: tuple[int, int, float, FloatArray], d_out: FloatArray
) -> FloatArray:
    lo_idx, hi_idx, span, out = cache
    if span <= 0:
        return np.zeros_like(d_out)
    d_values = d_out / span
    d_values[lo_idx] += float(np.sum(d_out * (out - 1.0))) / span
    d_values[hi_idx] -= float(np.sum(d_out * out)) / span
    return d_values


def reconstruct_slice(labeling: SuperpixelLabeling, node_values: FloatArray) -> FloatArray:
    """Paint each superpixel's value onto all of its pixels."""
    values = np.asarray(node_values, dtype=np.float64)
    if values.shape != (labeling.n,):
        raise ValidationError(
            "node value count does not match labeling", expected=labeling.n, got=list(values.shape)
        )
    return values[labeling.region_of]


def reconstruct_backward(labeling: SuperpixelLabeling, d_image: FloatArray) -> FloatArray:
    return np.bincount(labeling.region_of.ravel(), weights=d_image.ravel(), minlength=labeling.n)


def classifier_stack(slc: Slice, feature_map: FloatArray) -> FloatArray:
    require_same_shape(slc.shape, feature_map.shape, what="structural feature map")
    return np.concatenate([slc.data, np.asarray(feature_map, dtype=np.float64)[None]], axis=0)


def pixel_logits(model: GnnSegModel, slc: Slice, feature_map: FloatArray) -> FloatArray:
    return model.classifier.forward(classifier_stack(slc, feature_map))[0]


def classify_pixels(model: GnnSegModel, slc: Slice, feature_map: FloatArray) -> LabelMask:
    """Per-pixel argmax; ties go to the lower class id."""
    logits = pixel_logits(model, slc, feature_map)
    labels = np.argmax(logits, axis=1).reshape(slc.shape)
    return LabelMask(labels=labels.astype(np.uint8))


def cross_entropy(logits: FloatArray, labels: FloatArray | IntArray) -> tuple[float, FloatArray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    y = np.asarray(labels).ravel().astype(np.int64)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -float(np.mean(log_probs[np.arange(n), y]))
    d_logits = np.exp(log_probs)
    d_logits[np.arange(n), y] -= 1.0
    return loss, d_logits / n


# ---------------------------------------------------------------------------
# Samples, training and inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreparedSample:
    slice: Slice
    labeling: SuperpixelLabeling
    graph: RegionGraph
    mask: LabelMask | None = None


def prepare_sample(config: GnnSegConfig, slc: Slice, mask: LabelMask | None = None) -> PreparedSample:
    if slc.modalities != config.modalities:
        raise ValidationError(
            "slice modality count does not match the model", slice=slc.modalities, model=config.modalities
        )
    if mask is not None:
        require_same_shape(slc.shape, mask.shape, what="mask")
    normalized = normalize(slc)
    labeling = snic_segment(normalized, config.snic_params())
    graph = build_graph(labeling, normalized)
    return PreparedSample(slice=normalized, labeling=labeling, graph=graph, mask=mask)


@dataclass
class SampleCache:
    structural: StructuralCache
    normalization: tuple[int, int, float, FloatArray]
    classifier: Any
    feature_map: FloatArray


def sample_forward(model: GnnSegModel, sample: PreparedSample) -> tuple[FloatArray, SampleCache]:
    values, s_cache = structural_pass(model, sample.graph)
    scaled, n_cache = normalize_node_values(values)
    feature_map = reconstruct_slice(sample.labeling, scaled)
    logits, c_cache = model.classifier.forward(classifier_stack(sample.slice, feature_map))
    return logits, SampleCache(s_cache, n_cache, c_cache, feature_map)


def sample_backward(
    model: GnnSegModel, sample: PreparedSample, cache: SampleCache, d_logits: FloatArray, grads: GradBuffer
) -> None:
    d_stack = model.classifier.backward(cache.classifier, d_logits, grads)
    d_nodes = reconstruct_backward(sample.labeling, d_stack[-1])
    d_values = normalize_node_values_backward(cache.normalization, d_nodes)
    structural_backward(model, cache.structural, d_values, grads)


def sample_loss(model: GnnSegModel, sample: PreparedSample) -> float:
    if sample.mask is None:
        raise ValidationError("sample has no label mask")
    logits, _ = sample_forward(model, sample)
    return cross_entropy(logits, sample.mask.labels)[0]


@dataclass(frozen=True)
class TrainResult:
    model: GnnSegModel
    loss_trace: list[float]
    steps: int
    optimizer: AdamState


def train(
    model: GnnSegModel,
    dataset: Sequence[tuple[Slice, LabelMask]] | Sequence[PreparedSample],
    settings: TrainSettings,
    *,
    logger: JsonlLogger | None = None,
) -> TrainResult:
    """One slice per Adam step, samples visited in a seeded per-epoch order.

    The loss trace holds, per epoch, the mean of the losses seen before each
    step. A non-finite value anywhere raises NumericalError with the offending
    sample index.
    """
    settings.validate()
    if not dataset:
        raise ValidationError("training dataset is empty")
    samples = [
        item if isinstance(item, PreparedSample) else prepare_sample(model.config, item[0], item[1])
        for item in dataset
    ]
    if any(s.mask is None for s in samples):
        raise ValidationError("every training sample needs a label mask")

    trainable = model.parameters() if settings.classifier_mode == "joint" else model.structural_parameters()
    state = settings.adam_state()
    rng = np.random.default_rng(settings.seed)
    trace: list[float] = []

    if logger is not None:
        logger.info(
            "train_start",
            samples=len(samples),
            epochs=settings.epochs,
            seed=settings.seed,
            classifier_mode=settings.classifier_mode,
            trainable=count_scalars(trainable),
        )

    for epoch in range(1, settings.epochs + 1):
        losses: list[float] = []
        for idx in rng.permutation(len(samples)).tolist():
            sample = samples[idx]
            assert sample.mask is not None
            try:
                logits, cache = sample_forward(model, sample)
                loss, d_logits = cross_entropy(logits, sample.mask.labels)
                if not math.isfinite(loss):
                    raise NumericalError("non-finite training loss", layer="loss", loss=loss)
                grads = GradBuffer()
                sample_backward(model, sample, cache, d_logits, grads)
            except NumericalError as e:
                if e.sample_index is not None:
                    raise
                raise NumericalError(e.message, layer=e.layer, sample_index=idx, epoch=epoch) from e
            adam_step(trainable, grads, state)
            losses.append(loss)
        epoch_loss = math.fsum(losses) / len(losses)
        trace.append(epoch_loss)
        if logger is not None:
            logger.debug("epoch_end", epoch=epoch, loss=epoch_loss)

    if logger is not None:
        logger.info("train_end", epochs=settings.epochs, steps=state.step, final_loss=trace[-1])
    return TrainResult(model=model, loss_trace=trace, steps=state.step, optimizer=state)


@dataclass(frozen=True)
class Segmentation:
    mask: LabelMask
    feature_map: FloatArray
    sample: PreparedSample


def segment(model: GnnSegModel, slc: Slice) -> Segmentation:
    """Full inference: superpixels, graph, structural features, pixel classes."""
    sample = prepare_sample(model.config, slc)
    logits, cache = sample_forward(model, sample)
    labels = np.argmax(logits, axis=1).reshape(sample.slice.shape).astype(np.uint8)
    return Segmentation(mask=LabelMask(labels=labels), feature_map=cache.feature_map, sample=sample)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: GnnSegModel, path: Path, *, extra: dict[str, Any] | None = None) -> None:
    header: dict[str, Any] = {
        "config": model.config.to_dict(),
        "counts": count_parameters(model).to_dict(),
    }
    if extra:
        header["extra"] = extra
    atomic_write_bytes(path, pack_parameters(model.parameters(), header))


def load_checkpoint(path: Path) -> tuple[GnnSegModel, dict[str, Any]]:
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise ImageIOError(f"checkpoint not found: {path}") from e
    header, values = unpack_parameters(raw)
    try:
        config = GnnSegConfig.from_dict(header["config"])
    except KeyError as e:
        raise CheckpointError("checkpoint header has no config") from e
    model = GnnSegModel.build(config)
    model.load_values(values)
    return model, header
