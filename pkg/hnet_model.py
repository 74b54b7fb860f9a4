"""
H-Net: LR encoder, LR fusion backbone guided by aligned HR G-buffers,
and a pixel-shuffle head producing the HR demodulated radiance.

All feature maps between the encoder input and the head stay on the LR grid;
only the head's pixel shuffle moves to HR.
"""
import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from brdf_lut import EnvBrdfLut, ShadingGBuffer, build_fbeta_map, demodulate, remodulate
from config import HNetConfig, model_config_from_dict
from errors import AlignmentError, ConfigError, FormatError, SchemaError, ShapeError
from frame_io import FrameBundle
from setup_environment import log_event
from tensor_ops import (
    ConvLayer, Tensor, avg_pool, concat_channels, conv2d_backward, conv2d_forward, conv_macs,
    max_pool, pixel_shuffle, pixel_shuffle_backward, pixel_unshuffle, split_channels,
    warp_bilinear, warp_bilinear_backward,
)
from weights_io import read_container, write_container

logger = logging.getLogger(__name__)

MODEL_FILE = "model.json"
WEIGHTS_FILE = "weights.bin"
MODEL_FORMAT_VERSION = 1
RESIDUAL_INIT_SCALE = 0.1


@dataclass
class ResidualBlock:
    """x + conv2(relu(conv1(x)))"""
    conv1: ConvLayer
    conv2: ConvLayer

    def layers(self) -> List[ConvLayer]:
        return [self.conv1, self.conv2]


@dataclass
class HistoryFrame:
    """A previous LR frame and the motion mapping current pixels into it"""
    ld: Tensor
    g_lr: Tensor
    motion: Tensor


@dataclass
class HNetModel:
    """Encoder E, fusion F (adapter + residual blocks) and head"""
    config: HNetConfig
    encoder: List[ConvLayer]
    adapter: ConvLayer
    blocks: List[ResidualBlock]
    head: ConvLayer

    @classmethod
    def create(cls, config: HNetConfig, seed: int = 0, dtype=np.float32) -> 'HNetModel':
        """Seeded He-initialized model; layer creation order is fixed"""
        config.validate()
        rng = np.random.default_rng(seed)
        encoder = []
        in_channels = config.encoder_in_channels
        for i, out_channels in enumerate(config.encoder_channels):
            encoder.append(ConvLayer.create(in_channels, out_channels, rng, activation="relu",
                                            dtype=dtype, name=f"encoder.{i}"))
            in_channels = out_channels

        variant = config.fusion_layer_variant
        width = config.fusion_channels
        adapter = ConvLayer.create(config.fusion_in_channels, width, rng, activation="relu",
                                   variant=variant, dtype=dtype, name="fusion.adapter")
        blocks = []
        for i in range(config.fusion_blocks):
            conv1 = ConvLayer.create(width, width, rng, activation="relu", variant=variant,
                                     dtype=dtype, name=f"fusion.block{i}.conv1")
            conv2 = ConvLayer.create(width, width, rng, activation="none", variant=variant,
                                     dtype=dtype, name=f"fusion.block{i}.conv2")
            conv2.weight *= RESIDUAL_INIT_SCALE
            blocks.append(ResidualBlock(conv1, conv2))

        head = ConvLayer.create(config.head_in_channels, 3, rng, activation="none",
                                dtype=dtype, name="head")
        return cls(config=config, encoder=encoder, adapter=adapter, blocks=blocks, head=head)

    def layers(self) -> List[ConvLayer]:
        result = list(self.encoder) + [self.adapter]
        for block in self.blocks:
            result.extend(block.layers())
        result.append(self.head)
        return result

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live parameter arrays keyed `<layer>.<param>`"""
        params = {}
        for layer in self.layers():
            for key, value in layer.params().items():
                params[f"{layer.name}.{key}"] = value
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        layer_name, key = name.rsplit('.', 1)
        for layer in self.layers():
            if layer.name == layer_name:
                layer.set_param(key, value)
                return
        raise KeyError(name)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def weight_count(self) -> int:
        return sum(layer.weight_count for layer in self.layers())

    def astype(self, dtype) -> 'HNetModel':
        return HNetModel(
            config=self.config,
            encoder=[layer.astype(dtype) for layer in self.encoder],
            adapter=self.adapter.astype(dtype),
            blocks=[ResidualBlock(b.conv1.astype(dtype), b.conv2.astype(dtype)) for b in self.blocks],
            head=self.head.astype(dtype),
        )


# ---------------------------------------------------------------------------
# Forward traces
# ---------------------------------------------------------------------------

@dataclass
class EncoderTrace:
    """Encoder input and every layer's output for one frame"""
    input: Tensor
    activations: List[Tensor]

    @property
    def skip(self) -> Tensor:
        return self.activations[0]

    @property
    def features(self) -> Tensor:
        return self.activations[-1]


@dataclass
class ForwardTrace:
    """Intermediates kept for hnet_backward"""
    current: EncoderTrace
    history: List[EncoderTrace] = field(default_factory=list)
    history_motion: List[Tensor] = field(default_factory=list)
    features: Optional[Tensor] = None
    fusion_input: Optional[Tensor] = None
    adapter_out: Optional[Tensor] = None
    block_inputs: List[Tensor] = field(default_factory=list)
    block_hidden: List[Tensor] = field(default_factory=list)
    fused: Optional[Tensor] = None
    shuffled: Optional[Tensor] = None
    output: Optional[Tensor] = None


@contextmanager
def _stage(name: str):
    """Prefix shape/alignment/schema/config errors with the stage name"""
    try:
        yield
    except (ShapeError, AlignmentError, SchemaError, ConfigError) as e:
        if str(e).startswith(f"{name}:"):
            raise
        raise type(e)(f"{name}: {e}") from e


def _check_channels(t: Tensor, expected: int, what: str) -> None:
    if t.channels != expected:
        raise ShapeError(f"{what} has {t.channels} channels, expected {expected}")


def _check_lr(t: Tensor, lr_hw: Tuple[int, int], what: str) -> None:
    if (t.height, t.width) != lr_hw:
        raise ShapeError(f"{what} is {t.height}x{t.width}, expected LR size {lr_hw[0]}x{lr_hw[1]}")


def _encode(model: HNetModel, x: Tensor, threads: int) -> EncoderTrace:
    activations = []
    h = x
    for layer in model.encoder:
        h = conv2d_forward(h, layer, threads=threads)
        activations.append(h)
    return EncoderTrace(input=x, activations=activations)


def _history_frames(config: HNetConfig, history: Optional[Sequence[HistoryFrame]]) -> List[HistoryFrame]:
    needed = config.n_history
    available = len(history) if history else 0
    if available < needed:
        raise ConfigError(f"model needs {needed} history frame(s), got {available}")
    return list(history[:needed]) if needed else []


def _encoder_trace(model: HNetModel, ld_lr: Tensor, g_lr: Tensor,
                   history: Optional[Sequence[HistoryFrame]], threads: int) -> ForwardTrace:
    config = model.config
    _check_channels(ld_lr, config.ld_channels, "L_D^LR")
    _check_channels(g_lr, config.g_lr_count, "G^LR")
    lr_hw = (ld_lr.height, ld_lr.width)
    _check_lr(g_lr, lr_hw, "G^LR")
    frames = _history_frames(config, history)
    for k, frame in enumerate(frames):
        _check_lr(frame.ld, lr_hw, f"history[{k}].ld")
        _check_lr(frame.g_lr, lr_hw, f"history[{k}].g_lr")

    if config.history_mode == "frame":
        parts = [ld_lr, g_lr]
        for frame in frames:
            parts.append(warp_bilinear(concat_channels([frame.ld, frame.g_lr]), frame.motion))
        current = _encode(model, concat_channels(parts), threads)
        trace = ForwardTrace(current=current, features=current.features)
    else:
        current = _encode(model, concat_channels([ld_lr, g_lr]), threads)
        trace = ForwardTrace(current=current)
        warped = []
        for frame in frames:
            past = _encode(model, concat_channels([frame.ld, frame.g_lr]), threads)
            trace.history.append(past)
            trace.history_motion.append(frame.motion)
            warped.append(warp_bilinear(past.features, frame.motion))
        trace.features = concat_channels([current.features] + warped)

    _check_lr(current.skip, lr_hw, "F_s")
    _check_lr(trace.features, lr_hw, "F_i")
    return trace


def align_hr_guide(config: HNetConfig, g_hr: Tensor) -> Tensor:
    """P_D: move the HR guide onto the LR grid"""
    if config.alignment == "unshuffle":
        return pixel_unshuffle(g_hr, config.r)
    if config.alignment == "avgpool":
        return avg_pool(g_hr, config.r)
    return max_pool(g_hr, config.r)


def _fusion_trace(model: HNetModel, trace: ForwardTrace, g_hr: Optional[Tensor], threads: int) -> None:
    config = model.config
    features = trace.features
    lr_hw = (features.height, features.width)
    if config.use_hr_gbuffer:
        if g_hr is None:
            raise SchemaError("HR G-buffer guide required (use_hr_gbuffer is set)")
        _check_channels(g_hr, config.g_hr_count, "G^HR")
        r = config.r
        if g_hr.height % r or g_hr.width % r:
            raise AlignmentError(f"G^HR size {g_hr.height}x{g_hr.width} not divisible by r={r}")
        if (g_hr.height // r, g_hr.width // r) != lr_hw:
            raise AlignmentError(
                f"G^HR size {g_hr.height}x{g_hr.width} is not r={r} times LR size {lr_hw[0]}x{lr_hw[1]}"
            )
        fusion_input = concat_channels([features, align_hr_guide(config, g_hr)])
    else:
        fusion_input = features

    x = conv2d_forward(fusion_input, model.adapter, threads=threads)
    trace.fusion_input, trace.adapter_out = fusion_input, x
    for block in model.blocks:
        hidden = conv2d_forward(x, block.conv1, threads=threads)
        trace.block_inputs.append(x)
        trace.block_hidden.append(hidden)
        x = Tensor(x.data + conv2d_forward(hidden, block.conv2, threads=threads).data)
    _check_lr(x, lr_hw, "F_f")
    trace.fused = x


def _head_trace(model: HNetModel, trace: ForwardTrace, threads: int) -> None:
    cat = concat_channels([trace.current.skip, trace.fused])
    trace.shuffled = pixel_shuffle(cat, model.config.r)
    trace.output = conv2d_forward(trace.shuffled, model.head, threads=threads)


def hnet_forward_trace(model: HNetModel, ld_lr: Tensor, g_lr: Tensor, g_hr: Optional[Tensor],
                       history: Optional[Sequence[HistoryFrame]] = None,
                       threads: int = 1) -> Tuple[Tensor, ForwardTrace]:
    with _stage("encoder"):
        trace = _encoder_trace(model, ld_lr, g_lr, history, threads)
    with _stage("fusion"):
        _fusion_trace(model, trace, g_hr, threads)
    with _stage("head"):
        _head_trace(model, trace, threads)
    return trace.output, trace


# ---------------------------------------------------------------------------
# Public stage API
# ---------------------------------------------------------------------------

def encoder_forward(model: HNetModel, ld_lr: Tensor, g_lr: Tensor,
                    history: Optional[Sequence[HistoryFrame]] = None,
                    threads: int = 1) -> Tuple[Tensor, Tensor]:
    """(F_s, F_i). In feature-history mode F_i already carries the warped history features."""
    with _stage("encoder"):
        trace = _encoder_trace(model, ld_lr, g_lr, history, threads)
    return trace.current.skip, trace.features


def fusion_forward(model: HNetModel, features: Tensor, g_hr: Optional[Tensor], threads: int = 1) -> Tensor:
    """F_f = F([F_i, P_D(G^HR)])"""
    trace = ForwardTrace(current=EncoderTrace(features, [features]), features=features)
    with _stage("fusion"):
        _fusion_trace(model, trace, g_hr, threads)
    return trace.fused


def head_forward(model: HNetModel, skip: Tensor, fused: Tensor, threads: int = 1) -> Tensor:
    """Conv(P_U([F_s, F_f]))"""
    trace = ForwardTrace(current=EncoderTrace(skip, [skip]), fused=fused)
    with _stage("head"):
        _head_trace(model, trace, threads)
    return trace.output


def hnet_forward(model: HNetModel, ld_lr: Tensor, g_lr: Tensor, g_hr: Optional[Tensor],
                 history: Optional[Sequence[HistoryFrame]] = None, threads: int = 1) -> Tensor:
    """HR demodulated radiance estimate, 3 channels"""
    output, _ = hnet_forward_trace(model, ld_lr, g_lr, g_hr, history, threads)
    return output


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def _accumulate(grads: Dict[str, np.ndarray], layer: ConvLayer, layer_grads: Dict[str, np.ndarray]) -> None:
    for key, value in layer_grads.items():
        name = f"{layer.name}.{key}"
        if name in grads:
            grads[name] = grads[name] + value
        else:
            grads[name] = value


def _encode_backward(model: HNetModel, trace: EncoderTrace, grad_skip: Optional[np.ndarray],
                     grad_features: np.ndarray, grads: Dict[str, np.ndarray]) -> Tensor:
    g = grad_features
    for k in range(len(model.encoder) - 1, -1, -1):
        if k == 0 and grad_skip is not None:
            g = g + grad_skip
        layer = model.encoder[k]
        inp = trace.activations[k - 1] if k > 0 else trace.input
        grad_in, layer_grads = conv2d_backward(inp, layer, Tensor(g), out=trace.activations[k])
        _accumulate(grads, layer, layer_grads)
        g = grad_in.data
    return Tensor(g)


def hnet_backward(model: HNetModel, trace: ForwardTrace,
                  grad_out: Tensor) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    """Gradients of the traced forward pass.

    Returns the gradient with respect to the current frame's L_D^LR and a
    dict of parameter gradients keyed like HNetModel.parameters().
    """
    config = model.config
    grads: Dict[str, np.ndarray] = {}

    grad_shuffled, layer_grads = conv2d_backward(trace.shuffled, model.head, grad_out, out=trace.output)
    _accumulate(grads, model.head, layer_grads)
    grad_cat = pixel_shuffle_backward(grad_shuffled, config.r)
    grad_skip, grad_fused = split_channels(grad_cat, [trace.current.skip.channels, trace.fused.channels])

    g = grad_fused.data
    for block, x, hidden in reversed(list(zip(model.blocks, trace.block_inputs, trace.block_hidden))):
        grad_hidden, g2 = conv2d_backward(hidden, block.conv2, Tensor(g))
        grad_x, g1 = conv2d_backward(x, block.conv1, grad_hidden, out=hidden)
        _accumulate(grads, block.conv2, g2)
        _accumulate(grads, block.conv1, g1)
        g = g + grad_x.data

    grad_fusion_in, layer_grads = conv2d_backward(trace.fusion_input, model.adapter, Tensor(g),
                                                  out=trace.adapter_out)
    _accumulate(grads, model.adapter, layer_grads)
    grad_features = grad_fusion_in.data[:, :trace.features.channels]

    if config.history_mode == "frame":
        grad_input = _encode_backward(model, trace.current, grad_skip.data, grad_features, grads)
    else:
        own = trace.current.features.channels
        grad_input = _encode_backward(model, trace.current, grad_skip.data, grad_features[:, :own], grads)
        for k, (past, motion) in enumerate(zip(trace.history, trace.history_motion)):
            g_warped = Tensor(grad_features[:, own * (k + 1):own * (k + 2)])
            g_past = warp_bilinear_backward(past.features.shape, motion, g_warped)
            _encode_backward(model, past, None, g_past.data, grads)

    grad_ld = Tensor(np.ascontiguousarray(grad_input.data[:, :config.ld_channels]))
    return grad_ld, grads


class ModelFragment:
    """A whole H-Net with fixed guides, differentiated with respect to L_D^LR"""

    def __init__(self, model: HNetModel, ld_lr: Tensor, g_lr: Tensor, g_hr: Optional[Tensor],
                 history: Optional[Sequence[HistoryFrame]] = None):
        self.model = model
        self.ld_lr = ld_lr
        self.g_lr = g_lr
        self.g_hr = g_hr
        self.history = list(history or [])
        self.name = f"hnet_{model.config.variant}_r{model.config.r}"

    @classmethod
    def random(cls, model: HNetModel, lr_size: int = 8, seed: int = 0) -> 'ModelFragment':
        """Seeded random inputs of the model's dtype"""
        config = model.config
        rng = np.random.default_rng(seed)
        dtype = model.dtype
        n, hr = lr_size, lr_size * config.r

        def uniform(channels: int, size: int) -> Tensor:
            return Tensor(rng.uniform(0.0, 1.0, size=(1, channels, size, size)).astype(dtype))

        ld = uniform(config.ld_channels, n)
        g_lr = uniform(config.g_lr_count, n)
        g_hr = uniform(config.g_hr_count, hr) if config.use_hr_gbuffer else None
        history = []
        for _ in range(config.n_history):
            motion = Tensor(rng.uniform(-1.5, 1.5, size=(1, 2, n, n)).astype(dtype))
            history.append(HistoryFrame(uniform(config.ld_channels, n), uniform(config.g_lr_count, n), motion))
        return cls(model, ld, g_lr, g_hr, history)

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.model.parameters()

    def forward(self, x: Tensor) -> Tensor:
        return hnet_forward(self.model, x, self.g_lr, self.g_hr, self.history)

    def backward(self, x: Tensor, grad_out: Tensor) -> Tuple[Tensor, Dict[str, np.ndarray]]:
        _, trace = hnet_forward_trace(self.model, x, self.g_lr, self.g_hr, self.history)
        return hnet_backward(self.model, trace, grad_out)


# ---------------------------------------------------------------------------
# Inputs from frame bundles
# ---------------------------------------------------------------------------

@dataclass
class ModelInputs:
    """Everything one H-Net evaluation consumes, plus what remodulation needs"""
    ld_lr: Tensor
    g_lr: Tensor
    g_hr: Optional[Tensor]
    history: List[HistoryFrame]
    fbeta_hr: Tensor
    emissive_hr: Tensor


def guide_tensor(names: Sequence[str], gbuffer: ShadingGBuffer, fbeta: Tensor) -> Tensor:
    """Concatenate named guide channels; 'fbeta' comes from the F_beta map"""
    parts = []
    for name in names:
        parts.append(fbeta if name == 'fbeta' else Tensor(gbuffer.channel(name)))
    return concat_channels(parts)


def compose_motion(near: Tensor, far: Tensor) -> Tensor:
    """Motion t->t-2 from t->t-1 (near) and t-1->t-2 (far)"""
    return Tensor(near.data + warp_bilinear(far, near).data)


def fbeta_for(config: HNetConfig, gbuffer: ShadingGBuffer, lut: EnvBrdfLut,
              include_diffuse: bool = True) -> Tensor:
    """F_beta map, or ones when demodulation is disabled"""
    if config.demodulate:
        return build_fbeta_map(gbuffer, lut, include_diffuse=include_diffuse)
    h, w = gbuffer.spatial
    batch = next(iter(gbuffer.present().values())).shape[0]
    return Tensor(np.ones((batch, 3, h, w)))


def demodulated_radiance(config: HNetConfig, frame: FrameBundle, lut: EnvBrdfLut,
                         include_diffuse: bool = True) -> Tuple[Tensor, Tensor]:
    """(L_D, F_beta) of a frame: (color - emissive) / F_beta"""
    fbeta = fbeta_for(config, frame.gbuffer, lut, include_diffuse)
    emissive = frame.gbuffer.channel('emissive')
    return demodulate(Tensor(frame.color.data - emissive), fbeta), fbeta


def build_inputs(model: HNetModel, lut: EnvBrdfLut, frame_lr: FrameBundle, g_hr: ShadingGBuffer,
                 history_lr: Sequence[FrameBundle] = (), include_diffuse: bool = True) -> ModelInputs:
    """Demodulate LR frames and assemble guides; history_lr[0] is frame t-1"""
    config = model.config
    dtype = model.dtype

    def cast(t: Tensor) -> Tensor:
        return t.astype(dtype)

    ld_lr, fbeta_lr = demodulated_radiance(config, frame_lr, lut, include_diffuse)
    g_lr = guide_tensor(config.g_lr_channels, frame_lr.gbuffer, fbeta_lr)

    fbeta_hr = fbeta_for(config, g_hr, lut, include_diffuse)
    guide_hr = guide_tensor(config.g_hr_channels, g_hr, fbeta_hr) if config.use_hr_gbuffer else None

    if len(history_lr) < config.n_history:
        raise ConfigError(f"model needs {config.n_history} history frame(s), got {len(history_lr)}")
    history = []
    motion = None
    newer = frame_lr
    for past in list(history_lr)[:config.n_history]:
        step = Tensor(newer.gbuffer.channel('motion'))
        motion = step if motion is None else compose_motion(motion, step)
        ld_past, fbeta_past = demodulated_radiance(config, past, lut, include_diffuse)
        g_past = guide_tensor(config.g_lr_channels, past.gbuffer, fbeta_past)
        history.append(HistoryFrame(cast(ld_past), cast(g_past), cast(motion)))
        newer = past

    return ModelInputs(
        ld_lr=cast(ld_lr),
        g_lr=cast(g_lr),
        g_hr=None if guide_hr is None else cast(guide_hr),
        history=history,
        fbeta_hr=fbeta_hr,
        emissive_hr=Tensor(g_hr.channel('emissive')),
    )


def super_resolve(model: HNetModel, frame_lr: FrameBundle, g_hr: ShadingGBuffer, lut: EnvBrdfLut,
                  history_lr: Sequence[FrameBundle] = (), include_diffuse: bool = True,
                  threads: int = 1) -> Tensor:
    """HR color: demodulate LR, run H-Net, remodulate with HR F_beta and emissive"""
    inputs = build_inputs(model, lut, frame_lr, g_hr, history_lr, include_diffuse)
    ld_hr = hnet_forward(model, inputs.ld_lr, inputs.g_lr, inputs.g_hr, inputs.history, threads=threads)
    fbeta = inputs.fbeta_hr.astype(ld_hr.dtype)
    emissive = inputs.emissive_hr.astype(ld_hr.dtype)
    return remodulate(ld_hr, fbeta, emissive)


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------

def _lr_size(config: HNetConfig, hr_size: int) -> int:
    if hr_size % config.r:
        raise AlignmentError(f"HR size {hr_size} not divisible by r={config.r}")
    return hr_size // config.r


def fusion_macs(config: HNetConfig, hr_size: int, include_adapter: bool = True) -> int:
    """Fusion-stage multiply-accumulates for an hr_size x hr_size output"""
    lr = _lr_size(config, hr_size)
    variant = config.fusion_layer_variant
    width = config.fusion_channels
    block = ConvLayer(width, width, variant=variant)
    total = 2 * config.fusion_blocks * conv_macs(block, lr, lr)
    if include_adapter:
        total += conv_macs(ConvLayer(config.fusion_in_channels, width, variant=variant), lr, lr)
    return total


def model_macs(config: HNetConfig, hr_size: int) -> Dict[str, int]:
    """Per-stage multiply-accumulates"""
    lr = _lr_size(config, hr_size)
    encoder, in_channels = 0, config.encoder_in_channels
    for out_channels in config.encoder_channels:
        encoder += conv_macs(ConvLayer(in_channels, out_channels), lr, lr)
        in_channels = out_channels
    if config.history_mode == "feature":
        encoder *= 1 + config.n_history
    head = conv_macs(ConvLayer(config.head_in_channels, 3), hr_size, hr_size)
    return {'encoder': encoder, 'fusion': fusion_macs(config, hr_size), 'head': head}


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_weights(model: HNetModel, path) -> None:
    write_container(path, model.parameters(), meta={'config': asdict(model.config)})


def load_weights(path, config: HNetConfig) -> HNetModel:
    """Load weights, validating every tensor against `config`"""
    arrays, _ = read_container(path)
    dtypes = {arr.dtype for arr in arrays.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    model = HNetModel.create(config, seed=0, dtype=dtype)
    expected = model.parameters()
    for name, template in expected.items():
        if name not in arrays:
            raise FormatError(f"weights file {path} is missing tensor '{name}'")
        if arrays[name].shape != template.shape:
            layer = name.rsplit('.', 1)[0]
            raise FormatError(
                f"layer '{layer}': tensor '{name}' has shape {arrays[name].shape}, "
                f"config expects {template.shape}"
            )
        model.set_parameter(name, arrays[name])
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise FormatError(f"weights file {path} has tensors not in the config: {extra}")
    return model


def save_model(model: HNetModel, directory) -> Path:
    """model.json + weights.bin"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / MODEL_FILE, 'w') as f:
        json.dump({'format_version': MODEL_FORMAT_VERSION, 'config': asdict(model.config)}, f, indent=2)
    save_weights(model, directory / WEIGHTS_FILE)
    log_event(logger, "model saved", path=directory, weights=model.weight_count(), level=logging.DEBUG)
    return directory


def load_model(directory) -> HNetModel:
    directory = Path(directory)
    try:
        with open(directory / MODEL_FILE, 'r') as f:
            payload = json.load(f)
    except OSError as e:
        raise FormatError(f"cannot read {directory / MODEL_FILE}: {e}")
    except json.JSONDecodeError as e:
        raise FormatError(f"{directory / MODEL_FILE} is not valid JSON: {e}")
    if payload.get('format_version') != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {payload.get('format_version')}")
    config = model_config_from_dict(payload.get('config', {}))
    return load_weights(directory / WEIGHTS_FILE, config)


if __name__ == "__main__":
    for cfg in (HNetConfig.full(r=4), HNetConfig.lite(r=4), HNetConfig.full(r=8)):
        macs = model_macs(cfg, 512)
        print(f"{cfg.variant:4} r={cfg.r}: " + ", ".join(f"{k}={v / 1e9:.2f} GMAC" for k, v in macs.items()))
    demo = HNetModel.create(HNetConfig.lite(r=4), seed=0)
    fragment = ModelFragment.random(demo, lr_size=16)
    out = fragment.forward(fragment.ld_lr)
    print(f"lite forward {fragment.ld_lr.shape} -> {out.shape}, finite={out.is_finite()}")
