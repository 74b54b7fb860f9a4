"""
End-to-end H-Net training: Adam, random aligned LR/HR crops, checkpoints.

Single-threaded runs are bitwise reproducible, including across a resume
from checkpoint: the crop RNG state, Adam moments and loss history are all
stored with the weights.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from brdf_lut import EnvBrdfLut
from config import AdamHyper, FuseSRConfig, LossWeights
from errors import ConfigError, FormatError, TrainingDivergedError
from frame_io import FrameBundle
from hnet_model import (
    HistoryFrame, HNetModel, ModelInputs, build_inputs, hnet_backward, hnet_forward_trace,
    load_model, save_model,
)
from losses import FeatureExtractor, TotalLoss, tonemap, tonemap_backward, total_loss
from setup_environment import log_event
from synth_dataset import FrameSequence
from tensor_ops import Tensor
from weights_io import read_container, write_container

logger = logging.getLogger(__name__)

STATE_FILE = "state.json"
ADAM_FILE = "adam.bin"
LOSS_FILE = "losses.csv"


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moments per parameter and the update count"""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              hyper: AdamHyper) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied to the parameter arrays in place"""
    state.step += 1
    t = state.step
    correction1 = 1 - hyper.beta1 ** t
    correction2 = 1 - hyper.beta2 ** t
    for name, param in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        m = state.m[name] = hyper.beta1 * state.m[name] + (1 - hyper.beta1) * g
        v = state.v[name] = hyper.beta2 * state.v[name] + (1 - hyper.beta2) * g * g
        update = hyper.lr * (m / correction1) / (np.sqrt(v / correction2) + hyper.eps)
        param -= update.astype(param.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class CropSpec:
    """One training sample: frame index and LR crop origin"""
    frame: int
    y: int
    x: int


@dataclass
class TrainBatch:
    inputs: ModelInputs
    target: Tensor


def _stack(tensors: List[Tensor]) -> Tensor:
    return Tensor(np.concatenate([t.data for t in tensors], axis=0))


def stack_inputs(samples: List[ModelInputs]) -> ModelInputs:
    history = []
    for k in range(len(samples[0].history)):
        frames = [s.history[k] for s in samples]
        history.append(HistoryFrame(_stack([f.ld for f in frames]), _stack([f.g_lr for f in frames]),
                                    _stack([f.motion for f in frames])))
    return ModelInputs(
        ld_lr=_stack([s.ld_lr for s in samples]),
        g_lr=_stack([s.g_lr for s in samples]),
        g_hr=None if samples[0].g_hr is None else _stack([s.g_hr for s in samples]),
        history=history,
        fbeta_hr=_stack([s.fbeta_hr for s in samples]),
        emissive_hr=_stack([s.emissive_hr for s in samples]),
    )


def first_trainable_frame(model: HNetModel) -> int:
    return model.config.n_history


def draw_crops(rng: np.random.Generator, frames: List[int], lr_size: Tuple[int, int], crop: int,
               batch_size: int) -> List[CropSpec]:
    height, width = lr_size
    crops = []
    for _ in range(batch_size):
        frame = frames[int(rng.integers(0, len(frames)))]
        y = int(rng.integers(0, height - crop + 1))
        x = int(rng.integers(0, width - crop + 1))
        crops.append(CropSpec(frame, y, x))
    return crops


def sample_inputs(model: HNetModel, lut: EnvBrdfLut, sequence: FrameSequence, spec: CropSpec, crop: int,
                  include_diffuse: bool = True) -> Tuple[ModelInputs, Tensor]:
    """Model inputs and HR target color of one aligned crop"""
    r = sequence.r
    window = (spec.y, spec.x, crop, crop)
    hr_window = (spec.y * r, spec.x * r, crop * r, crop * r)
    lr = sequence.lr[spec.frame].crop(*window)
    history = [sequence.lr[spec.frame - k].crop(*window) for k in range(1, model.config.n_history + 1)]
    hr: FrameBundle = sequence.hr[spec.frame].crop(*hr_window)
    inputs = build_inputs(model, lut, lr, hr.gbuffer, history, include_diffuse)
    return inputs, hr.color.astype(model.dtype)


def make_batch(model: HNetModel, lut: EnvBrdfLut, sequence: FrameSequence, crops: List[CropSpec], crop: int,
               include_diffuse: bool = True, threads: int = 1) -> TrainBatch:
    """Samples are built from pre-drawn crops, so the result does not depend on `threads`"""
    def job(spec: CropSpec):
        return sample_inputs(model, lut, sequence, spec, crop, include_diffuse)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(job, crops))
    else:
        samples = [job(spec) for spec in crops]
    return TrainBatch(stack_inputs([s[0] for s in samples]), _stack([s[1] for s in samples]))


def batch_gradients(model: HNetModel, batch: TrainBatch, weights: LossWeights,
                    fx: FeatureExtractor) -> Tuple[TotalLoss, Dict[str, np.ndarray]]:
    """Loss on tone-mapped remodulated color and its parameter gradients"""
    inputs = batch.inputs
    ld_hat, trace = hnet_forward_trace(model, inputs.ld_lr, inputs.g_lr, inputs.g_hr, inputs.history)
    fbeta = inputs.fbeta_hr.data.astype(ld_hat.dtype)
    color = Tensor(fbeta * ld_hat.data + inputs.emissive_hr.data.astype(ld_hat.dtype))
    loss = total_loss(tonemap(color), tonemap(batch.target), weights, fx)
    grad_color = tonemap_backward(color, loss.grad)
    _, grads = hnet_backward(model, trace, Tensor(grad_color.data * fbeta))
    return loss, grads


# ---------------------------------------------------------------------------
# Runs and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainRun:
    """Mutable state of one training run"""
    config: FuseSRConfig
    seed: int
    step: int = 0
    rng: Optional[np.random.Generator] = None
    adam: AdamState = field(default_factory=AdamState)
    loss_history: List[Dict[str, float]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    out_dir: Optional[Path] = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)

    @classmethod
    def start(cls, config: FuseSRConfig, out_dir=None) -> 'TrainRun':
        return cls(config=config, seed=config.train.seed, out_dir=out_dir)

    def losses(self) -> pd.DataFrame:
        return pd.DataFrame(self.loss_history)


def checkpoint_dir(out_dir: Path, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:06d}"


def save_checkpoint(model: HNetModel, run: TrainRun) -> Path:
    """Model files, Adam moments and RNG/loss state under ckpt_<step>/"""
    if run.out_dir is None:
        raise ConfigError("checkpointing needs an output directory")
    directory = checkpoint_dir(run.out_dir, run.step)
    save_model(model, directory)
    arrays = {}
    for name in run.adam.m:
        arrays[f"m/{name}"] = run.adam.m[name]
        arrays[f"v/{name}"] = run.adam.v[name]
    write_container(directory / ADAM_FILE, arrays, meta={'step': run.adam.step})
    state = {
        'step': run.step,
        'seed': run.seed,
        'adam_step': run.adam.step,
        'rng_state': run.rng.bit_generator.state,
        'loss_history': run.loss_history,
        'config': run.config.to_dict(),
    }
    with open(directory / STATE_FILE, 'w') as f:
        json.dump(state, f, indent=2)
    run.checkpoints.append(directory)
    log_event(logger, "checkpoint", step=run.step, path=directory)
    return directory


def resume_run(directory, config: Optional[FuseSRConfig] = None,
               out_dir=None) -> Tuple[HNetModel, TrainRun]:
    """Restore model and run state so training continues bit for bit"""
    directory = Path(directory)
    try:
        with open(directory / STATE_FILE, 'r') as f:
            state = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read checkpoint state {directory / STATE_FILE}: {e}")
    if config is None:
        config = FuseSRConfig.from_dict(state['config'])
    model = load_model(directory)
    arrays, meta = read_container(directory / ADAM_FILE)
    adam = AdamState(step=state['adam_step'])
    for key, value in arrays.items():
        kind, name = key.split('/', 1)
        (adam.m if kind == 'm' else adam.v)[name] = value

    rng = np.random.default_rng()
    rng.bit_generator.state = state['rng_state']
    run = TrainRun(config=config, seed=state['seed'], step=state['step'], rng=rng, adam=adam,
                   loss_history=list(state['loss_history']),
                   out_dir=Path(out_dir) if out_dir is not None else directory.parent)
    return model, run


@dataclass
class TrainResult:
    model: HNetModel
    run: TrainRun

    @property
    def losses(self) -> pd.DataFrame:
        return self.run.losses()


def layer_norms(model: HNetModel) -> Dict[str, float]:
    return {name: float(np.linalg.norm(value)) for name, value in model.parameters().items()}


def train(sequence: FrameSequence, config: FuseSRConfig, lut: EnvBrdfLut, run: Optional[TrainRun] = None,
          model: Optional[HNetModel] = None, steps: Optional[int] = None, threads: int = 1,
          callback: Optional[Callable[[int, TotalLoss], None]] = None) -> TrainResult:
    """Minimize the total loss on random crops of the training frames.

    `steps` is the step count to reach (defaults to config.train.steps); a
    resumed run continues from run.step.
    """
    settings = config.train
    if run is None:
        run = TrainRun.start(config)
    if model is None:
        model = HNetModel.create(config.model, seed=settings.seed, dtype=np.dtype(settings.dtype))
    if sequence.r != model.config.r:
        raise ConfigError(f"dataset r={sequence.r} does not match model r={model.config.r}")

    first = first_trainable_frame(model)
    frames = [t for t in sequence.train_indices() if t >= first]
    if not frames:
        raise ConfigError(f"training needs frames with {first} predecessor(s); dataset has "
                          f"{len(sequence.train_indices())} training frame(s)")
    lr_size = sequence.lr[0].resolution
    crop = min(settings.crop, *lr_size)
    fx = FeatureExtractor.create(dtype=model.dtype)
    target_steps = settings.steps if steps is None else steps
    params = model.parameters()

    start = time.perf_counter()
    while run.step < target_steps:
        crops = draw_crops(run.rng, frames, lr_size, crop, settings.batch_size)
        batch = make_batch(model, lut, sequence, crops, crop, config.lut.include_diffuse, threads)
        loss, grads = batch_gradients(model, batch, config.loss, fx)
        if not np.isfinite(loss.value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"loss became {loss.value} at step {run.step + 1}",
                                        step=run.step + 1, layer_norms=layer_norms(model))
        adam_step(params, grads, run.adam, config.adam)
        run.step += 1
        run.loss_history.append({'step': run.step, 'loss': loss.value, **loss.components})

        if callback is not None:
            callback(run.step, loss)
        if settings.log_every and run.step % settings.log_every == 0:
            log_event(logger, "train", step=run.step, loss=loss.value,
                      seconds=time.perf_counter() - start, **loss.components)
        if run.out_dir is not None and settings.checkpoint_every and run.step % settings.checkpoint_every == 0:
            save_checkpoint(model, run)

    if run.out_dir is not None:
        if not run.checkpoints or run.checkpoints[-1] != checkpoint_dir(run.out_dir, run.step):
            save_checkpoint(model, run)
        run.losses().to_csv(run.out_dir / LOSS_FILE, index=False)
    return TrainResult(model=model, run=run)


def moving_average(values, window: int = 50) -> np.ndarray:
    series = pd.Series(values, dtype=np.float64)
    return series.rolling(window, min_periods=window).mean().dropna().to_numpy()


if __name__ == "__main__":
    from cache_manager import get_lut
    from config import DatasetSettings, HNetConfig, TrainSettings
    from synth_dataset import generate_sequence

    cfg = FuseSRConfig.default()
    cfg.model = HNetConfig.lite(r=2, fusion_blocks=2)
    cfg.train = TrainSettings(steps=20, batch_size=2, crop=16, log_every=5)
    seq = generate_sequence(DatasetSettings(hr=64, r=2, frames=3))
    result = train(seq, cfg, get_lut(cfg.lut))
    print(result.losses.tail())
