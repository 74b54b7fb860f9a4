"""
Evaluation harness: per-frame tone-mapped PSNR/SSIM for trained models,
upsampling baselines and ablation variants, plus per-stage timing benchmarks.
"""
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from brdf_lut import EnvBrdfLut
from config import FuseSRConfig, HNetConfig
from errors import ConfigError
from hnet_model import (
    HNetModel, ModelFragment, encoder_forward, fusion_forward, head_forward, hnet_forward,
    model_macs, super_resolve,
)
from losses import image_metrics
from setup_environment import log_event
from synth_dataset import FrameSequence
from tensor_ops import resize_upsample
from trainer import train

logger = logging.getLogger(__name__)

BASELINES = ('bicubic', 'bilinear')
METRIC_COLUMNS = ['frame', 'method', 'psnr_db', 'ssim']
STAGES = ('encoder', 'fusion', 'head', 'total')
ABLATION_NAMES = ('full', 'no_hr_gbuffer', 'no_demod', 'no_hr_no_demod', 'avgpool', 'maxpool')


def ablation_configs(base: HNetConfig) -> Dict[str, HNetConfig]:
    """Named variants differing from `base` in one switch (or the two HR-guide switches)"""
    variants = {
        'full': base,
        'no_hr_gbuffer': replace(base, use_hr_gbuffer=False),
        'no_demod': replace(base, demodulate=False),
        'no_hr_no_demod': replace(base, use_hr_gbuffer=False, demodulate=False),
        'avgpool': replace(base, alignment='avgpool'),
        'maxpool': replace(base, alignment='maxpool'),
    }
    for config in variants.values():
        config.validate()
    return variants


@dataclass
class EvalReport:
    """Per-frame metrics per method, and optional stage timings"""
    rows: pd.DataFrame
    timings: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> pd.DataFrame:
        """Mean PSNR/SSIM per method"""
        return self.rows.groupby('method', sort=False)[['psnr_db', 'ssim']].mean().reset_index()

    def mean(self, method: str, column: str = 'psnr_db') -> float:
        return float(self.rows.loc[self.rows['method'] == method, column].mean())

    def table(self) -> pd.DataFrame:
        """Per-frame rows followed by one `mean` row per method"""
        means = self.summary()
        means.insert(0, 'frame', 'mean')
        rows = self.rows.astype({'frame': object})
        return pd.concat([rows, means[METRIC_COLUMNS]], ignore_index=True)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.table().to_csv(path, index=False)
        return path


def baseline_upsample(frame_lr, r: int, kind: str):
    return resize_upsample(frame_lr.color, r, kind)


def evaluate(models: Mapping[str, HNetModel], sequence: FrameSequence, lut: EnvBrdfLut,
             frames: Optional[Sequence[int]] = None, baselines: Iterable[str] = BASELINES,
             include_diffuse: bool = True, threads: int = 1) -> EvalReport:
    """Tone-mapped PSNR/SSIM on each frame for every model and baseline.

    Frames default to the held-out split; frames without enough predecessors
    for the longest model history are skipped for every method alike.
    """
    for name, model in models.items():
        if model.config.r != sequence.r:
            raise ConfigError(f"model '{name}' has r={model.config.r}, dataset r={sequence.r}")
    for kind in baselines:
        if kind not in BASELINES:
            raise ConfigError(f"unknown baseline '{kind}', expected one of {BASELINES}")

    first = max([m.config.n_history for m in models.values()], default=0)
    candidates = sequence.test_indices() if frames is None else list(frames)
    frames = [t for t in candidates if t >= first]
    if not frames:
        raise ConfigError(f"no evaluation frames with {first} predecessor(s) among {candidates}")

    rows: List[Dict] = []
    timings: Dict[str, List[float]] = {}
    for t in frames:
        lr, hr = sequence.lr[t], sequence.hr[t]
        for name, model in models.items():
            history = [sequence.lr[t - k] for k in range(1, model.config.n_history + 1)]
            start = time.perf_counter()
            pred = super_resolve(model, lr, hr.gbuffer, lut, history, include_diffuse, threads=threads)
            timings.setdefault(name, []).append(time.perf_counter() - start)
            psnr_db, ssim_value = image_metrics(pred, hr.color)
            rows.append({'frame': t, 'method': name, 'psnr_db': psnr_db, 'ssim': ssim_value})
        for kind in baselines:
            psnr_db, ssim_value = image_metrics(baseline_upsample(lr, sequence.r, kind), hr.color)
            rows.append({'frame': t, 'method': kind, 'psnr_db': psnr_db, 'ssim': ssim_value})

    report = EvalReport(rows=pd.DataFrame(rows, columns=METRIC_COLUMNS),
                        timings={name: float(np.median(v)) for name, v in timings.items()})
    for _, row in report.summary().iterrows():
        log_event(logger, "eval", method=row['method'], psnr_db=row['psnr_db'], ssim=row['ssim'])
    return report


# ---------------------------------------------------------------------------
# Trained ablations
# ---------------------------------------------------------------------------

GUIDE_ORDER = ('full', 'no_demod', 'no_hr_gbuffer', 'no_hr_no_demod')
ALIGNMENT_ORDER = ('full', 'avgpool', 'maxpool')
MIN_GUIDE_GAP_DB = 1.5
MIN_BICUBIC_MARGIN_DB = 2.0


@dataclass
class AblationReport:
    """Held-out metrics of every trained variant for every seed"""
    rows: pd.DataFrame
    steps: int

    @property
    def seeds(self) -> List[int]:
        return sorted(self.rows['seed'].unique().tolist())

    def summary(self) -> pd.DataFrame:
        """Mean PSNR/SSIM per method over seeds and frames"""
        return self.rows.groupby('method', sort=False)[['psnr_db', 'ssim']].mean().reset_index()

    def trends(self) -> pd.DataFrame:
        """Orderings and margins over seed-averaged PSNR; rows whose variants were not trained are left out"""
        means = self.summary().set_index('method')['psnr_db']
        checks = []

        def ordering(name: str, order: Sequence[str]) -> None:
            if all(m in means.index for m in order):
                values = [means[m] for m in order]
                worst = min(a - b for a, b in zip(values, values[1:]))
                checks.append({'check': name, 'value': float(worst), 'threshold': 0.0,
                               'passed': bool(worst >= 0.0)})

        def margin(name: str, better: str, worse: str, threshold: float) -> None:
            if better in means.index and worse in means.index:
                gap = float(means[better] - means[worse])
                checks.append({'check': name, 'value': gap, 'threshold': threshold,
                               'passed': bool(gap >= threshold)})

        ordering(' >= '.join(GUIDE_ORDER), GUIDE_ORDER)
        margin('full - no_hr_no_demod', 'full', 'no_hr_no_demod', MIN_GUIDE_GAP_DB)
        margin('full - bicubic', 'full', 'bicubic', MIN_BICUBIC_MARGIN_DB)
        ordering(' >= '.join(ALIGNMENT_ORDER), ALIGNMENT_ORDER)
        return pd.DataFrame(checks, columns=['check', 'value', 'threshold', 'passed']).astype({'passed': bool})

    @property
    def passed(self) -> bool:
        return bool(self.trends()['passed'].all())

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(path, index=False)
        return path


def ablation_study(sequence: FrameSequence, config: FuseSRConfig, lut: EnvBrdfLut,
                   seeds: Sequence[int] = (0, 1, 2), steps: Optional[int] = None,
                   variants: Optional[Iterable[str]] = None, threads: int = 1,
                   callback: Optional[Callable[[str, int], None]] = None) -> AblationReport:
    """Train every ablation variant of config.model once per seed and evaluate on held-out frames.

    Every variant of a seed starts from the same seed for weights and crops, so
    variants differ only in the switch they ablate.
    """
    configs = ablation_configs(config.model)
    if variants is not None:
        variants = list(variants)
        unknown = set(variants) - set(configs)
        if unknown:
            raise ConfigError(f"unknown ablation variant(s) {sorted(unknown)}, expected {sorted(configs)}")
        configs = {name: configs[name] for name in variants}
    if not seeds:
        raise ConfigError("ablation study needs at least one seed")
    steps = config.train.steps if steps is None else steps

    frames = []
    for seed in seeds:
        models = {}
        for name, model_config in configs.items():
            if callback is not None:
                callback(name, seed)
            run_config = replace(config, model=model_config, train=replace(config.train, seed=seed))
            models[name] = train(sequence, run_config, lut, steps=steps, threads=threads).model
        rows = evaluate(models, sequence, lut, include_diffuse=config.lut.include_diffuse, threads=threads).rows
        rows.insert(0, 'seed', seed)
        frames.append(rows)

    report = AblationReport(rows=pd.concat(frames, ignore_index=True), steps=steps)
    for _, row in report.trends().iterrows():
        log_event(logger, "ablation", check=row['check'], value=row['value'], passed=row['passed'])
    return report


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    """Median wall-clock milliseconds per stage and configuration"""
    rows: pd.DataFrame
    hr_size: int
    runs: int

    def median_ms(self, config: str, stage: str = 'total') -> float:
        match = self.rows[(self.rows['config'] == config) & (self.rows['stage'] == stage)]
        return float(match['median_ms'].iloc[0])

    def ratios(self) -> Dict[str, float]:
        """full/lite at equal r and r=4/r=8 for the full model, where both exist"""
        totals = self.rows[self.rows['stage'] == 'total'].set_index('config')['median_ms']
        ratios = {}
        for name in totals.index:
            if name.startswith('full_r'):
                r = name[len('full_r'):]
                if f"lite_r{r}" in totals.index:
                    ratios[f"full_over_lite_r{r}"] = float(totals[name] / totals[f"lite_r{r}"])
        if 'full_r4' in totals.index and 'full_r8' in totals.index:
            ratios['full_r4_over_r8'] = float(totals['full_r4'] / totals['full_r8'])
        return ratios

    def to_dict(self) -> Dict:
        return {
            'hr_size': self.hr_size,
            'runs': self.runs,
            'stages': self.rows.to_dict(orient='records'),
            'ratios': self.ratios(),
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
        return path


def default_bench_configs(factors: Sequence[int] = (4, 8)) -> Dict[str, HNetConfig]:
    configs = {}
    for r in factors:
        configs[f"full_r{r}"] = HNetConfig.full(r=r)
        configs[f"lite_r{r}"] = HNetConfig.lite(r=r)
    return configs


def _time(fn, runs: int, warmup: int) -> List[float]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(runs):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1000.0)
    return samples


def bench(configs: Mapping[str, HNetConfig], hr_size: int = 512, runs: int = 20, warmup: int = 2,
          threads: int = 1, seed: int = 0) -> BenchReport:
    """Median per-stage timings of randomly initialized models at a fixed HR output size"""
    if runs < 1:
        raise ConfigError("bench needs at least one timed run")
    rows = []
    for name, config in configs.items():
        if hr_size % config.r:
            raise ConfigError(f"HR size {hr_size} not divisible by r={config.r} ({name})")
        model = HNetModel.create(config, seed=seed)
        fragment = ModelFragment.random(model, lr_size=hr_size // config.r, seed=seed)
        skip, features = encoder_forward(model, fragment.ld_lr, fragment.g_lr, fragment.history, threads)
        fused = fusion_forward(model, features, fragment.g_hr, threads)

        stage_fns = {
            'encoder': lambda: encoder_forward(model, fragment.ld_lr, fragment.g_lr, fragment.history, threads),
            'fusion': lambda: fusion_forward(model, features, fragment.g_hr, threads),
            'head': lambda: head_forward(model, skip, fused, threads),
            'total': lambda: hnet_forward(model, fragment.ld_lr, fragment.g_lr, fragment.g_hr,
                                          fragment.history, threads),
        }
        macs = model_macs(config, hr_size)
        macs['total'] = sum(macs.values())
        for stage in STAGES:
            samples = _time(stage_fns[stage], runs, warmup)
            rows.append({'config': name, 'r': config.r, 'variant': config.variant, 'stage': stage,
                         'median_ms': float(np.median(samples)), 'spread_ms': float(np.std(samples)),
                         'macs': int(macs[stage])})
        log_event(logger, "bench", config=name, total_ms=rows[-1]['median_ms'])
    return BenchReport(rows=pd.DataFrame(rows), hr_size=hr_size, runs=runs)


if __name__ == "__main__":
    report = bench(default_bench_configs((4, 8)), hr_size=64, runs=3, warmup=1)
    print(report.rows.to_string(index=False))
    print(report.ratios())
