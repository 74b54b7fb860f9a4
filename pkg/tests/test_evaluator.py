import json

import numpy as np
import pandas as pd
import pytest

from config import DatasetSettings, FuseSRConfig, HNetConfig, TrainSettings
from errors import ConfigError
from evaluator import (
    BASELINES, METRIC_COLUMNS, AblationReport, ablation_configs, ablation_study, baseline_upsample, bench,
    default_bench_configs, evaluate,
)
from frame_io import FrameBundle
from hnet_model import HNetModel, fusion_macs
from losses import PSNR_CAP, image_metrics
from synth_dataset import generate_sequence
from tensor_ops import Tensor

from tests.conftest import tiny_full, tiny_lite


def test_ablation_variants_flip_one_switch():
    variants = ablation_configs(tiny_lite())
    assert list(variants) == ['full', 'no_hr_gbuffer', 'no_demod', 'no_hr_no_demod', 'avgpool', 'maxpool']
    assert not variants['no_hr_gbuffer'].use_hr_gbuffer and variants['no_hr_gbuffer'].demodulate
    assert not variants['no_demod'].demodulate and variants['no_demod'].use_hr_gbuffer
    neither = variants['no_hr_no_demod']
    assert not neither.use_hr_gbuffer and not neither.demodulate
    assert variants['maxpool'].alignment == 'maxpool'
    assert variants['full'].alignment == 'unshuffle'


def test_bicubic_on_constant_image_hits_the_cap(tiny_sequence):
    lr = tiny_sequence.lr[0]
    flat = FrameBundle(Tensor(np.full_like(lr.color.data, 0.4)), lr.gbuffer)
    target = Tensor(np.full((1, 3, 32, 32), 0.4, dtype=lr.color.dtype))
    for kind in BASELINES:
        psnr_db, ssim_value = image_metrics(baseline_upsample(flat, 2, kind), target)
        assert psnr_db == PSNR_CAP
        assert ssim_value == pytest.approx(1.0)


def test_evaluate_reports_each_method_per_frame(tiny_sequence, coarse_lut):
    model = HNetModel.create(tiny_lite(r=tiny_sequence.r), seed=0)
    report = evaluate({'hnet': model}, tiny_sequence, coarse_lut)
    assert list(report.rows.columns) == METRIC_COLUMNS
    assert list(report.rows['method']) == ['hnet', 'bicubic', 'bilinear']
    assert set(report.rows['frame']) == set(tiny_sequence.test_indices())
    assert set(report.timings) == {'hnet'}
    assert (report.rows['ssim'] <= 1.0).all()


def test_mean_rows_are_exact_means(tmp_path, tiny_sequence, coarse_lut):
    model = HNetModel.create(tiny_lite(r=tiny_sequence.r), seed=0)
    report = evaluate({'hnet': model}, tiny_sequence, coarse_lut, frames=[1, 2, 3])
    table = report.table()
    means = table[table['frame'] == 'mean'].set_index('method')
    per_frame = report.rows.groupby('method')['psnr_db'].mean()
    for method in ('hnet', 'bicubic', 'bilinear'):
        assert means.loc[method, 'psnr_db'] == per_frame[method]
        assert report.mean(method) == pytest.approx(per_frame[method], abs=1e-12)

    written = pd.read_csv(report.to_csv(tmp_path / "out" / "metrics.csv"))
    assert len(written) == 9 + 3
    assert list(written.columns) == METRIC_COLUMNS


def test_evaluate_is_deterministic(tiny_sequence, coarse_lut):
    model = HNetModel.create(tiny_lite(r=tiny_sequence.r), seed=0)
    first = evaluate({'hnet': model}, tiny_sequence, coarse_lut, frames=[2, 3])
    second = evaluate({'hnet': model}, tiny_sequence, coarse_lut, frames=[2, 3])
    pd.testing.assert_frame_equal(first.rows, second.rows)


def test_frames_without_history_are_skipped_for_all_methods(tiny_sequence, coarse_lut):
    models = {
        'lite': HNetModel.create(tiny_lite(r=tiny_sequence.r), seed=0),
        'full': HNetModel.create(tiny_full(r=tiny_sequence.r), seed=0),
    }
    report = evaluate(models, tiny_sequence, coarse_lut, frames=[0, 3], baselines=['bicubic'])
    assert set(report.rows['frame']) == {3}
    assert list(report.rows['method']) == ['lite', 'full', 'bicubic']


def test_evaluate_rejects_bad_requests(tiny_sequence, coarse_lut):
    model = HNetModel.create(tiny_lite(r=tiny_sequence.r), seed=0)
    with pytest.raises(ConfigError, match="r=4"):
        evaluate({'x4': HNetModel.create(tiny_lite(r=4), seed=0)}, tiny_sequence, coarse_lut)
    with pytest.raises(ConfigError, match="lanczos"):
        evaluate({'hnet': model}, tiny_sequence, coarse_lut, baselines=['lanczos'])
    with pytest.raises(ConfigError, match="predecessor"):
        evaluate({'full': HNetModel.create(tiny_full(r=tiny_sequence.r, history_frames=2), seed=0)},
                 tiny_sequence, coarse_lut, frames=[0, 1])


def test_bench_reports_stages_and_ratios(tmp_path):
    report = bench(default_bench_configs((4, 8)), hr_size=32, runs=1, warmup=0)
    assert set(report.rows['config']) == {'full_r4', 'lite_r4', 'full_r8', 'lite_r8'}
    assert set(report.rows['stage']) == {'encoder', 'fusion', 'head', 'total'}
    assert set(report.ratios()) == {'full_over_lite_r4', 'full_over_lite_r8', 'full_r4_over_r8'}
    assert report.median_ms('full_r4') > 0

    payload = json.loads(report.to_json(tmp_path / "bench.json").read_text())
    assert payload['hr_size'] == 32 and payload['runs'] == 1
    assert len(payload['stages']) == 16


def test_bench_reports_analytic_fusion_macs():
    report = bench(default_bench_configs((4, 8)), hr_size=32, runs=1, warmup=0)
    fusion = report.rows[report.rows['stage'] == 'fusion'].set_index('config')['macs']
    assert fusion["full_r4"] == fusion_macs(HNetConfig.full(r=4), 32)
    assert fusion["full_r8"] < fusion["full_r4"]
    blocks_only = [fusion_macs(HNetConfig.full(r=r), 32, include_adapter=False) for r in (4, 8)]
    assert blocks_only[0] == 4 * blocks_only[1]


def test_bench_rejects_bad_sizes():
    with pytest.raises(ConfigError, match="divisible"):
        bench({'full_r8': HNetConfig.full(r=8)}, hr_size=20, runs=1)
    with pytest.raises(ConfigError):
        bench({'full_r4': HNetConfig.full(r=4)}, hr_size=16, runs=0)


@pytest.mark.slow
def test_lite_and_large_factor_are_faster():
    report = bench(default_bench_configs((4, 8)), hr_size=256, runs=20, warmup=2)
    ratios = report.ratios()
    assert ratios['full_over_lite_r4'] >= 2.0
    assert ratios['full_r4_over_r8'] > 1.0


@pytest.mark.slow
def test_repeated_bench_is_stable():
    configs = {'lite_r4': HNetConfig.lite(r=4)}
    first = bench(configs, hr_size=128, runs=20).median_ms('lite_r4')
    second = bench(configs, hr_size=128, runs=20).median_ms('lite_r4')
    assert abs(first - second) < 0.2 * first


def synthetic_ablation(psnr_by_method, seeds=(0, 1, 2)):
    rows = [{'seed': seed, 'frame': 7, 'method': method, 'psnr_db': value + 0.1 * seed, 'ssim': 0.9}
            for seed in seeds for method, value in psnr_by_method.items()]
    return AblationReport(rows=pd.DataFrame(rows), steps=10)


def test_ablation_trends_hold_for_expected_ordering():
    report = synthetic_ablation({'full': 30.0, 'no_demod': 29.5, 'no_hr_gbuffer': 29.0, 'no_hr_no_demod': 28.0,
                                 'avgpool': 29.8, 'maxpool': 29.6, 'bicubic': 27.5, 'bilinear': 27.0})
    trends = report.trends().set_index('check')
    assert report.passed
    assert trends.loc['full - no_hr_no_demod', 'value'] == pytest.approx(2.0)
    assert trends.loc['full - bicubic', 'value'] == pytest.approx(2.5)
    assert trends.loc['full >= avgpool >= maxpool', 'value'] == pytest.approx(0.2)
    assert report.seeds == [0, 1, 2]


def test_ablation_trends_flag_each_violation():
    report = synthetic_ablation({'full': 30.0, 'no_demod': 28.5, 'no_hr_gbuffer': 29.0, 'no_hr_no_demod': 29.0,
                                 'avgpool': 29.8, 'maxpool': 29.9, 'bicubic': 28.5})
    trends = report.trends()
    failed = set(trends.loc[~trends['passed'], 'check'])
    assert failed == {'full >= no_demod >= no_hr_gbuffer >= no_hr_no_demod', 'full - no_hr_no_demod',
                      'full - bicubic', 'full >= avgpool >= maxpool'}
    assert not report.passed


def test_ablation_trends_skip_untrained_variants():
    report = synthetic_ablation({'full': 30.0, 'avgpool': 29.0, 'maxpool': 28.0})
    assert list(report.trends()['check']) == ['full >= avgpool >= maxpool']


def test_ablation_study_trains_each_variant_per_seed(tmp_path, tiny_sequence, coarse_lut, tiny_config):
    seen = []
    report = ablation_study(tiny_sequence, tiny_config, coarse_lut, seeds=(0, 1), steps=2,
                            variants=['full', 'no_demod'], callback=lambda name, seed: seen.append((name, seed)))
    assert seen == [('full', 0), ('no_demod', 0), ('full', 1), ('no_demod', 1)]
    assert report.seeds == [0, 1] and report.steps == 2
    assert list(report.summary()['method']) == ['full', 'no_demod', 'bicubic', 'bilinear']
    assert len(report.rows) == 2 * 4 * len(tiny_sequence.test_indices())
    assert list(report.trends()['check']) == ['full - bicubic']
    report.to_csv(tmp_path / "ablation.csv")
    assert list(pd.read_csv(tmp_path / "ablation.csv").columns) == ['seed'] + METRIC_COLUMNS


def test_ablation_study_is_reproducible(tiny_sequence, coarse_lut, tiny_config):
    runs = [ablation_study(tiny_sequence, tiny_config, coarse_lut, seeds=(3,), steps=2, variants=['maxpool'])
            for _ in range(2)]
    pd.testing.assert_frame_equal(runs[0].rows, runs[1].rows)


def test_ablation_study_rejects_unknown_variant_and_empty_seeds(tiny_sequence, coarse_lut, tiny_config):
    with pytest.raises(ConfigError, match="unknown ablation"):
        ablation_study(tiny_sequence, tiny_config, coarse_lut, seeds=(0,), steps=1, variants=['lanczos'])
    with pytest.raises(ConfigError, match="seed"):
        ablation_study(tiny_sequence, tiny_config, coarse_lut, seeds=(), steps=1)


@pytest.mark.slow
def test_trained_ablations_reproduce_quality_trends(coarse_lut):
    sequence = generate_sequence(DatasetSettings(hr=128, r=4, frames=8, scene_seed=0, path_seed=0), threads=1)
    config = FuseSRConfig.default()
    config.model = HNetConfig.full(r=4, encoder_channels=[32, 32, 24], fusion_channels=32, fusion_blocks=2)
    config.train = TrainSettings(steps=400, batch_size=4, crop=16, log_every=0)
    report = ablation_study(sequence, config, coarse_lut, seeds=(0, 1, 2))
    trends = report.trends()
    assert len(trends) == 4
    assert report.passed, trends.to_string()
