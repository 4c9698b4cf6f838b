"""
Main Application Entry Point
Trimodal contrastive audio learning - command line interface
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from config import config
from backend.core.dsp_frontend import Waveform, log_mel, resample_to
from backend.core.evaluate import DownstreamEvaluator, MetricsReport
from backend.core.model import ContrastiveModel
from backend.core.synthdata import TrimodalSample, gen_dataset, load_dataset, save_dataset
from backend.core.trainer import ContrastiveTrainer, run_pretraining
from backend.reports.run_report import RunReportGenerator
from backend.utils.errors import ConfigError, DataIntegrityError, TrimodalError
from backend.utils.file_handlers import FileHandler
from backend.utils.validators import (
    ClassifierConfig,
    DspConfig,
    ExperimentConfig,
    LatentSpec,
    load_experiment_config,
    modality_string,
    validate_config,
)

MODALITY_STUDY = ('SW', 'SV', 'WV', 'SWV')
MIXING_STUDY = {
    'none': {'audio': False, 'video': False},
    'audio': {'audio': True, 'video': False},
    'audio_video': {'audio': True, 'video': True},
}
RUN_CONFIG = 'config'


def setup_logging():
    """Configure loguru sinks from config.LOGGING"""
    settings = config.LOGGING
    logger.remove()
    logger.add(sys.stderr, level=settings['level'], format=settings['format'])
    if settings.get('file'):
        config.ensure_directories()
        logger.add(settings['file'], level=settings['level'], format=settings['format'],
                   rotation=settings['rotation'], retention=settings['retention'])


def override_config(cfg: ExperimentConfig, seed: Optional[int] = None, steps: Optional[int] = None,
                    threads: Optional[int] = None, modalities: Optional[Sequence[str]] = None,
                    **updates) -> ExperimentConfig:
    """
    Apply command-line overrides and re-validate

    A step count at or below the warmup length shrinks the warmup to a
    twentieth of the run.
    """
    data = cfg.model_dump()
    if seed is not None:
        data['seed'] = seed
    if steps is not None:
        data['schedule']['total_steps'] = steps
        if steps > 0 and data['schedule']['warmup_steps'] >= steps:
            data['schedule']['warmup_steps'] = steps // 20
    if threads is not None:
        data['trainer']['threads'] = threads
    if modalities:
        data['modalities'] = [m.upper() for m in modalities]
    for section, values in updates.items():
        data[section].update(values)
    return validate_config(ExperimentConfig, data)


def resolve_out_dir(out: Optional[str], default_name: str) -> Path:
    """--out, or a directory below TRIMODAL_OUTPUT_DIR"""
    return Path(out) if out else config.get_run_path(default_name)


def split_dataset(data_dir: str, load_video: bool) -> Tuple[List[TrimodalSample], List[TrimodalSample]]:
    samples, manifest = load_dataset(data_dir, load_video=load_video)
    train = [s for s, split in zip(samples, manifest['split']) if split == 'train']
    test = [s for s, split in zip(samples, manifest['split']) if split == 'test']
    if not train or not test:
        raise ConfigError(f"dataset {data_dir} needs both train and test clips")
    return train, test


def classifier_config(cfg: ExperimentConfig, protocol: str, num_classes: int,
                      hidden: Optional[int] = None) -> Tuple[ClassifierConfig, str]:
    """Classifier settings for a protocol name plus its sub-clip scheme"""
    try:
        settings = config.get_protocol(protocol)
    except KeyError as e:
        raise ConfigError(str(e)) from e
    data = cfg.classifier.model_dump()
    data.update(kind=settings['kind'], hidden=settings['hidden'], lr=settings['lr'],
                augment=settings['augment'], num_classes=num_classes)
    if hidden is not None and settings['kind'] == 'mlp':
        data['hidden'] = hidden
    return validate_config(ClassifierConfig, data), settings['subclips']


def probe_heads(cfg: ExperimentConfig, params, train: List[TrimodalSample], test: List[TrimodalSample],
                protocol: str, heads: Sequence[str], out_dir: Optional[Path] = None,
                hidden: Optional[int] = None, use_cache: bool = False) -> Dict[str, MetricsReport]:
    """Downstream evaluation of each audio head on frozen encoders"""
    num_classes = int(max(s.label for s in train + test)) + 1
    clf_cfg, subclips = classifier_config(cfg, protocol, num_classes, hidden)
    model = ContrastiveModel(cfg.model, cfg.dsp, cfg.augment.crop)
    evaluator = DownstreamEvaluator(model, params, cfg.dsp, cfg.augment,
                                    cache_dir=out_dir if use_cache else None)
    reports = {}
    for head in heads:
        rng = np.random.default_rng([cfg.seed, ord(head)])
        report, _ = evaluator.evaluate(train, np.array([s.label for s in train]),
                                       test, np.array([s.label for s in test]),
                                       head, subclips, clf_cfg, rng, use_cache=use_cache)
        report.protocol = protocol
        reports[head] = report
        if out_dir is not None:
            report.save(out_dir)
    return reports


def cmd_synth(args) -> int:
    """Generate a synthetic trimodal dataset"""
    spec = validate_config(LatentSpec, {
        'num_classes': args.num_classes,
        'audio_cue_strength': args.audio_cue,
        'video_cue_strength': args.video_cue,
        'shared_cue_strength': args.shared_cue,
        'distractor_strength': args.distractor,
        'noise_level': args.noise,
        'clip_len': args.clip_len,
    })
    out_dir = Path(args.out) if args.out else config.DATASETS_DIR / f"synth_{args.seed}"
    samples = gen_dataset(spec, args.seed, args.num_samples)
    save_dataset(samples, out_dir, args.test_fraction, include_video=not args.no_video)
    print(f"Dataset written to {out_dir}")
    return 0


def cmd_dsp(args) -> int:
    """Log-mel features of one WAV file"""
    dsp_cfg = DspConfig.preset(args.preset)
    source = Path(args.input)
    samples, sample_rate = FileHandler(source.parent).read_wav(source.name)
    waveform = resample_to(Waveform(samples, sample_rate), args.target_rate)
    spec = log_mel(waveform, dsp_cfg)
    out = Path(args.out)
    handler = FileHandler(out.parent)
    if args.format == 'csv':
        frame = pd.DataFrame(spec.values, columns=[f"mel_{i}" for i in range(spec.n_mels)])
        path = handler.save_csv_data(frame, out.name)
    else:
        path = handler.write_blob(spec.values.astype(np.float32), out.name,
                                  extra={'frame_hop': spec.frame_hop, 'preset': args.preset})
    print(f"{spec.num_frames}x{spec.n_mels} log-mel features written to {path}")
    return 0


def cmd_pretrain(args) -> int:
    """Contrastive pretraining on a dataset directory"""
    cfg = override_config(load_experiment_config(args.config), args.seed, args.steps,
                          args.threads, args.modality)
    if not args.data:
        raise ConfigError("pretrain needs a dataset directory (--data)")
    samples, _ = load_dataset(args.data, split='train', load_video='V' in cfg.modalities)
    out_dir = resolve_out_dir(args.out, f"pretrain_{modality_string(cfg.modalities)}_{cfg.seed}")
    handler = FileHandler(out_dir)
    resume = args.resume
    if resume == 'latest':
        resume = handler.latest_checkpoint()
        if resume is None:
            raise DataIntegrityError(f"no checkpoint to resume from in {out_dir}")
    handler.save_json_data(cfg.model_dump(), RUN_CONFIG)
    result = run_pretraining(cfg, samples, out_dir, resume_from=resume)
    print(f"Pretraining finished at step {result.step}; checkpoints in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    """Downstream evaluation of a checkpoint"""
    checkpoint = Path(args.checkpoint)
    if not checkpoint.is_file():
        raise DataIntegrityError(f"checkpoint manifest not found: {checkpoint}")
    config_path = args.config or checkpoint.parent / f"{RUN_CONFIG}.json"
    cfg = override_config(load_experiment_config(config_path), args.seed)
    _, params, _ = ContrastiveTrainer(cfg).load_checkpoint(checkpoint)
    if not args.data:
        raise ConfigError("eval needs a dataset directory (--data)")
    train, test = split_dataset(args.data, load_video=False)
    out_dir = Path(args.out) if args.out else checkpoint.parent
    heads = [m.upper() for m in args.modality] if args.modality else ['S', 'W']
    reports = probe_heads(cfg, params, train, test, args.protocol, heads, out_dir,
                          hidden=args.hidden, use_cache=args.cached)
    for head, report in reports.items():
        print(f"{head}: accuracy={report.accuracy:.4f} mAP={report.mAP:.4f} "
              f"AUC={report.auc:.4f} d'={report.d_prime:.4f}")
    return 0


def ablation_rows(study: str, base: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
    """(setting, config) pairs of one study"""
    if study == 'modalities':
        return [(subset, override_config(base, modalities=list(subset))) for subset in MODALITY_STUDY]
    if study == 'mixing':
        return [(name, override_config(base, augment={'mixup': {**base.augment.mixup.model_dump(), **flags}}))
                for name, flags in MIXING_STUDY.items()]
    if study == 'beta':
        rows = []
        for name, (a, b) in config.MIXING_PRESETS.items():
            mixup = {**base.augment.mixup.model_dump(), 'beta_a': a, 'beta_b': b}
            rows.append((name, override_config(base, augment={'mixup': mixup})))
        return rows
    raise ConfigError(f"Unknown study: {study}")


def cmd_ablate(args) -> int:
    """Pretrain and probe every row of a study; one CSV row per setting"""
    base = override_config(load_experiment_config(args.config), args.seed, args.steps, args.threads)
    if not args.data:
        raise ConfigError("ablate needs a dataset directory (--data)")
    train, test = split_dataset(args.data, load_video=True)
    out_dir = resolve_out_dir(args.out, f"ablate_{args.study}")
    seeds = args.seeds or [base.seed]

    records = []
    for setting, row_cfg in ablation_rows(args.study, base):
        accuracy: Dict[str, List[float]] = {'S': [], 'W': []}
        for seed in seeds:
            run_cfg = override_config(row_cfg, seed=seed)
            run_dir = out_dir / f"{setting}_seed{seed}"
            result = run_pretraining(run_cfg, train, run_dir)
            reports = probe_heads(run_cfg, result.params, train, test, args.protocol, ('S', 'W'), run_dir)
            for head, report in reports.items():
                accuracy[head].append(report.accuracy)
        records.append({
            'study': args.study,
            'setting': setting,
            'seeds': len(seeds),
            'accuracy_S': float(np.mean(accuracy['S'])),
            'accuracy_W': float(np.mean(accuracy['W'])),
        })
        logger.info(f"{args.study}/{setting}: S {records[-1]['accuracy_S']:.3f} W {records[-1]['accuracy_W']:.3f}")

    path = FileHandler(out_dir).save_csv_data(pd.DataFrame(records), f"ablation_{args.study}")
    print(f"Ablation table written to {path}")
    return 0


def cmd_report(args) -> int:
    """HTML report of a run directory"""
    run_dir = Path(args.run)
    config_path = Path(args.config) if args.config else run_dir / f"{RUN_CONFIG}.json"
    mixup_cfg = load_experiment_config(config_path).augment.mixup if config_path.is_file() else None
    path = RunReportGenerator(run_dir, mixup_cfg).generate()
    print(f"Report generated: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Trimodal contrastive audio representation learning')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, threads=True):
        p.add_argument('--config', type=str, help='Experiment config (JSON)')
        p.add_argument('--seed', type=int, default=None, help='Override the config seed')
        p.add_argument('--out', type=str, help='Output directory')
        if threads:
            p.add_argument('--threads', type=int, default=None, help='Worker threads for view construction')

    synth = sub.add_parser('synth', help='Generate a synthetic dataset')
    synth.add_argument('--out', type=str, help='Dataset directory')
    synth.add_argument('--seed', type=int, default=0)
    synth.add_argument('--num-samples', type=int, default=config.SYNTH_DEFAULTS['num_samples'])
    synth.add_argument('--num-classes', type=int, default=config.SYNTH_DEFAULTS['num_classes'])
    synth.add_argument('--audio-cue', type=float, default=1.0)
    synth.add_argument('--video-cue', type=float, default=1.0)
    synth.add_argument('--shared-cue', type=float, default=1.0)
    synth.add_argument('--distractor', type=float, default=0.0)
    synth.add_argument('--noise', type=float, default=0.3)
    synth.add_argument('--clip-len', type=float, default=4.0)
    synth.add_argument('--test-fraction', type=float, default=config.SYNTH_DEFAULTS['test_fraction'])
    synth.add_argument('--no-video', action='store_true', help='Write audio only')
    synth.set_defaults(func=cmd_synth)

    dsp = sub.add_parser('dsp', help='Log-mel features of a WAV file')
    dsp.add_argument('--input', type=str, required=True)
    dsp.add_argument('--preset', choices=sorted(config.DSP_PRESETS), default='A')
    dsp.add_argument('--format', choices=['csv', 'blob'], default='csv')
    dsp.add_argument('--out', type=str, required=True)
    dsp.add_argument('--target-rate', type=int, default=None, help='Decimate to this rate first')
    dsp.set_defaults(func=cmd_dsp)

    pretrain = sub.add_parser('pretrain', help='Contrastive pretraining')
    common(pretrain)
    pretrain.add_argument('--data', type=str, help='Dataset directory')
    pretrain.add_argument('--steps', type=int, default=None, help='Override total_steps')
    pretrain.add_argument('--modality', nargs='+', choices=['s', 'w', 'v'], help='Modalities to train on')
    pretrain.add_argument('--resume', type=str, help='Checkpoint manifest to resume from, or "latest" for the newest one in --out')
    pretrain.set_defaults(func=cmd_pretrain)

    evaluate = sub.add_parser('eval', help='Downstream evaluation of a checkpoint')
    common(evaluate, threads=False)
    evaluate.add_argument('--checkpoint', type=str, required=True)
    evaluate.add_argument('--data', type=str, help='Dataset directory')
    evaluate.add_argument('--protocol', choices=sorted(config.PROTOCOLS), default='linear')
    evaluate.add_argument('--modality', nargs='+', choices=['s', 'w', 'v'], help='Audio heads to evaluate')
    evaluate.add_argument('--hidden', type=int, default=None, help='MLP hidden size (512 or 2048)')
    evaluate.add_argument('--cached', action='store_true', help='Train the head on cached features')
    evaluate.set_defaults(func=cmd_eval)

    ablate = sub.add_parser('ablate', help='Pretrain-and-probe study')
    common(ablate)
    ablate.add_argument('--data', type=str, help='Dataset directory')
    ablate.add_argument('--study', choices=['modalities', 'mixing', 'beta'], default='modalities')
    ablate.add_argument('--steps', type=int, default=None)
    ablate.add_argument('--seeds', type=int, nargs='+', help='Average each row over these seeds')
    ablate.add_argument('--protocol', choices=sorted(config.PROTOCOLS), default='linear')
    ablate.set_defaults(func=cmd_ablate)

    report = sub.add_parser('report', help='HTML report of a run directory')
    report.add_argument('--run', type=str, required=True)
    report.add_argument('--config', type=str)
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main application entry point"""
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("\nInterrupted by user")
        return 130
    except TrimodalError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
