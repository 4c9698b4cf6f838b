"""
Trainer Module
Pretraining loop: view construction, learning-rate schedule, Adam and checkpoints
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from backend.core import diffmath as dm
from backend.core.augment import (
    derive_rng,
    freq_shift,
    mixup_batch,
    sample_crop_plan,
    sample_mixing_ratio,
    sample_shift,
    video_jitter,
)
from backend.core.dsp_frontend import log_mel
from backend.core.model import ContrastiveModel, ModelParams
from backend.core.objective import LossBreakdown, total_loss
from backend.core.synthdata import TrimodalSample
from backend.utils.errors import (
    ContractViolationError,
    InvalidBatchError,
    InvalidStepError,
    PoisonedStepError,
    UnsupportedModalityError,
)
from backend.utils.file_handlers import FileHandler
from backend.utils.validators import ExperimentConfig, OptimizerConfig, ScheduleConfig, modality_string

LOSS_LOG = 'loss_log'
# key spaces below (seed, step) for the per-step generators
_BATCH_KEY, _SAMPLE_KEY, _MIX_KEY = 0, 1, 2


def lr_at_step(sched: ScheduleConfig, t: int) -> float:
    """
    Linear warmup from 0 to peak_lr, then cosine decay to 0 at total_steps

    Args:
        sched: Schedule settings
        t: Step index in [0, total_steps]

    Returns:
        float: learning rate at step t
    """
    if not 0 <= t <= sched.total_steps:
        raise InvalidStepError(f"step {t} outside [0, {sched.total_steps}]")
    if sched.total_steps == 0:
        return 0.0
    if t < sched.warmup_steps:
        return sched.peak_lr * t / sched.warmup_steps
    progress = (t - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    """Adam moments per parameter name plus the update counter"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Mapping[str, dm.Tensor], cfg: Optional[OptimizerConfig] = None) -> 'OptimState':
        cfg = cfg or OptimizerConfig()
        zeros = {name: np.zeros_like(t.data, dtype=np.float64) for name, t in params.items()}
        return cls(m=zeros, v={name: z.copy() for name, z in zeros.items()},
                   step=0, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def adam_step(params: ModelParams, grads: Mapping[str, Union[dm.Tensor, np.ndarray]],
              state: OptimState, lr: float) -> Tuple[ModelParams, OptimState]:
    """
    One bias-corrected Adam update without weight decay

    Parameters without a gradient keep their values and moments. Nothing
    is modified when a gradient or an updated parameter is not finite.

    Args:
        params: Current parameters
        grads: Gradient per parameter name
        state: Optimizer state
        lr: Learning rate for this step

    Returns:
        Tuple[ModelParams, OptimState]: new parameters and state
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise ContractViolationError(f"gradients for unknown parameters: {sorted(unknown)}")
    arrays = {name: np.asarray(g.data if isinstance(g, dm.Tensor) else g, dtype=np.float64)
              for name, g in grads.items()}
    poisoned = [name for name, g in arrays.items() if not np.all(np.isfinite(g))]
    if poisoned:
        raise PoisonedStepError(f"non-finite gradients for {poisoned}")

    t = state.step + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    m = dict(state.m)
    v = dict(state.v)
    updates = {}
    for name, g in arrays.items():
        m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        updates[name] = params[name].data - lr * m_hat / (np.sqrt(v_hat) + state.eps)

    bad = [name for name, value in updates.items() if not np.all(np.isfinite(value))]
    if bad:
        raise PoisonedStepError(f"update produced non-finite parameters for {bad}")
    new_state = OptimState(m=m, v=v, step=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return params.replace(updates), new_state


@dataclass
class PretrainingResult:
    """Final state of a pretraining run plus the files it produced"""
    params: ModelParams
    state: OptimState
    step: int
    checkpoints: List[str] = field(default_factory=list)
    log_path: Optional[str] = None
    poisoned_steps: List[int] = field(default_factory=list)


class ContrastiveTrainer:
    """Builds augmented views, computes the trimodal loss and applies Adam"""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        dm.set_default_dtype(config.trainer.precision)
        self.model = ContrastiveModel(config.model, config.dsp, config.augment.crop)
        self.modalities = list(config.modalities)

    def batch_indices(self, step: int, dataset_size: int) -> np.ndarray:
        """Regular sampling of the training data for one step"""
        rng = derive_rng(self.config.seed, step, _BATCH_KEY)
        batch_size = self.config.trainer.batch_size
        return rng.choice(dataset_size, size=batch_size, replace=dataset_size < batch_size)

    def sample_views(self, clip: TrimodalSample, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """
        Per-clip views: spectrogram of crop 1, raw waveform of crop 2 and
        the video window starting with crop 1
        """
        aug = self.config.augment
        plan = sample_crop_plan(clip.waveform.duration, rng, aug.crop)
        views = {}
        if 'S' in self.modalities:
            spec = log_mel(clip.waveform.crop(plan.crop1_start, plan.crop_len), self.config.dsp)
            views['S'] = freq_shift(spec, sample_shift(aug.shift, rng)).values
        if 'W' in self.modalities:
            views['W'] = clip.waveform.crop(plan.crop2_start, plan.crop_len).samples
        if 'V' in self.modalities:
            if clip.video is None:
                raise UnsupportedModalityError(f"clip {clip.index} has no video but the run trains on V")
            window = clip.video.window(plan.crop1_start, plan.video_frames, plan.video_fps)
            views['V'] = video_jitter(window, rng, aug.jitter, out_size=plan.video_size).frames
        return views

    def build_views(self, clips: Sequence[TrimodalSample], step: int) -> Dict[str, np.ndarray]:
        """Stacked per-modality views; per-sample generators make the result thread-count independent"""
        seed = self.config.seed
        jobs = [(clip, derive_rng(seed, step, _SAMPLE_KEY, j)) for j, clip in enumerate(clips)]
        threads = self.config.trainer.threads
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_sample = list(pool.map(lambda job: self.sample_views(*job), jobs))
        else:
            per_sample = [self.sample_views(clip, rng) for clip, rng in jobs]
        return {m: np.stack([views[m] for views in per_sample]) for m in self.modalities}

    def mix_views(self, views: Dict[str, np.ndarray], rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """Mix every sample with a partner from the same batch, one ratio per sample and modality"""
        mix = self.config.augment.mixup
        n = len(next(iter(views.values())))
        perm = rng.permutation(n)
        shared = sample_mixing_ratio(mix, rng, n) if mix.shared_alpha else None
        mixed = {}
        for modality in self.modalities:
            enabled = mix.video if modality == 'V' else mix.audio
            if not enabled:
                mixed[modality] = views[modality]
                continue
            alphas = shared if shared is not None else sample_mixing_ratio(mix, rng, n)
            mixed[modality] = mixup_batch(views[modality], perm, alphas)
        return mixed

    def compute_loss(self, views: Mapping[str, np.ndarray], params: ModelParams) -> LossBreakdown:
        """Encode, project and score the views; records on the active tape if any"""
        z = {m: self.model.embed(m, views[m], params) for m in self.modalities}
        trainer_cfg = self.config.trainer
        return total_loss(z.get('V'), z.get('S'), z.get('W'),
                          tau=trainer_cfg.temperature, mean_reduction=trainer_cfg.mean_reduction)

    def train_step(self, clips: Sequence[TrimodalSample], params: ModelParams, state: OptimState,
                   step: int, rng: Optional[np.random.Generator] = None
                   ) -> Tuple[LossBreakdown, ModelParams, OptimState]:
        """
        crop -> features -> shift/jitter -> mixup -> encode -> loss -> backward -> Adam

        Args:
            clips: Raw training clips, at least two
            params: Current parameters
            state: Optimizer state
            step: Schedule step of this update
            rng: Generator for the batch mixing; derived from (seed, step) when omitted

        Returns:
            Tuple: (loss breakdown, new params, new optimizer state)
        """
        if len(clips) < 2:
            raise InvalidBatchError(f"batch size must be >= 2, got {len(clips)}")
        rng = rng or derive_rng(self.config.seed, step, _MIX_KEY)
        views = self.mix_views(self.build_views(clips, step), rng)
        with dm.Tape():
            breakdown = self.compute_loss(views, params)
            grads = dm.backward(breakdown.total, params)
        lr = lr_at_step(self.config.schedule, step)
        new_params, new_state = adam_step(params, grads, state, lr)
        return breakdown, new_params, new_state

    def initial_state(self) -> Tuple[ModelParams, OptimState]:
        params = self.model.init_params(self.config.seed)
        return params, OptimState.create(params, self.config.optimizer)

    def save_checkpoint(self, handler: FileHandler, step: int, params: ModelParams, state: OptimState) -> str:
        return handler.save_checkpoint(
            step,
            {'params': params.arrays(), 'm': state.m, 'v': state.v},
            meta={'seed': self.config.seed, 'optimizer_step': state.step,
                  'modalities': modality_string(self.modalities)},
        )

    def load_checkpoint(self, path: Union[str, Path]) -> Tuple[int, ModelParams, OptimState]:
        """Restore (step, params, optimizer state) from a checkpoint manifest"""
        handler = FileHandler(Path(path).parent)
        manifest, groups = handler.load_checkpoint(path)
        params = ModelParams(groups['params'])
        opt = self.config.optimizer
        state = OptimState(m=groups['m'], v=groups['v'], step=int(manifest.get('optimizer_step', 0)),
                           beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
        return int(manifest['step']), params, state


def run_pretraining(config: ExperimentConfig, dataset: Sequence[TrimodalSample],
                    out_dir: Union[str, Path], resume_from: Optional[Union[str, Path]] = None,
                    stop_after: Optional[int] = None) -> PretrainingResult:
    """
    Train for config.schedule.total_steps, writing checkpoints and a loss log

    Args:
        config: Validated experiment config
        dataset: Training clips
        out_dir: Run directory
        resume_from: Checkpoint manifest to continue from
        stop_after: Stop once this step count is reached (for interrupted runs)

    Returns:
        PretrainingResult: final parameters, optimizer state and outputs
    """
    if not dataset:
        raise InvalidBatchError("pretraining needs a non-empty dataset")
    trainer = ContrastiveTrainer(config)
    handler = FileHandler(out_dir)
    total = config.schedule.total_steps
    trainer_cfg = config.trainer

    if resume_from is not None:
        start, params, state = trainer.load_checkpoint(resume_from)
        checkpoints = []
        logger.info(f"Resuming {modality_string(trainer.modalities)} run at step {start}")
    else:
        start = 0
        params, state = trainer.initial_state()
        checkpoints = [trainer.save_checkpoint(handler, 0, params, state)]
        logger.info(f"Starting {modality_string(trainer.modalities)} pretraining for {total} steps "
                    f"(batch {trainer_cfg.batch_size}, seed {config.seed})")

    result = PretrainingResult(params, state, start, checkpoints)
    log_path = None
    end = total if stop_after is None else min(total, stop_after)
    for step in range(start, end):
        clips = [dataset[i] for i in trainer.batch_indices(step, len(dataset))]
        try:
            breakdown, params, state = trainer.train_step(clips, params, state, step)
        except PoisonedStepError as e:
            logger.warning(f"Step {step} aborted: {e}")
            result.poisoned_steps.append(step)
            continue

        done = step + 1
        if step == 0 or done % trainer_cfg.log_every == 0 or done == total:
            record = {'step': step, 'lr': lr_at_step(config.schedule, step)}
            record.update(breakdown.to_dict())
            log_path = handler.append_jsonl(record, LOSS_LOG)
            logger.debug(f"step {step}: loss {record['total']:.4f} lr {record['lr']:.2e}")
        if done % trainer_cfg.checkpoint_every == 0 or done == end:
            result.checkpoints.append(trainer.save_checkpoint(handler, done, params, state))

    result.params, result.state, result.step = params, state, end
    result.log_path = log_path
    logger.info(f"Pretraining stopped at step {end}; {len(result.checkpoints)} checkpoints written")
    return result
