"""
Evaluation Module
Frozen-feature downstream protocols and retrieval metrics
"""

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import ndtri
from scipy.stats import rankdata

from backend.core import diffmath as dm
from backend.core.augment import freq_shift, mixup_batch, sample_mixing_ratio, sample_shift
from backend.core.dsp_frontend import Spectrogram, log_mel
from backend.core.model import ContrastiveModel, ModelParams
from backend.core.synthdata import TrimodalSample
from backend.core.trainer import OptimState, adam_step, lr_at_step
from backend.utils.errors import (
    ContractViolationError,
    DataIntegrityError,
    InvalidLengthError,
    InvalidShapeError,
    UndefinedMetricError,
    UnsupportedModalityError,
)
from backend.utils.file_handlers import FileHandler
from backend.utils.validators import AugmentConfig, ClassifierConfig, DspConfig, ScheduleConfig

TENSEC_SPLITS = 10
ENCODE_CHUNK = 64
SUBCLIP_PROTOCOLS = ('tensec_by_3s', 'nonoverlap_1s')
AUDIO_HEADS = ('S', 'W')
FEATURE_CACHE_DIR = 'features'


def subclip_split(clip_len: float, protocol: str) -> List[Tuple[float, float]]:
    """
    Sub-clip windows (start, end) in seconds

    tensec_by_3s splits the clip into 10 equal abutting windows;
    nonoverlap_1s takes floor(clip_len) one-second windows and drops the tail.
    """
    if protocol == 'tensec_by_3s':
        if clip_len <= 0:
            raise InvalidLengthError(f"clip length must be positive, got {clip_len}")
        width = clip_len / TENSEC_SPLITS
        return [(i * width, (i + 1) * width) for i in range(TENSEC_SPLITS)]
    if protocol == 'nonoverlap_1s':
        count = int(math.floor(clip_len + 1e-9))
        if count < 1:
            raise InvalidLengthError(f"clip of {clip_len} s is shorter than one 1 s window")
        return [(float(i), float(i + 1)) for i in range(count)]
    raise ValueError(f"Unknown sub-clip protocol: {protocol}")


def subclip_inputs(clip: TrimodalSample, modality: str, protocol: str, dsp_cfg: DspConfig) -> np.ndarray:
    """Encoder inputs for every sub-clip, stacked: [n, frames, n_mels] or [n, L]"""
    if modality not in AUDIO_HEADS:
        raise UnsupportedModalityError("video network is only used during training")
    windows = subclip_split(clip.waveform.duration, protocol)
    crops = [clip.waveform.crop(start, end - start) for start, end in windows]
    if modality == 'S':
        return np.stack([log_mel(crop, dsp_cfg).values for crop in crops])
    return np.stack([crop.samples for crop in crops])


def encode_inputs(model: ContrastiveModel, params: ModelParams, modality: str,
                  inputs: np.ndarray) -> np.ndarray:
    """Encoder outputs h without recording gradients"""
    if modality not in AUDIO_HEADS:
        raise UnsupportedModalityError("video network is only used during training")
    chunks = [model.encode(modality, inputs[i:i + ENCODE_CHUNK], params).numpy()
              for i in range(0, len(inputs), ENCODE_CHUNK)]
    return np.concatenate(chunks, axis=0)


def extract_frozen_features(clip: TrimodalSample, model: ContrastiveModel, params: ModelParams,
                            modality: str, protocol: str = 'nonoverlap_1s',
                            dsp_cfg: Optional[DspConfig] = None) -> np.ndarray:
    """
    Pre-projector encoder outputs, one row per sub-clip

    Args:
        clip: Clip to describe
        model: Model holding the encoder definitions
        params: Trained parameters; left untouched
        modality: 'S' or 'W'
        protocol: Sub-clip protocol
        dsp_cfg: Front-end settings for the spectrogram head

    Returns:
        np.ndarray: [num_subclips, hidden_dim]
    """
    if modality not in AUDIO_HEADS:
        raise UnsupportedModalityError("video network is only used during training")
    inputs = subclip_inputs(clip, modality, protocol, dsp_cfg or DspConfig())
    return encode_inputs(model, params, modality, inputs)


def average_logits(logits: np.ndarray) -> np.ndarray:
    """Mean over sub-clips (axis 0)"""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise InvalidShapeError(f"expected [subclips, classes] logits, got {logits.shape}")
    return logits.mean(axis=0)


def to_targets(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Class ids [n] become one-hot rows; multi-hot or soft [n, C] pass through"""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        targets = np.zeros((len(labels), num_classes))
        targets[np.arange(len(labels)), labels.astype(int)] = 1.0
        return targets
    if labels.ndim != 2 or labels.shape[1] != num_classes:
        raise InvalidShapeError(f"labels must be [n] or [n, {num_classes}], got {labels.shape}")
    return labels.astype(np.float64)


def balanced_sample_indices(targets: np.ndarray, num_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Pick a class uniformly, then one of its positive examples uniformly"""
    positives = [np.flatnonzero(targets[:, c] > 0) for c in range(targets.shape[1])]
    populated = [pos for pos in positives if pos.size]
    if not populated:
        raise UndefinedMetricError("no class has a positive example")
    classes = rng.integers(len(populated), size=num_draws)
    return np.array([populated[c][rng.integers(populated[c].size)] for c in classes])


class ShallowClassifier:
    """Linear or one-hidden-layer MLP head trained on frozen features"""

    def __init__(self, cfg: ClassifierConfig, input_dim: int, seed: int = 0):
        self.config = cfg
        self.input_dim = input_dim
        self.params = self._init_params(np.random.default_rng(seed))
        self.bn_states: Dict[str, dm.BatchNormState] = {}
        if cfg.kind == 'mlp':
            self.bn_states = {'bn0': dm.BatchNormState.create(input_dim),
                              'bn1': dm.BatchNormState.create(cfg.hidden)}
        self.feature_mean = np.zeros(input_dim)
        self.feature_scale = np.ones(input_dim)

    def _init_params(self, rng: np.random.Generator) -> ModelParams:
        c = self.config.num_classes
        d = self.input_dim

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        if self.config.kind == 'linear':
            return ModelParams({'fc.weight': uniform(d, (d, c)), 'fc.bias': np.zeros(c)})
        h = self.config.hidden
        return ModelParams({
            'bn0.gamma': np.ones(d), 'bn0.beta': np.zeros(d),
            'fc1.weight': uniform(d, (d, h)), 'fc1.bias': np.zeros(h),
            'bn1.gamma': np.ones(h), 'bn1.beta': np.zeros(h),
            'fc2.weight': uniform(h, (h, c)), 'fc2.bias': np.zeros(c),
        })

    def fit_standardization(self, features: np.ndarray) -> None:
        # the linear head sees z-scored features; the MLP normalizes with bn0
        if self.config.kind == 'linear':
            self.feature_mean = features.mean(axis=0)
            self.feature_scale = features.std(axis=0) + 1e-8

    def forward(self, features: np.ndarray, params: Mapping[str, dm.Tensor], train: bool) -> dm.Tensor:
        """Logits for a feature batch; batch norm uses batch statistics when training"""
        x = dm.Tensor((features - self.feature_mean) / self.feature_scale)
        if self.config.kind == 'linear':
            return x @ params['fc.weight'] + params['fc.bias']

        def norm(t, key):
            if train:
                return dm.batch_norm_train(t, params[f'{key}.gamma'], params[f'{key}.beta'],
                                           state=self.bn_states[key])
            return dm.batch_norm_eval(t, params[f'{key}.gamma'], params[f'{key}.beta'], self.bn_states[key])

        hidden = norm(norm(x, 'bn0') @ params['fc1.weight'] + params['fc1.bias'], 'bn1')
        return dm.relu(hidden) @ params['fc2.weight'] + params['fc2.bias']

    def loss(self, logits: dm.Tensor, targets: np.ndarray) -> dm.Tensor:
        """Softmax cross-entropy, or binary cross-entropy per class for multi-label data"""
        n = logits.shape[0]
        if self.config.multi_label:
            # softplus(x) - y * x == -[y log s(x) + (1 - y) log(1 - s(x))]
            return (dm.softplus(logits) - logits * targets).sum() * (1.0 / n)
        log_norm = dm.logsumexp(logits, axis=1, keepdims=True)
        return ((log_norm - logits) * targets).sum() * (1.0 / n)

    def predict_logits(self, features: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(features, dtype=np.float64), self.params, train=False).numpy()


def train_downstream(features: np.ndarray, labels: np.ndarray, cfg: ClassifierConfig,
                     rng: np.random.Generator,
                     epoch_data: Optional[Callable[[np.random.Generator], Tuple[np.ndarray, np.ndarray]]] = None
                     ) -> ShallowClassifier:
    """
    Train a shallow classifier with Adam and an optional cosine schedule

    Args:
        features: [n, D] frozen features
        labels: [n] class ids, or [n, C] multi-hot / soft targets
        cfg: Classifier settings
        rng: Generator for initialization and batching
        epoch_data: Produces freshly augmented (features, targets) each epoch

    Returns:
        ShallowClassifier: trained head
    """
    features = np.asarray(features, dtype=np.float64)
    targets = to_targets(labels, cfg.num_classes)
    if features.ndim != 2 or len(features) != len(targets):
        raise InvalidShapeError(f"{len(features)} feature rows for {len(targets)} labels")
    if len(features) < 2:
        raise InvalidShapeError("downstream training needs at least two examples")

    classifier = ShallowClassifier(cfg, features.shape[1], seed=int(rng.integers(2 ** 31)))
    classifier.fit_standardization(features)
    n = len(features)
    batch_size = min(cfg.batch_size, n)
    per_epoch = n // batch_size
    total_iters = cfg.epochs * per_epoch
    schedule = ScheduleConfig(warmup_steps=0, total_steps=total_iters, peak_lr=cfg.lr)
    state = OptimState.create(classifier.params)
    params = classifier.params

    iteration = 0
    for epoch in range(cfg.epochs):
        epoch_x, epoch_y = (features, targets) if epoch_data is None else epoch_data(rng)
        if cfg.balanced_sampling:
            order = balanced_sample_indices(epoch_y, n, rng)
        else:
            order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            with dm.Tape():
                loss = classifier.loss(classifier.forward(epoch_x[idx], params, train=True), epoch_y[idx])
                grads = dm.backward(loss, params)
            lr = lr_at_step(schedule, iteration) if cfg.cosine_decay else cfg.lr
            params, state = adam_step(params, grads, state, lr)
            iteration += 1
        logger.debug(f"classifier epoch {epoch}: last batch loss {loss.item():.4f}")

    classifier.params = params
    return classifier


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Un-interpolated AP: mean precision at the rank of every positive

    Ranks follow descending score; ties keep input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedMetricError("average precision is undefined without positives")
    order = np.argsort(-scores, kind='stable')
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    return math.fsum((hits[ranked] / ranks[ranked]).tolist()) / positives


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative, ties count 1/2"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def d_prime(auc_value: float) -> float:
    """sqrt(2) times the standard normal quantile of the AUC"""
    if not 0.0 < auc_value < 1.0:
        raise UndefinedMetricError(f"d-prime is infinite for AUC {auc_value}")
    return float(math.sqrt(2.0) * ndtri(auc_value))


@dataclass
class MetricsReport:
    """Clip-level downstream metrics for one head and protocol"""
    mAP: float
    per_class_ap: Dict[int, float]
    auc: float
    d_prime: float
    accuracy: float
    num_eval_clips: int
    per_class_auc: Dict[int, float] = field(default_factory=dict)
    head: str = 'S'
    protocol: str = 'linear'
    augmentation_mode: str = 'none'

    def to_dict(self) -> Dict:
        record = asdict(self)
        record['per_class_ap'] = {str(k): v for k, v in self.per_class_ap.items()}
        record['per_class_auc'] = {str(k): v for k, v in self.per_class_auc.items()}
        return record

    def per_class_frame(self) -> pd.DataFrame:
        classes = sorted(set(self.per_class_ap) | set(self.per_class_auc))
        return pd.DataFrame({
            'head': self.head,
            'class': classes,
            'ap': [self.per_class_ap.get(c, np.nan) for c in classes],
            'auc': [self.per_class_auc.get(c, np.nan) for c in classes],
        })

    def save(self, out_dir: Union[str, Path]) -> Tuple[str, str]:
        """Write metrics_<head>.json and append per-class rows to metrics.csv"""
        handler = FileHandler(out_dir)
        json_path = handler.save_json_data(self.to_dict(), f"metrics_{self.head}")
        csv_file = handler.base_directory / 'metrics.csv'
        frame = self.per_class_frame()
        if csv_file.exists():
            previous = pd.read_csv(csv_file)
            frame = pd.concat([previous[previous['head'] != self.head], frame], ignore_index=True)
        csv_path = handler.save_csv_data(frame, 'metrics')
        return json_path, csv_path


def score_metrics(clip_scores: np.ndarray, labels: np.ndarray, multi_label: bool = False,
                  head: str = 'S', protocol: str = 'linear', augmentation_mode: str = 'none') -> MetricsReport:
    """
    mAP, mean AUC, d-prime and accuracy from clip-level scores

    Classes without positives (or without negatives, for AUC) are skipped
    with a warning. Accuracy counts the top-scoring class being a positive.
    """
    clip_scores = np.asarray(clip_scores, dtype=np.float64)
    num_classes = clip_scores.shape[1]
    targets = to_targets(labels, num_classes) > 0

    per_class_ap, per_class_auc = {}, {}
    for c in range(num_classes):
        try:
            per_class_ap[c] = average_precision(clip_scores[:, c], targets[:, c])
        except UndefinedMetricError:
            logger.warning(f"class {c} has no positives in the evaluation set; skipped in mAP")
            continue
        try:
            per_class_auc[c] = auc(clip_scores[:, c], targets[:, c])
        except UndefinedMetricError:
            logger.warning(f"class {c} has no negatives; skipped in AUC")
    if not per_class_ap:
        raise UndefinedMetricError("no class has positives in the evaluation set")

    mean_auc = float(np.mean(list(per_class_auc.values()))) if per_class_auc else float('nan')
    try:
        dp = d_prime(mean_auc)
    except UndefinedMetricError:
        logger.warning(f"d-prime undefined for AUC {mean_auc}")
        dp = float('nan')
    top = clip_scores.argmax(axis=1)
    accuracy = float(np.mean(targets[np.arange(len(top)), top]))
    return MetricsReport(
        mAP=float(np.mean(list(per_class_ap.values()))),
        per_class_ap=per_class_ap,
        auc=mean_auc,
        d_prime=dp,
        accuracy=accuracy,
        num_eval_clips=len(clip_scores),
        per_class_auc=per_class_auc,
        head=head,
        protocol=protocol,
        augmentation_mode=augmentation_mode,
    )


class DownstreamEvaluator:
    """Runs one downstream protocol on top of a frozen pretrained model"""

    def __init__(self, model: ContrastiveModel, params: ModelParams, dsp_cfg: DspConfig,
                 augment_cfg: Optional[AugmentConfig] = None, cache_dir: Optional[Union[str, Path]] = None):
        self.model = model
        self.params = params
        self.dsp_cfg = dsp_cfg
        self.augment_cfg = augment_cfg or AugmentConfig()
        self.cache = FileHandler(cache_dir, subdirectories=(FEATURE_CACHE_DIR,)) if cache_dir else None

    def cached_features(self, inputs: np.ndarray, modality: str, protocol: str) -> np.ndarray:
        """
        Training features from the float32 cache, encoding and storing them on a miss

        A cached blob is reused only when it was written for the same
        parameters, head, protocol and row count.
        """
        if self.cache is None:
            return encode_inputs(self.model, self.params, modality, inputs)
        name = f"features_{modality}_{protocol}"
        key = {'params_checksum': self.params.checksum(), 'modality': modality, 'protocol': protocol}
        try:
            features, header = self.cache.read_blob(name, FEATURE_CACHE_DIR)
            if all(header.get(k) == v for k, v in key.items()) and len(features) == len(inputs):
                logger.info(f"Using cached {modality} features from {self.cache.base_directory}")
                return features.astype(np.float64)
            logger.info(f"Cached {modality} features are stale; re-encoding")
        except DataIntegrityError:
            pass
        features = encode_inputs(self.model, self.params, modality, inputs)
        self.cache.write_blob(features.astype(np.float32), name, FEATURE_CACHE_DIR, extra=key)
        return features.astype(np.float32).astype(np.float64)

    def _clip_inputs(self, clips: Sequence[TrimodalSample], modality: str, protocol: str):
        per_clip = [subclip_inputs(clip, modality, protocol, self.dsp_cfg) for clip in clips]
        owners = np.concatenate([np.full(len(x), i) for i, x in enumerate(per_clip)])
        return np.concatenate(per_clip, axis=0), owners

    def _augmented_epochs(self, inputs: np.ndarray, targets: np.ndarray, modality: str):
        """Epoch callback: frequency shift and mixing on the inputs, then re-encoding"""
        mix = self.augment_cfg.mixup

        def epoch_data(rng: np.random.Generator):
            batch = inputs
            if modality == 'S':
                batch = np.stack([
                    freq_shift(Spectrogram(x, self.dsp_cfg.hop_ms / 1000.0), sample_shift(self.augment_cfg.shift, rng)).values
                    for x in inputs
                ])
            perm = rng.permutation(len(batch))
            alphas = sample_mixing_ratio(mix, rng, len(batch))
            mixed = mixup_batch(batch, perm, alphas)
            mixed_targets = mixup_batch(targets, perm, alphas)
            return encode_inputs(self.model, self.params, modality, mixed), mixed_targets

        return epoch_data

    def evaluate(self, train_clips: Sequence[TrimodalSample], train_labels: np.ndarray,
                 test_clips: Sequence[TrimodalSample], test_labels: np.ndarray,
                 modality: str, protocol: str, cfg: ClassifierConfig,
                 rng: np.random.Generator, use_cache: bool = False) -> Tuple[MetricsReport, ShallowClassifier]:
        """
        Train a head on sub-clip features of train_clips and score test_clips

        With cfg.augment the inputs are shifted and mixed every epoch and
        re-encoded; use_cache trains on the features computed once instead.

        Args:
            train_clips, train_labels: Downstream training data
            test_clips, test_labels: Evaluation data
            modality: Audio head, 'S' or 'W'
            protocol: Sub-clip protocol name
            cfg: Classifier settings
            rng: Generator for the classifier
            use_cache: Skip on-the-fly augmentation

        Returns:
            Tuple[MetricsReport, ShallowClassifier]
        """
        if modality not in AUDIO_HEADS:
            raise UnsupportedModalityError("video network is only used during training")
        checksum = self.params.checksum()

        inputs, owners = self._clip_inputs(train_clips, modality, protocol)
        targets = to_targets(np.asarray(train_labels), cfg.num_classes)[owners]
        if use_cache:
            features = self.cached_features(inputs, modality, protocol)
        else:
            features = encode_inputs(self.model, self.params, modality, inputs)
        epoch_data = None
        mode = 'none'
        if cfg.augment and use_cache:
            mode = 'cached'
        elif cfg.augment:
            epoch_data = self._augmented_epochs(inputs, targets, modality)
            mode = 'on_the_fly'
        logger.info(f"Training {cfg.kind} head on {len(features)} {modality} sub-clips "
                    f"({protocol}, augmentation {mode})")
        classifier = train_downstream(features, targets, cfg, rng, epoch_data)

        clip_scores = []
        for clip in test_clips:
            feats = extract_frozen_features(clip, self.model, self.params, modality, protocol, self.dsp_cfg)
            clip_scores.append(average_logits(classifier.predict_logits(feats)))
        report = score_metrics(np.stack(clip_scores), np.asarray(test_labels), cfg.multi_label,
                               head=modality, protocol=protocol, augmentation_mode=mode)

        if self.params.checksum() != checksum:
            raise ContractViolationError("upstream parameters changed during downstream evaluation")
        logger.info(f"{modality} head: accuracy {report.accuracy:.3f}, mAP {report.mAP:.3f}, AUC {report.auc:.3f}")
        return report, classifier
