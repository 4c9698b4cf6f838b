"""
Tests for downstream protocols and retrieval metrics
"""

import itertools
import json
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score

from backend.core.dsp_frontend import Waveform
from backend.core.evaluate import (
    DownstreamEvaluator,
    MetricsReport,
    average_logits,
    average_precision,
    auc,
    balanced_sample_indices,
    d_prime,
    extract_frozen_features,
    score_metrics,
    subclip_split,
    to_targets,
    train_downstream,
)
from backend.core.model import ContrastiveModel
from backend.core.synthdata import TrimodalSample
from backend.utils.errors import InvalidLengthError, InvalidShapeError, UndefinedMetricError, UnsupportedModalityError
from backend.utils.validators import ClassifierConfig


def _brute_ap(scores, labels):
    """Precision at the stable rank of every positive, exact rational arithmetic"""
    n = len(scores)
    total = Fraction(0)
    positives = sum(labels)
    for k in range(n):
        if not labels[k]:
            continue
        ahead = [j for j in range(n) if scores[j] > scores[k] or (scores[j] == scores[k] and j <= k)]
        total += Fraction(sum(labels[j] for j in ahead), len(ahead))
    return total / positives


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    credit = sum(Fraction(1) if p > q else Fraction(1, 2) if p == q else Fraction(0) for p in pos for q in neg)
    return credit / (len(pos) * len(neg))


def _clip(samples: np.ndarray, index: int = 0, label: int = 0) -> TrimodalSample:
    return TrimodalSample(Waveform(samples, 16000), None, label, index)


class TestSubclips:

    def test_tensec_split(self):
        windows = subclip_split(30.0, 'tensec_by_3s')
        assert len(windows) == 10
        assert windows[0] == (0.0, 3.0)
        assert all(b[0] == pytest.approx(a[1]) for a, b in zip(windows, windows[1:]))
        assert windows[-1][1] == pytest.approx(30.0)

    def test_one_second_split(self):
        assert subclip_split(2.5, 'nonoverlap_1s') == [(0.0, 1.0), (1.0, 2.0)]
        assert subclip_split(1.0, 'nonoverlap_1s') == [(0.0, 1.0)]
        with pytest.raises(InvalidLengthError):
            subclip_split(0.5, 'nonoverlap_1s')
        with pytest.raises(ValueError):
            subclip_split(3.0, 'overlap_2s')

    def test_average_logits(self, rng):
        np.testing.assert_array_equal(average_logits([[0.3, -1.0]]), [0.3, -1.0])
        np.testing.assert_array_equal(average_logits([[0.0, 2.0], [2.0, 0.0]]), [1.0, 1.0])
        logits = rng.standard_normal((5, 3))
        np.testing.assert_allclose(average_logits(logits[::-1]), average_logits(logits), atol=1e-15)
        with pytest.raises(InvalidShapeError):
            average_logits(np.zeros((0, 3)))


class TestFrozenFeatures:

    @pytest.fixture
    def model(self, tiny_config):
        return ContrastiveModel(tiny_config.model, tiny_config.dsp, tiny_config.augment.crop)

    def test_feature_counts_per_protocol(self, model, tiny_config, rng):
        params = model.init_params(0)
        three_seconds = _clip(rng.uniform(-0.5, 0.5, size=48000))
        assert extract_frozen_features(three_seconds, model, params, 'W', 'nonoverlap_1s').shape == (3, 8)
        thirty_seconds = _clip(rng.uniform(-0.5, 0.5, size=30 * 16000))
        features = extract_frozen_features(thirty_seconds, model, params, 'S', 'tensec_by_3s', tiny_config.dsp)
        assert features.shape == (10, 8)

    def test_features_are_deterministic_and_weights_untouched(self, model, tiny_config, tiny_dataset):
        params = model.init_params(0)
        before = params.checksum()
        first = extract_frozen_features(tiny_dataset[0], model, params, 'S', 'nonoverlap_1s', tiny_config.dsp)
        second = extract_frozen_features(tiny_dataset[0], model, params, 'S', 'nonoverlap_1s', tiny_config.dsp)
        np.testing.assert_array_equal(first, second)
        assert params.checksum() == before

    def test_video_head_is_rejected(self, model, tiny_dataset):
        with pytest.raises(UnsupportedModalityError, match="video network is only used during training"):
            extract_frozen_features(tiny_dataset[0], model, model.init_params(0), 'V')


class TestClassifier:

    @staticmethod
    def _separable(rng, n=200):
        labels = np.arange(n) % 2
        features = rng.standard_normal((n, 5)) * 0.3
        features[:, 0] += np.where(labels == 1, 2.0, -2.0)
        return features, labels

    @pytest.mark.parametrize('kind,hidden', [('linear', 0), ('mlp', 16)])
    def test_separable_toy_problem(self, rng, kind, hidden):
        features, labels = self._separable(rng)
        cfg = ClassifierConfig(kind=kind, hidden=hidden, num_classes=2, lr=1e-2, epochs=20, batch_size=20)
        classifier = train_downstream(features, labels, cfg, rng)
        predictions = classifier.predict_logits(features).argmax(axis=1)
        assert np.mean(predictions == labels) >= 0.99

    def test_multi_label_head_trains(self, rng):
        features = rng.standard_normal((60, 4))
        targets = np.stack([features[:, 0] > 0, features[:, 1] > 0, features[:, 0] + features[:, 1] > 0], axis=1)
        cfg = ClassifierConfig(kind='linear', hidden=0, num_classes=3, multi_label=True, lr=1e-2,
                               epochs=30, batch_size=10, balanced_sampling=True)
        classifier = train_downstream(features, targets.astype(float), cfg, rng)
        report = score_metrics(classifier.predict_logits(features), targets.astype(float), multi_label=True)
        assert report.mAP > 0.8
        assert set(report.per_class_ap) == {0, 1, 2}

    def test_feature_label_mismatch(self, rng):
        with pytest.raises(InvalidShapeError):
            train_downstream(rng.standard_normal((10, 3)), np.zeros(9, dtype=int), ClassifierConfig(num_classes=2), rng)

    def test_balanced_sampler_evens_out_classes(self, rng):
        labels = np.array([0] * 80 + [1] * 10 + [2] * 10)
        targets = to_targets(labels, 3)
        draws = balanced_sample_indices(targets, 30000, rng)
        counts = np.bincount(labels[draws], minlength=3)
        assert np.all(np.abs(counts - 10000) <= 1000)

    def test_balanced_sampler_needs_positives(self, rng):
        with pytest.raises(UndefinedMetricError):
            balanced_sample_indices(np.zeros((5, 2)), 10, rng)


class TestMetrics:

    def test_average_precision_examples(self):
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5.0 / 6.0, abs=1e-15)
        assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
        with pytest.raises(UndefinedMetricError):
            average_precision([0.2, 0.1], [0, 0])

    def test_auc_examples(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0
        assert auc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])

    def test_exhaustive_small_inputs_with_ties(self):
        for n in range(1, 6):
            for labels in itertools.product((0, 1), repeat=n):
                for scores in itertools.product((0.0, 1.0, 2.0), repeat=n):
                    if sum(labels):
                        assert average_precision(scores, labels) == pytest.approx(float(_brute_ap(scores, labels)), abs=1e-15)
                    if 0 < sum(labels) < n:
                        assert auc(scores, labels) == float(_brute_auc(scores, labels))

    def test_random_inputs_up_to_twelve(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n = int(rng.integers(2, 13))
            labels = rng.integers(0, 2, size=n)
            scores = rng.integers(0, 5, size=n).astype(float) / 4.0
            if labels.sum() == 0:
                labels[0] = 1
            assert average_precision(scores, labels) == pytest.approx(
                float(_brute_ap(scores.tolist(), labels.tolist())), abs=1e-15)
            if labels.sum() < n:
                assert auc(scores, labels) == float(_brute_auc(scores.tolist(), labels.tolist()))

    def test_agreement_with_sklearn_without_ties(self, rng):
        for _ in range(20):
            scores = rng.standard_normal(50)
            labels = rng.integers(0, 2, size=50)
            labels[:2] = [0, 1]
            assert average_precision(scores, labels) == pytest.approx(average_precision_score(labels, scores), abs=1e-12)
            assert auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)

    def test_metrics_ignore_increasing_transforms(self, rng):
        scores = rng.standard_normal(40)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        assert average_precision(np.exp(scores), labels) == average_precision(scores, labels)
        assert auc(3.0 * scores + 1.0, labels) == auc(scores, labels)

    def test_d_prime_values(self):
        assert d_prime(0.5) == 0.0
        assert d_prime(0.958) == pytest.approx(2.44, abs=0.01)
        assert d_prime(0.973) == pytest.approx(2.73, abs=0.01)
        for a in (0.1, 0.37, 0.8, 0.999):
            assert d_prime(a) == pytest.approx(-d_prime(1.0 - a), abs=1e-12)
        values = [d_prime(a) for a in np.linspace(0.01, 0.99, 50)]
        assert np.all(np.diff(values) > 0)
        for bad in (0.0, 1.0):
            with pytest.raises(UndefinedMetricError):
                d_prime(bad)

    def test_score_metrics_skips_classes_without_positives(self):
        scores = np.array([[2.0, 0.1, 0.0], [0.2, 1.5, 0.0], [1.0, 0.3, 0.0], [0.1, 0.9, 0.0]])
        report = score_metrics(scores, np.array([0, 1, 0, 1]))
        assert set(report.per_class_ap) == {0, 1}
        assert report.mAP == 1.0 and report.accuracy == 1.0
        assert report.auc == 1.0
        assert np.isnan(report.d_prime)
        assert report.num_eval_clips == 4

    def test_report_files(self, tmp_path):
        report = MetricsReport(mAP=0.5, per_class_ap={0: 0.4, 1: 0.6}, auc=0.7, d_prime=d_prime(0.7),
                               accuracy=0.55, num_eval_clips=10, per_class_auc={0: 0.65, 1: 0.75}, head='S')
        report.save(tmp_path)
        MetricsReport(**{**report.to_dict(), 'per_class_ap': {0: 0.1}, 'per_class_auc': {}, 'head': 'W'}).save(tmp_path)
        report.save(tmp_path)
        saved = json.loads((tmp_path / 'metrics_S.json').read_text())
        assert {'mAP', 'auc', 'd_prime', 'accuracy', 'per_class_ap'} <= set(saved)
        frame = pd.read_csv(tmp_path / 'metrics.csv')
        assert sorted(frame['head'].tolist()) == ['S', 'S', 'W']


class TestDownstreamEvaluator:

    @pytest.fixture
    def setup(self, tiny_config, tiny_dataset):
        model = ContrastiveModel(tiny_config.model, tiny_config.dsp, tiny_config.augment.crop)
        params = model.init_params(1)
        labels = np.array([clip.label for clip in tiny_dataset])
        return model, params, labels

    def test_linear_protocol_leaves_upstream_frozen(self, setup, tiny_config, tiny_dataset, rng):
        model, params, labels = setup
        before = params.checksum()
        evaluator = DownstreamEvaluator(model, params, tiny_config.dsp, tiny_config.augment)
        cfg = ClassifierConfig(kind='linear', hidden=0, num_classes=2, lr=1e-2, epochs=3, batch_size=4)
        report, _ = evaluator.evaluate(tiny_dataset[:6], labels[:6], tiny_dataset[6:], labels[6:],
                                       'W', 'nonoverlap_1s', cfg, rng)
        assert params.checksum() == before
        assert report.augmentation_mode == 'none'
        assert report.num_eval_clips == 2
        assert 0.0 <= report.accuracy <= 1.0

    def test_augmented_mlp_protocol(self, setup, tiny_config, tiny_dataset, rng):
        model, params, labels = setup
        evaluator = DownstreamEvaluator(model, params, tiny_config.dsp, tiny_config.augment)
        cfg = ClassifierConfig(kind='mlp', hidden=8, num_classes=2, epochs=2, batch_size=8, augment=True)
        report, classifier = evaluator.evaluate(tiny_dataset[:6], labels[:6], tiny_dataset[6:], labels[6:],
                                                'S', 'tensec_by_3s', cfg, rng)
        assert report.augmentation_mode == 'on_the_fly'
        assert classifier.config.kind == 'mlp'
        assert params.checksum() == model.init_params(1).checksum()

    def test_cached_features_are_written_and_reused(self, setup, tiny_config, tiny_dataset, tmp_path):
        model, params, labels = setup
        evaluator = DownstreamEvaluator(model, params, tiny_config.dsp, tiny_config.augment, cache_dir=tmp_path)
        cfg = ClassifierConfig(kind='mlp', hidden=8, num_classes=2, epochs=2, batch_size=4, augment=True)
        args = (tiny_dataset[:6], labels[:6], tiny_dataset[6:], labels[6:], 'W', 'nonoverlap_1s', cfg)
        first, _ = evaluator.evaluate(*args, np.random.default_rng(0), use_cache=True)
        blob = tmp_path / 'features' / 'features_W_nonoverlap_1s.blob'
        assert blob.is_file()
        assert first.augmentation_mode == 'cached'

        stamp = blob.stat().st_mtime_ns
        second, _ = evaluator.evaluate(*args, np.random.default_rng(0), use_cache=True)
        assert blob.stat().st_mtime_ns == stamp
        assert (second.accuracy, second.mAP, second.auc) == (first.accuracy, first.mAP, first.auc)

    def test_video_head_is_rejected(self, setup, tiny_config, tiny_dataset, rng):
        model, params, labels = setup
        evaluator = DownstreamEvaluator(model, params, tiny_config.dsp)
        with pytest.raises(UnsupportedModalityError):
            evaluator.evaluate(tiny_dataset[:6], labels[:6], tiny_dataset[6:], labels[6:], 'V',
                               'nonoverlap_1s', ClassifierConfig(num_classes=2), rng)
