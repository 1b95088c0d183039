"""scikit-learn facade over the segmentation model.

``HDCASegmenter`` takes images shaped ``(n, 3, H, W)`` and label maps
``(n, H, W)``; ``predict`` returns label maps, ``transform`` the pyramid
features at 1/8 resolution, ``score`` the mean IoU.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig
from .hdca import HdcaConfig, extract_region_maps
from .model import IGNORE_INDEX, ModelConfig, SegModel, model_forward, predict_proba, tta_probabilities
from .synthdata import SceneSample
from .tensor import Tensor, concat_channels
from .training import MetricAccumulator, TrainConfig, train
from .validation import check_images, check_label_maps, check_schedule


class HDCASegmenter(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Dilated CNN + hierarchical context aggregation, trained with poly-LR SGD.

    Parameters
    ----------
    levels : sequence of int
        Region count per hierarchy level, strictly increasing. Empty gives
        the no-context baseline.
    include_reduced : bool
        Also feed the reduced backbone features to the classifier.
    tta_scales, tta_flip :
        Test-time augmentation used by ``predict``/``predict_proba``;
        ``(1.0,)`` and ``False`` disable it.
    """

    def __init__(self, levels=(2, 4, 8, 16), num_classes=None, context_channels=16,
                 include_reduced=False, stem_channels=16, stage_channels=(16, 32, 64),
                 dilations=(1, 2, 4), out_channels=64, reduced_channels=32, iters=2000,
                 batch_size=4, crop=64, base_lr=0.02, momentum=0.9, weight_decay=1e-4,
                 augment=True, tta_scales=(1.0,), tta_flip=False, ignore_index=IGNORE_INDEX,
                 random_state=0):
        self.levels = levels
        self.num_classes = num_classes
        self.context_channels = context_channels
        self.include_reduced = include_reduced
        self.stem_channels = stem_channels
        self.stage_channels = stage_channels
        self.dilations = dilations
        self.out_channels = out_channels
        self.reduced_channels = reduced_channels
        self.iters = iters
        self.batch_size = batch_size
        self.crop = crop
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.tta_scales = tta_scales
        self.tta_flip = tta_flip
        self.ignore_index = ignore_index
        self.random_state = random_state

    def _model_config(self, n_classes: int) -> ModelConfig:
        levels = check_schedule(self.levels)
        hcfg = HdcaConfig(levels, self.context_channels, include_reduced=self.include_reduced) if levels else None
        bcfg = BackboneConfig(self.stem_channels, list(self.stage_channels), self.out_channels,
                              self.reduced_channels, list(self.dilations))
        return ModelConfig(n_classes, self.ignore_index, bcfg, hcfg)

    def fit(self, X, y):
        X = check_images(X)
        y = check_label_maps(y, X, self.num_classes, self.ignore_index)
        seen = np.unique(y[y != self.ignore_index])
        if seen.size == 0:
            raise ValueError("every label is ignore_index; nothing to learn")
        n_classes = self.num_classes or int(seen.max()) + 1
        seed = 0 if self.random_state is None else int(self.random_state)
        self.model_ = SegModel(self._model_config(n_classes), seed=seed)
        cfg = TrainConfig(iters=self.iters, batch_size=self.batch_size, crop=self.crop,
                          base_lr=self.base_lr, momentum=self.momentum, weight_decay=self.weight_decay,
                          seed=seed, augment=self.augment)
        data = [SceneSample(img, lab) for img, lab in zip(X, y)]
        result = train(self.model_, data, cfg)
        self.classes_ = np.arange(n_classes)
        self.n_classes_ = n_classes
        self.loss_curve_ = [loss for _, _, loss in result.loss_log]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        if tuple(self.tta_scales) == (1.0,) and not self.tta_flip:
            return predict_proba(self.model_, X)
        return tta_probabilities(self.model_, X, self.tta_scales, self.tta_flip)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1).astype(np.int64)

    def transform(self, X) -> np.ndarray:
        """Classifier input features at 1/8 scale, shape (n, channels, H/8, W/8)."""
        check_is_fitted(self, "model_")
        m = self.model_
        X = check_images(X)
        x = m.backbone(Tensor(X), training=False)
        xr = m.backbone.reduce(x, training=False)
        if m.hdca is None:
            return xr.data
        y, _ = m.hdca(x, xr, training=False)
        if m.config.hdca.include_reduced:
            y = concat_channels([xr, y])
        return y.data

    def region_maps(self, X) -> list[np.ndarray]:
        """Per-level region indices at 1/8 scale, one (n, H/8, W/8) array per level."""
        check_is_fitted(self, "model_")
        _, maps = model_forward(self.model_, Tensor(check_images(X)), training=False)
        return extract_region_maps(maps)

    def score(self, X, y, sample_weight=None) -> float:
        """Mean IoU over classes present in labels or predictions."""
        pred = self.predict(X)
        y = check_label_maps(y, None, None, self.ignore_index)
        acc = MetricAccumulator(self.n_classes_, self.ignore_index)
        for p, t in zip(pred, y):
            acc.update(p, t)
        return acc.mean_iou()
