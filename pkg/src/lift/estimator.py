"""scikit-learn style wrappers around the builder, the trainer and the probe."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from .builder import MAX_TOKENS, assign_stage, build_timeline_examples, demo_pool, load_instruction
from .config import LiftConfig
from .corpus import GlobalLabelSpace
from .errors import NotACurriculumDataset
from .evalharness import candidates_for, decode_label, macro_f1
from .interp import ProbeScore, probe_features
from .pipeline import build_tokenizer, encode_shards, loss_weights, new_model, stage_schedules
from .tokenspace import WhitespaceTokenizer, encode_with_spans
from .trainer import run_curriculum
from .validation import check_examples, check_features, check_labels, check_timelines


class IFTBuilder(TransformerMixin, BaseEstimator):
    """Timelines -> prompt examples (one per labeled item).

    ``fit`` keeps the demonstration pool; ``transform`` renders prompts with
    ``shots`` demos, or each dataset's curriculum shot count when ``shots`` is
    None. The token budget is measured in ``token_len_fn`` units (words by
    default).
    """

    def __init__(self, shots: int | None = None, budget: int = MAX_TOKENS, seed: int = 17,
                 history_labels: bool = True, demo_window: int = 3, stratified: bool = False, token_len_fn=None):
        self.shots = shots
        self.budget = budget
        self.seed = seed
        self.history_labels = history_labels
        self.demo_window = demo_window
        self.stratified = stratified
        self.token_len_fn = token_len_fn

    def fit(self, X, y=None):
        X = check_timelines(X)
        self.pools_ = {}
        for tl in X:
            self.pools_.setdefault(tl.dataset_id, []).append(tl)
        self.pools_ = {ds: demo_pool(tls, self.demo_window) for ds, tls in self.pools_.items()}
        return self

    def transform(self, X):
        check_is_fitted(self, "pools_")
        X = check_timelines(X)
        count = self.token_len_fn or (lambda s: len(s.split()))
        out = []
        for tl in X:
            try:
                stage, k = assign_stage(tl.dataset_id)
            except NotACurriculumDataset:
                stage, k = 0, 0
            out += build_timeline_examples(
                tl, stage=stage, k=k if self.shots is None else self.shots, instruction=load_instruction(tl.dataset_id),
                pool=self.pools_.get(tl.dataset_id, []), seed=self.seed, budget=self.budget, token_len_fn=count,
                history_labels=self.history_labels, stratified=self.stratified)
        return out


def gold_labels(examples) -> list[str]:
    return [ex.response_text for ex in check_examples(examples)]


class LiftClassifier(ClassifierMixin, BaseEstimator):
    """Curriculum-trained toy LM that predicts a prompt example's label.

    ``fit`` takes prompt examples carrying their stage (as produced by
    :class:`IFTBuilder`) and trains stages in order; ``predict`` ranks each
    dataset's candidate labels; ``score`` is macro-F1.
    """

    def __init__(self, seed: int = 17, epochs: int | None = None, grad_accum: int | None = None,
                 lr_scale: float = 1.0, checkpoint_every: int = 25, n_layers: int = 4, d_model: int = 64,
                 n_heads: int = 4, d_ff: int = 256, use_conditioning: bool = True, mask_history: bool = False,
                 class_weighting: bool = True, decode_mode: str = "rank"):
        self.seed = seed
        self.epochs = epochs
        self.grad_accum = grad_accum
        self.lr_scale = lr_scale
        self.checkpoint_every = checkpoint_every
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.use_conditioning = use_conditioning
        self.mask_history = mask_history
        self.class_weighting = class_weighting
        self.decode_mode = decode_mode

    def _config(self) -> LiftConfig:
        return LiftConfig(**{k: v for k, v in self.get_params().items() if k in LiftConfig.__dataclass_fields__})

    def fit(self, X, y=None, tokenizer: WhitespaceTokenizer | None = None):
        X = check_examples(X)
        cfg = self._config()
        self.labelspace_ = GlobalLabelSpace.default()
        self.tokenizer_ = tokenizer or build_tokenizer(ex.prompt + " " + ex.response_text for ex in X)
        shards: dict[int, list] = {}
        for ex in X:
            shards.setdefault(ex.stage, []).append(ex)
        encoded = encode_shards(shards, self.tokenizer_)
        schedules = {s: sch for s, sch in stage_schedules(cfg).items() if s in encoded}
        if not schedules:
            raise ValueError("no examples belong to a curriculum stage")
        self.model_ = new_model(cfg, self.tokenizer_, self.labelspace_, rank=schedules[min(schedules)].rank)
        self.stages_ = run_curriculum(self.model_, encoded, schedules, weights=loss_weights(cfg), seed=cfg.seed,
                                      class_weighting=cfg.class_weighting)
        self.classes_ = np.array(sorted({ex.response_text for ex in X}))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_examples(X)
        was = self.model_.training
        self.model_.eval()
        out = []
        for ex in X:
            cands = candidates_for(ex.dataset_id, self.labelspace_)
            out.append(decode_label(self.model_, self.tokenizer_, encode_with_spans(ex, self.tokenizer_), cands,
                                    self.decode_mode))
        self.model_.train(was)
        return np.array(out)

    def score(self, X, y, sample_weight=None) -> float:
        X = check_examples(X, same_dataset=True)
        y = check_labels(y, len(X))
        return macro_f1(y, list(self.predict(X)))[0]


class RegionProbe(ClassifierMixin, BaseEstimator):
    """Standardized, class-balanced logistic probe over fixed representations."""

    def __init__(self, folds: int = 5, seed: int = 0, max_iter: int = 2000):
        self.folds = folds
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_features(X, y)
        self.pipeline_ = make_pipeline(
            StandardScaler(),
            LogisticRegression(class_weight="balanced", max_iter=self.max_iter, random_state=self.seed))
        self.pipeline_.fit(X, y)
        self.classes_ = self.pipeline_.classes_
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "pipeline_")
        X, _ = check_features(X)
        return self.pipeline_.predict(X)

    def cross_validate(self, X, y) -> ProbeScore:
        """Out-of-fold scores with stratified folds fixed by ``seed``."""
        X, y = check_features(X, y)
        return probe_features(X, y, self.folds, self.seed)
