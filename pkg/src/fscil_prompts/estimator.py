"""scikit-learn style classifier wrapping prompt tuning on a frozen bundle.

``fit`` trains the base session, every ``partial_fit`` call is one further
incremental session with new classes only. Predictions always cover every
class registered so far.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_class_labels, check_images
from .classifier import DEFAULT_TEMPLATE, ClassRegistry, cosine_logits, encode_class_prototypes
from .encoders import encode_image, fill_template
from .exceptions import ConfigurationError, ProtocolError
from .prompts import compile_plan, init_prompts
from .trainer import OptimizerConfig, RegularizerState, train_session

ABLATIONS = ("full", "no_accumulation", "no_vision_prompts", "no_regularization", "zero_shot")


class PromptTunedClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot class-incremental classifier built on a frozen dual encoder.

    Parameters
    ----------
    bundle : DualEncoderBundle
        Frozen backbone. It is never modified.
    prompt_length, prompt_depth : int
        Prompt tokens per layer (L) and number of prompted layers (D);
        ``prompt_depth=None`` prompts every layer.
    ablation : str
        ``full``, ``no_accumulation``, ``no_vision_prompts``,
        ``no_regularization`` or ``zero_shot`` (no training at all).
    init_bank : GPromptBank, optional
        Starting prompts; copied, never mutated. Seeded random init otherwise.
    random_state : int
        Seeds prompt initialisation and batch order.

    The remaining parameters mirror :class:`OptimizerConfig`.
    """

    def __init__(
        self,
        bundle=None,
        prompt_length=2,
        prompt_depth=None,
        ablation="full",
        learning_rate=0.00325,
        weight_decay=1e-5,
        momentum=0.9,
        warmup_fraction=0.1,
        epochs=3,
        batch_size=32,
        incremental_epochs=5,
        incremental_batch_size=4,
        alpha_floor=0.0,
        template=DEFAULT_TEMPLATE,
        init_bank=None,
        random_state=0,
    ):
        self.bundle = bundle
        self.prompt_length = prompt_length
        self.prompt_depth = prompt_depth
        self.ablation = ablation
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.warmup_fraction = warmup_fraction
        self.epochs = epochs
        self.batch_size = batch_size
        self.incremental_epochs = incremental_epochs
        self.incremental_batch_size = incremental_batch_size
        self.alpha_floor = alpha_floor
        self.template = template
        self.init_bank = init_bank
        self.random_state = random_state

    def _optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            warmup_fraction=self.warmup_fraction,
            epochs=self.epochs,
            batch_size=self.batch_size,
            incremental_epochs=self.incremental_epochs,
            incremental_batch_size=self.incremental_batch_size,
            alpha_floor=self.alpha_floor,
        ).validate()

    def _check_setup(self):
        if self.bundle is None:
            raise ConfigurationError("a DualEncoderBundle is required")
        if not self.bundle.frozen:
            raise ProtocolError("the bundle must be frozen before prompt tuning")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}")
        fill_template(self.template, "x")
        if self.ablation != "zero_shot":
            self._optimizer_config()

    def _new_bank(self):
        bundle = self.bundle
        if self.init_bank is not None:
            bank = copy.deepcopy(self.init_bank)
            if bank.d_nlp != bundle.d_nlp or bank.d_cv != bundle.d_cv:
                raise ConfigurationError("init_bank widths do not match the bundle")
            if bank.depth > bundle.num_layers:
                raise ConfigurationError("init_bank is deeper than the encoder")
            bank.version = 0
            return bank.to(bundle.dtype)
        depth = self.prompt_depth or bundle.num_layers
        return init_prompts(
            self.prompt_length, depth, bundle.d_nlp, bundle.d_cv, self.random_state,
            num_layers=bundle.num_layers, dtype=bundle.dtype,
        )

    def fit(self, X, y):
        """Reset and train on the base session (session 0)."""
        self._check_setup()
        X = check_images(X, self.bundle.image_shape, self.bundle.dtype)
        y = check_class_labels(y, len(X))
        self.registry_ = ClassRegistry()
        self.bank_ = None if self.ablation == "zero_shot" else self._new_bank()
        self.class_counts_ = []
        self.training_log_ = []
        self.loss_curves_ = []
        self.session_ = -1
        return self._learn_session(X, y)

    def partial_fit(self, X, y):
        """Train one incremental session; ``y`` may only hold unseen classes."""
        if not hasattr(self, "registry_"):
            return self.fit(X, y)
        self._check_setup()
        X = check_images(X, self.bundle.image_shape, self.bundle.dtype)
        y = check_class_labels(y, len(X))
        return self._learn_session(X, y)

    def _learn_session(self, X, y):
        session = self.session_ + 1
        new = sorted(set(y))
        clash = set(new) & set(self.registry_.names)
        if clash:
            raise ProtocolError(f"session {session} repeats known classes {sorted(clash)}")
        self.registry_.register(new, session)
        self.class_counts_.append(len(new))
        self.session_ = session
        self.classes_ = np.array(self.registry_.names, dtype=object)
        if self.ablation != "zero_shot":
            lookup = {n: i for i, n in enumerate(self.registry_.names)}
            labels = np.array([lookup[v] for v in y])
            reg = RegularizerState(list(self.class_counts_), True, self.alpha_floor)
            curve = train_session(
                self.bundle, self.bank_, self.registry_, X, labels, self._optimizer_config(), reg,
                session, self.ablation, self.random_state, log=self.training_log_.append,
            )
            self.loss_curves_.append(curve)
        return self

    def _plan_ablation(self):
        return "full" if self.ablation == "no_regularization" else self.ablation

    def transform(self, X) -> np.ndarray:
        """L2-normalised joint-space image embeddings, with vision prompts."""
        check_is_fitted(self, "registry_")
        X = check_images(X, self.bundle.image_shape, self.bundle.dtype)
        hooks = None
        with torch.no_grad():
            if self.bank_ is not None:
                hooks = compile_plan(self.bank_, self._plan_ablation()).vision_hooks
            emb = encode_image(self.bundle, X, hooks)
        return torch.nn.functional.normalize(emb, dim=-1).numpy()

    def decision_function(self, X) -> np.ndarray:
        """Scaled cosine logits, one column per entry of ``classes_``."""
        check_is_fitted(self, "registry_")
        emb = torch.as_tensor(self.transform(X))
        encode_class_prototypes(self.bundle, self.bank_, self.registry_, self.template, self._plan_ablation())
        with torch.no_grad():
            logits = cosine_logits(emb, self.registry_.prototype_cache, self.bundle.logit_scale)
        return logits.numpy()

    def predict_proba(self, X) -> np.ndarray:
        logits = torch.as_tensor(self.decision_function(X))
        return logits.softmax(dim=-1).numpy()

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
