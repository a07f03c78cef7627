"""The pinned desk-scale recipe: synthetic data, acoustic pretraining, joint training, averaging."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

from . import autodiff as ad
from .data import SynthConfig, downsample_corpus, generate_corpus, split_corpus
from .model import ModelConfig, STASTModel
from .trainer import Trainer, TrainPlan, pretrain_acoustic, train_joint

log = logging.getLogger(__name__)


@dataclass
class Recipe:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: TrainPlan = field(default_factory=lambda: TrainPlan(checkpoint_interval_steps=50))
    n_dev: int = 200
    downsample_stride: int = 3
    precision: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RecipeRun:
    model: STASTModel
    train: list
    dev: list
    vocab: object
    pretrain: Trainer
    joint: Trainer


def prepare_data(recipe: Recipe):
    corpus, vocab = generate_corpus(recipe.synth)
    if recipe.downsample_stride > 1:
        corpus = downsample_corpus(corpus, recipe.downsample_stride)
    train, dev = split_corpus(corpus, recipe.n_dev)
    return train, dev, vocab


def build_model(recipe: Recipe, d_feat: int | None = None, vocab_size: int | None = None) -> STASTModel:
    cfg = ModelConfig(**{**asdict(recipe.model),
                         "d_feat": d_feat if d_feat is not None else recipe.synth.d_feat,
                         "vocab_size": vocab_size if vocab_size is not None else recipe.synth.vocab_size})
    return STASTModel(cfg, seed=recipe.plan.seed)


def run_recipe(recipe: Recipe, asr_corpus: Sequence | None = None, out_dir=None,
               data: tuple | None = None) -> RecipeRun:
    """Train a model end to end.

    ``data`` is an optional ``(train, dev, vocab)`` triple that replaces the
    synthetic corpus (already downsampled); ``asr_corpus``, if given, replaces
    the triplets for pretraining.
    """
    with ad.precision(recipe.precision):
        if data is None:
            train, dev, vocab = prepare_data(recipe)
        else:
            train, dev, vocab = data
        model = build_model(recipe, train[0].speech.shape[1], len(vocab) if vocab is not None else None)
        pre = pretrain_acoustic(model, asr_corpus if asr_corpus is not None else train, recipe.plan, out_dir)
        joint = train_joint(model, train, recipe.plan, out_dir)
    return RecipeRun(model, train, dev, vocab, pre, joint)
