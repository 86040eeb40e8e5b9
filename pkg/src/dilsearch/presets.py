"""Desk-scale settings shared by the CLI defaults and the acceptance suite."""

from .data import GenConfig
from .gates import SearchConfig
from .train import TrainConfig

# Planted task: one row of 8x8 blocks, 32 blocks across. A converted network
# sees one block per feature-map cell, so offset k calls for dilation k.
PLANTED_HEIGHT = 8
PLANTED_WIDTH = 256
PLANTED_COUNT = 256
PLANTED_EVAL_COUNT = 64
PLANTED_EVAL_SEED_SHIFT = 1000

SEARCH_STEPS = 400
SEARCH_LR = 3e-3
PLANTED_TRAIN_STEPS = 400
PLANTED_TRAIN_LR = 3e-3


def planted_data(offset, seed, count=PLANTED_COUNT):
    return GenConfig(
        task="planted_dilation",
        height=PLANTED_HEIGHT,
        width=PLANTED_WIDTH,
        count=count,
        seed=seed,
        planted_offset=offset,
    )


def planted_eval_data(offset, seed):
    return planted_data(offset, seed + PLANTED_EVAL_SEED_SHIFT, PLANTED_EVAL_COUNT)


def planted_search(seed, **kw):
    base = dict(steps=SEARCH_STEPS, batch_size=8, crop_size=0, base_lr=SEARCH_LR, seed=seed)
    base.update(kw)
    return SearchConfig(**base)


def planted_train(seed, **kw):
    base = dict(base_lr=PLANTED_TRAIN_LR, batch_size=8, crop_size=0, total_steps=PLANTED_TRAIN_STEPS, seed=seed)
    base.update(kw)
    return TrainConfig(**base)


def blobs_data(seed, count=256, num_classes=2):
    return GenConfig(task="blobs", height=96, width=96, num_classes=num_classes, count=count, seed=seed)


def blobs_train(seed, **kw):
    return TrainConfig.desk(seed=seed, **kw)
