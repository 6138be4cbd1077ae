"""Desk-scale CT target-volume segmentation pipeline.

Layer primitives with hand-written gradients (:mod:`ptvseg.ops`), a
U-Net built from them (:mod:`ptvseg.unet`), BCE and Dice objectives
(:mod:`ptvseg.losses`), an early-stopping trainer
(:mod:`ptvseg.trainer`), surface-distance metrics
(:mod:`ptvseg.metrics`), CT preprocessing and the dataset format
(:mod:`ptvseg.dataprep`), a deterministic phantom generator
(:mod:`ptvseg.phantom`), the 5-fold cross-validation protocol
(:mod:`ptvseg.crossval`), reporting (:mod:`ptvseg.report`), and the
``ptvseg`` command line (:mod:`ptvseg.cli`).
"""

__version__ = "0.1.0"
