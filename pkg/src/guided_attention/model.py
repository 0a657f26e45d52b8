"""Encoder-decoder recognizer and batch collation."""

from __future__ import annotations

import logging
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .decoder import Decoder, DecoderConfig, Hypothesis, autoregressive_decode, decode_batch, teacher_forced_forward
from .encoder import DOWNSAMPLE_FACTOR, Encoder, EncoderConfig, FeatureGrid, encode
from .errors import InputError
from .layers import Module
from .tensor import Tensor
from .tokens import Vocabulary

logger = logging.getLogger(__name__)


def collate_images(images: Sequence[np.ndarray], multiple: int = DOWNSAMPLE_FACTOR) -> Tuple[np.ndarray, np.ndarray]:
    """Pad ``[H×W]`` images to a common size (a multiple of ``multiple``).

    Returns the ``[N×1×H×W]`` batch and the ``[N×H×W]`` validity mask.

    Raises
    ------
    InputError
        On an empty batch or an image that is not two-dimensional.
    """

    if not images:
        raise InputError("Cannot collate an empty batch.")
    for image in images:
        if np.ndim(image) != 2:
            raise InputError(f"Expected [H×W] images, got shape {np.shape(image)}.")
    height = max(im.shape[0] for im in images)
    width = max(im.shape[1] for im in images)
    height = -(-height // multiple) * multiple
    width = -(-width // multiple) * multiple
    batch = np.zeros((len(images), 1, height, width), dtype=T.get_default_dtype())
    mask = np.zeros((len(images), height, width), dtype=bool)
    for i, image in enumerate(images):
        h, w = image.shape
        batch[i, 0, :h, :w] = image
        mask[i, :h, :w] = True
    return batch, mask


class GuidedAttentionModel(Module):
    """DenseNet-lite encoder plus guided Transformer decoder over a vocabulary."""

    def __init__(
        self,
        vocab: Vocabulary,
        encoder_cfg: EncoderConfig,
        decoder_cfg: DecoderConfig,
        *,
        seed: int = 7,
    ) -> None:
        super().__init__()
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.encoder = Encoder(encoder_cfg, rng)
        self.decoder = Decoder(len(vocab), decoder_cfg, rng)

    @property
    def encoder_cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    @property
    def decoder_cfg(self) -> DecoderConfig:
        return self.decoder.cfg

    def encode_images(self, images: Sequence[np.ndarray]) -> FeatureGrid:
        batch, mask = collate_images(images)
        return encode(batch, self.encoder, mask)

    def loss(self, images: Sequence[np.ndarray], targets: Sequence[Sequence[str]]) -> Tensor:
        """Mean token cross-entropy of a teacher-forced batch."""

        if len(images) != len(targets):
            raise InputError(f"{len(images)} images for {len(targets)} targets.")
        ids = [self.vocab.encode(t) for t in targets]
        _, loss = teacher_forced_forward(self.decoder, self.encode_images(images), ids)
        return loss

    def features(self, image: np.ndarray) -> FeatureGrid:
        """Evaluation-mode features of a single image."""

        with T.no_grad():
            return self.encode_images([image])[0]

    def recognize(
        self,
        image: np.ndarray,
        cfg: DecoderConfig | None = None,
        *,
        beam: int = 1,
        record_trace: bool = False,
    ) -> Hypothesis:
        self.eval()
        return autoregressive_decode(self.decoder, self.features(image), cfg, beam=beam, record_trace=record_trace)

    def recognize_batch(
        self,
        images: Sequence[np.ndarray],
        cfg: DecoderConfig | None = None,
        *,
        beam: int = 1,
        jobs: int = 1,
        grids: Sequence[FeatureGrid] | None = None,
    ) -> List[List[str]]:
        """Decode every image; precomputed ``grids`` skip the encoder."""

        self.eval()
        if grids is None:
            grids = [self.features(image) for image in images]
        hyps = decode_batch(self.decoder, grids, cfg, beam=beam, jobs=jobs)
        truncated = sum(h.truncated for h in hyps)
        if truncated:
            logger.info("%d of %d decodes hit max_len", truncated, len(hyps))
        return [self.vocab.decode(h.output_tokens()) for h in hyps]
