"""Stacked Transformer decoder with guided cross-attention."""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attention import CrossAttentionResult, FusionOrder, GuidedCrossAttention, split_heads, merge_heads
from .encoder import FeatureGrid, positional_encoding_1d
from .errors import ConfigError, InputError, UsageError
from .layers import Dropout, Embedding, LayerNorm, Linear, Module
from .tensor import Tensor
from .tokens import EOS, PAD, SOS

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class DecoderConfig:
    """Decoder hyper-parameters and guidance switches."""

    num_layers: int = 3
    d_model: int = 256
    d_ff: int = 1024
    heads: int = 8
    dropout: float = 0.3
    self_guide: bool = True
    self_guide_layers: Tuple[int, ...] = (2, 3)
    neighbor_guide: bool = True
    neighbor_guide_layers: Tuple[int, ...] = (2,)
    alpha: float = 2.5
    fusion_order: FusionOrder = FusionOrder.SELF_FIRST
    phi_kernel: int = 5
    phi_channels: int = 32
    use_arm: bool = True
    neighbor_in_training: bool = False
    max_len: int = 200

    def __post_init__(self) -> None:
        self.self_guide_layers = tuple(sorted(int(i) for i in self.self_guide_layers))
        self.neighbor_guide_layers = tuple(sorted(int(i) for i in self.neighbor_guide_layers))
        self.fusion_order = FusionOrder(self.fusion_order)
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be at least 1, got {self.num_layers}.")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}.")
        if not set(self.self_guide_layers) <= set(range(1, self.num_layers + 1)):
            raise ConfigError(f"self_guide_layers {self.self_guide_layers} outside 1..{self.num_layers}.")
        if not set(self.neighbor_guide_layers) <= set(range(1, self.num_layers)):
            raise ConfigError(
                f"neighbor_guide_layers {self.neighbor_guide_layers} must be middle layers 1..{self.num_layers - 1}."
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}.")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be positive, got {self.max_len}.")

    def self_active(self, layer_idx: int) -> bool:
        return self.self_guide and layer_idx in self.self_guide_layers

    def neighbor_active(self, layer_idx: int) -> bool:
        return self.neighbor_guide and self.alpha != 0.0 and layer_idx in self.neighbor_guide_layers


# ----------------------------------------------------------------------
# Decoding state
# ----------------------------------------------------------------------
@dataclass(slots=True)
class GuidanceState:
    """Per-sequence decoding state.

    Holds one coverage accumulator per layer, the self-attention key/value
    cache, and the final-layer refined attention of the most recent step.
    The neighbor cache is only reachable through :meth:`neighbor_attention`
    so a middle layer can never read anything but step ``t−1``.
    """

    num_layers: int
    coverage: List[Optional[Tensor]] = field(default_factory=list)
    self_cache: List[Optional[Tuple[Tensor, Tensor]]] = field(default_factory=list)
    step: int = 0
    _neighbor: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not self.coverage:
            self.coverage = [None] * self.num_layers
        if not self.self_cache:
            self.self_cache = [None] * self.num_layers

    def neighbor_attention(self) -> Optional[np.ndarray]:
        """Final-layer refined attention ``[N×h×L]`` of the previous step, if any."""

        return self._neighbor

    def record_final(self, attention: np.ndarray) -> None:
        self._neighbor = np.array(attention, copy=True)

    def fork(self) -> "GuidanceState":
        """Independent copy for a new beam hypothesis."""

        return GuidanceState(
            num_layers=self.num_layers,
            coverage=[None if c is None else c.detach() for c in self.coverage],
            self_cache=[None if kv is None else (kv[0].detach(), kv[1].detach()) for kv in self.self_cache],
            step=self.step,
            _neighbor=None if self._neighbor is None else self._neighbor.copy(),
        )


@dataclass(slots=True)
class StepTrace:
    """Attention recorded for one decoding step (single sequence)."""

    step: int
    attention: List[np.ndarray]
    self_maps: List[Optional[np.ndarray]]
    neighbor_maps: List[Optional[np.ndarray]]


@dataclass(slots=True)
class Hypothesis:
    tokens: List[int]
    log_prob: float
    state: GuidanceState
    trace: Optional[List[StepTrace]] = None
    finished: bool = False
    truncated: bool = False

    @property
    def length(self) -> int:
        """Number of generated tokens after SOS (EOS included)."""

        return len(self.tokens) - 1

    @property
    def score(self) -> float:
        return self.log_prob / max(self.length, 1)

    def output_tokens(self) -> List[int]:
        body = self.tokens[1:]
        if body and body[-1] == EOS:
            body = body[:-1]
        return body


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------
class CausalSelfAttention(Module):
    """Masked multi-head self-attention with an incremental key/value cache."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.heads = heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def forward(self, x: Tensor, cache: Optional[Tuple[Tensor, Tensor]] = None) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
        n, steps, d = x.shape
        queries = split_heads(self.query(x), self.heads)
        keys = split_heads(self.key(x), self.heads)
        values = split_heads(self.value(x), self.heads)
        start = 0
        if cache is not None:
            start = cache[0].shape[2]
            keys = T.concat([cache[0], keys], axis=2)
            values = T.concat([cache[1], values], axis=2)
        total = start + steps
        allowed = np.arange(total)[None, :] <= (start + np.arange(steps))[:, None]
        scores = T.scale(T.matmul(queries, T.transpose(keys, (0, 1, 3, 2))), 1.0 / math.sqrt(d // self.heads))
        weights = T.softmax_lastdim(scores, allowed[None, None, :, :])
        return self.out(merge_heads(T.matmul(weights, values))), (keys, values)


class DecoderLayer(Module):
    """Self-attention, guided cross-attention and feed-forward with post-norm residuals."""

    def __init__(self, layer_idx: int, cfg: DecoderConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.layer_idx = layer_idx
        self.self_attn = CausalSelfAttention(cfg.d_model, cfg.heads, rng)
        self.cross_attn = GuidedCrossAttention(
            cfg.d_model,
            cfg.heads,
            rng,
            use_arm=cfg.use_arm,
            self_guidance=cfg.self_active(layer_idx),
            phi_kernel=cfg.phi_kernel,
            phi_channels=cfg.phi_channels,
        )
        self.ff_in = Linear(cfg.d_model, cfg.d_ff, rng)
        self.ff_out = Linear(cfg.d_ff, cfg.d_model, rng)
        self.norm_self = LayerNorm(cfg.d_model)
        self.norm_cross = LayerNorm(cfg.d_model)
        self.norm_ff = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, rng)


def decoder_layer(
    layer: DecoderLayer,
    x: Tensor,
    mem: FeatureGrid,
    state: GuidanceState,
    cfg: DecoderConfig,
    *,
    use_neighbor: bool = False,
) -> Tuple[Tensor, CrossAttentionResult]:
    """Run one decoder layer on ``x`` (``[N×T×d]``), updating ``state`` in place.

    Returns the layer output and the refined cross-attention.

    Raises
    ------
    UsageError
        If the layer index lies outside ``1..num_layers``.
    """

    idx = layer.layer_idx
    if not 1 <= idx <= cfg.num_layers:
        raise UsageError(f"Layer index {idx} outside 1..{cfg.num_layers}.")

    attended, state.self_cache[idx - 1] = layer.self_attn(x, state.self_cache[idx - 1])
    x = layer.norm_self(T.add(x, layer.drop(attended)))

    prev_final = None
    if use_neighbor and cfg.neighbor_active(idx):
        prev_final = state.neighbor_attention()
    cross = layer.cross_attn(
        x,
        mem.flat(),
        mem.flat_mask(),
        (mem.h0, mem.w0),
        coverage=state.coverage[idx - 1],
        prev_final=prev_final,
        use_self=cfg.self_active(idx),
        use_arm=cfg.use_arm,
        alpha=cfg.alpha,
        order=cfg.fusion_order,
        layer_idx=idx,
        num_layers=cfg.num_layers,
    )
    state.coverage[idx - 1] = cross.coverage
    x = layer.norm_cross(T.add(x, layer.drop(cross.output)))

    hidden = layer.drop(T.relu(layer.ff_in(x)))
    x = layer.norm_ff(T.add(x, layer.drop(layer.ff_out(hidden))))
    return x, cross


class Decoder(Module):
    """Token embedding, ``L`` decoder layers and the vocabulary projection."""

    def __init__(self, vocab_size: int, cfg: DecoderConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = Embedding(vocab_size, cfg.d_model, rng)
        self.embed_norm = LayerNorm(cfg.d_model)
        self.layers: List[DecoderLayer] = [DecoderLayer(i + 1, cfg, rng) for i in range(cfg.num_layers)]
        self.proj = Linear(cfg.d_model, vocab_size, rng, gain=0.1)

    def new_state(self) -> GuidanceState:
        return GuidanceState(num_layers=len(self.layers))

    def forward(
        self,
        mem: FeatureGrid,
        tokens: np.ndarray,
        state: GuidanceState,
        cfg: DecoderConfig | None = None,
    ) -> Tuple[Tensor, List[CrossAttentionResult]]:
        """Logits ``[N×T×V]`` for ``tokens`` (``[N×T]``) continuing ``state``.

        With one token per row this is an incremental decoding step: the
        neighbor cache is read by the configured middle layers and then
        overwritten with this step's final-layer attention.
        """

        cfg = cfg or self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        steps = tokens.shape[1]
        incremental = steps == 1 and (not self.training or cfg.neighbor_in_training)
        positions = state.step + np.arange(steps)
        x = self.embed(tokens)
        x = self.embed_norm(T.add(x, positional_encoding_1d(positions, cfg.d_model).astype(x.dtype)))

        results: List[CrossAttentionResult] = []
        for layer in self.layers:
            x, cross = decoder_layer(layer, x, mem, state, cfg, use_neighbor=incremental)
            results.append(cross)
        if steps == 1:
            state.record_final(results[-1].attention.data[:, :, 0, :])
        state.step += steps
        return self.proj(x), results


# ----------------------------------------------------------------------
# Training forward
# ----------------------------------------------------------------------
def shift_targets(targets: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Build ``[SOS]+y`` inputs and ``y+[EOS]`` outputs, right-padded with PAD.

    Raises
    ------
    InputError
        If any target sequence is empty.
    """

    if not targets:
        raise InputError("Empty target batch.")
    lengths = [len(t) for t in targets]
    if min(lengths) == 0:
        raise InputError("Target sequences must contain at least one token.")
    width = max(lengths) + 1
    inputs = np.full((len(targets), width), PAD, dtype=np.int64)
    outputs = np.full((len(targets), width), PAD, dtype=np.int64)
    for i, seq in enumerate(targets):
        inputs[i, 0] = SOS
        inputs[i, 1 : len(seq) + 1] = seq
        outputs[i, : len(seq)] = seq
        outputs[i, len(seq)] = EOS
    return inputs, outputs


def teacher_forced_forward(
    decoder: Decoder,
    mem: FeatureGrid,
    targets: Sequence[Sequence[int]],
    cfg: DecoderConfig | None = None,
) -> Tuple[Tensor, Tensor]:
    """Return ``(logits [B×T×V], mean token cross-entropy over non-PAD positions)``.

    The pass is parallel over ``T`` except for the per-row coverage scan
    inside each cross-attention. When ``neighbor_in_training`` is set (and
    the decoder is in training mode) the pass runs step by step so the
    middle layers can read the previous step's final attention.
    """

    cfg = cfg or decoder.cfg
    inputs, outputs = shift_targets(targets)
    if inputs.shape[0] != mem.batch_size:
        raise InputError(f"{inputs.shape[0]} targets for a batch of {mem.batch_size} images.")
    state = decoder.new_state()
    if decoder.training and cfg.neighbor_in_training and cfg.neighbor_guide:
        columns = [decoder(mem, inputs[:, t : t + 1], state, cfg)[0] for t in range(inputs.shape[1])]
        logits = T.concat(columns, axis=1)
    else:
        logits, _ = decoder(mem, inputs, state, cfg)
    return logits, T.cross_entropy(logits, outputs, ignore_index=PAD)


# ----------------------------------------------------------------------
# Inference
# ----------------------------------------------------------------------
def _step_trace(step: int, results: List[CrossAttentionResult]) -> StepTrace:
    return StepTrace(
        step=step,
        attention=[r.attention.data[0, :, 0, :].copy() for r in results],
        self_maps=[None if r.self_maps[0] is None else r.self_maps[0][0].copy() for r in results],
        neighbor_maps=[None if r.neighbor_maps[0] is None else r.neighbor_maps[0][0].copy() for r in results],
    )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _prune(candidates: Sequence[Tuple], beam: int) -> List[Tuple]:
    """Keep the ``beam`` best ``(score, tokens, ...)`` candidates; equal scores go to the smaller sequence."""

    return sorted(candidates, key=lambda c: (-c[0], c[1]))[:beam]


def _beam_search(
    decoder: Decoder,
    mem: FeatureGrid,
    cfg: DecoderConfig,
    beam: int,
    max_len: int,
    record_trace: bool,
    sink: Optional[List[StepTrace]] = None,
) -> Hypothesis:
    live = [Hypothesis([SOS], 0.0, decoder.new_state(), [] if record_trace else None)]
    completed: List[Hypothesis] = []
    for _ in range(max_len):
        candidates: List[Tuple[float, Tuple[int, ...], Hypothesis, int, np.ndarray, Optional[StepTrace]]] = []
        for hyp in live:
            state = hyp.state
            logits, results = decoder(mem, np.array([[hyp.tokens[-1]]]), state, cfg)
            step_trace = _step_trace(state.step - 1, results) if record_trace or sink is not None else None
            if sink is not None and beam == 1:
                sink.append(step_trace)
            log_probs = _log_softmax(logits.data[0, 0].astype(np.float64))
            # stable sort keeps the lowest token id first among equal scores
            for token in np.argsort(-log_probs, kind="stable")[:beam]:
                candidates.append(
                    (hyp.log_prob + float(log_probs[token]), tuple(hyp.tokens) + (int(token),), hyp, int(token), log_probs, step_trace)
                )

        next_live: List[Hypothesis] = []
        for score, seq, parent, token, _, step_trace in _prune(candidates, beam):
            child = Hypothesis(
                tokens=list(seq),
                log_prob=score,
                state=parent.state.fork() if beam > 1 else parent.state,
                trace=None if parent.trace is None else parent.trace + [step_trace],
            )
            if token == EOS:
                child.finished = True
                completed.append(child)
            else:
                next_live.append(child)
        live = next_live
        if not live or len(completed) >= beam:
            break

    if completed:
        return min(completed, key=lambda h: (-h.score, tuple(h.tokens)))
    best = min(live, key=lambda h: (-h.score, tuple(h.tokens)))
    best.truncated = True
    logger.debug("decode truncated at %d tokens", max_len)
    return best


def _ranks_before(a: Hypothesis, b: Hypothesis) -> bool:
    """Finished beats truncated; then higher normalised score, then the smaller token sequence."""

    if a.finished != b.finished:
        return a.finished
    return (-a.score, tuple(a.tokens)) < (-b.score, tuple(b.tokens))


def autoregressive_decode(
    decoder: Decoder,
    mem: FeatureGrid,
    cfg: DecoderConfig | None = None,
    *,
    beam: int = 1,
    max_len: int | None = None,
    record_trace: bool = False,
    partial_trace: Optional[List[StepTrace]] = None,
) -> Hypothesis:
    """Decode one image's features left to right.

    Every hypothesis owns its :class:`GuidanceState`. Completed hypotheses are
    ranked by log-probability divided by their token count; ties go to the
    lexicographically smallest token sequence. For ``beam > 1`` the greedy
    path is scored too and the better of the two is returned, so the result
    is never worse than greedy decoding.

    Parameters
    ----------
    decoder:
        The decoder; it is switched to evaluation mode for the call.
    mem:
        Features of a single image.
    cfg:
        Runtime configuration (guidance switches, ``alpha``, order); defaults
        to the decoder's own.
    beam:
        Beam width, at least 1.
    max_len:
        Maximum number of generated tokens; defaults to ``cfg.max_len``.
    record_trace:
        Keep per-step attention and guidance maps on the hypothesis.
    partial_trace:
        With greedy decoding, a list that receives each step's trace as soon
        as it is computed, so a failed decode still leaves the steps done.
    """

    if beam < 1:
        raise UsageError(f"beam must be at least 1, got {beam}.")
    cfg = cfg or decoder.cfg
    max_len = max_len or cfg.max_len
    if mem.batched:
        if mem.batch_size != 1:
            raise InputError("autoregressive_decode works on a single image.")
        mem = mem[0]
    was_training = decoder.training
    decoder.eval()
    try:
        with T.no_grad():
            best = _beam_search(decoder, mem, cfg, beam, max_len, record_trace, partial_trace)
            if beam > 1:
                greedy = _beam_search(decoder, mem, cfg, 1, max_len, record_trace)
                if _ranks_before(greedy, best):
                    best = greedy
    finally:
        decoder.train(was_training)
    return best


def greedy_decode(decoder: Decoder, mem: FeatureGrid, cfg: DecoderConfig | None = None, **kwargs) -> Hypothesis:
    return autoregressive_decode(decoder, mem, cfg, beam=1, **kwargs)


def decode_batch(
    decoder: Decoder,
    grids: Sequence[FeatureGrid],
    cfg: DecoderConfig | None = None,
    *,
    beam: int = 1,
    max_len: int | None = None,
    jobs: int = 1,
) -> List[Hypothesis]:
    """Decode independent images, optionally across ``jobs`` worker threads."""

    cfg = cfg or decoder.cfg
    was_training = decoder.training
    decoder.eval()

    def _one(grid: FeatureGrid) -> Hypothesis:
        return autoregressive_decode(decoder, grid, cfg, beam=beam, max_len=max_len)

    try:
        if jobs <= 1:
            return [_one(g) for g in grids]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_one, grids))
    finally:
        decoder.train(was_training)


def with_overrides(cfg: DecoderConfig, **changes) -> DecoderConfig:
    """Copy of ``cfg`` with runtime switches replaced (validated again)."""

    return dataclasses.replace(cfg, **changes)
