"""Tests for the guided Transformer decoder, its state and the decoding loop."""

import dataclasses
import math

import numpy as np
import pytest

from guided_attention import tensor as T
from guided_attention.decoder import (
    Decoder,
    DecoderConfig,
    DecoderLayer,
    GuidanceState,
    _prune,
    autoregressive_decode,
    decode_batch,
    decoder_layer,
    greedy_decode,
    shift_targets,
    teacher_forced_forward,
    with_overrides,
)
from guided_attention.encoder import FeatureGrid
from guided_attention.errors import ConfigError, InputError, UsageError
from guided_attention.tensor import Tensor
from guided_attention.tokens import EOS, PAD, SOS
from guided_attention.trace import AttentionTrace
from guided_attention.training import SGD
from guided_attention.config import OptimizerConfig

VOCAB = 12


@pytest.fixture
def grid(rng) -> FeatureGrid:
    """Features of one image on a 2×3 grid with d=16."""
    return FeatureGrid(Tensor(rng.normal(size=(2, 3, 16))), np.ones((2, 3), dtype=bool))


@pytest.fixture
def batch_grid(rng) -> FeatureGrid:
    mask = np.ones((2, 2, 3), dtype=bool)
    mask[1, :, 2] = False
    return FeatureGrid(Tensor(rng.normal(size=(2, 2, 3, 16))), mask)


def random_grids(count: int, seed: int) -> list:
    """Unbatched feature grids of assorted small shapes."""
    rng = np.random.default_rng(seed)
    grids = []
    for _ in range(count):
        h, w = rng.integers(1, 4), rng.integers(1, 5)
        grids.append(FeatureGrid(Tensor(rng.normal(size=(h, w, 16))), np.ones((h, w), dtype=bool)))
    return grids


@pytest.fixture
def decoder(tiny_decoder_cfg, rng) -> Decoder:
    dec = Decoder(VOCAB, tiny_decoder_cfg, rng)
    for layer in dec.layers:
        if layer.cross_attn.self_params is not None:
            layer.cross_attn.self_params.w_g.data[...] = rng.normal(scale=0.5, size=(2, 2))
    return dec.eval()


def ln(v, gamma, beta):
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(var + 1e-5) * gamma + beta


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reference_layer(layer: DecoderLayer, x: np.ndarray, memory: np.ndarray, heads: int) -> np.ndarray:
    """A plain post-norm Transformer decoder layer written directly in numpy."""

    steps, d = x.shape
    dk = d // heads
    sa = layer.self_attn
    q = x @ sa.query.weight.data + sa.query.bias.data
    k = x @ sa.key.weight.data + sa.key.bias.data
    v = x @ sa.value.weight.data + sa.value.bias.data
    causal = np.tril(np.ones((steps, steps), dtype=bool))
    parts = []
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        scores = np.where(causal, q[:, cols] @ k[:, cols].T / math.sqrt(dk), -np.inf)
        parts.append(softmax(scores) @ v[:, cols])
    attended = np.concatenate(parts, axis=-1) @ sa.out.weight.data + sa.out.bias.data
    x1 = ln(x + attended, layer.norm_self.gamma.data, layer.norm_self.beta.data)

    ca = layer.cross_attn
    qc, kc, vc = x1 @ ca.w_q.data, memory @ ca.w_k.data, memory @ ca.w_v.data
    parts = []
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        parts.append(softmax(qc[:, cols] @ kc[:, cols].T / math.sqrt(dk)) @ vc[:, cols])
    crossed = np.concatenate(parts, axis=-1) @ ca.w_o.data
    x2 = ln(x1 + crossed, layer.norm_cross.gamma.data, layer.norm_cross.beta.data)

    hidden = np.maximum(x2 @ layer.ff_in.weight.data + layer.ff_in.bias.data, 0.0)
    ff = hidden @ layer.ff_out.weight.data + layer.ff_out.bias.data
    return ln(x2 + ff, layer.norm_ff.gamma.data, layer.norm_ff.beta.data)


class TestDecoderConfig:
    """Test configuration validation and guidance placement."""

    def test_neighbor_layers_exclude_the_last(self):
        """Test that the last layer cannot host neighbor-guidance."""
        with pytest.raises(ConfigError):
            DecoderConfig(num_layers=3, neighbor_guide_layers=(3,))

    def test_self_layers_within_range(self):
        with pytest.raises(ConfigError):
            DecoderConfig(num_layers=3, self_guide_layers=(2, 4))

    def test_heads_divide_model_dim(self):
        with pytest.raises(ConfigError):
            DecoderConfig(d_model=30, heads=4)

    def test_active_layers(self):
        """Test default placement: self in {2, 3}, neighbor in {2}, never layer 3."""
        cfg = DecoderConfig()
        assert [cfg.self_active(i) for i in (1, 2, 3)] == [False, True, True]
        assert [cfg.neighbor_active(i) for i in (1, 2, 3)] == [False, True, False]

    def test_zero_alpha_disables_neighbor(self):
        """Test that α = 0 behaves exactly like neighbor-guidance off."""
        assert not with_overrides(DecoderConfig(), alpha=0.0).neighbor_active(2)

    def test_overrides_are_validated(self):
        with pytest.raises(ConfigError):
            with_overrides(DecoderConfig(), dropout=1.5)

    def test_negative_alpha_is_accepted(self):
        """Test that any finite α is a valid runtime setting."""
        cfg = with_overrides(DecoderConfig(), alpha=-1.0)
        assert cfg.alpha == -1.0
        assert cfg.neighbor_active(2)

    def test_negative_alpha_decodes(self, decoder, grid):
        cfg = with_overrides(decoder.cfg, alpha=-1.0)
        hyp = greedy_decode(decoder, grid, cfg, max_len=4)
        assert np.isfinite(hyp.log_prob)


class TestDecoderLayer:
    """Test a single decoder layer."""

    def test_plain_configuration_matches_reference(self, tiny_decoder_cfg, grid, rng):
        """Test that with all guidance and ARM off the layer is a plain Transformer layer."""
        cfg = dataclasses.replace(tiny_decoder_cfg, self_guide=False, neighbor_guide=False, use_arm=False)
        layer = DecoderLayer(2, cfg, rng).eval()
        x = rng.normal(size=(1, 4, 16))
        out, cross = decoder_layer(layer, Tensor(x), grid, GuidanceState(3), cfg)
        expected = reference_layer(layer, x[0], grid.flat().data[0], cfg.heads)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-10)
        assert cross.attention.shape == (1, 2, 4, 6)

    def test_first_step_attends_to_sos_only(self, decoder, grid):
        """Test that one query row yields a valid causal step."""
        state = decoder.new_state()
        logits, results = decoder(grid, np.array([[SOS]]), state)
        assert logits.shape == (1, 1, VOCAB)
        assert state.self_cache[0][0].shape[2] == 1
        assert state.step == 1

    def test_out_of_range_layer(self, tiny_decoder_cfg, grid, rng):
        """Test that a layer index beyond num_layers raises UsageError."""
        layer = DecoderLayer(4, tiny_decoder_cfg, rng)
        with pytest.raises(UsageError):
            decoder_layer(layer, Tensor(rng.normal(size=(1, 1, 16))), grid, GuidanceState(3), tiny_decoder_cfg)

    def test_neighbor_guidance_adds_no_parameters(self, tiny_decoder_cfg):
        """Test that parameter counts match with neighbor-guidance on and off."""
        on = Decoder(VOCAB, tiny_decoder_cfg, np.random.default_rng(0))
        off = Decoder(VOCAB, dataclasses.replace(tiny_decoder_cfg, neighbor_guide=False), np.random.default_rng(0))
        no_self = Decoder(VOCAB, dataclasses.replace(tiny_decoder_cfg, self_guide=False), np.random.default_rng(0))
        assert on.num_parameters() == off.num_parameters()
        assert no_self.num_parameters() < on.num_parameters()


class TestTeacherForcing:
    """Test the training forward pass."""

    def test_shift_targets(self):
        """Test SOS-prefixed inputs and EOS-terminated outputs with PAD."""
        inputs, outputs = shift_targets([[5, 6], [7]])
        assert inputs.tolist() == [[SOS, 5, 6], [SOS, 7, PAD]]
        assert outputs.tolist() == [[5, 6, EOS], [7, EOS, PAD]]

    def test_empty_target(self):
        with pytest.raises(InputError):
            shift_targets([[5], []])

    def test_initial_loss_is_log_vocab(self, decoder, batch_grid):
        """Test that a fresh decoder is close to uniform."""
        _, loss = teacher_forced_forward(decoder, batch_grid, [[4, 5, 6], [7, 8]])
        assert abs(loss.item() - math.log(VOCAB)) < 0.1

    def test_padding_does_not_leak(self, decoder, batch_grid):
        """Test that a short target's logits ignore its batch partner and the padding."""
        batched, _ = teacher_forced_forward(decoder, batch_grid, [[4, 5], [7, 8, 9, 10]])
        single_grid = FeatureGrid(batch_grid.features[0:1], batch_grid.mask[0:1])
        single, _ = teacher_forced_forward(decoder, single_grid, [[4, 5]])
        np.testing.assert_allclose(batched.data[0, :3], single.data[0], atol=1e-10)

    def test_causality(self, decoder, grid):
        """Test that changing a later token leaves earlier logits untouched."""
        first, _ = teacher_forced_forward(decoder, grid, [[4, 5, 6, 7]])
        second, _ = teacher_forced_forward(decoder, grid, [[4, 5, 9, 7]])
        np.testing.assert_allclose(first.data[0, :3], second.data[0, :3], atol=1e-12)
        assert not np.allclose(first.data[0, 3], second.data[0, 3])

    def test_incremental_matches_parallel(self, decoder, grid):
        """Test that step-by-step decoding reproduces the parallel pass (guidance off)."""
        cfg = with_overrides(decoder.cfg, neighbor_guide=False)
        tokens = np.array([[SOS, 5, 7, 9, 3]])
        parallel, _ = decoder(grid, tokens, decoder.new_state(), cfg)
        state = decoder.new_state()
        steps = [decoder(grid, tokens[:, t : t + 1], state, cfg)[0].data for t in range(tokens.shape[1])]
        np.testing.assert_allclose(np.concatenate(steps, axis=1), parallel.data, atol=1e-9)

    def test_neighbor_in_training(self, tiny_decoder_cfg, batch_grid, rng):
        """Test the step-sequential training pass with neighbor-guidance on."""
        cfg = dataclasses.replace(tiny_decoder_cfg, neighbor_in_training=True)
        dec = Decoder(VOCAB, cfg, rng)
        logits, loss = teacher_forced_forward(dec, batch_grid, [[4, 5, 6], [7]])
        assert logits.shape == (2, 4, VOCAB)
        loss.backward()
        assert dec.layers[1].cross_attn.w_q.grad is not None

    def test_overfits_a_single_batch(self, tiny_decoder_cfg, batch_grid, rng):
        """Test that gradient descent drives the loss down on a fixed batch."""
        dec = Decoder(VOCAB, tiny_decoder_cfg, rng)
        optimizer = SGD(dec.parameters(), OptimizerConfig(lr=0.05, weight_decay=0.0, momentum=0.9))
        targets = [[4, 5, 6], [7, 8]]
        losses = []
        for _ in range(50):
            optimizer.zero_grad()
            _, loss = teacher_forced_forward(dec, batch_grid, targets)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        assert losses[-1] < 0.7 * losses[0]


class TestAutoregressiveDecode:
    """Test greedy and beam decoding."""

    def test_greedy_matches_teacher_forcing_its_output(self, decoder):
        """Test that re-feeding the greedy output reproduces the same argmax at every step."""
        cfg = with_overrides(decoder.cfg, neighbor_guide=False)
        for grid in random_grids(50, seed=5):
            hyp = greedy_decode(decoder, grid, cfg, max_len=6)
            output = hyp.output_tokens()
            if not output:
                assert hyp.tokens == [SOS, EOS]
                continue
            logits, _ = teacher_forced_forward(decoder, grid, [output], cfg)
            predicted = logits.data[0].argmax(axis=-1)
            assert predicted[: len(output)].tolist() == output
            if hyp.finished:
                assert predicted[len(output)] == EOS

    def test_neighbor_replay(self, decoder):
        """Test that layer 2's neighbor map is the head mean of the previous final attention."""
        for grid in random_grids(20, seed=6):
            hyp = greedy_decode(decoder, grid, max_len=6, record_trace=True)
            trace = AttentionTrace.from_hypothesis(hyp, (grid.h0, grid.w0))
            assert trace.num_steps == hyp.length
            assert trace.neighbor_map(0, 2) is None
            for t in range(1, trace.num_steps):
                np.testing.assert_allclose(
                    trace.neighbor_map(t, 2), trace.attention(t - 1, 3).mean(axis=0), atol=1e-12
                )
                assert trace.neighbor_map(t, 1) is None
                assert trace.neighbor_map(t, 3) is None

    def test_trace_rows(self, decoder, grid):
        """Test that the trace holds steps × layers × heads maps."""
        hyp = greedy_decode(decoder, grid, max_len=4, record_trace=True)
        trace = AttentionTrace.from_hypothesis(hyp, (grid.h0, grid.w0))
        assert len(trace.records()) == trace.num_steps * 3 * 2

    def test_truncation_flag(self, decoder, grid):
        """Test that never emitting EOS stops at max_len with the flag set."""
        decoder.proj.bias.data[EOS] = -1e3
        hyp = autoregressive_decode(decoder, grid, max_len=3)
        assert hyp.truncated and not hyp.finished
        assert hyp.length == 3

    def test_immediate_eos(self, decoder, grid):
        """Test that an EOS-first model returns an empty sequence."""
        decoder.proj.bias.data[EOS] = 1e3
        hyp = autoregressive_decode(decoder, grid, beam=2)
        assert hyp.finished
        assert hyp.output_tokens() == []

    def test_beam_never_worse_than_greedy(self, decoder, grid):
        """Test the returned beam hypothesis against the greedy one."""
        greedy = greedy_decode(decoder, grid, max_len=8)
        beam = autoregressive_decode(decoder, grid, beam=3, max_len=8)
        if greedy.finished:
            assert beam.finished
        if beam.finished == greedy.finished:
            assert beam.score >= greedy.score - 1e-12

    def test_decoding_is_deterministic(self, decoder, grid):
        """Test that two beam decodes of the same features agree."""
        first = autoregressive_decode(decoder, grid, beam=2, max_len=6)
        second = autoregressive_decode(decoder, grid, beam=2, max_len=6)
        assert first.tokens == second.tokens
        assert first.log_prob == second.log_prob

    def test_forked_states_are_independent(self, decoder, grid):
        """Test that advancing a fork leaves the parent state untouched."""
        state = decoder.new_state()
        with T.no_grad():
            decoder(grid, np.array([[SOS]]), state)
            child = state.fork()
            decoder(grid, np.array([[5]]), child)
        assert state.step == 1 and child.step == 2
        assert state.self_cache[0][0].shape[2] == 1
        assert not np.array_equal(state.coverage[0].data, child.coverage[0].data)
        assert not np.array_equal(state.neighbor_attention(), child.neighbor_attention())

    def test_invalid_beam(self, decoder, grid):
        with pytest.raises(UsageError):
            autoregressive_decode(decoder, grid, beam=0)

    def test_batched_grid_must_hold_one_image(self, decoder, batch_grid):
        with pytest.raises(InputError):
            autoregressive_decode(decoder, batch_grid)

    def test_threaded_batch_matches_sequential(self, decoder, batch_grid):
        """Test that worker threads do not change results."""
        grids = [batch_grid[0], batch_grid[1]]
        sequential = decode_batch(decoder, grids, max_len=5, jobs=1)
        threaded = decode_batch(decoder, grids, max_len=5, jobs=2)
        assert [h.tokens for h in sequential] == [h.tokens for h in threaded]

    def test_decoding_restores_training_mode(self, decoder, grid):
        decoder.train()
        greedy_decode(decoder, grid, max_len=2)
        assert decoder.training

    def test_decode_batch_restores_training_mode(self, decoder, batch_grid):
        decoder.train()
        decode_batch(decoder, [batch_grid[0], batch_grid[1]], max_len=2, jobs=2)
        assert decoder.training
        decoder.eval()
        decode_batch(decoder, [batch_grid[0]], max_len=2)
        assert not decoder.training

    def test_batch_order_does_not_change_results(self, decoder):
        grids = random_grids(6, seed=8)
        forward = decode_batch(decoder, grids, beam=3, max_len=5)
        backward = decode_batch(decoder, grids[::-1], beam=3, max_len=5)
        assert [h.tokens for h in forward] == [h.tokens for h in backward[::-1]]
        assert [h.log_prob for h in forward] == [h.log_prob for h in backward[::-1]]

    def test_uniform_scores_pick_the_smallest_sequence(self, decoder, grid):
        """Test that with every token equally likely the tie goes to the smallest sequence."""
        decoder.proj.weight.data[...] = 0.0
        decoder.proj.bias.data[...] = 0.0
        decoder.proj.bias.data[[PAD, SOS]] = -1e3
        for beam in (1, 2):
            hyp = autoregressive_decode(decoder, grid, beam=beam, max_len=4)
            assert hyp.tokens == [SOS, EOS]


class TestPrune:
    """Test candidate selection between beam steps."""

    def test_independent_of_candidate_order(self):
        rng = np.random.default_rng(9)
        scores = rng.choice([-1.0, -2.0, -3.0], size=12)
        candidates = [(float(s), (SOS, int(i), int(j))) for s, (i, j) in zip(scores, np.ndindex(3, 4))]
        expected = _prune(candidates, 5)
        for _ in range(20):
            order = rng.permutation(len(candidates))
            assert _prune([candidates[i] for i in order], 5) == expected

    def test_ties_go_to_the_smaller_sequence(self):
        candidates = [(-1.0, (SOS, 7)), (-1.0, (SOS, 3)), (-0.5, (SOS, 9)), (-1.0, (SOS, 5))]
        assert [c[1] for c in _prune(candidates, 3)] == [(SOS, 9), (SOS, 3), (SOS, 5)]
