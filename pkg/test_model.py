"""
Toy transformer: interventions, decoding and the TWB1 / TVS1 / HSC1 containers.
"""
import json
import struct

import numpy as np
import pytest

from icl_lab.errors import (
    DegenerateCloud,
    InvalidIntervention,
    MagicMismatch,
    MissingTrace,
    SequenceTooLong,
    ShapeMismatch,
    TruncatedDump,
    TruncatedPayload,
)
from icl_lab.hidden_io import HiddenCloud, read_dump, write_dump
from icl_lab.model import (
    HeadId,
    InterventionSpec,
    ModelBundle,
    ResidualPerturbation,
    TraceSpec,
    decode_with_trace,
    forward,
    greedy_decode,
    head_contribution,
    load_model,
    save_model,
)
from icl_lab.tvs_filter import TVSFilter, load_filter, save_filter


@pytest.fixture
def tokens(tiny_prompts):
    return list(tiny_prompts[0].token_ids)


@pytest.fixture
def filt(tiny_model):
    return TVSFilter.random_init(tiny_model.config.d_model, 4, 0, np.random.default_rng(5), dtype=np.float64)


class TestForward:

    def test_shapes_and_trace(self, tiny_model, tokens):
        logits, tr = forward(tiny_model, tokens, TraceSpec(layers=(0, 1), attention=True))
        assert logits.shape == (len(tokens), tiny_model.config.vocab_size)
        assert tr.resid(1).shape == (tiny_model.config.d_model,)
        probs = tr.attention(0)
        assert probs.shape == (2, len(tokens), len(tokens))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(np.triu(probs, k=1) == 0.0)

    def test_trace_capture_leaves_outputs_unchanged(self, tiny_model, tokens, filt):
        everything = TraceSpec(layers=(0, 1), positions="all", attention=True,
                               head_outputs=True, sublayer_outputs=True)
        for intervention in (None, InterventionSpec.inject(filt)):
            plain, _ = forward(tiny_model, tokens, intervention=intervention)
            traced, _ = forward(tiny_model, tokens, everything, intervention)
            np.testing.assert_array_equal(traced, plain)
            emitted, _ = decode_with_trace(tiny_model, tokens, 3, everything, intervention)
            assert emitted == greedy_decode(tiny_model, tokens, 3, intervention)

    def test_greedy_tie_goes_to_lowest_id(self, tiny_model, tokens):
        params = dict(tiny_model.params)
        params["W_U"] = np.zeros_like(params["W_U"])
        flat = ModelBundle(tiny_model.config, params, tiny_model.vocab)
        assert greedy_decode(flat, tokens, 3) == [0, 0, 0]
        # two tied winners above every other (zero) logit
        params["W_U"] = np.zeros_like(params["W_U"])
        params["W_U"][:, [5, 3]] = 1.0
        logits, _ = forward(ModelBundle(tiny_model.config, params, tiny_model.vocab), tokens)
        if logits[-1, 3] < 0:
            params["W_U"][:, [5, 3]] = -1.0
        tied = ModelBundle(tiny_model.config, params, tiny_model.vocab)
        logits, _ = forward(tied, tokens)
        assert logits[-1, 3] == logits[-1, 5] > 0.0
        assert greedy_decode(tied, tokens, 1) == [3]

    def test_missing_trace(self, tiny_model, tokens):
        _, tr = forward(tiny_model, tokens, TraceSpec(layers=(0,)))
        with pytest.raises(MissingTrace):
            tr.resid(1)

    def test_sequence_too_long(self, tiny_model):
        with pytest.raises(SequenceTooLong):
            forward(tiny_model, [1] * (tiny_model.config.max_seq + 1))

    def test_prefix_invariance(self, tiny_model, tokens):
        full, _ = forward(tiny_model, tokens)
        prefix, _ = forward(tiny_model, tokens[:5])
        np.testing.assert_allclose(full[:5], prefix, atol=1e-12)


class TestFilterInjection:

    def test_context_blocked_after_injection(self, tiny_model, tokens, filt):
        T = len(tokens)
        injected = InterventionSpec.inject(filt)
        base, _ = forward(tiny_model, tokens, intervention=injected)
        rng = np.random.default_rng(9)
        for position in (0, T // 2, T - 2):
            delta = rng.standard_normal(tiny_model.config.d_model)
            perturbed = InterventionSpec(injection=injected.injection,
                                         perturbation=ResidualPerturbation(0, position, delta))
            logits, _ = forward(tiny_model, tokens, intervention=perturbed)
            assert np.max(np.abs(logits[-1] - base[-1])) <= 1e-12
            assert np.max(np.abs(logits[position] - base[position])) > 0.0

    def test_without_injection_context_matters(self, tiny_model, tokens):
        base, _ = forward(tiny_model, tokens)
        delta = np.ones(tiny_model.config.d_model)
        logits, _ = forward(tiny_model, tokens,
                            intervention=InterventionSpec(perturbation=ResidualPerturbation(0, 0, delta)))
        assert np.max(np.abs(logits[-1] - base[-1])) > 1e-9

    def test_identity_filter_at_last_layer_is_noop(self, tiny_model, tokens):
        last = tiny_model.config.n_layers - 1
        ident = TVSFilter.identity(tiny_model.config.d_model, last, dtype=np.float64)
        base, _ = forward(tiny_model, tokens)
        logits, _ = forward(tiny_model, tokens, intervention=InterventionSpec.inject(ident))
        np.testing.assert_allclose(logits, base, atol=1e-12)

    def test_zero_filter_erases_the_prompt(self, tiny_model, tiny_prompts):
        first, other = list(tiny_prompts[0].token_ids), list(tiny_prompts[-1].token_ids)
        assert first != other
        for layer in range(tiny_model.config.n_layers):
            zero = TVSFilter.zeros(tiny_model.config.d_model, 4, layer, dtype=np.float64)
            a, _ = forward(tiny_model, first, intervention=InterventionSpec.inject(zero))
            b, _ = forward(tiny_model, other, intervention=InterventionSpec.inject(zero))
            np.testing.assert_array_equal(a[-1], b[-1])

    def test_identity_filter_on_single_token_every_layer(self, tiny_model, tokens):
        single = tokens[:1]
        clean, _ = forward(tiny_model, single)
        for layer in range(tiny_model.config.n_layers):
            ident = TVSFilter.identity(tiny_model.config.d_model, layer, dtype=np.float64)
            logits, _ = forward(tiny_model, single, intervention=InterventionSpec.inject(ident))
            np.testing.assert_allclose(logits, clean, atol=1e-12)

    def test_bad_interventions(self, tiny_model, tokens, filt):
        with pytest.raises(InvalidIntervention):
            forward(tiny_model, tokens, intervention=InterventionSpec.inject(filt, layer=7))
        narrow = TVSFilter.random_init(8, 2, 0, np.random.default_rng(0), dtype=np.float64)
        with pytest.raises(InvalidIntervention):
            forward(tiny_model, tokens, intervention=InterventionSpec.inject(narrow))
        with pytest.raises(InvalidIntervention):
            forward(tiny_model, tokens, intervention=InterventionSpec.ablation([(0, 5)]))

    def test_decode_first_step_matches_forward(self, tiny_model, tokens, filt):
        injected = InterventionSpec.inject(filt)
        logits, _ = forward(tiny_model, tokens, intervention=injected)
        emitted = greedy_decode(tiny_model, tokens, 3, injected)
        assert len(emitted) == 3
        assert emitted[0] == int(np.argmax(logits[-1]))

    def test_decode_pins_injection_position(self, tiny_model, tokens, filt):
        injected = InterventionSpec.inject(filt)
        emitted = greedy_decode(tiny_model, tokens, 2, injected)
        pinned = InterventionSpec.inject(filt, position=len(tokens) - 1)
        logits, _ = forward(tiny_model, tokens + [emitted[0]], intervention=pinned)
        assert emitted[1] == int(np.argmax(logits[-1]))


class TestHeadAblation:

    def test_full_layer_ablation_equals_zeroed_output(self, tiny_model, tokens):
        cfg = tiny_model.config
        ablated, _ = forward(tiny_model, tokens,
                             intervention=InterventionSpec.ablation([(0, h) for h in range(cfg.n_heads)]))
        params = dict(tiny_model.params)
        params["blocks.0.W_O"] = np.zeros_like(params["blocks.0.W_O"])
        zeroed, _ = forward(ModelBundle(cfg, params, tiny_model.vocab), tokens)
        np.testing.assert_allclose(ablated, zeroed, atol=1e-12)

    def test_single_head_removes_its_contribution(self, tiny_model, tokens):
        head = HeadId(1, 1)
        spec = TraceSpec(sublayer_outputs=True, internal_layers=(1,))
        _, clean = forward(tiny_model, tokens, spec)
        _, ablated = forward(tiny_model, tokens, spec, InterventionSpec.ablation([head]))
        expected = clean[(1, "attn_out")] - head_contribution(tiny_model, tokens, head)
        np.testing.assert_allclose(ablated[(1, "attn_out")], expected, atol=1e-10)

    def test_head_contributions_sum_to_sublayer(self, tiny_model, tokens):
        _, tr = forward(tiny_model, tokens, TraceSpec(sublayer_outputs=True))
        total = sum(head_contribution(tiny_model, tokens, HeadId(0, h)) for h in range(2))
        np.testing.assert_allclose(total, tr[(0, "attn_out")], atol=1e-10)

    def test_unknown_head(self, tiny_model, tokens):
        with pytest.raises(InvalidIntervention):
            head_contribution(tiny_model, tokens, HeadId(0, 9))


class TestContainers:

    def test_twb1_round_trip(self, model_file, tiny_model):
        loaded = load_model(model_file)
        assert loaded.config == tiny_model.config
        assert loaded.vocab == tiny_model.vocab
        assert loaded.meta == tiny_model.meta
        for name, arr in tiny_model.params.items():
            np.testing.assert_array_equal(loaded[name], arr.astype(np.float32))
        assert loaded.checksum() == load_model(model_file).checksum()

    def test_twb1_bad_magic(self, model_file):
        blob = model_file.read_bytes()
        model_file.write_bytes(b"XXXX" + blob[4:])
        with pytest.raises(MagicMismatch):
            load_model(model_file)

    def test_twb1_truncated(self, model_file):
        blob = model_file.read_bytes()
        model_file.write_bytes(blob[:-10])
        with pytest.raises(TruncatedPayload):
            load_model(model_file)

    def test_twb1_manifest_shape_mismatch(self, model_file):
        blob = model_file.read_bytes()
        (hlen,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
        d, v = header["tensors"]["W_U"]["shape"]
        header["tensors"]["W_U"]["shape"] = [d, v + 1]
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        model_file.write_bytes(blob[:4] + struct.pack("<I", len(raw)) + raw + blob[8 + hlen:])
        with pytest.raises(ShapeMismatch):
            load_model(model_file)

    def test_bundle_shape_check(self, tiny_model):
        params = dict(tiny_model.params)
        params["tok_emb"] = params["tok_emb"][:-1]
        with pytest.raises(ShapeMismatch):
            ModelBundle(tiny_model.config, params, tiny_model.vocab)

    def test_tvs1_round_trip(self, tmp_path, filt):
        labelled = TVSFilter.random_init(16, 3, 1, np.random.default_rng(2), label_map={"red": [4]})
        loaded = load_filter(save_filter(labelled, tmp_path / "f.tvs"))
        assert (loaded.layer, loaded.r, loaded.label_map) == (1, 3, {"red": [4]})
        np.testing.assert_array_equal(loaded.W_enc, labelled.W_enc)
        np.testing.assert_array_equal(loaded.W_dec, labelled.W_dec)

    def test_tvs1_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tvs"
        path.write_bytes(b"TWB1" + bytes(8))
        with pytest.raises(MagicMismatch):
            load_filter(path)

    def test_filter_rank_above_width(self):
        with pytest.raises(ShapeMismatch):
            TVSFilter(np.zeros((2, 3)), np.zeros(3), np.zeros((3, 2)), layer=0)

    def test_hsc1_round_trip(self, tmp_path):
        cloud = HiddenCloud(np.arange(12, dtype=np.float64).reshape(4, 3), layer=2, k=8, mode="unseen")
        loaded = read_dump(write_dump(cloud, tmp_path / "c.hsc"))
        assert (loaded.n, loaded.d, loaded.layer, loaded.k, loaded.mode) == (4, 3, 2, 8, "unseen")
        np.testing.assert_array_equal(loaded.matrix, cloud.matrix)

    def test_hsc1_truncated(self, tmp_path):
        cloud = HiddenCloud(np.ones((3, 2)) * [[1.0], [2.0], [3.0]], layer=0, k=0, mode="gold")
        path = write_dump(cloud, tmp_path / "c.hsc")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(TruncatedDump):
            read_dump(path)

    def test_single_point_cloud(self):
        with pytest.raises(DegenerateCloud):
            HiddenCloud(np.ones((1, 3)), layer=0, k=0, mode="gold")
