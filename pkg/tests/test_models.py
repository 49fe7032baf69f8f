import warnings

import numpy as np
import pytest

from conftest import padded_batch, small_model
from siamsearch.errors import Unsupported
from siamsearch.losses import LossConfig
from siamsearch.models import ARCHS, ModelConfig, build, encode_code, encode_text, head_layer_sizes
from siamsearch.nn.optim import adam_step
from siamsearch.trainer import batch_loss


class TestConfig:
    def test_default_hidden(self):
        assert ModelConfig(arch="dcs").extraction_dim == 800
        assert ModelConfig(arch="bil_a").extraction_dim == 400

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelConfig(arch="cnn")
        with pytest.raises(ValueError):
            ModelConfig(s_emb=0)


class TestHeadSizes:
    def test_dcs_semb2(self):
        assert head_layer_sizes(800, 2, dcs=True) == [
            (800, 800), (800, 400), (400, 300), (300, 200), (200, 50), (50, 2),
        ]

    def test_bil_cs_semb200(self):
        assert head_layer_sizes(400, 200, dcs=False) == [(400, 400), (400, 300), (300, 200)]

    def test_semb100(self):
        assert head_layer_sizes(400, 100, dcs=False) == [(400, 400), (400, 300), (300, 200), (200, 100)]

    def test_built_head_matches(self, toy_vocabs):
        m = small_model(toy_vocabs, "dcs", s_emb=2)
        assert [d.W.value.shape for d in m.head.dense] == head_layer_sizes(16, 2, True)
        assert len(m.head.norms) == len(m.head.dense) - 1


class TestBuild:
    def test_seed_determinism(self, toy_vocabs):
        a = small_model(toy_vocabs, seed=3)
        b = small_model(toy_vocabs, seed=3)
        c = small_model(toy_vocabs, seed=4)
        assert a.digest() == b.digest() != c.digest()
        for (na, pa), (nb, pb) in zip(a.named_state(), b.named_state()):
            assert na == nb and np.array_equal(pa.value, pb.value)

    def test_bil_m_without_names(self, toy_vocabs):
        cfg = ModelConfig(arch="bil_m", embed_dim=4, lstm_hidden=4, vocab_sizes={f: len(v) for f, v in toy_vocabs.items()})
        with pytest.raises(Unsupported):
            build(cfg, has_method_names=False)

    def test_non_standard_semb_warns(self, toy_vocabs):
        with pytest.warns(UserWarning, match="non-standard S_emb"):
            small_model(toy_vocabs, s_emb=7)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            small_model(toy_vocabs, s_emb=200)

    def test_extractors_share_nothing(self, toy_vocabs):
        m = small_model(toy_vocabs)
        code_ids = {id(p) for p in m.code_extractor.parameters()}
        text_ids = {id(p) for p in m.text_extractor.parameters()}
        assert code_ids and text_ids and not code_ids & text_ids
        code_arrays = {id(p.value) for p in m.code_extractor.parameters()}
        assert not code_arrays & {id(p.value) for p in m.text_extractor.parameters()}


class TestEncoding:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_output_dims(self, arch, toy_vocabs, toy_data):
        m = small_model(toy_vocabs, arch, s_emb=100)
        assert encode_code(m, toy_data, "extraction").shape == (len(toy_data), 16)
        assert encode_text(m, toy_data, "siamese").shape == (len(toy_data), 100)

    def test_shared_head_same_input_same_output(self, toy_vocabs):
        # in train mode each call normalises with its own batch statistics, so
        # identical inputs meet identical functions on the two branches
        m = small_model(toy_vocabs)
        x = np.random.default_rng(0).normal(size=(4, 16)).astype(np.float32)
        u, _ = m.head.forward(x, True, "code")
        v, _ = m.head.forward(x.copy(), True, "text")
        assert np.array_equal(u, v)

    @pytest.mark.parametrize("arch", ARCHS)
    def test_padding_invariance(self, arch, toy_vocabs, toy_data):
        m = small_model(toy_vocabs, arch)
        batch = toy_data.batch(np.arange(8))
        wide = padded_batch(batch, 10)
        for layer in ("extraction", "siamese"):
            for enc in (m.encode_code_batch, m.encode_text_batch):
                assert np.max(np.abs(enc(batch, layer) - enc(wide, layer))) < 1e-6

    def test_bad_layer(self, toy_vocabs, toy_data):
        with pytest.raises(ValueError):
            small_model(toy_vocabs).encode_code_batch(toy_data.batch([0]), "middle")


class TestWeightSharing:
    def test_head_is_one_object_after_updates(self, toy_vocabs, toy_data):
        m = small_model(toy_vocabs, "bil_a")
        lc = LossConfig("cosine_contrastive")
        rng = np.random.default_rng(0)
        for t in range(1, 4):
            idx = rng.choice(len(toy_data), 8, replace=False)
            m.zero_grad()
            batch_loss(m, toy_data.batch(idx), lc, np.roll(np.arange(8), 1))
            adam_step(m.parameters(), 1e-3, t)
        # both branches run through the same head instance, so the storage is literally one
        names = [n for n, _ in m.named_state() if n.startswith("head.")]
        assert len(names) == len(set(names))
        u, _ = m.head.forward(np.ones((2, 16), np.float32), False, "text")
        assert np.array_equal(u[0], u[1])


class TestBranchStatistics:
    def test_running_stats_per_branch_parameters_shared(self, toy_vocabs, toy_data):
        m = small_model(toy_vocabs)
        m.forward_branches(toy_data.batch(np.arange(8)), train=True)
        assert not np.array_equal(m.head.code_stats[0].running_mean.value, m.head.text_stats[0].running_mean.value)
        assert not hasattr(m.head.norms[0], "running_mean")
        names = [n for n, _ in m.named_state()]
        assert "head.code_stats.0.running_var" in names and "head.text_stats.0.running_var" in names

    def test_inference_reads_own_branch(self, toy_vocabs, toy_data):
        m = small_model(toy_vocabs)
        batch = toy_data.batch(np.arange(8))
        m.forward_branches(batch, train=True)
        before = m.encode_code_batch(batch)
        for s in m.head.text_stats:
            s.running_mean.value += 5.0
        assert np.array_equal(m.encode_code_batch(batch), before)
        assert not np.array_equal(m.encode_text_batch(batch), m.encode_code_batch(batch))

    def test_unknown_branch(self, toy_vocabs):
        with pytest.raises(ValueError):
            small_model(toy_vocabs).head.forward(np.ones((2, 16), np.float32), False, "both")
