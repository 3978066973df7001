import numpy as np
import pytest

from semcross import backward, precision
from semcross import tensor as T
from semcross.backbone import aux_project, embed
from semcross.checkpoint import read_tensors, write_tensors
from semcross.errors import ConfigError, FormatError
from semcross.fusion import cam_forward, concat_fusion, se_forward
from semcross.model import Model, ModelConfig, episode_embeddings


@pytest.fixture(autouse=True)
def _f64():
    with precision("float64"):
        yield


def tiny_config(fusion="cam"):
    return ModelConfig(fusion=fusion, l_out=7, filters=(6, 5), in_channels=3)


def batches(seed=0, n_sup=4, n_qry=6, size=16):
    rng = np.random.default_rng(seed)
    sup = rng.uniform(size=(n_sup, 3, size, size))
    qry = rng.uniform(size=(n_qry, 3, size, size))
    return sup, qry


EXPECTED_BACKBONE = [
    "backbone.block1.conv.w",
    "backbone.block1.conv.b",
    "backbone.block1.bn.gamma",
    "backbone.block1.bn.beta",
    "backbone.block2.conv.w",
    "backbone.block2.conv.b",
    "backbone.block2.bn.gamma",
    "backbone.block2.bn.beta",
    "aux.proj.w",
    "aux.proj.b",
]


class TestAssembly:
    def test_parameter_names_none(self):
        m = Model.create(tiny_config("none"), seed=0)
        assert list(m.parameters()) == EXPECTED_BACKBONE

    def test_parameter_names_cam(self):
        m = Model.create(tiny_config("cam"), seed=0)
        assert list(m.parameters()) == EXPECTED_BACKBONE + [
            "cam.key.w",
            "cam.key.b",
            "cam.value.w",
            "cam.value.b",
        ]

    def test_parameter_names_se(self):
        m = Model.create(tiny_config("squeeze_excitation"), seed=0)
        assert list(m.parameters()) == EXPECTED_BACKBONE + [
            "se.fc1.w",
            "se.fc1.b",
            "se.fc2.w",
            "se.fc2.b",
        ]

    def test_state_includes_running_stats(self):
        m = Model.create(tiny_config("none"), seed=0)
        names = set(m.state_entries())
        assert "backbone.block1.bn.mean" in names
        assert "backbone.block2.bn.var" in names

    def test_shared_params_identical_across_variants(self):
        # name-keyed init streams: the backbone must not depend on which
        # fusion parameters also exist
        a = Model.create(tiny_config("none"), seed=3)
        b = Model.create(tiny_config("cam"), seed=3)
        c = Model.create(tiny_config("squeeze_excitation"), seed=3)
        for name, t in a.parameters().items():
            assert np.array_equal(t.data, b.parameters()[name].data)
            assert np.array_equal(t.data, c.parameters()[name].data)

    def test_seed_changes_params(self):
        a = Model.create(tiny_config(), seed=0)
        b = Model.create(tiny_config(), seed=1)
        assert not np.array_equal(a.backbone.aux_w.data, b.backbone.aux_w.data)

    def test_cam_scale_default_and_override(self):
        m = Model.create(tiny_config("cam"), seed=0)
        assert m.cam.scale == pytest.approx(1.0 / np.sqrt(7))
        cfg = tiny_config("cam")
        cfg.scale = 0.25
        assert Model.create(cfg, seed=0).cam.scale == 0.25

    def test_bad_fusion_rejected(self):
        with pytest.raises(ConfigError, match="fusion"):
            Model.create(ModelConfig(fusion="wat"), seed=0)


class TestEpisodeForward:
    @pytest.mark.parametrize("fusion", ["none", "cam", "squeeze_excitation", "concat"])
    def test_embedding_shapes(self, fusion):
        m = Model.create(tiny_config(fusion), seed=0)
        sup, qry = batches()
        fwd = episode_embeddings(m, sup, qry, training=False, need_aux=True)
        # 16x16 through two blocks -> 4x4 map, 5 channels, l_out 7
        dims = {"none": 5 * 16, "cam": 7 * 16, "squeeze_excitation": 5 * 16, "concat": 12 * 16}
        assert fwd.support_emb.data.shape == (4, dims[fusion])
        assert fwd.query_emb.data.shape == (6, dims[fusion])
        assert fwd.aux_patches.data.shape == (10, 16, 7)

    def test_aux_skipped_when_unused(self):
        m = Model.create(tiny_config("none"), seed=0)
        sup, qry = batches()
        fwd = episode_embeddings(m, sup, qry, training=False, need_aux=False)
        assert fwd.aux_patches is None

    @pytest.mark.parametrize("fusion", ["none", "cam", "squeeze_excitation", "concat"])
    def test_matches_channel_first_reference(self, fusion):
        m = Model.create(tiny_config(fusion), seed=5)
        sup, qry = batches(seed=7)
        fwd = episode_embeddings(m, sup, qry, training=False, need_aux=False)
        got = np.concatenate([fwd.support_emb.data, fwd.query_emb.data], axis=0)

        batch = np.concatenate([sup, qry], axis=0)
        fm = embed(batch, m.backbone, mode="eval")
        b = batch.shape[0]
        if fusion == "none":
            want = fm.data.reshape(b, -1)
        elif fusion == "cam":
            e_aux = aux_project(fm, m.backbone)
            want = cam_forward(fm, e_aux, m.cam).data.reshape(b, -1)
        elif fusion == "squeeze_excitation":
            want = se_forward(fm, m.se).data.reshape(b, -1)
        else:
            e_aux = aux_project(fm, m.backbone)
            want = concat_fusion(fm, e_aux).data.reshape(b, -1)
        assert np.allclose(got, want, atol=1e-12, rtol=1e-12)

    def test_train_mode_matches_reference_with_shared_stats(self):
        sup, qry = batches(seed=2)
        batch = np.concatenate([sup, qry], axis=0)
        a = Model.create(tiny_config("none"), seed=1)
        b = Model.create(tiny_config("none"), seed=1)
        fwd = episode_embeddings(a, sup, qry, training=True, need_aux=False)
        want = embed(batch, b.backbone, mode="train").data.reshape(batch.shape[0], -1)
        got = np.concatenate([fwd.support_emb.data, fwd.query_emb.data], axis=0)
        assert np.allclose(got, want, atol=1e-12, rtol=1e-12)
        # both paths advanced the running stats identically
        for ba, bb in zip(a.backbone.blocks, b.backbone.blocks):
            assert np.allclose(ba.bn_stats.mean, bb.bn_stats.mean, atol=1e-12)
            assert np.allclose(ba.bn_stats.var, bb.bn_stats.var, atol=1e-12)

    @pytest.mark.parametrize("fusion", ["none", "cam", "squeeze_excitation", "concat"])
    def test_gradients_reach_all_used_parameters(self, fusion):
        m = Model.create(tiny_config(fusion), seed=0)
        sup, qry = batches(n_sup=2, n_qry=2)
        need_aux = fusion in ("cam", "concat")
        fwd = episode_embeddings(m, sup, qry, training=True, need_aux=need_aux)
        loss = T.add(T.mean(fwd.support_emb), T.mean(fwd.query_emb))
        backward(loss)
        for name, t in m.parameters().items():
            uses_aux = fusion in ("cam", "concat")
            if name.startswith("aux.") and not uses_aux:
                assert t.grad is None
            else:
                assert t.grad is not None, f"no gradient for {name}"
                assert np.any(t.grad != 0) or "bn.beta" not in name

    def test_aux_params_untouched_when_fusion_blind(self):
        m = Model.create(tiny_config("squeeze_excitation"), seed=0)
        sup, qry = batches(n_sup=2, n_qry=2)
        fwd = episode_embeddings(m, sup, qry, training=True, need_aux=False)
        loss = T.mean(fwd.query_emb)
        backward(loss)
        assert m.backbone.aux_w.grad is None
        assert m.backbone.aux_b.grad is None


class TestCheckpointRoundTrip:
    def test_roundtrip_through_container(self, tmp_path):
        m = Model.create(tiny_config("cam"), seed=0)
        path = str(tmp_path / "model.sct1")
        write_tensors(path, m.state_entries())
        other = Model.create(tiny_config("cam"), seed=99)
        other.load_state(read_tensors(path))
        for name, arr in m.state_entries().items():
            got = other.state_entries()[name]
            assert np.array_equal(got, arr.astype(np.float32).astype(got.dtype)), name

    def test_missing_entry_rejected(self):
        m = Model.create(tiny_config("none"), seed=0)
        entries = m.state_entries()
        entries.pop("aux.proj.b")
        with pytest.raises(FormatError, match="missing"):
            m.load_state(entries)

    def test_unknown_entry_rejected(self):
        m = Model.create(tiny_config("none"), seed=0)
        entries = dict(m.state_entries())
        entries["bogus"] = np.zeros(3)
        with pytest.raises(FormatError, match="unknown"):
            m.load_state(entries)

    def test_shape_mismatch_rejected(self):
        m = Model.create(tiny_config("none"), seed=0)
        entries = dict(m.state_entries())
        entries["aux.proj.b"] = np.zeros(99)
        with pytest.raises(FormatError, match="shape"):
            m.load_state(entries)

    def test_loaded_stats_affect_eval(self, tmp_path):
        m = Model.create(tiny_config("none"), seed=0)
        sup, qry = batches(n_sup=2, n_qry=2)
        episode_embeddings(m, sup, qry, training=True, need_aux=False)  # move stats
        path = str(tmp_path / "m.sct1")
        write_tensors(path, m.state_entries())
        fresh = Model.create(tiny_config("none"), seed=0)
        before = episode_embeddings(fresh, sup, qry, training=False, need_aux=False)
        fresh.load_state(read_tensors(path))
        after = episode_embeddings(fresh, sup, qry, training=False, need_aux=False)
        assert not np.allclose(before.query_emb.data, after.query_emb.data)
