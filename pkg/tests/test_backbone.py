import dataclasses

import numpy as np
import pytest

from coopercept.backbone import PointEncoder, SparsePillarBackbone, student_forward, teacher_forward
from coopercept.config import PAPER, TINY, STUDENT_BLOCKS, TEACHER_BLOCKS, BackboneConfig
from coopercept.sparse_ops import SparseMap2D, densify, sparse_from_rows
from coopercept.tensor_core import Tensor, no_grad


def random_sparse(rng, h, w, c, density):
    n = max(1, int(density * h * w))
    lin = np.sort(rng.choice(h * w, n, replace=False))
    return sparse_from_rows(h, w, lin // w, lin % w, rng.normal(size=(n, c)).astype(np.float32))


def randomize_bn(model, rng, zero_shift):
    for name, p in model.named_parameters():
        if name.endswith("gamma"):
            p.data[:] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith("beta"):
            p.data[:] = 0 if zero_shift else rng.normal(0, 0.2, p.shape)
    for name, buf in model.named_buffers():
        if name.endswith(".var"):
            buf[:] = rng.uniform(0.5, 2.0, buf.shape)
        elif name.endswith(".mean"):
            buf[:] = 0 if zero_shift else rng.normal(0, 0.2, buf.shape)


class TestShapes:
    def test_paper_neck_shape(self):
        s = random_sparse(np.random.default_rng(0), 192, 704, 32, 0.01)
        for variant in ("student", "teacher"):
            bb = SparsePillarBackbone(PAPER.backbone(variant)).initialize(0).eval()
            assert bb.forward_sparse(s).shape == (1, 384, 48, 176)

    def test_tiny_shape(self):
        s = random_sparse(np.random.default_rng(0), 48, 48, 8, 0.1)
        for variant in ("student", "teacher"):
            bb = SparsePillarBackbone(TINY.backbone(variant)).initialize(0).eval()
            assert bb.forward_sparse(s).shape == (1, 48, 12, 12)
            with no_grad():
                assert bb(densify(s)).shape == (1, 48, 12, 12)

    def test_block_asymmetry(self):
        assert all(t >= s for t, s in zip(TEACHER_BLOCKS, STUDENT_BLOCKS))
        t = SparsePillarBackbone(PAPER.backbone("teacher"))
        s = SparsePillarBackbone(PAPER.backbone("student"))
        assert t.num_parameters() > s.num_parameters()

    def test_bad_input(self):
        bb = SparsePillarBackbone(TINY.backbone("student")).initialize(0).eval()
        with pytest.raises(ValueError, match="channels"):
            bb.forward_sparse(SparseMap2D.empty(48, 48, 5))
        with pytest.raises(ValueError, match="divisible"):
            bb.forward_sparse(SparseMap2D.empty(40, 44, 8))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BackboneConfig(stage_channels=(8,), blocks_per_stage=(2,))
        with pytest.raises(ValueError):
            BackboneConfig(variant="huge")


class TestZeroInput:
    @pytest.mark.parametrize("variant", ["student", "teacher"])
    def test_zero_in_zero_out(self, variant):
        bb = SparsePillarBackbone(TINY.backbone(variant)).initialize(1)
        x = Tensor(np.zeros((1, 8, 48, 48), np.float32))
        assert not np.any(bb(x, np.ones((48, 48), bool)).data)      # training-mode batch stats
        bb.eval()
        assert not np.any(bb.forward_sparse(SparseMap2D.empty(48, 48, 8)).data)
        assert not np.any(student_forward(SparseMap2D.empty(48, 48, 8), bb).data)

    def test_teacher_forward_requires_teacher(self):
        bb = SparsePillarBackbone(TINY.backbone("student")).eval()
        with pytest.raises(ValueError):
            teacher_forward(SparseMap2D.empty(48, 48, 8), bb)


class TestSparseDenseEquivalence:
    def test_matches_dense_oracle(self):
        """Sparse kernels against plain dense conv (zero BN shift, so 0 stays 0)."""
        rng = np.random.default_rng(0)
        cfg = TINY.backbone("student")
        sparse_bb = SparsePillarBackbone(cfg).initialize(0)
        dense_bb = SparsePillarBackbone(dataclasses.replace(cfg, use_sparse=False))
        randomize_bn(sparse_bb, rng, zero_shift=True)
        dense_bb.load_state_dict(sparse_bb.state_dict())
        sparse_bb.eval(), dense_bb.eval()
        for _ in range(50):
            s = random_sparse(rng, 48, 48, 8, rng.uniform(0.01, 0.3))
            a = sparse_bb.forward_sparse(s).data
            with no_grad():
                b = dense_bb(densify(s)).data
            np.testing.assert_allclose(a, b, atol=1e-5 * max(1.0, np.abs(b).max()), rtol=0)

    def test_masked_path_matches_sparse(self):
        rng = np.random.default_rng(1)
        bb = SparsePillarBackbone(TINY.backbone("teacher")).initialize(2)
        randomize_bn(bb, rng, zero_shift=False)
        bb.eval()
        for _ in range(10):
            s = random_sparse(rng, 48, 48, 8, rng.uniform(0.01, 0.2))
            with no_grad():
                masked = bb(densify(s), s.mask()).data
            np.testing.assert_allclose(bb.forward_sparse(s).data, masked, atol=1e-5)

    def test_sparse_path_is_inference_only(self):
        bb = SparsePillarBackbone(TINY.backbone("student"))
        with pytest.raises(RuntimeError):
            bb.forward_sparse(SparseMap2D.empty(48, 48, 8))


def test_point_encoder_end_to_end():
    from coopercept.lidar_sim import generate_scene
    from coopercept.pillars import pillarize
    frame = generate_scene(TINY.scene, 0)
    batch = pillarize(frame.ego.cloud, TINY.voxel)
    enc = PointEncoder(TINY.backbone("student"), TINY.voxel).initialize(0)
    out = enc(batch)
    assert out.shape == (1, 48, 12, 12)
    out.sum().backward()
    assert np.abs(enc.pfn.linear.weight.grad).sum() > 0
    enc.eval()
    with no_grad():
        dense = enc(batch).data
    np.testing.assert_allclose(enc.forward_sparse(batch).data, dense, atol=1e-5)
