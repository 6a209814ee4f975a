import numpy as np
import pytest
from scipy.stats import ortho_group

from minimoe.errors import ConfigError, ContractError
from minimoe.model import EncoderModel, encode
from minimoe.relation import RelationSet, distill_loss, relation_heads
from minimoe.tensor import Tensor
from tests.helpers import check_grad


def qkv(rng, n, d, batch=None, requires_grad=False):
    shape = (n, d) if batch is None else (batch, n, d)
    return [Tensor(rng.normal(size=shape), requires_grad=requires_grad) for _ in range(3)]


def fixed_set(rows):
    rel = Tensor(np.array(rows, dtype=np.float64).reshape(1, 2, 2))
    return RelationSet(rel, rel, rel, head_dim=1)


class TestRelationHeads:
    def test_shapes_differ_in_width_but_not_in_heads(self, rng):
        teacher = relation_heads(qkv(rng, 5, 16), 4)
        student = relation_heads(qkv(rng, 5, 8), 4)
        assert teacher.q_rel.shape == student.q_rel.shape == (4, 5, 5)
        assert teacher.head_dim == 4 and student.head_dim == 2

    def test_rows_are_stochastic(self, rng):
        rel = relation_heads(qkv(rng, 6, 8, batch=2), 2)
        for matrix in rel.matrices():
            np.testing.assert_allclose(matrix.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_single_token_gives_unit_matrix(self, rng):
        rel = relation_heads(qkv(rng, 1, 8), 2)
        np.testing.assert_allclose(rel.v_rel.data, np.ones((2, 1, 1)))

    def test_indivisible_width(self, rng):
        with pytest.raises(ConfigError):
            relation_heads(qkv(rng, 3, 8), 3)

    def test_padded_keys_get_no_mass(self, rng):
        mask = np.array([[True, True, True, False]])
        rel = relation_heads(qkv(rng, 4, 8, batch=1), 2, key_mask=mask)
        np.testing.assert_array_equal(rel.q_rel.data[..., 3], 0.0)
        np.testing.assert_array_equal(rel.row_mask, mask)

    def test_from_encoder_projections(self, tiny_model):
        out = encode(np.arange(5, 12), tiny_model)
        rel = relation_heads(out.final_qkv, tiny_model.config.relation_heads)
        assert rel.q_rel.shape == (2, 7, 7)
        assert rel.num_heads == 2 and rel.seq_len == 7


class TestDistillLoss:
    def test_hand_computed_example(self):
        teacher = fixed_set([[0.9, 0.1], [0.5, 0.5]])
        student = fixed_set([[0.5, 0.5], [0.5, 0.5]])
        assert distill_loss(teacher, student).item() == pytest.approx(0.55209, abs=1e-4)

    def test_identical_relations_give_zero(self, rng):
        rel = relation_heads(qkv(rng, 5, 8), 2)
        assert distill_loss(rel, rel).item() == pytest.approx(0.0, abs=1e-15)

    def test_token_permutation_invariance(self, rng):
        t_qkv, s_qkv = qkv(rng, 6, 16), qkv(rng, 6, 8)
        perm = rng.permutation(6)
        base = distill_loss(relation_heads(t_qkv, 4), relation_heads(s_qkv, 4)).item()
        permuted = distill_loss(relation_heads([Tensor(t.data[perm]) for t in t_qkv], 4),
                                relation_heads([Tensor(s.data[perm]) for s in s_qkv], 4)).item()
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_orthogonal_rotation_of_features(self, rng):
        t_qkv, s_qkv = qkv(rng, 5, 6), qkv(rng, 5, 6)
        rotation = ortho_group.rvs(6, random_state=3)
        base = distill_loss(relation_heads(t_qkv, 1), relation_heads(s_qkv, 1)).item()
        rotated = distill_loss(relation_heads(t_qkv, 1),
                               relation_heads([Tensor(s.data @ rotation) for s in s_qkv], 1)).item()
        assert rotated == pytest.approx(base, abs=1e-10)

    def test_padded_rows_are_excluded(self, rng):
        mask = np.array([[True, True, True, False]])
        t_qkv, s_qkv = qkv(rng, 4, 8, batch=1), qkv(rng, 4, 8, batch=1)
        full = distill_loss(relation_heads(t_qkv, 2, mask), relation_heads(s_qkv, 2, mask)).item()
        trimmed = distill_loss(relation_heads([Tensor(t.data[:, :3]) for t in t_qkv], 2),
                               relation_heads([Tensor(s.data[:, :3]) for s in s_qkv], 2)).item()
        assert full == pytest.approx(trimmed, abs=1e-9)

    def test_mismatched_shapes(self, rng):
        with pytest.raises(ContractError):
            distill_loss(relation_heads(qkv(rng, 5, 8), 2), relation_heads(qkv(rng, 5, 8), 4))
        with pytest.raises(ContractError):
            distill_loss(relation_heads(qkv(rng, 5, 8), 2), relation_heads(qkv(rng, 4, 8), 2))

    def test_gradient_reaches_student_projections(self, rng):
        teacher = relation_heads(qkv(rng, 4, 8), 2)
        student = qkv(rng, 4, 4, requires_grad=True)
        check_grad(lambda: distill_loss(teacher, relation_heads(student, 2)), student)

    def test_teacher_side_gets_no_gradient(self, rng):
        t_qkv = qkv(rng, 4, 8, requires_grad=True)
        s_qkv = qkv(rng, 4, 8, requires_grad=True)
        distill_loss(relation_heads(t_qkv, 2), relation_heads(s_qkv, 2)).backward()
        assert all(t.grad is None for t in t_qkv)
        assert all(s.grad is not None for s in s_qkv)

    def test_teacher_and_student_models(self, tiny_config, tiny_teacher_config):
        teacher = EncoderModel.initialize(tiny_teacher_config, seed=0)
        student = EncoderModel.initialize(tiny_config, seed=1)
        tokens = np.arange(5, 15).reshape(2, 5)
        t_rel = relation_heads(encode(tokens, teacher).final_qkv, 2)
        s_rel = relation_heads(encode(tokens, student).final_qkv, 2)
        loss = distill_loss(t_rel, s_rel)
        assert loss.item() >= 0.0
        loss.backward()
        assert np.abs(student.params["layer.0.mha.w_q"].grad).sum() > 0
