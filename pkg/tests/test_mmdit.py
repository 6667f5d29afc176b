import dataclasses
import math

import numpy as np
import pytest

from conftest import central_diff, rel_err
from mmdit_adapter.errors import ContractError, DimensionError
from mmdit_adapter.mmdit import (AdapterProbe, AttentionMode, BlockParams, MMDiT, ModelConfig, Rope,
                                 SubjectCondition, attn_map, block_forward, ca_image, ca_joint, dca, mma)
from mmdit_adapter.gradcheck import tiny_config
from mmdit_adapter.tensor import Tensor, grad, layer_norm, tsum

F64 = np.float64
D, H = 8, 2
TRAIN, INFER = AttentionMode.TRAIN_JOINT, AttentionMode.INFER_IMAGE_ONLY
LEGACY, TEXT_ONLY = AttentionMode.BOTH_BRANCHES_LEGACY, AttentionMode.TEXT_ONLY_PROBE


def T64(x):
    return Tensor(x, dtype=F64)


@pytest.fixture
def block(rng):
    return BlockParams(D, H, 2, rng, F64)


def np_softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def rope_oracle(x, positions, base):
    """Rotate consecutive pairs with complex multiplication; first half y, second half x."""
    L, dh = x.shape
    nfreq = dh // 4
    freqs = base ** (-np.arange(nfreq) / nfreq)
    out = np.empty_like(x)
    for t in range(L):
        y, xx = positions[t]
        angles = np.concatenate([y * freqs, xx * freqs])
        for k in range(dh // 2):
            z = complex(x[t, 2 * k], x[t, 2 * k + 1]) * complex(math.cos(angles[k]), math.sin(angles[k]))
            out[t, 2 * k], out[t, 2 * k + 1] = z.real, z.imag
    return out


def mma_oracle(T, X, p, grid=None, base=100.0):
    """Dense joint attention on the explicitly concatenated sequence."""
    n = T.shape[0]
    S = np.concatenate([T, X])
    tp, ip = p.txt, p.img

    def proj(name):
        w_t, b_t = getattr(tp, name + "_w").data, getattr(tp, name + "_b").data
        w_i, b_i = getattr(ip, name + "_w").data, getattr(ip, name + "_b").data
        return np.concatenate([T @ w_t + b_t, X @ w_i + b_i])

    q, k, v = proj("q"), proj("k"), proj("v")
    dh = D // H
    pos = [(0, 0)] * n + ([(i // grid, i % grid) for i in range(X.shape[0])] if grid else [])
    out = np.zeros_like(S)
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh = q[:, sl], k[:, sl]
        if grid:
            qh, kh = rope_oracle(qh, pos, base), rope_oracle(kh, pos, base)
        out[:, sl] = np_softmax(qh @ kh.T / math.sqrt(dh)) @ v[:, sl]
    return out[:n], out[n:]


def ca_oracle(Q, C, p):
    """Scalar-loop scaled dot-product cross-attention."""
    K, V = C @ p.adapter.k_w.data, C @ p.adapter.v_w.data
    dh = D // H
    out = np.zeros((Q.shape[0], D))
    for h in range(H):
        for i in range(Q.shape[0]):
            scores = [sum(Q[i, h * dh + a] * K[j, h * dh + a] for a in range(dh)) / math.sqrt(dh)
                      for j in range(C.shape[0])]
            mx = max(scores)
            ws = [math.exp(s - mx) for s in scores]
            tot = sum(ws)
            for j, wj in enumerate(ws):
                out[i, h * dh:(h + 1) * dh] += wj / tot * V[j, h * dh:(h + 1) * dh]
    return out


class TestMMA:
    def test_concatenated_sequence_oracle(self, block, rng):
        T, X = rng.standard_normal((3, D)), rng.standard_normal((9, D))
        t_mma, x_mma, _ = mma(T64(T), T64(X), block)
        ot, ox = mma_oracle(T, X, block)
        np.testing.assert_allclose(t_mma.data, ot, atol=1e-5)
        np.testing.assert_allclose(x_mma.data, ox, atol=1e-5)

    def test_concatenated_sequence_oracle_with_rotary(self, block, rng):
        T, X = rng.standard_normal((3, D)), rng.standard_normal((9, D))
        t_mma, x_mma, _ = mma(T64(T), T64(X), block, Rope(D // H, 3))
        ot, ox = mma_oracle(T, X, block, grid=3)
        np.testing.assert_allclose(t_mma.data, ot, atol=1e-5)
        np.testing.assert_allclose(x_mma.data, ox, atol=1e-5)

    def test_no_text_is_self_attention(self, block, rng):
        X = rng.standard_normal((4, D))
        t_mma, x_mma, _ = mma(T64(np.zeros((0, D))), T64(X), block)
        _, ox = mma_oracle(np.zeros((0, D)), X, block)
        assert t_mma.shape == (0, D)
        np.testing.assert_allclose(x_mma.data, ox, atol=1e-10)

    def test_single_image_token(self, block, rng):
        X = rng.standard_normal((1, D))
        _, x_mma, _ = mma(T64(np.zeros((0, D))), T64(X), block)
        np.testing.assert_allclose(x_mma.data, X @ block.img.v_w.data + block.img.v_b.data, atol=1e-12)

    def test_empty_image_rejected(self, block):
        with pytest.raises(ContractError):
            mma(T64(np.zeros((2, D))), T64(np.zeros((0, D))), block)

    def test_width_mismatch(self, block):
        with pytest.raises(DimensionError):
            mma(T64(np.zeros((2, D + 1))), T64(np.zeros((3, D))), block)


class TestCrossAttention:
    def test_single_reference_token(self, block, rng):
        C = rng.standard_normal((1, D))
        out = ca_image(T64(rng.standard_normal((5, D))), T64(C), block)
        np.testing.assert_allclose(out.data, np.repeat(C @ block.adapter.v_w.data, 5, 0), atol=1e-12)

    def test_zero_value_projection(self, block, rng):
        block.adapter.v_w.data[:] = 0
        out = ca_image(T64(rng.standard_normal((5, D))), T64(rng.standard_normal((4, D))), block)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_loop_oracle(self, block, rng):
        Q, C = rng.standard_normal((5, D)), rng.standard_normal((4, D))
        np.testing.assert_allclose(ca_image(T64(Q), T64(C), block).data, ca_oracle(Q, C, block), atol=1e-5)

    def test_no_reference_rejected(self, block, rng):
        with pytest.raises(ContractError):
            ca_image(T64(rng.standard_normal((5, D))), T64(np.zeros((0, D))), block)

    def test_joint_bottom_rows_bit_identical(self, block, rng):
        Q, C = rng.standard_normal((7, D)), rng.standard_normal((4, D))
        joint = ca_joint(T64(Q), T64(C), block, 3).data
        np.testing.assert_array_equal(joint[3:], ca_image(T64(Q[3:]), T64(C), block).data)
        np.testing.assert_allclose(joint, ca_oracle(Q, C, block), atol=1e-5)

    def test_joint_without_text(self, block, rng):
        Q, C = T64(rng.standard_normal((4, D))), T64(rng.standard_normal((3, D)))
        np.testing.assert_array_equal(ca_joint(Q, C, block, 0).data, ca_image(Q, C, block).data)

    def test_attn_map_properties(self, block, rng):
        Q, C = T64(rng.standard_normal((5, D))), T64(rng.standard_normal((4, D)))
        amap = attn_map(Q, C, block)
        assert amap.shape == (5, 4)
        np.testing.assert_allclose(amap.sum(-1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(attn_map(Q, T64(rng.standard_normal((1, D))), block), 1.0)

    def test_attn_map_factorizes_single_head(self, rng):
        p = BlockParams(D, 1, 2, rng, F64)
        Q, C = T64(rng.standard_normal((5, D))), T64(rng.standard_normal((4, D)))
        amap = attn_map(Q, C, p)
        np.testing.assert_allclose(amap @ (C.data @ p.adapter.v_w.data), ca_image(Q, C, p).data, atol=1e-6)


def _inputs(rng, n=3, m=9, h=4):
    return T64(rng.standard_normal((n, D))), T64(rng.standard_normal((m, D))), T64(rng.standard_normal((h, D)))


class TestDCA:
    def test_zero_weight_is_plain_joint_attention(self, block, rng):
        T, X, C = _inputs(rng)
        t_mma, x_mma, _ = mma(T, X, block)
        for mode in AttentionMode:
            t_out, x_out = dca(T, X, [SubjectCondition(C, None, 0.0)], mode, block)
            np.testing.assert_array_equal(x_out.data, x_mma.data)
            np.testing.assert_array_equal(t_out.data, t_mma.data)

    def test_reduction_chain(self, block, rng):
        T, X, C = _inputs(rng)
        lam = 0.7
        t_mma, x_mma, Q = mma(T, X, block)
        single = dca(T, X, [SubjectCondition(C, None, lam)], INFER, block)[1].data
        masked = dca(T, X, [SubjectCondition(C, np.ones(9), lam)], INFER, block)[1].data
        t_joint, x_joint = dca(T, X, [SubjectCondition(C, None, lam)], TRAIN, block)
        adapted = x_mma.data + lam * ca_image(Q[3:], C, block).data
        np.testing.assert_allclose(single, adapted, atol=1e-6)
        np.testing.assert_allclose(masked, single, atol=1e-6)
        np.testing.assert_allclose(x_joint.data, single, atol=1e-6)
        np.testing.assert_allclose(t_joint.data, t_mma.data + lam * ca_image(Q[:3], C, block).data, atol=1e-6)

    def test_train_mode_without_text_equals_infer(self, block, rng):
        _, X, C = _inputs(rng)
        T = T64(np.zeros((0, D)))
        cond = [SubjectCondition(C, None, 1.3)]
        np.testing.assert_allclose(dca(T, X, cond, TRAIN, block)[1].data,
                                   dca(T, X, cond, INFER, block)[1].data, atol=1e-6)

    def test_infer_leaves_text_untouched(self, block, rng):
        T, X, C = _inputs(rng)
        t_mma, _, _ = mma(T, X, block)
        t_out, _ = dca(T, X, [SubjectCondition(C)], INFER, block)
        np.testing.assert_array_equal(t_out.data, t_mma.data)

    def test_text_only_probe(self, block, rng):
        T, X, C = _inputs(rng)
        t_mma, x_mma, _ = mma(T, X, block)
        t_out, x_out = dca(T, X, [SubjectCondition(C)], TEXT_ONLY, block)
        np.testing.assert_array_equal(x_out.data, x_mma.data)
        assert np.abs(t_out.data - t_mma.data).max() > 0

    def test_train_mode_contract(self, block, rng):
        T, X, C = _inputs(rng)
        with pytest.raises(ContractError):
            dca(T, X, [SubjectCondition(C), SubjectCondition(C)], TRAIN, block)
        mask = np.zeros(9)
        mask[:4] = 1
        with pytest.raises(ContractError):
            dca(T, X, [SubjectCondition(C, mask)], TRAIN, block)

    def test_bad_mask_length(self, block, rng):
        T, X, C = _inputs(rng)
        with pytest.raises(DimensionError):
            dca(T, X, [SubjectCondition(C, np.ones(8))], INFER, block)

    def test_mask_locality(self, block, rng):
        T, X, C1 = _inputs(rng)
        C2 = T64(rng.standard_normal((4, D)))
        m1 = (np.arange(9) < 4).astype(float)
        m2 = 1 - m1
        m2[8] = 0  # token 8 sits outside both masks
        probe = AdapterProbe()
        conds = [SubjectCondition(C1, m1, 0.8), SubjectCondition(C2, m2, 1.4)]
        _, x_out = dca(T, X, conds, INFER, block, probe=probe)
        _, x_mma, Q = mma(T, X, block)
        Q_X = Q[3:]
        expected = (0.8 * m1[:, None] * ca_image(Q_X, C1, block).data
                    + 1.4 * m2[:, None] * ca_image(Q_X, C2, block).data)
        np.testing.assert_allclose(x_out.data - x_mma.data, expected, atol=1e-12)
        np.testing.assert_array_equal((x_out.data - x_mma.data)[8], 0.0)

        probe2 = AdapterProbe()
        zeroed = [conds[0], SubjectCondition(T64(np.zeros((4, D))), m2, 1.4)]
        dca(T, X, zeroed, INFER, block, probe=probe2)
        inside = m1 == 1
        np.testing.assert_allclose(probe2.x_terms[0][inside], probe.x_terms[0][inside], atol=1e-7)

    def test_overlapping_masks_sum(self, block, rng):
        T, X, C1 = _inputs(rng)
        C2 = T64(rng.standard_normal((4, D)))
        m1, m2 = (np.arange(9) < 6).astype(float), (np.arange(9) >= 3).astype(float)
        _, x_out = dca(T, X, [SubjectCondition(C1, m1, 1.0), SubjectCondition(C2, m2, 0.5)], INFER, block)
        _, x_mma, Q = mma(T, X, block)
        expected = x_mma.data + m1[:, None] * ca_image(Q[3:], C1, block).data \
            + 0.5 * m2[:, None] * ca_image(Q[3:], C2, block).data
        np.testing.assert_allclose(x_out.data, expected, atol=1e-12)

    def test_weight_linearity(self, block, rng):
        T, X, C = _inputs(rng)
        _, x_mma, _ = mma(T, X, block)
        deltas = [dca(T, X, [SubjectCondition(C, None, lam)], INFER, block)[1].data - x_mma.data
                  for lam in (1.0, 2.0, -0.5)]
        np.testing.assert_allclose(deltas[1], 2 * deltas[0], atol=1e-12)
        np.testing.assert_allclose(deltas[2], -0.5 * deltas[0], atol=1e-12)

    def test_permutation_equivariance_without_rotary(self, block, rng):
        T, X, C = _inputs(rng)
        perm = rng.permutation(9)
        cond = [SubjectCondition(C, None, 1.0)]
        for mode in (INFER, TRAIN, LEGACY):
            t_a, x_a = dca(T, X, cond, mode, block)
            t_b, x_b = dca(T, T64(X.data[perm]), cond, mode, block)
            np.testing.assert_allclose(x_b.data, x_a.data[perm], atol=1e-10)
            np.testing.assert_allclose(t_b.data, t_a.data, atol=1e-10)


class TestBlock:
    def test_zero_mlp_reduces_to_attention_residual(self, block, rng):
        T, X, C = _inputs(rng)
        temb = T64(rng.standard_normal((1, D)))
        for br in (block.txt, block.img):
            br.fc2_w.data[:] = 0
            br.fc2_b.data[:] = 0
        block.mod_w.data[:] = 0  # no modulation: plain pre-norm
        t_out, x_out = block_forward(T, X, temb, [SubjectCondition(C, None, 0.0)], INFER, block)
        tn = layer_norm(T, block.txt.norm1_g, block.txt.norm1_b)
        xn = layer_norm(X, block.img.norm1_g, block.img.norm1_b)
        t_mma, x_mma, _ = mma(tn, xn, block)
        np.testing.assert_allclose(t_out.data[0], T.data + t_mma.data @ block.txt.out_w.data + block.txt.out_b.data,
                                   atol=1e-12)
        np.testing.assert_allclose(x_out.data[0], X.data + x_mma.data @ block.img.out_w.data + block.img.out_b.data,
                                   atol=1e-12)

    def test_stacking_keeps_shapes(self, rng):
        T, X, C = _inputs(rng)
        temb = T64(rng.standard_normal((1, D)))
        for _ in range(3):
            T, X = block_forward(T, X, temb, [SubjectCondition(C)], INFER, BlockParams(D, H, 2, rng, F64))
        assert T.shape == (1, 3, D) and X.shape == (1, 9, D)

    def test_block_gradient_matches_finite_differences(self, block, rng):
        T, X, C = _inputs(rng)
        temb = T64(rng.standard_normal((1, D)))
        rope = Rope(D // H, 3)
        probe_t, probe_x = rng.standard_normal((3, D)), rng.standard_normal((9, D))

        def loss():
            t, x = block_forward(T, X, temb, [SubjectCondition(C, None, 0.9)], TRAIN, block, rope)
            return tsum(t * T64(probe_t)) + tsum(x * T64(probe_x))

        params = list(block.named().values()) + [T, X, C, temb]
        _, grads = grad(loss, params)
        for p, g in zip(params, grads):
            u = rng.standard_normal(p.shape)
            u /= np.linalg.norm(u)
            orig = p.data

            def f(v, p=p):
                p.data = v
                return loss().item()

            num = central_diff(f, orig, u)
            p.data = orig
            assert rel_err(np.sum(g * u), num) < 1e-4


class TestDecoupling:
    def _run(self, model, mode, delta, rng_seed=3):
        rng = np.random.default_rng(rng_seed)
        cfg = model.cfg
        x = rng.standard_normal((1, cfg.image_size, cfg.image_size, cfg.channels))
        C, _ = model.reference_tokens(model.encode_reference(rng.uniform(-1, 1, x.shape)))
        probe = AdapterProbe(text_query_delta=delta)
        model.predict_velocity(x, np.array([0.4]), np.array([[0, 5, 13]]), [SubjectCondition(C)], mode, probe)
        return probe

    def test_text_perturbation_cannot_reach_image_adapter_in_infer_mode(self, tiny_model, rng):
        delta = rng.standard_normal((3, tiny_model.cfg.width)) * 5
        base, pert = self._run(tiny_model, INFER, None), self._run(tiny_model, INFER, delta)
        for a, b in zip(base.x_terms, pert.x_terms):
            np.testing.assert_array_equal(a, b)

    def test_text_perturbation_reaches_image_in_legacy_mode(self, rng):
        # the text-row adapter term changes T at layer l, joint attention mixes it
        # into X at layer l + 1, so the image-row term moves from layer l + 2 on
        model = MMDiT(dataclasses.replace(tiny_config(0), depth=3))
        delta = rng.standard_normal((3, model.cfg.width)) * 5
        base, pert = self._run(model, LEGACY, None), self._run(model, LEGACY, delta)
        np.testing.assert_array_equal(base.x_terms[0], pert.x_terms[0])
        assert np.abs(base.x_terms[2] - pert.x_terms[2]).max() > 0


class TestModel:
    def test_forward_shape(self, tiny_model, rng):
        cfg = tiny_model.cfg
        x = rng.standard_normal((2, 8, 8, 3))
        out = tiny_model.predict_velocity(x, np.array([0.1, 0.9]), np.array([[0, 4, 13], [1, 5, 14]]))
        assert out.shape == x.shape
        assert tiny_model.forward(x, 0.5, tiny_model.text_tokens(None)).shape == (2, cfg.num_tokens, cfg.patch_dim)

    def test_text_length_checked(self, tiny_model):
        with pytest.raises(DimensionError):
            tiny_model.text_tokens(np.array([[0, 1]]))

    def test_adapter_only_trainable_set(self, tiny_model):
        names = set(tiny_model.trainable(train_base=False))
        assert names and all(n.startswith(("hmoe.", "null_text")) or ".adapter." in n for n in names)
        assert "blocks.0.adapter.k_w" in names and "blocks.0.img.q_w" not in names
        assert set(tiny_model.trainable(True)) == set(tiny_model.params)

    def test_config_round_trip(self):
        cfg = ModelConfig(width=32, fusion="concat")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_every_block_has_adapter(self, tiny_model):
        for i in range(tiny_model.cfg.depth):
            assert f"blocks.{i}.adapter.k_w" in tiny_model.params
            assert f"blocks.{i}.adapter.v_w" in tiny_model.params

    def test_deterministic_construction(self):
        a, b = MMDiT(tiny_config(5)), MMDiT(tiny_config(5))
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
