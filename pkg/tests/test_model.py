import itertools

import pytest
import torch

from minotaur.divergence import VARIANCE_FLOOR, statistical_kl
from minotaur.model import (BOS, CHECKPOINT_HEADER, EOS, PAD, LatentParser, ModelConfig,
                            VariancePooler, beam_search, load_checkpoint, reparameterize,
                            save_checkpoint)


def tiny(**kw):
    cfg = dict(source_vocab_size=12, target_vocab_size=10, d=4, encoder_layers=1,
               decoder_layers=1, attention_heads=2, max_source_len=8, max_target_len=6, dropout=0.0)
    cfg.update(kw)
    torch.manual_seed(0)
    return LatentParser(ModelConfig(**cfg)).eval()


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            ModelConfig(5, 5, d=6, attention_heads=4)

    @pytest.mark.parametrize("kw", [dict(dropout=1.0), dict(d=0), dict(encoder_layers=0)])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(5, 5, **kw)


class TestEncode:
    def test_shapes(self):
        g = tiny().encode([4, 5, 6])
        assert tuple(g.means.shape) == (3, 4)
        assert tuple(g.variance.shape) == (4,)
        assert (g.variance > 0).all()

    def test_deterministic_without_dropout(self):
        m = tiny()
        a, b = m.encode([4, 5, 6]), m.encode([4, 5, 6])
        assert torch.equal(a.means, b.means) and torch.equal(a.variance, b.variance)

    def test_position_matters(self):
        m = tiny()
        a, b = m.encode([4, 5, 6]), m.encode([5, 4, 6])
        assert not torch.allclose(a.means, b.means)

    def test_errors(self):
        m = tiny()
        with pytest.raises(ValueError):
            m.encode(list(range(4, 13)))
        with pytest.raises(ValueError):
            m.encode([4, 99])
        with pytest.raises(ValueError):
            m.encode([])
        with pytest.raises(ValueError):
            m.encode_deterministic([4, 5])

    def test_deterministic_bottleneck(self):
        m = tiny(deterministic_bottleneck=True)
        h = m.encode_deterministic([4, 5, 6]).detach()
        assert tuple(h.shape) == (3, 4)
        assert torch.equal(h, m.encode_deterministic([4, 5, 6]))
        assert m.encode_batch(torch.tensor([[4, 5]])).variance is None
        with pytest.raises(ValueError):
            m.encode([4, 5])
        assert float(statistical_kl(h[0], h[0])) == pytest.approx(0.0, abs=1e-7)

    def test_masked_positions_do_not_reach_the_output(self):
        m = tiny()
        src = torch.tensor([[4, 5, PAD, PAD], [6, 7, 8, PAD]])
        mask = src != PAD
        other = src.clone()
        other[~mask] = 9
        a, b = m.encode_batch(src, mask), m.encode_batch(other, mask)
        torch.testing.assert_close(a.means[mask], b.means[mask])
        torch.testing.assert_close(a.variance, b.variance)
        gold = torch.tensor([[4, 5], [6, PAD]])
        la, _ = m.decode_teacher_forced(a.means, gold, mask)
        lb, _ = m.decode_teacher_forced(b.means, gold, mask)
        torch.testing.assert_close(la, lb)


class TestPooler:
    def test_single_position_is_its_projected_value(self):
        torch.manual_seed(1)
        p = VariancePooler(4, 2).eval()
        h = torch.randn(3, 1, 4)
        attn = p.attn
        v = torch.nn.functional.linear(h[:, 0], attn.in_proj_weight[8:], attn.in_proj_bias[8:])
        expect = p.out(attn.out_proj(v))
        torch.testing.assert_close(p.pre_activation(h), expect)

    def test_floor(self):
        torch.manual_seed(2)
        p = VariancePooler(4, 2)
        with torch.no_grad():
            p.out.bias.fill_(-1e4)
        out = p(torch.randn(2, 3, 4))
        assert (out >= VARIANCE_FLOOR).all()

    def test_masked_row_ignored(self):
        torch.manual_seed(3)
        p = VariancePooler(4, 2).eval()
        h = torch.randn(1, 3, 4)
        h2 = h.clone()
        h2[0, 2] = 50.0
        mask = torch.tensor([[True, True, False]])
        torch.testing.assert_close(p(h, mask), p(h2, mask))


class TestReparameterize:
    def test_floor_variance_is_almost_the_mean(self):
        mu = torch.randn(5, 3)
        var = torch.full((3,), VARIANCE_FLOOR)
        z = reparameterize(mu, var, torch.Generator().manual_seed(0))
        assert (z - mu).abs().max() < 1e-2

    def test_seeded(self):
        mu, var = torch.zeros(4, 2), torch.ones(2)
        a = reparameterize(mu, var, torch.Generator().manual_seed(5))
        b = reparameterize(mu, var, torch.Generator().manual_seed(5))
        assert torch.equal(a, b)

    def test_variance_scale_flag(self):
        mu, var = torch.zeros(1, 2), torch.tensor([4.0, 9.0])
        a = reparameterize(mu, var, torch.Generator().manual_seed(5))
        b = reparameterize(mu, var, torch.Generator().manual_seed(5), scale="variance")
        torch.testing.assert_close(b, a * var.sqrt())
        with pytest.raises(ValueError):
            reparameterize(mu, var, scale="other")


class TestDecoder:
    def test_cross_entropy_nonnegative(self):
        m = tiny()
        z = torch.randn(2, 3, 4)
        _, ce = m.decode_teacher_forced(z, torch.tensor([[4, 5, 6], [7, PAD, PAD]]))
        assert float(ce.detach()) >= 0

    def test_rigged_output_drives_cross_entropy_to_zero(self):
        m = tiny()
        with torch.no_grad():
            m.out.weight.zero_()
            m.out.bias.fill_(-50.0)
            m.out.bias[EOS] = 50.0
        _, ce = m.decode_teacher_forced(torch.randn(3, 4), torch.tensor([PAD]))
        assert float(ce) < 1e-12

    def test_overlong_target(self):
        m = tiny()
        with pytest.raises(ValueError):
            m.decode_teacher_forced(torch.randn(2, 4), torch.tensor([4] * 7))

    def test_gradient_against_finite_differences(self):
        m = tiny(d=8, encoder_layers=2, decoder_layers=2).double()
        z = torch.randn(1, 3, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        gold = torch.tensor([[4, 5, 6]])
        z.requires_grad_(True)
        _, ce = m.decode_teacher_forced(z, gold)
        (grad,) = torch.autograd.grad(ce, z)
        eps = 1e-6
        numeric = torch.zeros_like(z)
        with torch.no_grad():
            for idx in itertools.product(range(1), range(3), range(8)):
                zp, zm = z.clone(), z.clone()
                zp[idx] += eps
                zm[idx] -= eps
                numeric[idx] = (m.decode_teacher_forced(zp, gold)[1]
                                - m.decode_teacher_forced(zm, gold)[1]) / (2 * eps)
        rel = (grad - numeric).norm() / numeric.norm()
        assert float(rel) < 1e-3

    def test_finite_parameter_gradients(self):
        m = tiny(d=16, attention_heads=4)
        m.train()
        src = torch.randint(4, 12, (3, 5))
        post = m.encode_batch(src)
        z = m.sample(post, torch.Generator().manual_seed(0)).z
        _, ce = m.decode_teacher_forced(z, torch.randint(4, 10, (3, 4)), post.mask)
        (ce + post.variance.sum()).backward()
        for name, p in m.named_parameters():
            if p.grad is not None:
                assert torch.isfinite(p.grad).all(), name


def _rigged_step(vocab, seed):
    """Deterministic log-probs that depend on the whole prefix."""

    def step(prefixes, origin):
        rows = []
        for pre in prefixes.tolist():
            g = torch.Generator().manual_seed(seed * 1000 + hash(tuple(pre)) % 997)
            rows.append(torch.log_softmax(torch.randn(vocab, generator=g, dtype=torch.float64) * 2, 0))
        return torch.stack(rows)

    return step


def _exhaustive(step, vocab, bos, eos, max_len):
    best, count = None, 0
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(vocab), repeat=n):
            if eos in seq[:-1]:
                continue
            if n < max_len and seq[-1] != eos:
                continue
            count += 1
            score = 0.0
            for t in range(n):
                score += float(step(torch.tensor([[bos, *seq[:t]]]), torch.tensor([0]))[0, seq[t]])
            cand = (score / n, [s for s in seq if s != eos] if seq[-1] == eos else list(seq))
            if best is None or cand[0] > best[0]:
                best = cand
    return best[1], count


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(6))
    def test_wide_beam_equals_exhaustive_search(self, seed):
        step = _rigged_step(3, seed)
        expect, count = _exhaustive(step, 3, bos=0, eos=1, max_len=3)
        assert count == 15
        assert beam_search(step, 1, 0, 1, beam_width=27, max_len=3) == [expect]

    def test_width_one_is_greedy(self):
        m = tiny()
        z = torch.randn(2, 3, 4, generator=torch.Generator().manual_seed(4))
        got = m.beam_decode(z, beam_width=1)
        for b in range(2):
            prefix = [BOS]
            for _ in range(m.cfg.max_target_len + 1):
                tok = int(m.step_log_probs(z[b:b + 1], None, torch.tensor([prefix]))[0].argmax())
                if tok == EOS:
                    break
                prefix.append(tok)
            assert got[b] == prefix[1:]

    def test_deterministic_and_validated(self):
        m = tiny()
        z = torch.randn(3, 4)
        assert m.beam_decode(z, 3) == m.beam_decode(z, 3)
        with pytest.raises(ValueError):
            m.beam_decode(z, 0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = tiny()
        path = tmp_path / "ck.pt"
        save_checkpoint(path, m, ["a", "b"], ["c"], extra={"task": "sql"})
        m2, sv, tv, extra = load_checkpoint(path)
        assert sv == ["a", "b"] and tv == ["c"] and extra == {"task": "sql"}
        assert m2.cfg == m.cfg
        for (k, v), (_, w) in zip(m.state_dict().items(), m2.state_dict().items()):
            assert torch.equal(v, w), k
        assert torch.load(path, weights_only=False)["header"] == CHECKPOINT_HEADER

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.pt"
        torch.save({"header": "other"}, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)
