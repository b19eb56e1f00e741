import math

import pytest
import torch

from esib.corpus import generate_synthetic
from esib.decoder import (
    DecoderState,
    DecoderStateError,
    beam_search,
    feasible_tokens,
    greedy_decode,
    greedy_decode_batch,
)
from esib.expr import BindingError, from_preorder, parse_preorder, to_preorder
from esib.network import ESIBNet, ModelConfig, make_batch, target_ids


def _setup(tiny_net, problems, i=0):
    tiny_net.eval()
    batch = make_batch(problems, tiny_net.vocab)
    enc = tiny_net.encode(batch)
    root = tiny_net.compressor(enc.pooled, None).initial_state
    return batch, enc, root


def _ids(net, preorder):
    return [net.vocab.output_to_id[str(t)] for t in to_preorder(parse_preorder(preorder))]


def test_attention_single_row_and_identical_rows(tiny_net):
    dec = tiny_net.decoder
    g = torch.Generator().manual_seed(0)
    row = torch.randn(1, 8, generator=g)
    root = torch.randn(8, generator=g)
    assert torch.allclose(dec.attention_context(row, root), row[0])
    same = row.expand(5, -1)
    assert torch.allclose(dec.attention_context(same, root, torch.randn(8, generator=g), row[0]), row[0], atol=1e-6)


def test_attention_weights_sum_to_one(tiny_net):
    dec = tiny_net.decoder
    g = torch.Generator().manual_seed(1)
    for _ in range(20):
        n, m = 3, 7
        mask = torch.rand(n, m, generator=g) > 0.3
        mask[:, 0] = True
        w = dec.attention_weights(torch.randn(n, 8, generator=g), torch.randn(n, 8, generator=g), torch.randn(n, m, 8, generator=g), mask)
        assert torch.allclose(w.sum(-1), torch.ones(n), atol=1e-6)
        assert (w[~mask] == 0).all()


def test_support_is_ops_consts_and_present_slots(tiny_net, tiny_problems):
    _, enc, root = _setup(tiny_net, tiny_problems)
    one = enc.select(0)
    out = tiny_net.decoder.step([DecoderState.start(root[0])], one, root[0])
    p = out.log_probs[0].exp()
    k = len(tiny_problems[0].qmap)
    support = (p > 0).sum().item()
    assert support == tiny_net.vocab.n_ops + tiny_net.vocab.n_consts + k
    assert p.sum().item() == pytest.approx(1.0, abs=1e-6)


def test_argmax_shift_invariance():
    logits = torch.randn(4, 9)
    assert torch.equal(torch.log_softmax(logits, -1).argmax(-1), torch.log_softmax(logits + 3.7, -1).argmax(-1))


@torch.no_grad()
def test_teacher_forced_matches_stepwise(tiny_net, tiny_problems):
    batch, enc, root = _setup(tiny_net, tiny_problems[:6])
    trace = tiny_net.decoder.teacher_forced(enc, root, batch.targets)
    for i, target in enumerate(batch.targets):
        tr = trace.problem_trace(i)
        assert len(tr) == len(target)
        state = DecoderState.start(root[i])
        one = enc.select(i)
        rows = []
        for tok in target:
            out = tiny_net.decoder.step([state], one, root[i])
            rows.append(out.log_probs[0])
            state.advance(tiny_net.decoder, tok, out.goal[0], out.context[0], one.quantities, float(out.log_probs[0, tok]))
        assert torch.allclose(torch.stack(rows), tr.log_probs, atol=1e-5)
        assert state.done
        nll = -sum(float(r[t]) for r, t in zip(rows, target))
        assert tr.nll().item() == pytest.approx(nll, rel=1e-5)
        assert tr.nll().item() >= 0
        assert -state.score == pytest.approx(nll, rel=1e-5)


def test_teacher_forced_rejects_absent_slot(tiny_net, tiny_problems):
    _, enc, root = _setup(tiny_net, tiny_problems[:1])
    bad = [tiny_net.vocab.slot_offset + len(tiny_problems[0].qmap)]
    with pytest.raises(BindingError):
        tiny_net.decoder.teacher_forced(enc, root, [bad])


def test_uniform_model_nll_is_log_support(tiny_net, tiny_problems):
    dec = tiny_net.decoder
    with torch.no_grad():
        for p in (dec.op_scores.weight, dec.op_scores.bias, dec.leaf_score.weight):
            p.zero_()
    batch, enc, root = _setup(tiny_net, tiny_problems[:5])
    trace = dec.teacher_forced(enc, root, batch.targets)
    for i, p in enumerate(tiny_problems[:5]):
        support = tiny_net.vocab.n_ops + tiny_net.vocab.n_consts + len(p.qmap)
        tr = trace.problem_trace(i)
        assert tr.nll().item() / len(tr) == pytest.approx(math.log(support), rel=1e-6)


def test_merges_and_final_state(tiny_net, tiny_problems):
    problems = generate_synthetic(30, 4)
    problem = next(p for p in problems if len(p.qmap) >= 3)
    vocab = tiny_net.vocab
    _, enc, root = _setup(tiny_net, [problem])
    one = enc.select(0)
    state = DecoderState.start(root[0])
    for tok in _ids(tiny_net, "× − N1 N2 N3"):
        out = tiny_net.decoder.step([state], one, root[0])
        state.advance(tiny_net.decoder, tok, out.goal[0], out.context[0], one.quantities)
    assert state.merges == 2
    assert state.done and len(state.subtrees) == 1 and state.subtrees[0][1]
    assert state.pushes - state.pops == 0
    assert str(state.expression(tiny_net.decoder, vocab.output_tokens).node) == "×"
    with pytest.raises(DecoderStateError):
        state.advance(tiny_net.decoder, 0, out.goal[0], out.context[0], one.quantities)


def test_children_deterministic(tiny_net):
    tiny_net.eval()
    dec = tiny_net.decoder
    g, c = torch.randn(2, 8), torch.randn(2, 8)
    ops = torch.tensor([0, 3])
    a, b = dec.spawn_children(g, c, ops), dec.spawn_children(g, c, ops)
    assert torch.equal(a[0], b[0]) and a[0].shape == (2, 8)


def test_feasibility_forces_completion(tiny_net, tiny_problems):
    _, enc, root = _setup(tiny_net, tiny_problems[:1])
    state = DecoderState.start(root[0])
    assert not feasible_tokens(state, tiny_net.decoder, 2, None)[: tiny_net.vocab.n_ops].any()
    assert feasible_tokens(state, tiny_net.decoder, 3, None).all()
    assert not feasible_tokens(state, tiny_net.decoder, 9, 0)[: tiny_net.vocab.n_ops].any()


def test_greedy_and_beam_outputs_parse(tiny_net, tiny_problems):
    _, enc, root = _setup(tiny_net, tiny_problems)
    for i in range(len(tiny_problems)):
        one = enc.select(i)
        g = greedy_decode(tiny_net.decoder, one, root[i], max_len=15)
        res = beam_search(tiny_net.decoder, one, root[i], 1, max_len=15)
        assert res.hypotheses[0].tokens == g.tokens
        assert len(g.tokens) <= 15
        from_preorder([tiny_net.output_token(t) for t in g.tokens])
        res5 = beam_search(tiny_net.decoder, one, root[i], 5, max_len=15)
        scores = [h.score for h in res5.hypotheses]
        assert scores == sorted(scores, reverse=True) and len(scores) == 5
        assert len({h.tokens for h in res5.hypotheses}) == 5
        for h in res5.hypotheses:
            from_preorder([tiny_net.output_token(t) for t in h.tokens])
    batched = greedy_decode_batch(tiny_net.decoder, enc, root, 15)
    assert batched == [greedy_decode(tiny_net.decoder, enc.select(i), root[i], 15).tokens for i in range(len(tiny_problems))]


def test_beam_rejects_bad_size(tiny_net, tiny_problems):
    _, enc, root = _setup(tiny_net, tiny_problems[:1])
    with pytest.raises(ValueError):
        beam_search(tiny_net.decoder, enc.select(0), root[0], 0)


def test_beam_empty_when_nothing_fits(tiny_net, tiny_problems):
    _, enc, root = _setup(tiny_net, tiny_problems[:1])
    res = beam_search(tiny_net.decoder, enc.select(0), root[0], 3, max_len=0)
    assert res.hypotheses == [] and res.diagnostics


def test_untrained_decodes_always_parse():
    from esib.verify import _untrained_decodes

    failures, n = _untrained_decodes(200, 5)
    assert failures == 0 and n == 200


def test_checkpoint_round_trip(tiny_net, tiny_problems, tmp_path):
    path = tmp_path / "m.npz"
    tiny_net.save(path, extra={"epoch": 3})
    loaded = ESIBNet.load(path)
    assert loaded.vocab.words == tiny_net.vocab.words
    for (k, a), (_, b) in zip(tiny_net.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    assert target_ids(tiny_problems[0], loaded.vocab) == target_ids(tiny_problems[0], tiny_net.vocab)
