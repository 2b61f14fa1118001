import math

import numpy as np
import pytest

from mmrescore import model as M
from mmrescore import objectives as O
from mmrescore import synth
from mmrescore import tensor as T
from mmrescore.data import MASK, Vocab
from mmrescore.tensor import Tensor

VOCAB_SIZE = 37


def cfg(**kw):
    return O.TrainConfig(**kw)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def test_masking_all_positions():
    rng = np.random.default_rng(0)
    c = cfg(mask_rate=1.0, corruption_split=(1.0, 0.0, 0.0))
    tokens = [10, 11, 12, 13]
    masked = O.apply_masking(tokens, VOCAB_SIZE, c, rng)
    assert masked.input_ids == [MASK] * 4
    assert masked.labels == tokens
    assert masked.mask_positions == [0, 1, 2, 3]


def test_masking_forces_one_selection():
    rng = np.random.default_rng(1)
    masked = O.apply_masking([10, 11, 12], VOCAB_SIZE, cfg(mask_rate=0.0), rng)
    assert len(masked.mask_positions) == 1


def test_masking_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        O.apply_masking([], VOCAB_SIZE, cfg(), np.random.default_rng(0))


def test_masking_statistics():
    rng = np.random.default_rng(7)
    c = cfg()
    tokens = list(range(5, 105))
    selected = 0
    outcomes = {"mask": 0, "random": 0, "keep": 0}
    total = 0
    for _ in range(1200):
        masked = O.apply_masking(tokens, VOCAB_SIZE, c, rng)
        total += len(tokens)
        selected += len(masked.mask_positions)
        for pos, label in zip(masked.mask_positions, masked.labels):
            got = masked.input_ids[pos]
            if got == MASK:
                outcomes["mask"] += 1
            elif got == label:
                outcomes["keep"] += 1
            else:
                outcomes["random"] += 1
    assert total >= 1e5
    rate = selected / total
    assert 0.14 <= rate <= 0.16
    assert abs(outcomes["mask"] / selected - 0.8) <= 0.02
    assert abs(outcomes["random"] / selected - 0.1) <= 0.02
    assert abs(outcomes["keep"] / selected - 0.1) <= 0.02


def test_masking_random_replacements_are_non_reserved():
    rng = np.random.default_rng(3)
    c = cfg(mask_rate=1.0, corruption_split=(0.0, 1.0, 0.0))
    masked = O.apply_masking(list(range(5, 25)), VOCAB_SIZE, c, rng)
    assert all(i >= 5 for i in masked.input_ids)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_mlm_loss_uniform_and_perfect():
    uniform = Tensor(np.zeros((3, 8)))
    np.testing.assert_allclose(O.mlm_loss(uniform, [0, 4, 7]).item(), math.log(8), atol=1e-12)
    peaked = np.zeros((2, 8))
    peaked[0, 1] = peaked[1, 2] = 40.0
    assert O.mlm_loss(Tensor(peaked), [1, 2]).item() < 1e-8


def test_mlm_loss_is_mean_over_positions():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 9))
    labels = [0, 1, 2, 3, 4]
    per_row = [T.cross_entropy(Tensor(logits[i]), labels[i]).item() for i in range(5)]
    np.testing.assert_allclose(O.mlm_loss(Tensor(logits), labels).item(),
                               np.mean(per_row), atol=1e-12)


def test_pool_pair_basics():
    a = Tensor([[1.0, 2.0]])
    l = Tensor([[3.0, 4.0]])
    pair = O.pool_pair(a, l, [True])
    np.testing.assert_array_equal(pair.a_bar.data, [1.0, 2.0])
    np.testing.assert_array_equal(pair.l_bar.data, [3.0, 4.0])

    const = Tensor(np.full((4, 3), 2.5))
    assert np.allclose(O.pool_pair(const, l, [True]).a_bar.data, 2.5)

    lex = np.array([[1.0, 1.0], [9.0, 9.0], [2.0, 2.0]])
    mask = [True, False, True]
    ref = O.pool_pair(a, Tensor(lex), mask).l_bar.data
    lex2 = lex.copy()
    lex2[1] = [-100.0, 100.0]
    np.testing.assert_array_equal(O.pool_pair(a, Tensor(lex2), mask).l_bar.data, ref)

    with pytest.raises(ValueError, match="empty"):
        O.pool_pair(Tensor(np.zeros((0, 2))), l, [True])


def make_pairs(a_rows, l_rows):
    return [
        O.PooledPair(Tensor(np.asarray(a, float)), Tensor(np.asarray(l, float)), i)
        for i, (a, l) in enumerate(zip(a_rows, l_rows))
    ]


def brute_force_contrastive(a_rows, l_rows):
    """Materialize the full similarity matrix and evaluate the in-batch
    objective term by term with plain floats."""
    n = len(a_rows)
    sims = [[float(np.dot(a_rows[i], l_rows[j])) for j in range(n)] for i in range(n)]
    loss = 0.0
    for i in range(n):
        m = max(sims[i])
        denom = sum(math.exp(s - m) for s in sims[i])
        loss -= (sims[i][i] - m) - math.log(denom)
    return loss


def test_contrastive_exact_values():
    a = [[1.0, 0.0]]
    assert O.contrastive_loss(make_pairs(a, a)).item() == 0.0

    same = [[1.0, 1.0], [1.0, 1.0]]
    np.testing.assert_allclose(O.contrastive_loss(make_pairs(same, same)).item(),
                               2 * math.log(2), atol=1e-12)

    s = math.sqrt(10.0)
    a2 = [[s, 0.0], [0.0, s]]
    expected = 2 * math.log(1 + math.exp(-10.0))
    np.testing.assert_allclose(O.contrastive_loss(make_pairs(a2, a2)).item(),
                               expected, atol=1e-12)


def test_contrastive_matches_brute_force():
    rng = np.random.default_rng(5)
    for n in (1, 2, 4, 8):
        for _ in range(10):
            a_rows = rng.normal(size=(n, 6))
            l_rows = rng.normal(size=(n, 6))
            ours = O.contrastive_loss(make_pairs(a_rows, l_rows)).item()
            assert abs(ours - brute_force_contrastive(a_rows, l_rows)) <= 1e-10


def test_contrastive_nonnegative():
    rng = np.random.default_rng(6)
    for n in (1, 2, 5):
        rows_a = rng.normal(size=(n, 4))
        rows_l = rng.normal(size=(n, 4))
        assert O.contrastive_loss(make_pairs(rows_a, rows_l)).item() >= 0.0


def test_contrastive_shift_invariance():
    rng = np.random.default_rng(7)
    a_rows = rng.normal(size=(4, 5))
    l_rows = rng.normal(size=(4, 5))
    base = O.contrastive_loss(make_pairs(a_rows, l_rows)).item()
    # Appending a constant coordinate shifts every similarity by c.
    c = 3.75
    a_ext = np.hstack([a_rows, np.ones((4, 1))])
    l_ext = np.hstack([l_rows, np.full((4, 1), c)])
    shifted = O.contrastive_loss(make_pairs(a_ext, l_ext)).item()
    assert abs(base - shifted) <= 1e-10


def test_contrastive_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    a = [Tensor(rng.normal(size=5), requires_grad=True) for _ in range(3)]
    l = [Tensor(rng.normal(size=5), requires_grad=True) for _ in range(3)]

    def f():
        pairs = [O.PooledPair(a[i], l[i], i) for i in range(3)]
        return O.contrastive_loss(pairs)

    params = {f"a{i}": t for i, t in enumerate(a)} | {f"l{i}": t for i, t in enumerate(l)}
    assert T.grad_check(f, params, eps=1e-5) <= 1e-4


def test_mse_alignment_values():
    same = [[1.0, 2.0], [3.0, 4.0]]
    assert O.mse_alignment_loss(make_pairs(same, same)).item() == 0.0
    np.testing.assert_allclose(
        O.mse_alignment_loss(make_pairs([[1.0, 0.0]], [[0.0, 0.0]])).item(), 0.5, atol=1e-15
    )
    rng = np.random.default_rng(9)
    a_rows = rng.normal(size=(3, 4))
    l_rows = rng.normal(size=(3, 4))
    base = O.mse_alignment_loss(make_pairs(a_rows, l_rows)).item()
    scaled = O.mse_alignment_loss(make_pairs(2 * a_rows, 2 * l_rows)).item()
    np.testing.assert_allclose(scaled, 4 * base, rtol=1e-12)


def test_joint_loss_values_and_linearity():
    mlm = Tensor(np.asarray(2.0))
    ctr = Tensor(np.asarray(0.5))
    total, b = O.joint_loss(mlm, ctr, 1.0, "contrastive")
    assert b.joint == 2.5 and b.mlm == 2.0 and b.alignment == 0.5

    total0, b0 = O.joint_loss(mlm, ctr, 0.0, "contrastive")
    assert b0.joint == 2.0

    _, b3 = O.joint_loss(Tensor(np.asarray(1.0)), Tensor(np.asarray(1.0)), 3.0, "contrastive")
    assert b3.joint == 4.0

    _, bn = O.joint_loss(mlm, None, 1.0, "none")
    assert bn.joint == 2.0 and bn.alignment == 0.0 and bn.alignment_kind == "none"

    for alpha in (0.0, 0.5, 1.0, 2.0, 10.0):
        _, bb = O.joint_loss(mlm, ctr, alpha, "contrastive")
        np.testing.assert_allclose(bb.joint, 2.0 + alpha * 0.5, atol=1e-12)


# ---------------------------------------------------------------------------
# schedule, optimizer, training
# ---------------------------------------------------------------------------

def test_learning_rate_schedule():
    c = cfg(total_steps=100, warmup_fraction=0.1, learning_rate=1.0)
    assert O.learning_rate(1, c) == pytest.approx(0.1)
    assert O.learning_rate(10, c) == pytest.approx(1.0)
    assert O.learning_rate(55, c) == pytest.approx(0.5)
    assert O.learning_rate(100, c) == 0.0
    assert all(O.learning_rate(s, c) >= 0 for s in range(1, 101))


def tiny_corpus(tmp_path, n=32, seed=11):
    layout = synth.generate(
        synth.SynthConfig(train_count=n, dev_count=2, test_count=2, content_words=20,
                          confusable_pairs=4),
        seed=seed, out_dir=tmp_path,
    )
    vocab = Vocab.load(layout.vocab_file)
    samples = O.load_train_samples(layout.train_file, vocab)
    return layout, vocab, samples


def tiny_model(vocab, seed=5, **kw):
    config = M.ModelConfig(vocab_size=len(vocab), feature_dims=16, d_model=32,
                           encoder_layers=1, heads=4, ffn_dim=64,
                           speech_encoder_layers=1, max_positions=64,
                           dropout=kw.pop("dropout", 0.1), **kw)
    return M.Model(config, M.init_params(config, seed), vocab)


def test_train_step_lr_zero_keeps_params(tmp_path):
    _, vocab, samples = tiny_corpus(tmp_path, n=8)
    model = tiny_model(vocab)
    before = {k: v.data.copy() for k, v in model.params.named().items()}
    c = cfg(learning_rate=0.0, batch_size=4, total_steps=10, seed=1)
    O.train_step(model, samples[:4], O.AdamState(), c, step=5)
    for k, v in model.params.named().items():
        assert v.data.tobytes() == before[k].tobytes(), k


def test_train_step_frozen_group_is_bit_identical(tmp_path):
    _, vocab, samples = tiny_corpus(tmp_path, n=8)
    model = tiny_model(vocab)
    model.params.freeze(["masked_encoder"])
    frozen_before = {k: v.data.copy() for k, v in model.params["masked_encoder"].tensors.items()}
    live_before = model.params["mlm_head"].tensors["w"].data.copy()
    c = cfg(learning_rate=1e-3, batch_size=4, total_steps=10, seed=1)
    opt = O.AdamState()
    for step in range(1, 4):
        O.train_step(model, samples[:4], opt, c, step)
    for k, v in model.params["masked_encoder"].tensors.items():
        assert v.data.tobytes() == frozen_before[k].tobytes(), k
    assert model.params["mlm_head"].tensors["w"].data.tobytes() != live_before.tobytes()


def test_training_is_deterministic(tmp_path):
    _, vocab, samples = tiny_corpus(tmp_path, n=12)
    c = cfg(learning_rate=1e-3, batch_size=6, total_steps=5, seed=3)
    runs = []
    for _ in range(2):
        model = tiny_model(vocab, seed=5)
        runs.append([b.joint for b in O.train(model, samples, c)])
    assert runs[0] == runs[1]


def test_draw_batch_rejects_duplicate_texts(tmp_path):
    _, vocab, samples = tiny_corpus(tmp_path, n=10)
    dup = samples[:3] * 6
    batch = O.draw_batch(dup, cfg(batch_size=8, seed=0), step=1)
    texts = [s.text for s in batch]
    assert len(texts) == len(set(texts)) <= 3


def test_pool_tap_outputs_trains_and_differs(tmp_path):
    _, vocab, samples = tiny_corpus(tmp_path, n=12)
    losses = {}
    for tap in ("inputs", "outputs"):
        model = tiny_model(vocab, seed=5, dropout=0.0, pool_tap=tap)
        c = cfg(learning_rate=1e-3, batch_size=6, total_steps=3, seed=3)
        hist = O.train(model, samples, c)
        assert all(np.isfinite(h.joint) for h in hist)
        losses[tap] = [h.alignment for h in hist]
    assert losses["inputs"] != losses["outputs"]


def test_text_only_requires_alignment_none(tmp_path):
    _, vocab, samples = tiny_corpus(tmp_path, n=4)
    model = tiny_model(vocab, text_only=True)
    with pytest.raises(ValueError, match="alignment"):
        O.train_step(model, samples[:2], O.AdamState(), cfg(batch_size=2), step=1)
    # and works with alignment disabled
    O.train_step(model, samples[:2], O.AdamState(),
                 cfg(batch_size=2, alignment="none"), step=1)


def test_overfit_smoke(tmp_path):
    layout = synth.generate(
        synth.SynthConfig(train_count=32, dev_count=2, test_count=2,
                          content_words=12, confusable_pairs=3),
        seed=11, out_dir=tmp_path,
    )
    vocab = Vocab.load(layout.vocab_file)
    samples = O.load_train_samples(layout.train_file, vocab)
    config = M.ModelConfig(vocab_size=len(vocab), feature_dims=16, d_model=48,
                           encoder_layers=1, heads=4, ffn_dim=96,
                           speech_encoder_layers=1, max_positions=64, dropout=0.0)
    model = M.Model(config, M.init_params(config, 6), vocab)
    c = cfg(learning_rate=1.5e-2, batch_size=32, total_steps=200, seed=2,
            alignment="none", warmup_fraction=0.05, mask_rate=0.5)
    history = O.train(model, samples, c)
    first, last = history[0].mlm, history[-1].mlm
    assert last <= 0.2 * first, f"mlm {first:.3f} -> {last:.3f}"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(tmp_path):
    _, vocab, samples = tiny_corpus(tmp_path, n=8)
    model = tiny_model(vocab, dropout=0.0)
    c = cfg(learning_rate=1e200, batch_size=4, total_steps=50, warmup_fraction=0.0, seed=1)
    opt = O.AdamState()
    with pytest.raises(O.DivergenceError, match="divergence at step"):
        for step in range(1, 51):
            O.train_step(model, samples[:4], opt, c, step)
