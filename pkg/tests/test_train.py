"""Training-harness tests: optimizer oracle, page-level splitting, nested
subsampling, the epoch loop contract, and run-to-run determinism."""

import math

import numpy as np
import pytest

from layouttag.autodiff import Tensor
from layouttag.corpus import GeneratorSpec, generate_corpus
from layouttag.ingest import build_vocab
from layouttag.model import ModelConfig
from layouttag.train import (
    Adam,
    EpochRecord,
    RunHistory,
    TrainConfig,
    TrainError,
    split_corpus,
    subsample,
    train_model,
)

# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus_30():
    # 16x16 rasters to match the micro model below
    return generate_corpus(30, seed=555, spec=GeneratorSpec(raster_size=16))


def micro_model_config():
    return ModelConfig(
        vocab_size=4, d_model=12, n_heads=2, n_layers=1, L=16,
        raster_size=16, grid=2,
    )


# ---------------------------------------------------------------------------
# TrainConfig
# ---------------------------------------------------------------------------


def test_train_config_defaults():
    tc = TrainConfig()
    assert (tc.epochs, tc.batch_size, tc.learning_rate) == (30, 8, 3e-4)
    assert (tc.beta1, tc.beta2, tc.eps) == (0.9, 0.999, 1e-8)
    assert tc.eval_every == 1


@pytest.mark.parametrize(
    "kwargs",
    [dict(epochs=0), dict(learning_rate=0.0), dict(batch_size=0),
     dict(eval_every=0), dict(beta1=1.0), dict(eps=0.0)],
)
def test_train_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_oracle_steps(x0, grads, lr, b1, b2, eps):
    """Scalar reference trajectory computed step by step."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(x)
    return out


def test_adam_matches_scalar_oracle():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam([p], learning_rate=lr, beta1=b1, beta2=b2, eps=eps)
    grads = [0.8, -1.2, 0.5, 0.05, 2.0]
    seen = []
    for g in grads:
        p.grad = np.array([g])
        opt.step()
        seen.append(float(p.data[0]))
    expected = adam_oracle_steps(2.0, grads, lr, b1, b2, eps)
    np.testing.assert_allclose(seen, expected, rtol=1e-12)


def test_adam_first_step_size_is_learning_rate():
    # with bias correction, |step 1| == lr regardless of gradient scale
    for g0 in (1e-3, 1.0, 250.0):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([p], learning_rate=0.01)
        p.grad = np.array([g0])
        opt.step()
        assert abs(abs(float(p.data[0])) - 0.01) < 1e-6


def test_adam_minimizes_quadratic():
    p = Tensor(np.array([10.0, -4.0]), requires_grad=True)
    opt = Adam([p], learning_rate=0.05)
    for _ in range(2000):
        p.grad = 2.0 * (p.data - np.array([3.0, 1.0]))
        opt.step()
    np.testing.assert_allclose(p.data, [3.0, 1.0], atol=1e-3)


def test_adam_skips_parameters_without_gradients():
    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam([p, q], learning_rate=0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert float(q.data[0]) == 5.0
    assert float(p.data[0]) != 1.0


# ---------------------------------------------------------------------------
# split_corpus
# ---------------------------------------------------------------------------


def test_split_10_pages_at_03_gives_7_and_3():
    corpus = generate_corpus(10, seed=1)
    train, val = split_corpus(corpus, 0.3, seed=0)
    assert (len(train.pages), len(val.pages)) == (7, 3)


def test_split_rounds_half_up():
    corpus = generate_corpus(5, seed=2)
    train, val = split_corpus(corpus, 0.3, seed=0)  # 1.5 rounds to 2
    assert (len(train.pages), len(val.pages)) == (3, 2)


def test_split_is_disjoint_and_exhaustive():
    corpus = generate_corpus(20, seed=3)
    train, val = split_corpus(corpus, 0.3, seed=4)
    train_ids = {p.page_id for p in train.pages}
    val_ids = {p.page_id for p in val.pages}
    assert not train_ids & val_ids
    assert train_ids | val_ids == {p.page_id for p in corpus.pages}
    assert set(train.rasters) == train_ids and set(val.rasters) == val_ids


def test_split_same_seed_identical_different_seed_differs():
    corpus = generate_corpus(20, seed=5)
    a_train, a_val = split_corpus(corpus, 0.3, seed=7)
    b_train, b_val = split_corpus(corpus, 0.3, seed=7)
    c_train, c_val = split_corpus(corpus, 0.3, seed=8)
    assert [p.page_id for p in a_val.pages] == [p.page_id for p in b_val.pages]
    assert [p.page_id for p in a_val.pages] != [p.page_id for p in c_val.pages]


def test_split_preserves_corpus_page_order_within_halves():
    corpus = generate_corpus(20, seed=6)
    train, val = split_corpus(corpus, 0.3, seed=9)
    ids = [p.page_id for p in corpus.pages]
    assert [p.page_id for p in train.pages] == sorted(
        (p.page_id for p in train.pages), key=ids.index
    )


def test_split_rejects_bad_fraction_and_tiny_corpus():
    corpus = generate_corpus(3, seed=7)
    with pytest.raises(ValueError):
        split_corpus(corpus, 0.0, seed=0)
    with pytest.raises(ValueError):
        split_corpus(corpus, 1.0, seed=0)
    single = generate_corpus(1, seed=8)
    with pytest.raises(ValueError):
        split_corpus(single, 0.3, seed=0)


# ---------------------------------------------------------------------------
# subsample
# ---------------------------------------------------------------------------


def test_subsample_full_fraction_is_identity(corpus_30):
    assert subsample(corpus_30, 1.0, seed=0) is corpus_30


def test_subsample_half_of_30_gives_15(corpus_30):
    sub = subsample(corpus_30, 0.5, seed=0)
    assert len(sub.pages) == 15
    ids = {p.page_id for p in corpus_30.pages}
    assert all(p.page_id in ids for p in sub.pages)


def test_subsample_nested_for_fixed_seed(corpus_30):
    small = {p.page_id for p in subsample(corpus_30, 0.2, seed=3).pages}
    large = {p.page_id for p in subsample(corpus_30, 0.4, seed=3).pages}
    assert small <= large
    chain = [0.1, 0.3, 0.5, 0.75, 1.0]
    sets = [{p.page_id for p in subsample(corpus_30, f, seed=5).pages} for f in chain]
    for a, b in zip(sets, sets[1:]):
        assert a <= b


def test_subsample_deterministic_and_seed_sensitive(corpus_30):
    a = [p.page_id for p in subsample(corpus_30, 0.5, seed=1).pages]
    b = [p.page_id for p in subsample(corpus_30, 0.5, seed=1).pages]
    c = [p.page_id for p in subsample(corpus_30, 0.5, seed=2).pages]
    assert a == b and a != c


def test_subsample_rejects_empty_result_and_bad_fraction(corpus_30):
    with pytest.raises(ValueError):
        subsample(corpus_30, 0.001, seed=0)  # rounds to zero pages
    with pytest.raises(ValueError):
        subsample(corpus_30, 0.0, seed=0)
    with pytest.raises(ValueError):
        subsample(corpus_30, 1.5, seed=0)


# ---------------------------------------------------------------------------
# RunHistory
# ---------------------------------------------------------------------------


def _history(records):
    return RunHistory(tuple(records), duration_seconds=1.0)


def test_run_history_requires_increrasing_epochs():
    r1 = EpochRecord(1, 0.5, None)
    r2 = EpochRecord(2, 0.4, None)
    _history([r1, r2])
    with pytest.raises(ValueError):
        _history([r2, r1])
    with pytest.raises(ValueError):
        _history([r1, r1])


def test_run_history_lookup_and_csv_rows():
    from layouttag.metrics import metrics_from_counts

    report = metrics_from_counts(np.diag([3] * 10))
    hist = _history([
        EpochRecord(1, 0.9, None),
        EpochRecord(2, 0.5, report),
    ])
    assert hist.metrics_at(2).accuracy == 1.0
    assert hist.final_metrics() is report
    with pytest.raises(KeyError):
        hist.metrics_at(1)
    with pytest.raises(KeyError):
        hist.metrics_at(99)
    rows = hist.csv_rows()
    assert rows[0] == (1, 0.9, "", "")
    assert rows[1][2] == report.macro_f1


def test_run_history_without_evals_has_no_final_metrics():
    hist = _history([EpochRecord(1, 0.9, None)])
    with pytest.raises(ValueError):
        hist.final_metrics()


# ---------------------------------------------------------------------------
# train_model
# ---------------------------------------------------------------------------


def test_one_epoch_smoke_run(corpus_30):
    train = subsample(corpus_30, 0.2, seed=0)  # 6 pages
    val = subsample(corpus_30, 0.1, seed=1)
    tc = TrainConfig(epochs=1, seed=0)
    model, vocab, hist = train_model(train, val, micro_model_config(), tc, "full")
    assert len(hist.records) == 1
    assert math.isfinite(hist.records[0].train_loss)
    assert hist.records[0].metrics is not None  # final epoch always evaluates
    assert model.config.vocab_size == len(vocab)
    assert hist.duration_seconds > 0


def test_vocab_comes_from_training_split_only(corpus_30):
    train, val = split_corpus(corpus_30, 0.3, seed=0)
    tc = TrainConfig(epochs=1, seed=0, eval_every=5)
    model, vocab, _ = train_model(train, val, micro_model_config(), tc, "full")
    assert vocab == build_vocab(train.pages)
    assert vocab != build_vocab(corpus_30.pages)


def test_training_reduces_loss_over_ten_epochs(corpus_30):
    train = subsample(corpus_30, 0.3, seed=2)  # 9 pages
    val = subsample(corpus_30, 0.1, seed=3)
    tc = TrainConfig(epochs=10, seed=0, eval_every=10)
    _, _, hist = train_model(train, val, micro_model_config(), tc, "full")
    assert hist.records[-1].train_loss < hist.records[0].train_loss


def test_training_is_bit_deterministic(corpus_30):
    train = subsample(corpus_30, 0.2, seed=4)
    val = subsample(corpus_30, 0.1, seed=5)
    tc = TrainConfig(epochs=2, seed=11, eval_every=2)
    m1, _, h1 = train_model(train, val, micro_model_config(), tc, "full")
    m2, _, h2 = train_model(train, val, micro_model_config(), tc, "full")
    for name in m1.params.names():
        assert np.array_equal(m1.params[name].data, m2.params[name].data), name
    assert [r.train_loss for r in h1.records] == [r.train_loss for r in h2.records]
    assert h1.records[-1].metrics == h2.records[-1].metrics


def test_modality_mode_changes_the_run(corpus_30):
    train = subsample(corpus_30, 0.2, seed=6)
    val = subsample(corpus_30, 0.1, seed=7)
    tc = TrainConfig(epochs=1, seed=0)
    _, _, h_full = train_model(train, val, micro_model_config(), tc, "full")
    _, _, h_text = train_model(train, val, micro_model_config(), tc, "text_only")
    assert h_full.records[0].train_loss != h_text.records[0].train_loss


def test_eval_every_controls_metric_records(corpus_30):
    train = subsample(corpus_30, 0.2, seed=8)
    val = subsample(corpus_30, 0.1, seed=9)
    tc = TrainConfig(epochs=5, seed=0, eval_every=2)
    _, _, hist = train_model(train, val, micro_model_config(), tc, "full")
    eval_epochs = [r.epoch for r in hist.records if r.metrics is not None]
    assert eval_epochs == [2, 4, 5]  # every 2, plus the forced final epoch


def test_empty_training_corpus_raises():
    corpus = generate_corpus(2, seed=10)
    with pytest.raises((TrainError, ValueError)):
        train_model(
            subsample(corpus, 0.5, seed=0),
            subsample(corpus, 0.5, seed=0),
            micro_model_config(),
            TrainConfig(epochs=0),  # invalid config surfaces immediately
            "full",
        )
