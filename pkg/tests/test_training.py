import numpy as np
import pytest

from monoattn.data import SyntheticTaskSpec, build_vocab, gen_task
from monoattn.layers import AdamState
from monoattn.training import fit, max_decode_len

from .conftest import tiny_model


def setup():
    corpus = gen_task(SyntheticTaskSpec("copy", alphabet_size=6, min_len=3, max_len=4, seed=1), 12)
    vs, vt = build_vocab(corpus, side="source"), build_vocab(corpus)
    return corpus, vs, vt, tiny_model(src_vocab_size=len(vs), tgt_vocab_size=len(vt))


def test_lr_halves_only_after_non_improving_epochs():
    corpus, vs, vt, m = setup()
    opt = AdamState(lr=1e-2)
    lrs = []
    h = fit(m, corpus, vs, vt, dev=corpus, epochs=6, batch_size=4, optimizer=opt, lr_decay=0.5,
            on_epoch=lambda rec, o: lrs.append(o.lr))
    best, lr = -1.0, 1e-2
    for rec, seen in zip(h.records, lrs):
        if rec.dev_acc > best:
            best = rec.dev_acc
        else:
            lr *= 0.5
        assert seen == lr


def test_no_dev_keeps_lr():
    corpus, vs, vt, m = setup()
    opt = AdamState(lr=1e-2)
    h = fit(m, corpus, vs, vt, epochs=2, batch_size=4, optimizer=opt, lr_decay=0.5)
    assert opt.lr == 1e-2 and all(np.isnan(r.dev_acc) for r in h.records)


def test_invalid_decay():
    corpus, vs, vt, m = setup()
    with pytest.raises(ValueError):
        fit(m, corpus, vs, vt, epochs=1, lr_decay=0.0)


def test_stop_at_dev_acc():
    corpus, vs, vt, m = setup()
    h = fit(m, corpus, vs, vt, dev=corpus, epochs=5, batch_size=4, stop_at_dev_acc=0.0)
    assert len(h.records) == 1


def test_max_decode_len():
    corpus, *_ = setup()
    assert max_decode_len(corpus) == 10
    assert max_decode_len(corpus, factor=4.0, floor=1) == 17
