import numpy as np
import pytest

from arvis import numerics as nm
from arvis import transformer as tr
from arvis.errors import (CacheError, CapacityError, CheckpointConsistencyError,
                          CheckpointMagicError, CheckpointVersionError,
                          CheckpointTruncatedError, ConfigError)

from conftest import central_diff, rel_err


SMALL = tr.ModelConfig(n_layers=2, n_heads=2, model_dim=16, ffn_dim=32,
                       total_vocab=19, max_seq_len=64)


def random_ids(rng, n, vocab):
    return rng.integers(0, vocab, size=n).astype(np.int64)


def test_init_deterministic_per_seed():
    a = tr.init_params(SMALL, seed=5)
    b = tr.init_params(SMALL, seed=5)
    c = tr.init_params(SMALL, seed=6)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_init_zeroes_block_output_projections():
    p = tr.init_params(SMALL, seed=0)
    assert not p["layers.0.wo"].any()
    assert not p["layers.1.wd"].any()
    assert p["unembed"].any()


def test_config_validation():
    with pytest.raises(ConfigError):
        tr.ModelConfig(model_dim=30, n_heads=4)
    with pytest.raises(ConfigError):
        tr.ModelConfig(rope_mode="3d")
    with pytest.raises(ConfigError):
        tr.ModelConfig(model_dim=16, n_heads=8, rope_mode="2d")  # head_dim 2


def test_fresh_model_loss_near_log_vocab():
    rng = np.random.default_rng(0)
    model = tr.new_model(SMALL, seed=1)
    ids = random_ids(rng, 20, SMALL.total_vocab)
    pos = tr.sequence_positions(20, 4, 4, 4)
    (logits,), _ = tr.forward_batch(model, [ids], [pos])
    logp = nm.log_softmax_rows(logits)
    loss = -np.mean([logp[i, ids[i + 1]] for i in range(19)])
    assert abs(loss - np.log(SMALL.total_vocab)) < 0.05 * np.log(SMALL.total_vocab)


def test_rope_zero_position_is_identity():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(8).astype(np.float32)
    assert np.allclose(tr.rope_rotate(v, 0, "1d"), v, atol=1e-7)
    assert np.allclose(tr.rope_rotate(v, (0, 0), "2d"), v, atol=1e-7)


def test_rope_relative_property_1d():
    rng = np.random.default_rng(2)
    for _ in range(20):
        q = rng.standard_normal(16)
        k = rng.standard_normal(16)
        m = int(rng.integers(0, 65))
        n = int(rng.integers(0, 65))
        lhs = np.dot(tr.rope_rotate(q, m, "1d"), tr.rope_rotate(k, n, "1d"))
        rhs = np.dot(tr.rope_rotate(q, m - n, "1d"), k)
        assert abs(lhs - rhs) < 1e-5


def test_rope_relative_property_2d_per_axis():
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = rng.standard_normal(16)
        k = rng.standard_normal(16)
        r1, r2, c = (int(x) for x in rng.integers(0, 64, size=3))
        lhs = np.dot(tr.rope_rotate(q, (r1, c), "2d"), tr.rope_rotate(k, (r2, c), "2d"))
        rhs = np.dot(tr.rope_rotate(q, (r1 - r2, 0), "2d"), k)
        assert abs(lhs - rhs) < 1e-5
        c1, c2, r = (int(x) for x in rng.integers(0, 64, size=3))
        lhs = np.dot(tr.rope_rotate(q, (r, c1), "2d"), tr.rope_rotate(k, (r, c2), "2d"))
        rhs = np.dot(tr.rope_rotate(q, (0, c1 - c2), "2d"), k)
        assert abs(lhs - rhs) < 1e-5


@pytest.mark.parametrize("mode", ["1d", "2d"])
def test_forward_causality_bit_exact(mode):
    cfg = tr.ModelConfig(n_layers=2, n_heads=2, model_dim=16, ffn_dim=32,
                         total_vocab=19, max_seq_len=64, rope_mode=mode)
    model = tr.new_model(cfg, seed=2)
    rng = np.random.default_rng(4)
    n = 18
    ids = random_ids(rng, n, cfg.total_vocab)
    pos = tr.sequence_positions(n, 3, 3, 4)
    (base,), _ = tr.forward_batch(model, [ids], [pos])
    for j in (5, 11, 17):
        ids2 = ids.copy()
        ids2[j] = (ids2[j] + 1) % cfg.total_vocab
        (out,), _ = tr.forward_batch(model, [ids2], [pos])
        assert np.array_equal(out[:j], base[:j])
        assert not np.array_equal(out[j:], base[j:])


def test_forward_output_shape():
    model = tr.new_model(SMALL, seed=0)
    ids = np.arange(10) % SMALL.total_vocab
    pos = tr.sequence_positions(10, 2, 2, 4)
    (logits,), _ = tr.forward_batch(model, [ids], [pos])
    assert logits.shape == (10, SMALL.total_vocab)


def test_forward_rejects_overlong_sequence():
    model = tr.new_model(SMALL, seed=0)
    ids = np.zeros(SMALL.max_seq_len + 1, dtype=np.int64)
    pos = tr.sequence_positions(ids.size, 1, 8, 8)
    with pytest.raises(CapacityError):
        tr.forward_batch(model, [ids], [pos])


@pytest.mark.parametrize("mode", ["1d", "2d"])
def test_cached_decode_matches_full_recompute(mode):
    cfg = tr.ModelConfig(n_layers=2, n_heads=2, model_dim=16, ffn_dim=32,
                         total_vocab=19, max_seq_len=96, rope_mode=mode)
    model = tr.new_model(cfg, seed=3)
    rng = np.random.default_rng(5)
    n = 40
    ids = random_ids(rng, n, cfg.total_vocab)
    pos = tr.sequence_positions(n, 4, 6, 6)
    (full,), _ = tr.forward_batch(model, [ids], [pos])

    pool = tr.make_pool(cfg, n)
    handle = pool.allocate(0)
    # prefill 4 tokens, then extend one at a time
    logits0, _ = tr.forward_cached(model, ids[:4], pos[:4], handle)
    inc = [logits0]
    for t in range(4, n):
        lg, _ = tr.forward_cached(model, ids[t:t + 1], pos[t:t + 1], handle,
                                  expected_prefix=t)
        inc.append(lg)
    inc = np.concatenate(inc)
    assert np.max(np.abs(inc - full)) < 1e-4


def test_forward_cached_prefix_mismatch_raises():
    model = tr.new_model(SMALL, seed=0)
    pool = tr.make_pool(SMALL, 32)
    handle = pool.allocate(0)
    ids = np.arange(4) % SMALL.total_vocab
    pos = tr.sequence_positions(4, 4, 2, 2)
    tr.forward_cached(model, ids, pos, handle)
    with pytest.raises(CacheError):
        tr.forward_cached(model, ids[:1], pos[:1], handle, expected_prefix=0)


def test_forward_step_batch_matches_single_stream():
    cfg = tr.ModelConfig(n_layers=2, n_heads=2, model_dim=16, ffn_dim=32,
                         total_vocab=19, max_seq_len=64)
    model = tr.new_model(cfg, seed=4)
    rng = np.random.default_rng(6)
    n0, steps = 3, 6
    seqs = [random_ids(rng, n0 + steps, cfg.total_vocab) for _ in range(3)]
    pos = tr.sequence_positions(n0 + steps, n0, 3, 3)

    pool = tr.make_pool(cfg, 3 * 32)
    handles = [pool.allocate(0) for _ in range(3)]
    for s in range(3):
        tr.forward_cached(model, seqs[s][:n0], pos[:n0], handles[s])
    got = []
    for t in range(n0, n0 + steps):
        toks = np.array([seqs[s][t] for s in range(3)])
        step_pos = np.repeat(pos[t:t + 1], 3, axis=0)
        got.append(tr.forward_step_batch(model, toks, step_pos, handles))
    got = np.stack(got, axis=1)  # (B, steps, vocab)

    for s in range(3):
        (full,), _ = tr.forward_batch(model, [seqs[s]], [pos])
        assert np.max(np.abs(got[s] - full[n0:])) < 1e-4


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    model = tr.new_model(SMALL, seed=7)
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(model, path)
    loaded = tr.load_checkpoint(path)
    assert loaded.config == model.config
    for k in model.params:
        assert np.array_equal(loaded.params[k], model.params[k])
    rng = np.random.default_rng(8)
    ids = random_ids(rng, 12, SMALL.total_vocab)
    pos = tr.sequence_positions(12, 4, 2, 4)
    (a,), _ = tr.forward_batch(model, [ids], [pos])
    (b,), _ = tr.forward_batch(loaded, [ids], [pos])
    assert np.array_equal(a, b)


def test_checkpoint_error_taxonomy(tmp_path):
    model = tr.new_model(SMALL, seed=9)
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())

    bad = tmp_path / "bad_magic.ckpt"
    bad.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointMagicError):
        tr.load_checkpoint(bad)

    bad = tmp_path / "bad_version.ckpt"
    bad.write_bytes(bytes(raw[:4]) + (99).to_bytes(4, "little") + bytes(raw[8:]))
    with pytest.raises(CheckpointVersionError):
        tr.load_checkpoint(bad)

    bad = tmp_path / "truncated.ckpt"
    bad.write_bytes(bytes(raw[:-17]))
    with pytest.raises(CheckpointTruncatedError):
        tr.load_checkpoint(bad)

    # file whose config record disagrees with the stored tensor shapes
    import struct
    blob = "\n".join([
        "n_layers=2", "n_heads=2", "model_dim=8", "ffn_dim=32",
        "total_vocab=19", "max_seq_len=64", "rope_mode=1d", "rope_base=10000.0",
    ]).encode("ascii")
    (blob_len,) = struct.unpack("<I", raw[8:12])
    body = bytes(raw[12 + blob_len:])  # tensors of the model_dim=16 model
    bad = tmp_path / "inconsistent.ckpt"
    bad.write_bytes(bytes(raw[:8]) + struct.pack("<I", len(blob)) + blob + body)
    with pytest.raises(CheckpointConsistencyError):
        tr.load_checkpoint(bad)


def test_full_model_gradients_match_finite_differences():
    """Backward through the whole network vs central differences, float64."""
    cfg = tr.ModelConfig(n_layers=2, n_heads=2, model_dim=16, ffn_dim=24,
                         total_vocab=11, max_seq_len=32)
    model = tr.new_model(cfg, seed=11).astype(np.float64)
    # make zero-initialized projections non-trivial so their gradients are generic
    rng = np.random.default_rng(12)
    for k, v in model.params.items():
        if not v.any():
            model.params[k] = rng.normal(0, 0.05, size=v.shape)
    n = 9
    ids = random_ids(rng, n, cfg.total_vocab)
    pos = tr.sequence_positions(n, 3, 2, 2)
    targets = random_ids(rng, n - 1, cfg.total_vocab)
    mask = np.zeros(n - 1, dtype=bool)
    mask[2:7] = True

    def loss_and_dlogits():
        (logits,), tape = tr.forward_batch(model, [ids], [pos], want_tape=True)
        logp = nm.log_softmax_rows(logits[:-1])
        loss = -np.mean(logp[mask, targets[mask]])
        probs = np.exp(logp)
        d = np.zeros_like(logits)
        d[:-1][mask] = probs[mask]
        d[:-1][mask, targets[mask]] -= 1.0
        d /= mask.sum()
        return loss, d, tape

    _, dlogits, tape = loss_and_dlogits()
    grads = tr.backward_batch(model, tape, [dlogits])

    checked = 0
    for name in tr.param_order(cfg):
        p = model.params[name]
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(5, flat.size), replace=False)
        for i in idx:
            fd = central_diff_at(loss_and_dlogits, flat, int(i))
            an = grads[name].reshape(-1)[int(i)]
            assert rel_err(np.array([an]), np.array([fd]), floor=1e-7) < 1e-2, name
            checked += 1
    assert checked >= 5 * len(tr.param_order(cfg)) - 5


def central_diff_at(loss_fn, flat_param, i, step=1e-5):
    orig = flat_param[i]
    flat_param[i] = orig + step
    hi = loss_fn()[0]
    flat_param[i] = orig - step
    lo = loss_fn()[0]
    flat_param[i] = orig
    return (hi - lo) / (2 * step)
