import numpy as np
import pytest

from arvis import decoding as dec
from arvis import tokenization as tok
from arvis import training as trn
from arvis import transformer as tr
from arvis.errors import (ConfigError, DegenerateBatchError,
                          RolloutStateError, TrainingDivergenceError)

from conftest import rel_err


def test_cross_entropy_uniform_logits():
    v = 37
    logits = np.zeros((5, v), dtype=np.float64)
    targets = np.array([0, 3, 5, 7, 9])
    mask = np.ones(5, dtype=bool)
    loss, d = trn.cross_entropy(logits, targets, mask)
    assert abs(loss - np.log(v)) < 1e-3
    assert d.shape == logits.shape


def test_cross_entropy_limit_case():
    logits = np.zeros((1, 4), dtype=np.float64)
    logits[0, 2] = 50.0
    loss, _ = trn.cross_entropy(logits, np.array([2]), np.ones(1, dtype=bool))
    assert loss < 1e-8


def test_cross_entropy_matches_direct_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((9, 12))
    targets = rng.integers(0, 12, size=9)
    mask = rng.uniform(size=9) < 0.6
    mask[0] = True
    loss, _ = trn.cross_entropy(logits, targets, mask)
    want = []
    for i in np.flatnonzero(mask):
        p = np.exp(logits[i]) / np.exp(logits[i]).sum()
        want.append(-np.log(p[targets[i]]))
    assert abs(loss - np.mean(want)) < 1e-5


def test_cross_entropy_empty_mask():
    with pytest.raises(DegenerateBatchError):
        trn.cross_entropy(np.zeros((3, 4)), np.zeros(3, dtype=int), np.zeros(3, dtype=bool))


def test_adamw_zero_grads_no_decay():
    params = {"w": np.ones((2, 2), dtype=np.float32)}
    state = trn.init_optim(params)
    state.weight_decay = 0.0
    trn.adamw_step(params, {"w": np.zeros((2, 2), dtype=np.float32)}, state, lr=0.1)
    assert np.array_equal(params["w"], np.ones((2, 2), dtype=np.float32))


def test_adamw_pure_decay():
    params = {"w": np.full((2, 2), 3.0, dtype=np.float64)}
    state = trn.init_optim(params)
    state.weight_decay = 0.5
    trn.adamw_step(params, {"w": np.zeros((2, 2))}, state, lr=0.1)
    assert np.allclose(params["w"], 3.0 * (1 - 0.1 * 0.5))


def test_adamw_first_step_is_signed_unit_update():
    params = {"w": np.zeros(4, dtype=np.float64)}
    state = trn.init_optim(params)
    state.weight_decay = 0.0
    g = np.array([0.5, -2.0, 1e-3, -1e-3])
    trn.adamw_step(params, {"w": g.copy()}, state, lr=0.01)
    assert np.allclose(params["w"], -0.01 * np.sign(g), atol=1e-4)


def test_adamw_aborts_on_nonfinite_gradient():
    params = {"w": np.ones(2, dtype=np.float64)}
    state = trn.init_optim(params)
    with pytest.raises(TrainingDivergenceError):
        trn.adamw_step(params, {"w": np.array([1.0, np.nan])}, state, lr=0.1)
    assert np.array_equal(params["w"], np.ones(2))
    assert state.step == 0


def test_grpo_advantages_examples():
    assert np.allclose(trn.grpo_advantages(np.array([1.0, 1.0, 1.0])), 0.0)
    assert np.allclose(trn.grpo_advantages(np.array([0.0, 1.0])), [-1.0, 1.0])


def test_grpo_advantages_normalization_and_invariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        r = rng.uniform(size=int(rng.integers(2, 9)))
        a = trn.grpo_advantages(r)
        if r.std() > 1e-6:
            assert abs(a.mean()) < 1e-6
            assert abs(a.std() - 1.0) < 1e-6
        assert np.allclose(trn.grpo_advantages(r + 3.7), a)
        assert np.allclose(trn.grpo_advantages(r * 2.5), a)


def test_kl_term_zero_and_nonnegative():
    rng = np.random.default_rng(2)
    lp = np.log(rng.dirichlet(np.ones(5)))
    assert trn.kl_term(lp, lp) == 0.0
    for _ in range(100):
        a = np.log(rng.uniform(0.01, 1.0, size=7))
        b = np.log(rng.uniform(0.01, 1.0, size=7))
        assert trn.kl_term(a, b) >= 0.0


def test_kl_term_k3_expectation_matches_closed_form():
    rng = np.random.default_rng(3)
    p_theta = np.array([0.6, 0.3, 0.1])
    p_ref = np.array([0.2, 0.5, 0.3])
    n = 1_000_000
    draws = rng.choice(3, size=n, p=p_theta)
    est = trn.kl_term(np.log(p_theta[draws]), np.log(p_ref[draws]))
    want = float(np.sum(p_theta * np.log(p_theta / p_ref)))
    assert abs(est - want) < 1e-3


# ---------------------------------------------------------------------------
# GRPO objective: micro-policy fixtures
# ---------------------------------------------------------------------------

MICRO_LAYOUT = tok.VocabLayout(text_vocab_size=2, image_codebook_size=5)


def micro_model(seed, dtype=np.float64):
    cfg = tr.ModelConfig(n_layers=1, n_heads=2, model_dim=8, ffn_dim=16,
                         total_vocab=MICRO_LAYOUT.total_vocab, max_seq_len=32)
    model = tr.Model(cfg, tr.init_params(cfg, seed))
    rng = np.random.default_rng(seed + 999)
    for k, v in model.params.items():
        if not v.any():
            model.params[k] = rng.normal(0, 0.05, size=v.shape).astype(v.dtype)
    return model.astype(dtype)


def micro_groups(seed, model, n_tokens=3, g=4):
    """Groups built by true rollouts from the model (stored old logprobs)."""
    rng = np.random.default_rng(seed)
    sampler = dec.SamplerConfig(mode="topk", top_k=5, temperature=1.0,
                                cfg_scale=1.0, seed=seed)
    grids, logps = [], []
    for j in range(g):
        res = dec.generate(model, MICRO_LAYOUT, [0], 1, n_tokens,
                           dec._with_seed(sampler, seed * 31 + j), want_logprobs=True)
        grids.append(res.grid)
        logps.append(res.logprobs)
    rewards = rng.uniform(size=g)
    return [trn.GroupSample("a", [0], grids, logps, rewards,
                            trn.grpo_advantages(rewards))]


def test_grpo_objective_zero_at_theta_old_with_zero_advantage():
    model = micro_model(5)
    groups = micro_groups(6, model)
    for grp in groups:
        grp.advantages = np.zeros_like(grp.advantages)
    cfg = trn.TrainConfig(kl_beta=0.0, clip_eps=0.2)
    snap = trn.PolicySnapshot(trn.snapshot_params(model.params),
                              trn.snapshot_params(model.params))
    objective, grads, _ = trn.grpo_objective(groups, snap, model, cfg, MICRO_LAYOUT)
    assert abs(objective) < 1e-12
    assert max(float(np.abs(g).max()) for g in grads.values()) < 1e-12


def test_grpo_clip_arithmetic_single_token():
    # one token, rho = 1.5, eps = 0.2, A = 1, beta = 0 -> min(1.5, 1.2) = 1.2
    model = micro_model(7)
    res = dec.generate(model, MICRO_LAYOUT, [0], 1, 1,
                       dec.SamplerConfig(mode="topk", top_k=5, cfg_scale=1.0, seed=1),
                       want_logprobs=True)
    old = res.logprobs - np.log(1.5)  # force the ratio
    groups = [trn.GroupSample("a", [0], [res.grid, res.grid],
                              [old, res.logprobs],
                              np.array([1.0, 1.0]), np.array([1.0, 0.0]))]
    cfg = trn.TrainConfig(kl_beta=0.0, clip_eps=0.2)
    snap = trn.PolicySnapshot(trn.snapshot_params(model.params),
                              trn.snapshot_params(model.params))
    objective, _, _ = trn.grpo_objective(groups, snap, model, cfg, MICRO_LAYOUT)
    # output 1 contributes min(1.5, 1.2) * 1 = 1.2, output 2 contributes 0
    assert abs(objective - 0.6) < 1e-6


def test_grpo_missing_old_logprobs():
    model = micro_model(8)
    groups = micro_groups(9, model)
    groups[0].old_logprobs[0] = None
    cfg = trn.TrainConfig()
    snap = trn.PolicySnapshot(trn.snapshot_params(model.params),
                              trn.snapshot_params(model.params))
    with pytest.raises(RolloutStateError):
        trn.grpo_objective(groups, snap, model, cfg, MICRO_LAYOUT)


@pytest.mark.parametrize("seed", range(12))
def test_grpo_gradient_matches_finite_differences(seed):
    model = micro_model(seed)
    theta_old = micro_model(seed + 500)  # distinct rollout policy: generic ratios
    groups = micro_groups(seed + 1, theta_old)
    ref = micro_model(seed + 1000)
    cfg = trn.TrainConfig(kl_beta=0.05, clip_eps=0.3)
    snap = trn.PolicySnapshot(trn.snapshot_params(theta_old.params),
                              trn.snapshot_params(ref.params))

    def objective_value():
        j, _, _ = trn.grpo_objective(groups, snap, model, cfg, MICRO_LAYOUT)
        return j

    _, grads, _ = trn.grpo_objective(groups, snap, model, cfg, MICRO_LAYOUT)
    rng = np.random.default_rng(seed + 17)
    step = 1e-5
    for name in ("embed", "layers.0.wq", "layers.0.wd", "unembed", "norm_out"):
        flat = model.params[name].reshape(-1)
        for i in rng.choice(flat.size, size=4, replace=False):
            orig = flat[i]
            flat[i] = orig + step
            hi = objective_value()
            flat[i] = orig - step
            lo = objective_value()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            an = grads[name].reshape(-1)[i]
            assert rel_err(np.array([an]), np.array([fd]), floor=1e-8) < 1e-3, name


def test_grpo_reduces_to_reinforce_with_group_baseline():
    """beta=0, eps=inf, theta=theta_old: gradient equals advantage-weighted
    policy gradient on the same samples."""
    model = micro_model(21)
    groups = micro_groups(22, model, n_tokens=4, g=4)
    # recompute old logprobs teacher-forced so rho == 1 bit-exactly
    _, _, _, logps, _, _ = trn._teacher_forced_logprobs(model, MICRO_LAYOUT, groups,
                                                        want_tape=False)
    idx = 0
    for grp in groups:
        for j in range(len(grp.grids)):
            grp.old_logprobs[j] = logps[idx]
            idx += 1
    cfg = trn.TrainConfig(kl_beta=0.0, clip_eps=1e9)
    snap = trn.PolicySnapshot(trn.snapshot_params(model.params),
                              trn.snapshot_params(model.params))
    _, grads, _ = trn.grpo_objective(groups, snap, model, cfg, MICRO_LAYOUT)

    # independent REINFORCE: d/dtheta mean_i A_i * mean_t log pi(z_t)
    seqs, logits_list, tape, logps, rows, masked = trn._teacher_forced_logprobs(
        model, MICRO_LAYOUT, groups, want_tape=True)
    n_out = sum(len(g.grids) for g in groups)
    lo, hi = MICRO_LAYOUT.image_base, MICRO_LAYOUT.image_base + MICRO_LAYOUT.image_codebook_size
    d_list = []
    idx = 0
    for grp in groups:
        for member in range(len(grp.grids)):
            adv = float(grp.advantages[member])
            logits = logits_list[idx]
            r, targets = rows[idx]
            t_count = targets.size
            probs = np.exp(masked[idx])
            coeff = adv / (n_out * t_count)
            d = np.zeros_like(logits)
            block = -probs * coeff
            block[np.arange(t_count), targets - lo] += coeff
            d[r, lo:hi] = block
            d_list.append(d)
            idx += 1
    ref_grads = tr.backward_batch(model, tape, d_list)
    for name in grads:
        assert np.max(np.abs(grads[name] - ref_grads[name])) < 1e-6, name


# ---------------------------------------------------------------------------
# rollouts and stages
# ---------------------------------------------------------------------------

def test_grpo_rollout_deterministic_and_shares_prompt_blocks():
    layout = tok.VocabLayout()
    cfg = trn.TrainConfig(group_size=4, n_layers=1, n_heads=2, model_dim=16,
                          ffn_dim=32, max_seq_len=128, rollout_cfg_scale=1.0)
    model = tr.new_model(trn.model_config(cfg, layout), seed=3)
    prompts = ["a red square", "a circle above a star"]
    g1 = trn.grpo_rollout(model, layout, prompts, cfg, 8, 8, seed=5)
    g2 = trn.grpo_rollout(model, layout, prompts, cfg, 8, 8, seed=5)
    for a, b in zip(g1, g2):
        assert np.array_equal(a.rewards, b.rewards)
        for ga, gb in zip(a.grids, b.grids):
            assert np.array_equal(ga.codes, gb.codes)
    assert all(len(g.grids) == 4 for g in g1)
    assert all(abs(g.advantages.mean()) < 1e-9 or g.rewards.std() < 1e-6 for g in g1)


def test_identical_rewards_zero_advantages():
    a = trn.grpo_advantages(np.array([0.7, 0.7, 0.7, 0.7]))
    assert np.allclose(a, 0.0)


def test_config_file_roundtrip(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("seed=9\npretrain_steps=3\nrl_lr=0.0002  # comment\n\n")
    cfg = trn.config_from_file(p)
    assert cfg.seed == 9 and cfg.pretrain_steps == 3 and cfg.rl_lr == 2e-4
    snap = trn.config_to_lines(cfg)
    assert "seed=9" in snap and "pretrain_steps=3" in snap
    with pytest.raises(ConfigError):
        trn.config_from_file(p, {"warp_factor": "11"})
    p2 = tmp_path / "bad.txt"
    p2.write_text("just words\n")
    with pytest.raises(ConfigError):
        trn.config_from_file(p2)


def test_metric_line_format():
    line = trn.metric_line("grpo", 3, 0.5, 0.25, 0.001)
    assert line == "stage=grpo step=3 loss=0.500000 reward=0.250000 kl=0.001000"


def test_run_stage_rejects_unknown_and_missing_prereq(tmp_path):
    cfg = trn.TrainConfig(pretrain_steps=1, sft_steps=1, grpo_steps=1)
    with pytest.raises(ConfigError):
        trn.run_stage("warmup", cfg, tmp_path)
    from arvis.errors import PipelineError
    with pytest.raises(PipelineError):
        trn.run_stage("sft", cfg, tmp_path)


def test_tiny_lm_stage_decreases_loss(tmp_path):
    cfg = trn.TrainConfig(n_layers=2, n_heads=2, model_dim=32, ffn_dim=64,
                          batch_size=4, pretrain_steps=60, max_seq_len=128,
                          pretrain_lr=3e-3, seed=1)
    summary = trn.run_stage("pretrain", cfg, tmp_path)
    assert summary["tail_loss"] < summary["first_loss"]
    assert trn.stage_checkpoint(tmp_path, "pretrain").exists()
    log = (tmp_path / "logs" / "metrics.log").read_text()
    assert "stage=pretrain step=1 " in log
