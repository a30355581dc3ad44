"""Three-stage trainer: language-model pretraining on broad toyworld scenes,
supervised fine-tuning on the canonical-style subset, and GRPO post-training
against the programmatic verifier reward.

The GRPO objective is the clipped-ratio group-relative form: per-token
probability ratios against the rollout-time policy, token-mean aggregated per
output, group-standardized advantages, minus a k3-estimated KL penalty to the
frozen reference policy. Gradients are exact (hand-written through the
transformer backward) and finite-difference checked in the test suite.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import decoding as dec
from . import numerics as nm
from . import tokenization as tok
from . import toyworld as toy
from . import transformer as tr
from .errors import (ConfigError, DegenerateBatchError, PipelineError,
                     RolloutStateError, TrainingDivergenceError, VerifierError)

STAGES = ("pretrain", "sft", "grpo")


@dataclass(frozen=True)
class TrainConfig:
    """Flat run configuration; every field doubles as a config-file key."""

    seed: int = 0
    threads: int = 0  # 0 = all cores; results are thread-count independent
    # model geometry
    n_layers: int = 4
    n_heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 512
    max_seq_len: int = 600
    rope_mode: str = "1d"
    rope_base: float = 10000.0
    image_codes: int = 64
    # stage schedules (no warmup, no decay)
    pretrain_lr: float = 1e-4
    sft_lr: float = 2e-5
    rl_lr: float = 1e-5
    batch_size: int = 8
    pretrain_steps: int = 2500
    sft_steps: int = 1200
    grpo_steps: int = 80
    pretrain_grid: str = "8x8"
    sft_grid: str = "16x16"
    prompt_dropout: float = 0.1
    caption_degrade: float = 0.3
    # optimizer
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    # grpo
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    inner_epochs: int = 1
    prompts_per_step: int = 3
    advantage_std_floor: float = 1e-6
    rollout_top_k: int = 64
    rollout_temperature: float = 1.0
    rollout_cfg_scale: float = 2.0
    # inference / eval defaults
    sample_mode: str = "topk"
    sample_top_k: int = 64
    sample_temperature: float = 1.0
    sample_cfg_scale: float = 2.0
    eval_n: int = 25
    # bench
    bench_prompts: int = 8
    bench_batch: int = 8

    def grid(self, stage: str) -> tuple[int, int]:
        spec = self.pretrain_grid if stage == "pretrain" else self.sft_grid
        h, w = spec.lower().split("x")
        return int(h), int(w)


def config_from_file(path: str | Path, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Flat key=value file plus override pairs; unknown keys are rejected."""
    values: dict[str, str] = {}
    text = Path(path).read_text() if path else ""
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    values.update(overrides or {})
    return config_from_pairs(values)


def config_from_pairs(values: dict[str, str]) -> TrainConfig:
    known = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    defaults = TrainConfig()
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(defaults, key)
        try:
            if isinstance(current, bool):
                kwargs[key] = val.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                kwargs[key] = int(val)
            elif isinstance(current, float):
                kwargs[key] = float(val)
            else:
                kwargs[key] = val
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {val!r}") from e
    return TrainConfig(**kwargs)


def config_to_lines(cfg: TrainConfig) -> str:
    return "\n".join(f"{f.name}={getattr(cfg, f.name)}" for f in fields(TrainConfig)) + "\n"


def make_layout(cfg: TrainConfig) -> tok.VocabLayout:
    return tok.VocabLayout(image_codebook_size=cfg.image_codes)


def model_config(cfg: TrainConfig, layout: tok.VocabLayout) -> tr.ModelConfig:
    return tr.ModelConfig(n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                          model_dim=cfg.model_dim, ffn_dim=cfg.ffn_dim,
                          total_vocab=layout.total_vocab, max_seq_len=cfg.max_seq_len,
                          rope_mode=cfg.rope_mode, rope_base=cfg.rope_base)


def sampler_from(cfg: TrainConfig, seed: int, rollout: bool = False) -> dec.SamplerConfig:
    if rollout:
        return dec.SamplerConfig("topk", cfg.rollout_top_k, cfg.rollout_temperature,
                                 cfg.rollout_cfg_scale, seed)
    return dec.SamplerConfig(cfg.sample_mode, cfg.sample_top_k, cfg.sample_temperature,
                             cfg.sample_cfg_scale, seed)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean -log softmax(logits)[target] over masked rows; returns (loss, dlogits)."""
    if not mask.any():
        raise DegenerateBatchError("loss mask selects no positions")
    n = int(mask.sum())
    rows = np.flatnonzero(mask)
    logp = nm.log_softmax_rows(logits[rows])
    loss = float(-np.mean(logp[np.arange(n), targets[rows]]))
    d = np.zeros_like(logits)
    probs = np.exp(logp)
    probs[np.arange(n), targets[rows]] -= 1.0
    d[rows] = probs / n
    return loss, d


def image_loss_mask(seq: tok.TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    """(targets, mask) over prediction rows 0..L-2, selecting image-token targets."""
    ids = seq.ids
    targets = ids[1:].astype(np.int64)
    mask = np.zeros(ids.size - 1, dtype=bool)
    mask[seq.image_start - 1:seq.image_end - 1] = True
    return targets, mask


def lm_loss_and_grads(model: tr.Model, seqs: list[tok.TokenSequence]):
    """Language-modeling loss over image positions, plus parameter gradients."""
    id_arrays = [s.ids.astype(np.int64) for s in seqs]
    positions = [tr.sequence_positions(s.ids.size, s.image_start, s.h, s.w) for s in seqs]
    logits_list, tape = tr.forward_batch(model, id_arrays, positions, want_tape=True)
    d_list, losses, counts = [], [], []
    for seq, logits in zip(seqs, logits_list):
        targets, mask = image_loss_mask(seq)
        loss, d = cross_entropy(logits[:-1], targets, mask)
        d_full = np.concatenate([d, np.zeros_like(logits[-1:])])
        d_list.append(d_full)
        losses.append(loss)
        counts.append(int(mask.sum()))
    total = sum(counts)
    # re-weight so the batch loss is the mean over all masked tokens
    d_list = [d * (c / total) for d, c in zip(d_list, counts)]
    batch_loss = float(sum(l * c for l, c in zip(losses, counts)) / total)
    if not np.isfinite(batch_loss):
        raise TrainingDivergenceError(f"non-finite loss {batch_loss}")
    grads = tr.backward_batch(model, tape, d_list)
    return batch_loss, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01


def init_optim(params: dict[str, np.ndarray], cfg: TrainConfig | None = None) -> OptimState:
    cfg = cfg or TrainConfig()
    return OptimState({k: np.zeros_like(v) for k, v in params.items()},
                      {k: np.zeros_like(v) for k, v in params.items()},
                      beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                      eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimState, lr: float) -> None:
    """Decoupled weight decay, then bias-corrected Adam. Aborts on non-finite grads."""
    for k in params:
        if not np.all(np.isfinite(grads[k])):
            raise TrainingDivergenceError(f"non-finite gradient for {k}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for k, p in params.items():
        g = grads[k]
        p *= 1.0 - lr * state.weight_decay
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * (g * g)
        m_hat = state.m[k] / (1 - b1 ** t)
        v_hat = state.v[k] / (1 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# GRPO pieces
# ---------------------------------------------------------------------------

def grpo_advantages(rewards: np.ndarray, std_floor: float = 1e-6) -> np.ndarray:
    """Group-standardized rewards: (r - mean) / max(population std, floor)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ConfigError("a group needs at least 2 rewards")
    return (r - r.mean()) / max(float(r.std()), std_floor)


def kl_term(logp_theta: np.ndarray, logp_ref: np.ndarray) -> float:
    """Mean k3 estimate r - ln r - 1 with r = pi_ref(token) / pi_theta(token)."""
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_theta, dtype=np.float64)
    return float(np.mean(np.exp(d) - d - 1.0))


@dataclass
class GroupSample:
    prompt: str
    prompt_ids: list[int]
    grids: list[tok.ImageTokenGrid]
    old_logprobs: list[np.ndarray]
    rewards: np.ndarray
    advantages: np.ndarray


@dataclass
class PolicySnapshot:
    """Frozen parameter copies: pi_theta_old per rollout batch, pi_ref per stage."""
    old_params: dict[str, np.ndarray]
    ref_params: dict[str, np.ndarray]


def snapshot_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def resolve_threads(n: int) -> int:
    return n if n > 0 else (os.cpu_count() or 1)


def grpo_rollout(model: tr.Model, layout: tok.VocabLayout, prompts: list[str],
                 cfg: TrainConfig, h: int, w: int, seed: int,
                 threads: int = 1) -> list[GroupSample]:
    """G rollouts per prompt with the prompt prefix forked in a shared pool."""
    g = cfg.group_size
    threads = resolve_threads(threads)
    flat_prompts, flat_seeds = [], []
    for i, prompt in enumerate(prompts):
        ids = tok.encode_text(prompt, layout)
        flat_prompts.extend([ids] * g)
        flat_seeds.extend(seed + 7919 * i + j for j in range(g))
    sampler = sampler_from(cfg, seed, rollout=True)
    pool = None
    if threads <= 1:
        pool = dec.pool_for(model, layout, 2 * len(flat_prompts) + 2 * len(prompts), h, w,
                            max_prompt=max(len(p) for p in flat_prompts))
    results = dec.generate_batch(model, layout, flat_prompts, h, w, sampler,
                                 seeds=flat_seeds, pool=pool, group_forks=True,
                                 want_logprobs=True, threads=threads)
    groups = []
    for i, prompt in enumerate(prompts):
        chunk = results[i * g:(i + 1) * g]
        rewards = []
        for j, res in enumerate(chunk):
            try:
                reward, _ = toy.verify(prompt, res.grid)
            except VerifierError:
                # resample this member once, then give up
                retry = dec.generate(model, layout, tok.encode_text(prompt, layout), h, w,
                                     dec._with_seed(sampler, flat_seeds[i * g + j] + 104729),
                                     want_logprobs=True)
                reward, _ = toy.verify(prompt, retry.grid)
                chunk[j] = retry
            rewards.append(reward)
        rewards = np.asarray(rewards, dtype=np.float64)
        groups.append(GroupSample(
            prompt=prompt,
            prompt_ids=tok.encode_text(prompt, layout),
            grids=[r.grid for r in chunk],
            old_logprobs=[r.logprobs for r in chunk],
            rewards=rewards,
            advantages=grpo_advantages(rewards, cfg.advantage_std_floor)))
    return groups


def _teacher_forced_logprobs(model: tr.Model, layout: tok.VocabLayout,
                             groups: list[GroupSample], want_tape: bool):
    """Per-token log pi(z_t) over the image range for every output, plus tape."""
    seqs, id_arrays, positions = [], [], []
    for grp in groups:
        for grid in grp.grids:
            seq = tok.build_sequence(grp.prompt_ids, grid, layout)
            seqs.append(seq)
            id_arrays.append(seq.ids.astype(np.int64))
            positions.append(tr.sequence_positions(seq.ids.size, seq.image_start, seq.h, seq.w))
    logits_list, tape = tr.forward_batch(model, id_arrays, positions, want_tape=want_tape)
    logps, row_ranges, masked_list = [], [], []
    lo, hi = layout.image_base, layout.image_base + layout.image_codebook_size
    for seq, logits in zip(seqs, logits_list):
        rows = slice(seq.image_start - 1, seq.image_end - 1)
        targets = seq.ids[seq.image_start:seq.image_end].astype(np.int64)
        sub = logits[rows, lo:hi]
        logp_rows = nm.log_softmax_rows(sub)
        logps.append(logp_rows[np.arange(targets.size), targets - lo])
        row_ranges.append((rows, targets))
        masked_list.append(logp_rows)
    return seqs, logits_list, tape, logps, row_ranges, masked_list


def grpo_objective(groups: list[GroupSample], snapshot: PolicySnapshot,
                   model: tr.Model, cfg: TrainConfig, layout: tok.VocabLayout):
    """Eq-style clipped group objective and its exact ascent gradients.

    J = mean_outputs [ mean_t min(rho_t * A, clip(rho_t, 1-eps, 1+eps) * A) ]
        - beta * mean_outputs [ mean_t k3_t ]
    """
    for grp in groups:
        if any(lp is None for lp in grp.old_logprobs):
            raise RolloutStateError("rollout did not store old log-probabilities")
    seqs, logits_list, tape, logps, row_ranges, masked_list = _teacher_forced_logprobs(
        model, layout, groups, want_tape=True)
    ref_model = tr.Model(model.config, snapshot.ref_params)
    _, _, _, ref_logps, _, _ = _teacher_forced_logprobs(ref_model, layout, groups,
                                                        want_tape=False)
    n_out = sum(len(g.grids) for g in groups)
    eps = cfg.clip_eps
    beta = cfg.kl_beta
    lo, hi = layout.image_base, layout.image_base + layout.image_codebook_size

    j_policy = 0.0
    j_kl = 0.0
    d_logits_list = []
    idx = 0
    for grp in groups:
        for member, _ in enumerate(grp.grids):
            adv = float(grp.advantages[member])
            logp = logps[idx]
            old = np.asarray(grp.old_logprobs[member], dtype=np.float64)
            ref = ref_logps[idx]
            t_count = logp.size
            rho = np.exp(logp - old)
            clipped = np.clip(rho, 1.0 - eps, 1.0 + eps)
            j_policy += float(np.mean(np.minimum(rho * adv, clipped * adv))) / n_out
            r = np.exp(ref - logp)
            j_kl += float(np.mean(r - (ref - logp) - 1.0)) / n_out
            if adv >= 0:
                active = rho <= 1.0 + eps
            else:
                active = rho >= 1.0 - eps
            coeff = (adv * rho * active + beta * (r - 1.0)) / (n_out * t_count)
            logits = logits_list[idx]
            rows, targets = row_ranges[idx]
            probs = np.exp(masked_list[idx])
            d = np.zeros_like(logits)
            block = -probs * coeff[:, None]
            block[np.arange(t_count), targets - lo] += coeff
            d[rows, lo:hi] = block
            d_logits_list.append(d)
            idx += 1
    objective = j_policy - beta * j_kl
    grads = tr.backward_batch(model, tape, d_logits_list)
    return objective, grads, dict(policy=j_policy, kl=j_kl)


# ---------------------------------------------------------------------------
# data and stage loops
# ---------------------------------------------------------------------------

def training_example(rng: np.random.Generator, layout: tok.VocabLayout,
                     cfg: TrainConfig, stage: str, h: int, w: int) -> tok.TokenSequence:
    if stage == "pretrain":
        # broad data: dense generic scenes, both render styles, loose captions
        scene = toy.sample_dense_scene(rng)
        style = int(rng.integers(tok.N_STYLES))
        if rng.uniform() < cfg.caption_degrade:
            prompt = toy.caption(toy.Scene([scene.objects[0]]), "single")
        else:
            prompt = toy.caption_dense(scene, rng)
    else:
        # curated subset: canonical category scenes, exact captions, one style
        category = toy.CATEGORIES[int(rng.integers(len(toy.CATEGORIES)))]
        scene = toy.sample_scene(rng, category)
        style = 0
        prompt = toy.caption(scene, category)
    prompt_ids = tok.encode_text(prompt, layout)
    if rng.uniform() < cfg.prompt_dropout:
        prompt_ids = [layout.nullprompt]  # unconditional example for CFG
    grid = toy.render_scene(scene, h, w, style)
    return tok.build_sequence(prompt_ids, grid, layout)


def stage_checkpoint(run_dir: Path, stage: str) -> Path:
    return Path(run_dir) / "checkpoints" / f"{stage}.ckpt"


def _metrics_path(run_dir: Path) -> Path:
    return Path(run_dir) / "logs" / "metrics.log"


def _append_metrics(run_dir: Path, lines: list[str]) -> None:
    path = _metrics_path(run_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        for line in lines:
            f.write(line + "\n")


def metric_line(stage: str, step: int, loss: float, reward: float = 0.0,
                kl: float = 0.0) -> str:
    return f"stage={stage} step={step} loss={loss:.6f} reward={reward:.6f} kl={kl:.6f}"


def run_stage(stage: str, cfg: TrainConfig, run_dir: str | Path,
              log_every: int = 25) -> dict:
    """Execute one training stage end to end; writes checkpoint and metrics."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    run_dir = Path(run_dir)
    layout = make_layout(cfg)
    t0 = time.perf_counter()
    if stage == "pretrain":
        model = tr.Model(model_config(cfg, layout), tr.init_params(model_config(cfg, layout), cfg.seed))
    else:
        prev = {"sft": "pretrain", "grpo": "sft"}[stage]
        prev_path = stage_checkpoint(run_dir, prev)
        if not prev_path.exists():
            raise PipelineError(f"missing prerequisite checkpoint: {prev_path}")
        model = tr.load_checkpoint(prev_path)

    if stage in ("pretrain", "sft"):
        summary = _run_lm_stage(stage, cfg, run_dir, model, layout)
    else:
        summary = _run_grpo_stage(cfg, run_dir, model, layout)
    out = stage_checkpoint(run_dir, stage)
    out.parent.mkdir(parents=True, exist_ok=True)
    tr.save_checkpoint(model, out)
    summary["checkpoint"] = str(out)
    summary["wall_s"] = time.perf_counter() - t0
    return summary


def _run_lm_stage(stage: str, cfg: TrainConfig, run_dir: Path,
                  model: tr.Model, layout: tok.VocabLayout) -> dict:
    h, w = cfg.grid(stage)
    steps = cfg.pretrain_steps if stage == "pretrain" else cfg.sft_steps
    lr = cfg.pretrain_lr if stage == "pretrain" else cfg.sft_lr
    rng = np.random.default_rng([cfg.seed, STAGES.index(stage)])
    optim = init_optim(model.params, cfg)
    lines, losses = [], []
    first_loss = None
    for step in range(1, steps + 1):
        seqs = [training_example(rng, layout, cfg, stage, h, w)
                for _ in range(cfg.batch_size)]
        loss, grads = lm_loss_and_grads(model, seqs)
        if first_loss is None:
            first_loss = loss
        clip_global_norm(grads, cfg.grad_clip)
        adamw_step(model.params, grads, optim, lr)
        losses.append(loss)
        if step % 25 == 0 or step == 1 or step == steps:
            lines.append(metric_line(stage, step, loss))
    _append_metrics(run_dir, lines)
    tail = float(np.mean(losses[-20:]))
    return dict(stage=stage, steps=steps, first_loss=first_loss,
                final_loss=losses[-1], tail_loss=tail)


def _sample_rl_prompts(rng: np.random.Generator, n: int, step: int) -> list[str]:
    """Fresh prompts with a deterministic category rotation.

    Rotating categories keeps the per-step prompt mix comparable across the
    stage, so the reward trace measures policy movement, not mix luck.
    """
    prompts = []
    for j in range(n):
        cat = toy.CATEGORIES[((step - 1) * n + j) % len(toy.CATEGORIES)]
        prompts.append(toy.caption(toy.sample_scene(rng, cat), cat))
    return prompts


def _run_grpo_stage(cfg: TrainConfig, run_dir: Path, model: tr.Model,
                    layout: tok.VocabLayout) -> dict:
    h, w = cfg.grid("grpo")
    rng = np.random.default_rng([cfg.seed, STAGES.index("grpo")])
    ref_params = snapshot_params(model.params)
    ref_fingerprint = {k: v.tobytes() for k, v in ref_params.items()}
    optim = init_optim(model.params, cfg)
    lines, reward_trace, kl_trace = [], [], []
    for step in range(1, cfg.grpo_steps + 1):
        prompts = _sample_rl_prompts(rng, cfg.prompts_per_step, step)
        snapshot = PolicySnapshot(snapshot_params(model.params), ref_params)
        rollout_seed = cfg.seed * 1_000_003 + step * 101
        groups = grpo_rollout(model, layout, prompts, cfg, h, w, rollout_seed,
                              threads=cfg.threads)
        mean_reward = float(np.mean([g.rewards.mean() for g in groups]))
        kl_val = 0.0
        for _ in range(cfg.inner_epochs):
            objective, grads, parts = grpo_objective(groups, snapshot, model, cfg, layout)
            neg = {k: -g for k, g in grads.items()}
            clip_global_norm(neg, cfg.grad_clip)
            adamw_step(model.params, neg, optim, cfg.rl_lr)
            kl_val = parts["kl"]
        reward_trace.append(mean_reward)
        kl_trace.append(kl_val)
        lines.append(metric_line("grpo", step, -objective, mean_reward, kl_val))
    _append_metrics(run_dir, lines)
    ref_unchanged = all(ref_params[k].tobytes() == ref_fingerprint[k] for k in ref_params)
    # endpoint windows: three whole category-rotation periods, so start and end
    # average the same prompt mix while staying near the stage boundaries
    period = max(1, -(-len(toy.CATEGORIES) // max(1, cfg.prompts_per_step)))
    window = min(3 * period, cfg.grpo_steps)
    head = float(np.mean(reward_trace[:window]))
    tail = float(np.mean(reward_trace[-window:]))
    return dict(stage="grpo", steps=cfg.grpo_steps, reward_trace=reward_trace,
                reward_start=head, reward_end=tail, reward_window=window,
                kl_trace=kl_trace, ref_unchanged=ref_unchanged)
