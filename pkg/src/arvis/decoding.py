"""Inference engine: CFG-combined sampling, sequential decoding with or
without the paged KV cache, lockstep batched decoding, and speculative Jacobi
decoding (SJD) with sliding windows.

Token-by-token generation always emits exactly h*w image tokens; logits are
masked to the image-code range before sampling so the model can never emit a
cross-segment id. Classifier-free guidance keeps two streams (prompt and
NULLPROMPT) and combines their logits per step; scale 1 short-circuits to a
single conditional stream, scale 0 to a single unconditional stream.

SJD keeps a window of drafted suffix tokens and verifies the whole window with
one parallel forward per iteration. Greedy acceptance reproduces sequential
greedy decoding token-for-token; speculative acceptance does per-position
rejection sampling against the recorded drafting distributions with residual
resampling, which preserves the sequential sampling distribution. Accepted
tokens' K/V are committed to the cache; unaccepted window positions are
recomputed next iteration.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import tokenization as tok
from . import transformer as tr
from .errors import (ConfigError, DegenerateDistributionError, DimensionError,
                     ParameterError, ProgressStallError)
from .kv_cache import BlockPool


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "topk"            # "greedy" ignores top_k / temperature / seed
    top_k: int = 64
    temperature: float = 1.0
    cfg_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "topk"):
            raise ConfigError(f"unknown sampler mode {self.mode}")
        if self.mode == "topk":
            if self.top_k < 1:
                raise ConfigError("top_k must be >= 1")
            if self.temperature <= 0:
                raise ParameterError("temperature must be > 0")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0")


@dataclass(frozen=True)
class SjdConfig:
    window: int = 16              # 0 = whole remaining suffix
    max_jacobi_iters: int = 0     # 0 = auto (image length + 8)
    acceptance: str = "auto"      # greedy | speculative | auto (follow sampler mode)

    def __post_init__(self):
        if self.window < 0:
            raise ConfigError("window must be >= 0")
        if self.acceptance not in ("auto", "greedy", "speculative"):
            raise ConfigError(f"unknown acceptance mode {self.acceptance}")

    def resolve_acceptance(self, sampler: SamplerConfig) -> str:
        if self.acceptance != "auto":
            return self.acceptance
        return "greedy" if sampler.mode == "greedy" else "speculative"


@dataclass
class DecodeStats:
    forward_passes: int = 0
    tokens_accepted: int = 0
    wall_time: float = 0.0
    accept_histogram: dict[int, int] = field(default_factory=dict)

    def note_accept(self, n: int) -> None:
        self.tokens_accepted += n
        self.accept_histogram[n] = self.accept_histogram.get(n, 0) + 1


@dataclass
class GenResult:
    grid: tok.ImageTokenGrid
    stats: DecodeStats
    step_logits: list[np.ndarray] | None = None
    logprobs: np.ndarray | None = None  # log pi(token | prompt, prefix), conditional stream


def cfg_combine(cond_logits: np.ndarray, uncond_logits: np.ndarray, scale: float) -> np.ndarray:
    """Logit-space linear extrapolation: uncond + scale * (cond - uncond)."""
    if cond_logits.shape != uncond_logits.shape:
        raise DimensionError(f"cfg shapes differ: {cond_logits.shape} vs {uncond_logits.shape}")
    return uncond_logits + np.asarray(scale, dtype=cond_logits.dtype) * (cond_logits - uncond_logits)


def mask_image_range(logits: np.ndarray, layout: tok.VocabLayout) -> np.ndarray:
    """-inf everywhere outside the image-code id range."""
    out = np.full_like(logits, -np.inf)
    lo, hi = layout.image_base, layout.image_base + layout.image_codebook_size
    out[..., lo:hi] = logits[..., lo:hi]
    return out


def sampling_distribution(logits: np.ndarray, sampler: SamplerConfig) -> np.ndarray:
    """Effective per-step distribution over the full vocab (zeros off-support).

    greedy: point mass on the argmax (lowest id wins ties).
    topk:   softmax at the configured temperature over the k largest logits,
            renormalized; ties at the k-th value break toward lower ids.
    """
    finite = np.isfinite(logits)
    n_finite = int(finite.sum())
    if not n_finite:
        raise DegenerateDistributionError("all logits are -inf")
    probs = np.zeros(logits.shape[-1], dtype=np.float64)
    if sampler.mode == "greedy":
        probs[int(np.argmax(logits))] = 1.0
        return probs
    if sampler.top_k >= n_finite:
        z = logits[finite].astype(np.float64) / sampler.temperature
        z -= z.max()
        e = np.exp(z)
        probs[finite] = e / e.sum()
        return probs
    order = np.argsort(-logits, kind="stable")
    keep = order[:sampler.top_k]
    probs[keep] = nm.softmax(logits[keep].astype(np.float64), sampler.temperature)
    return probs


def draw_from(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; deterministic given the rng state."""
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"),
                   probs.size - 1))


def sample_next(logits: np.ndarray, sampler: SamplerConfig,
                rng: np.random.Generator) -> int:
    """Draw one token id; deterministic given (logits, sampler, rng state)."""
    if sampler.mode == "greedy":
        if not np.isfinite(logits).any():
            raise DegenerateDistributionError("all logits are -inf")
        return int(np.argmax(logits))
    return draw_from(sampling_distribution(logits, sampler), rng)


# ---------------------------------------------------------------------------
# stream plumbing
# ---------------------------------------------------------------------------

def _prefix_ids(prompt_ids: list[int], layout: tok.VocabLayout, conditional: bool) -> np.ndarray:
    if conditional:
        body = list(prompt_ids)
    else:
        body = [layout.nullprompt]
    return np.array([layout.bos] + body + [layout.boi], dtype=np.int64)


@dataclass
class _Stream:
    """One cached decoding stream: its prefix, positions, and cache handle."""
    prefix: np.ndarray
    positions: np.ndarray
    handle: object

    def pos_at(self, image_index: int) -> np.ndarray:
        return self.positions[self.prefix.size + image_index:self.prefix.size + image_index + 1]


def _open_streams(model, layout, prompt_ids, h, w, sampler, pool,
                  prompt_handles=None):
    """Prefill the conditional (and, if needed, unconditional) streams.

    Returns (streams, last_logits_per_stream). With prompt_handles given
    (prefilled prompt prefixes), streams fork them instead of recomputing.
    """
    use_cond = sampler.cfg_scale != 0.0
    use_uncond = sampler.cfg_scale != 1.0
    streams, logits = [], []
    for conditional, active in ((True, use_cond), (False, use_uncond)):
        if not active:
            streams.append(None)
            logits.append(None)
            continue
        prefix = _prefix_ids(prompt_ids, layout, conditional)
        positions = tr.sequence_positions(prefix.size + h * w + 1, prefix.size, h, w)
        if prompt_handles is not None:
            handle, pre_logits = prompt_handles[conditional]
            streams.append(_Stream(prefix, positions, pool.fork(handle)))
            logits.append(pre_logits)
        else:
            handle = pool.allocate(0)
            lg, _ = tr.forward_cached(model, prefix, positions[:prefix.size], handle)
            streams.append(_Stream(prefix, positions, handle))
            logits.append(lg[-1])
    return streams, logits


def _combined(cond_logits, uncond_logits, sampler, layout):
    if sampler.cfg_scale == 1.0:
        merged = cond_logits
    elif sampler.cfg_scale == 0.0:
        merged = uncond_logits
    else:
        merged = cfg_combine(cond_logits, uncond_logits, sampler.cfg_scale)
    return mask_image_range(merged, layout)


def pool_for(model, layout, n_streams: int, h: int, w: int,
             max_prompt: int = 24, block_size: int = 16, dtype=None) -> BlockPool:
    per_stream_blocks = -(-(max_prompt + 2 + h * w) // block_size) + 1
    capacity = n_streams * per_stream_blocks
    dtype = dtype if dtype is not None else model.params["embed"].dtype
    return BlockPool(model.config.n_layers, model.config.model_dim, capacity,
                     block_size, dtype)


# ---------------------------------------------------------------------------
# sequential generation
# ---------------------------------------------------------------------------

def generate(model, layout, prompt_ids, h: int, w: int, sampler: SamplerConfig,
             use_cache: bool = True, pool: BlockPool | None = None,
             collect_logits: bool = False, want_logprobs: bool = False) -> GenResult:
    """Emit exactly h*w image tokens for one prompt."""
    t0 = time.perf_counter()
    if use_cache:
        results = generate_batch(model, layout, [prompt_ids], h, w, sampler,
                                 seeds=[sampler.seed], pool=pool,
                                 collect_logits=collect_logits, want_logprobs=want_logprobs)
        res = results[0]
        res.stats.wall_time = time.perf_counter() - t0
        return res

    rng = np.random.default_rng(sampler.seed)
    stats = DecodeStats()
    use_cond = sampler.cfg_scale != 0.0
    use_uncond = sampler.cfg_scale != 1.0
    seqs = {}
    positions = {}
    for conditional, active in ((True, use_cond), (False, use_uncond)):
        if active:
            prefix = _prefix_ids(prompt_ids, layout, conditional)
            seqs[conditional] = list(prefix)
            positions[conditional] = tr.sequence_positions(prefix.size + h * w + 1,
                                                           prefix.size, h, w)
    tokens, step_logits, logprobs = [], [], []
    keys = list(seqs.keys())
    for _ in range(h * w):
        arrays = [np.asarray(seqs[c], dtype=np.int64) for c in keys]
        pos = [positions[c][:a.size] for c, a in zip(keys, arrays)]
        logits_list, _ = tr.forward_batch(model, arrays, pos)
        per_stream = {c: lg[-1] for c, lg in zip(keys, logits_list)}
        stats.forward_passes += 1
        merged = _combined(per_stream.get(True), per_stream.get(False), sampler, layout)
        token = sample_next(merged, sampler, rng)
        if collect_logits:
            step_logits.append(merged)
        if want_logprobs:
            cond_masked = mask_image_range(per_stream[True], layout)
            logprobs.append(_masked_logprob(cond_masked, token))
        tokens.append(token)
        stats.note_accept(1)
        for ids in seqs.values():
            ids.append(token)
    stats.wall_time = time.perf_counter() - t0
    grid = tok.unflatten_raster(np.asarray(tokens, dtype=np.int64) - layout.image_base, h, w)
    return GenResult(grid, stats, step_logits if collect_logits else None,
                     np.asarray(logprobs) if want_logprobs else None)


def _masked_logprob(masked_logits: np.ndarray, token: int) -> float:
    logp = masked_logits.astype(np.float64)
    finite = np.isfinite(logp)
    m = np.max(logp[finite])
    z = m + np.log(np.sum(np.exp(logp[finite] - m)))
    return float(logp[token] - z)


def generate_batch(model, layout, prompts: list[list[int]], h: int, w: int,
                   sampler: SamplerConfig, seeds: list[int],
                   pool: BlockPool | None = None, group_forks: bool = False,
                   collect_logits: bool = False, want_logprobs: bool = False,
                   threads: int = 1) -> list[GenResult]:
    """Lockstep cached decoding of B independent prompts.

    group_forks: runs of identical consecutive prompts prefill their prompt
    prefix once and fork it, so a GRPO group shares prompt blocks in the pool.
    """
    if threads > 1 and len(prompts) > 1:
        chunks = np.array_split(np.arange(len(prompts)), min(threads, len(prompts)))
        out: list[GenResult | None] = [None] * len(prompts)

        def run(idx):
            sub = [prompts[i] for i in idx]
            ss = [seeds[i] for i in idx]
            return generate_batch(model, layout, sub, h, w, sampler, ss, None,
                                  group_forks, collect_logits, want_logprobs)

        with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
            for idx, res in zip(chunks, ex.map(run, chunks)):
                for i, r in zip(idx, res):
                    out[int(i)] = r
        return out  # type: ignore[return-value]

    t0 = time.perf_counter()
    b = len(prompts)
    own_pool = pool is None
    if own_pool:
        max_prompt = max((len(p) for p in prompts), default=1)
        pool = pool_for(model, layout, 2 * b + 2, h, w, max_prompt=max_prompt)

    streams: list[list[_Stream | None]] = []
    last_logits: list[list[np.ndarray | None]] = []
    prompt_cache: dict[tuple, tuple] = {}
    shared_handles = []
    for prompt in prompts:
        key = tuple(prompt)
        if group_forks and key in prompt_cache:
            st, lg = _open_streams(model, layout, prompt, h, w, sampler, pool,
                                   prompt_handles=prompt_cache[key])
        else:
            st, lg = _open_streams(model, layout, prompt, h, w, sampler, pool)
            if group_forks:
                handles = {}
                for conditional, s in ((True, st[0]), (False, st[1])):
                    if s is not None:
                        handles[conditional] = (s.handle, lg[0 if conditional else 1])
                prompt_cache[key] = handles
                # keep the originals as the group's shared prefix; decode on forks
                st2, lg2 = _open_streams(model, layout, prompt, h, w, sampler, pool,
                                         prompt_handles=handles)
                shared_handles.extend(s.handle for s in st if s is not None)
                st, lg = st2, lg2
        streams.append(st)
        last_logits.append(lg)

    rngs = [np.random.default_rng(s) for s in seeds]
    stats = [DecodeStats(forward_passes=1) for _ in range(b)]
    tokens: list[list[int]] = [[] for _ in range(b)]
    step_logits: list[list[np.ndarray]] = [[] for _ in range(b)]
    logprobs: list[list[float]] = [[] for _ in range(b)]

    for t in range(h * w):
        chosen = []
        for s in range(b):
            cond, uncond = last_logits[s]
            merged = _combined(cond, uncond, sampler, layout)
            token = sample_next(merged, sampler, rngs[s])
            if collect_logits:
                step_logits[s].append(merged)
            if want_logprobs:
                logprobs[s].append(_masked_logprob(mask_image_range(cond, layout), token))
            tokens[s].append(token)
            stats[s].note_accept(1)
            chosen.append(token)
        if t == h * w - 1:
            break
        rows, row_pos, row_handles, owners = [], [], [], []
        for s in range(b):
            for si, stream in enumerate(streams[s]):
                if stream is None:
                    continue
                rows.append(chosen[s])
                row_pos.append(stream.pos_at(t)[0])
                row_handles.append(stream.handle)
                owners.append((s, si))
        lg = tr.forward_step_batch(model, np.asarray(rows, dtype=np.int64),
                                   np.asarray(row_pos), row_handles)
        for (s, si), row in zip(owners, lg):
            last_logits[s][si] = row
        for s in range(b):
            stats[s].forward_passes += 1

    results = []
    for s in range(b):
        stats[s].wall_time = time.perf_counter() - t0
        grid = tok.unflatten_raster(np.asarray(tokens[s], dtype=np.int64) - layout.image_base, h, w)
        results.append(GenResult(grid, stats[s],
                                 step_logits[s] if collect_logits else None,
                                 np.asarray(logprobs[s]) if want_logprobs else None))
    # handles stay registered: a caller-provided pool remains inspectable, a
    # per-call pool is dropped with this frame either way
    return results


# ---------------------------------------------------------------------------
# speculative Jacobi decoding
# ---------------------------------------------------------------------------

def generate_sjd(model, layout, prompt_ids, h: int, w: int, sampler: SamplerConfig,
                 sjd: SjdConfig, pool: BlockPool | None = None) -> GenResult:
    """Windowed Jacobi decoding with greedy or speculative acceptance."""
    t0 = time.perf_counter()
    acceptance = sjd.resolve_acceptance(sampler)
    total = h * w
    guard = sjd.max_jacobi_iters or (total + 8)
    rng = np.random.default_rng(sampler.seed)
    if pool is None:
        pool = pool_for(model, layout, 2, h, w, max_prompt=max(1, len(prompt_ids)))
    streams, carry_logits = _open_streams(model, layout, prompt_ids, h, w, sampler, pool)
    live = [s for s in streams if s is not None]
    stats = DecodeStats(forward_passes=1)  # the prompt prefill

    accepted: list[int] = []          # unified ids of accepted image tokens
    committed = 0                     # accepted tokens whose K/V are cached
    drafts: list[int] = []            # current window tokens (unified ids)
    draft_q: list[np.ndarray | None] = []   # distribution each draft was sampled from

    def window_size() -> int:
        remaining = total - len(accepted)
        return remaining if sjd.window == 0 else min(sjd.window, remaining)

    def fill_drafts():
        filler = accepted[-1] if accepted else layout.boi
        while len(drafts) < window_size():
            drafts.append(filler)
            q = np.zeros(layout.total_vocab, dtype=np.float64)
            q[filler] = 1.0
            draft_q.append(q)

    def verify_slot(merged, j):
        """Accept draft j against its target distribution. Returns (ok, correction)."""
        if acceptance == "greedy":
            target = int(np.argmax(merged))
            if drafts[j] == target:
                return True, None
            return False, target
        p_vec = sampling_distribution(merged, sampler)
        q_vec = draft_q[j]
        d = drafts[j]
        ratio = p_vec[d] / q_vec[d] if q_vec[d] > 0 else 0.0
        if rng.uniform() < ratio:
            return True, None
        residual = np.maximum(p_vec - q_vec, 0.0)
        z = residual.sum()
        probs = residual if z > 0 else p_vec
        return False, draw_from(probs, rng)

    fill_drafts()
    # resolve the first slot against the prefill distribution: no extra pass
    first_merged = _combined(carry_logits[0], carry_logits[1], sampler, layout)
    ok, correction = verify_slot(first_merged, 0)
    accepted.append(drafts[0] if ok else correction)
    drafts, draft_q = drafts[1:], draft_q[1:]
    fill_drafts()
    pending_accepts = 1

    iters = 0
    while len(accepted) < total:
        if iters >= guard:
            raise ProgressStallError(f"no convergence after {iters} jacobi iterations")
        iters += 1
        k = len(drafts)
        m = len(accepted) - committed
        pending = accepted[committed:] + drafts
        row_logits = []   # per live stream: (m + k, vocab)
        kv_per_stream = []
        for s in live:
            base = s.prefix.size + committed
            pos = s.positions[base:base + m + k]
            lg, kv = tr.forward_cached(model, np.asarray(pending, dtype=np.int64),
                                       pos, s.handle, append=False)
            row_logits.append(lg)
            kv_per_stream.append(kv)
        stats.forward_passes += 1

        def slot_logits(j: int):
            """Combined masked logits for window slot j (j == k means bonus)."""
            row = m + j - 1
            cond = row_logits[0][row] if streams[0] is not None else None
            uncond = row_logits[-1][row] if streams[1] is not None else None
            return _combined(cond, uncond, sampler, layout)

        n_match = 0
        correction = None
        for j in range(k):
            ok, correction = verify_slot(slot_logits(j), j)
            if not ok:
                break
            n_match += 1

        newly = drafts[:n_match]
        if correction is not None:
            newly = newly + [correction]
        elif len(accepted) + n_match < total:
            merged = slot_logits(k)
            if acceptance == "greedy":
                newly = newly + [int(np.argmax(merged))]
            else:
                p_vec = sampling_distribution(merged, sampler)
                newly = newly + [draw_from(p_vec, rng)]

        # commit K/V for the pending accepted tail plus the matched drafts
        commit_n = m + n_match
        for s, kv in zip(live, kv_per_stream):
            tr.commit_rows(s.handle, kv, commit_n)
        committed += commit_n
        accepted.extend(newly)
        stats.note_accept(len(newly) + pending_accepts)
        pending_accepts = 0

        # refresh the window from this iteration's distributions
        consumed = n_match + 1  # slots now resolved (matched + corrected/bonus)
        new_drafts: list[int] = []
        new_q: list[np.ndarray | None] = []
        for j in range(consumed, k):
            if len(accepted) + len(new_drafts) + 1 > total:
                break
            merged = slot_logits(j)
            if acceptance == "greedy":
                new_drafts.append(int(np.argmax(merged)))
                new_q.append(None)
            else:
                p_vec = sampling_distribution(merged, sampler)
                new_drafts.append(draw_from(p_vec, rng))
                new_q.append(p_vec)
        drafts, draft_q = new_drafts, new_q
        fill_drafts()

    if pending_accepts:
        stats.note_accept(pending_accepts)
    for s in live:
        pool.free(s.handle)
    stats.wall_time = time.perf_counter() - t0
    grid = tok.unflatten_raster(np.asarray(accepted, dtype=np.int64) - layout.image_base, h, w)
    return GenResult(grid, stats)


# ---------------------------------------------------------------------------
# benchmark harness
# ---------------------------------------------------------------------------

BENCH_METHODS = ("nocache", "kvcache", "paged+batched", "sjd-greedy", "sjd-w")


def _bench_prompts(layout, n: int, seed: int) -> list[list[int]]:
    from . import toyworld
    rng = np.random.default_rng([seed, 77])
    prompts = []
    for i in range(n):
        cat = toyworld.CATEGORIES[i % len(toyworld.CATEGORIES)]
        prompts.append(tok.encode_text(toyworld.caption(toyworld.sample_scene(rng, cat), cat), layout))
    return prompts


def bench(model, layout, methods: list[str], n_prompts: int, h: int, w: int,
          sampler: SamplerConfig, seed: int = 0, batch: int = 8) -> list[dict]:
    """Per-method wall time, mean forward passes per image, and FLOP estimate."""
    prompts = _bench_prompts(layout, n_prompts, seed)
    seeds = [seed + 1000 + i for i in range(n_prompts)]
    records = []
    for method in methods:
        window = None
        if method.startswith("sjd-w") and method != "sjd-w":
            window = int(method[len("sjd-w"):])
        elif method not in BENCH_METHODS:
            raise ConfigError(f"unknown bench method {method!r}")
        nm.reset_flops()
        t0 = time.perf_counter()
        passes = 0
        if method == "nocache":
            for p, s in zip(prompts, seeds):
                res = generate(model, layout, p, h, w,
                               _with_seed(sampler, s), use_cache=False)
                passes += res.stats.forward_passes
        elif method == "kvcache":
            for p, s in zip(prompts, seeds):
                res = generate(model, layout, p, h, w, _with_seed(sampler, s))
                passes += res.stats.forward_passes
        elif method == "paged+batched":
            for i in range(0, n_prompts, batch):
                chunk = prompts[i:i + batch]
                res = generate_batch(model, layout, chunk, h, w, sampler,
                                     seeds=seeds[i:i + batch])
                passes += sum(r.stats.forward_passes for r in res)
        else:  # sjd variants
            sjd = SjdConfig(window=0 if window is None else window)
            for p, s in zip(prompts, seeds):
                res = generate_sjd(model, layout, p, h, w, _with_seed(sampler, s), sjd)
                passes += res.stats.forward_passes
        records.append(dict(method=method, prompts=n_prompts, grid=f"{h}x{w}",
                            fwd_passes=passes / n_prompts,
                            wall_s=time.perf_counter() - t0,
                            flops=nm.flop_count()))
    return records


def _with_seed(sampler: SamplerConfig, seed: int) -> SamplerConfig:
    return SamplerConfig(sampler.mode, sampler.top_k, sampler.temperature,
                         sampler.cfg_scale, seed)


def format_bench_report(records: list[dict]) -> str:
    lines = [(f"method={r['method']} prompts={r['prompts']} grid={r['grid']} "
              f"fwd_passes={r['fwd_passes']:.2f} wall_s={r['wall_s']:.3f} flops={r['flops']:d}")
             for r in records]
    return "\n".join(lines) + "\n"
