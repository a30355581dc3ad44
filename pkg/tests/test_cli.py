
from arvis import cli
from arvis import training as trn
from arvis import transformer as tr


TINY_ARGS = [
    "--set", "n_layers=1", "--set", "n_heads=2", "--set", "model_dim=16",
    "--set", "ffn_dim=32", "--set", "max_seq_len=128", "--set", "batch_size=2",
    "--set", "pretrain_steps=3", "--set", "sft_steps=2", "--set", "grpo_steps=1",
    "--set", "group_size=2", "--set", "prompts_per_step=1",
    "--set", "sft_grid=8x8", "--set", "eval_n=1", "--set", "bench_prompts=1",
    "--set", "rollout_cfg_scale=1.0",
]


def run_cli(tmp_path, *argv):
    return cli.run(list(argv) + ["--out", str(tmp_path / "run")])


def test_grpo_without_sft_checkpoint_exits_2(tmp_path, capsys):
    code = run_cli(tmp_path, "grpo", *TINY_ARGS)
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "missing prerequisite checkpoint" in err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    code = run_cli(tmp_path, "pretrain", "--set", "flux_capacitor=1")
    assert code == 2
    assert "unknown config key" in capsys.readouterr().err


def test_sample_requires_checkpoint(tmp_path, capsys):
    code = run_cli(tmp_path, "sample", "--prompt", "a red square", *TINY_ARGS)
    assert code == 2
    assert "train first" in capsys.readouterr().err


def test_effective_config_snapshot_written_before_failure(tmp_path):
    run_cli(tmp_path, "grpo", *TINY_ARGS)  # fails: no sft checkpoint
    snap = tmp_path / "run" / "effective_config.txt"
    assert snap.exists()
    assert "grpo_steps=1" in snap.read_text()


def test_pipeline_and_sample_determinism(tmp_path, capsys):
    assert run_cli(tmp_path, "pretrain", *TINY_ARGS, "--seed", "7") == 0
    assert run_cli(tmp_path, "sft", *TINY_ARGS, "--seed", "7") == 0
    assert run_cli(tmp_path, "grpo", "--set", "inner_epochs=2", *TINY_ARGS, "--seed", "7") == 0
    for stage in trn.STAGES:
        assert (tmp_path / "run" / "checkpoints" / f"{stage}.ckpt").exists()

    assert run_cli(tmp_path, "sample", "--prompt", "a red square", "--seed", "7",
                   "--grid", "8x8", *TINY_ARGS) == 0
    ppm = tmp_path / "run" / "images" / "sample_seed7.ppm"
    first = ppm.read_bytes()
    assert run_cli(tmp_path, "sample", "--prompt", "a red square", "--seed", "7",
                   "--grid", "8x8", *TINY_ARGS) == 0
    assert ppm.read_bytes() == first
    assert first.startswith(b"P6\n")


def test_sample_sjd_flag(tmp_path, capsys):
    assert run_cli(tmp_path, "pretrain", *TINY_ARGS) == 0
    assert run_cli(tmp_path, "sample", "--prompt", "a circle", "--sjd",
                   "--window", "4", "--grid", "8x8", "--greedy", *TINY_ARGS) == 0
    out = capsys.readouterr().out
    assert "fwd_passes=" in out


def test_eval_report_format(tmp_path, capsys):
    assert run_cli(tmp_path, "pretrain", *TINY_ARGS) == 0
    assert run_cli(tmp_path, "eval", *TINY_ARGS) == 0
    report = (tmp_path / "run" / "reports" / "eval_pretrain.txt").read_text()
    lines = report.strip().splitlines()
    assert len(lines) == 7
    assert lines[0].startswith("category=single score=")
    assert lines[-1].startswith("overall=")


def test_bench_two_methods_report(tmp_path, capsys):
    assert run_cli(tmp_path, "pretrain", *TINY_ARGS) == 0
    assert run_cli(tmp_path, "bench", "--methods", "nocache,kvcache",
                   "--grid", "8x8", "--prompts", "2", *TINY_ARGS) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.strip().splitlines() if l.startswith("method=")]
    assert len(lines) == 2
    assert "wall_s=" in lines[0] and "flops=" in lines[0]
    det = (tmp_path / "run" / "reports" / "bench.txt").read_text()
    assert "wall_s" not in det
    assert "fwd_passes=" in det


def test_bench_unknown_method_exits_2(tmp_path, capsys):
    assert run_cli(tmp_path, "pretrain", *TINY_ARGS) == 0
    code = run_cli(tmp_path, "bench", "--methods", "hyperdrive", *TINY_ARGS)
    assert code == 2


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("ARVIS_THREADS", "3")
    parser = cli.build_parser()
    args = parser.parse_args(["pretrain", "--out", str(tmp_path)])
    cfg = cli.load_config(args)
    assert cfg.threads == 3
    monkeypatch.delenv("ARVIS_THREADS")
    args = parser.parse_args(["pretrain", "--threads", "2", "--out", str(tmp_path)])
    assert cli.load_config(args).threads == 2
