import json
from pathlib import Path

import pytest

from dlmlab import cli
from dlmlab.config import (
    MANIFEST_NAME,
    ConfigError,
    ExperimentConfig,
    RunManifest,
    prepare_out_dir,
    seed_int,
    seed_stream,
    sha256_file,
    verify_inputs,
)

TINY = """
[model]
d_model = 16
n_layers = 2
n_heads = 2
context = 32
steps = 30
batch_size = 4
warmup = 5
corpus_chars = 20000
finetune_steps = 5

[sae]
width = 32
k_act = [4]
budget = 512
layers = [0, 1]
batch_size = 64

[eval]
eval_windows = 8
n_prompts = 2
gen_length = 8
steps = 4

[steering]
layer = 1
n_features = 2
n_prefix = 2
gen_length = 8
steps = 4

[order]
n_prompts = 2
prompt_length = 8
gen_length = 8
steps = 4
k_feat = 4

[autointerp]
judge = "substring"
max_tokens = 4096
context_length = 32
n_latents = 8
dead_threshold = 2
"""


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(root: Path, seed: int = 0) -> dict[str, Path]:
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    d = {name: root / name for name in ("base", "acts", "saes", "fid", "steer", "order", "ai", "sft", "plots")}
    common = ("--config", cfg, "--seed", seed)
    assert run_cli("train-dlm", *common, "--out", d["base"]) == 0
    dlm, train, held = d["base"] / "dlm.bin", d["base"] / "train.txt", d["base"] / "heldout.txt"
    assert run_cli("harvest", *common, "--out", d["acts"], "--dlm", dlm, "--corpus", train) == 0
    assert run_cli("train-sae", *common, "--out", d["saes"], "--acts-dir", d["acts"]) == 0
    assert run_cli("eval-fidelity", *common, "--out", d["fid"], "--dlm", dlm, "--sae-dir", d["saes"],
                   "--acts-dir", d["acts"], "--corpus", held, "--protocol", "denoising", "--protocol", "rollout") == 0
    assert run_cli("steer", *common, "--out", d["steer"], "--dlm", dlm, "--sae", d["saes"] / "sae_L1_k4.bin",
                   "--acts", d["acts"] / "acts_L1_mask.bin", "--corpus", held) == 0
    assert run_cli("decode-analyze", *common, "--out", d["order"], "--dlm", dlm, "--sae-dir", d["saes"],
                   "--corpus", held) == 0
    assert run_cli("autointerp", *common, "--out", d["ai"], "--dlm", dlm, "--sae", d["saes"] / "sae_L1_k4.bin",
                   "--corpus", held) == 0
    assert run_cli("finetune-dlm", *common, "--out", d["sft"], "--dlm", dlm) == 0
    assert run_cli("plot-data", *common, "--out", d["plots"], "--inputs", d["fid"], d["steer"], d["order"]) == 0
    return d


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("run"))


# ---------------------------------------------------------------- config


def test_config_toml_roundtrip():
    cfg = ExperimentConfig.from_toml(TINY)
    assert cfg.model.d_model == 16 and cfg.sae.k_act == [4]
    assert ExperimentConfig.from_toml(cfg.to_toml()) == cfg
    assert ExperimentConfig.from_toml("") == ExperimentConfig()


def test_config_int_accepted_for_float():
    assert ExperimentConfig.from_toml("[model]\nlr = 1").model.lr == 1.0


def test_config_errors_name_key_paths():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_toml('[model]\nd_modle = 3\nsteps = "many"\n[sae]\nk_act = [1, "x"]\n[extra]\n')
    msg = str(err.value)
    for path in ("model.d_modle", "model.steps", "sae.k_act", "extra"):
        assert path in msg
    with pytest.raises(ConfigError, match="TOML"):
        ExperimentConfig.from_toml("[model\n")


def test_seed_streams_independent_and_stable():
    a = seed_stream(0, "init").random(3)
    assert (a == seed_stream(0, "init").random(3)).all()
    assert not (a == seed_stream(0, "corruption").random(3)).any()
    assert seed_int(1, "init") != seed_int(2, "init")


def test_prepare_out_dir_refuses_overwrite(tmp_path):
    out = prepare_out_dir(tmp_path / "r", force=False)
    (out / MANIFEST_NAME).write_text("{}")
    with pytest.raises(FileExistsError):
        prepare_out_dir(out, force=False)
    assert prepare_out_dir(out, force=True) == out


# ---------------------------------------------------------------- CLI


@pytest.mark.parametrize("command", list(cli.COMMANDS))
def test_every_subcommand_has_help(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    assert "--out" in capsys.readouterr().out


def test_bad_config_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nwidth = 3\n")
    assert run_cli("train-dlm", "--config", bad, "--out", tmp_path / "o") == 2
    assert "model.width" in capsys.readouterr().err


def test_refuses_to_overwrite_without_force(tiny_run, capsys):
    before = (tiny_run["base"] / MANIFEST_NAME).read_text()
    cfg = tiny_run["base"].parent / "tiny.toml"
    assert run_cli("train-dlm", "--config", cfg, "--out", tiny_run["base"]) == 2
    assert "--force" in capsys.readouterr().err
    assert (tiny_run["base"] / MANIFEST_NAME).read_text() == before


def test_failure_writes_failed_manifest(tmp_path):
    cfg = tmp_path / "t.toml"
    cfg.write_text(TINY)
    missing = tmp_path / "nope.bin"
    assert run_cli("harvest", "--config", cfg, "--out", tmp_path / "h", "--dlm", missing, "--corpus", cfg) == 1
    m = RunManifest.load(tmp_path / "h" / MANIFEST_NAME)
    assert m.status.startswith("failed")


def test_pipeline_outputs(tiny_run):
    assert (tiny_run["fid"] / "fidelity.csv").read_text().splitlines()[0] == (
        "backbone,sae,layer,k_act,ev,delta_loss,protocol,tokens,seed")
    rows = (tiny_run["fid"] / "fidelity.csv").read_text().splitlines()[1:]
    assert len(rows) == 4 and {r.split(",")[6] for r in rows} == {"denoising", "rollout"}
    assert len(list((tiny_run["order"] / "traces").glob("*.dtrc"))) == 3 * 2
    assert (tiny_run["steer"] / "steering.csv").exists()
    lines = (tiny_run["ai"] / "autointerp.jsonl").read_text().splitlines()
    assert len(lines) == 8 and all("status" in json.loads(x) for x in lines)
    assert (tiny_run["plots"] / "plot_sparsity_fidelity.csv").exists()
    assert json.loads(lines[0])["feature"] == 0


def test_manifest_chain_is_complete(tiny_run):
    manifests = {name: RunManifest.load(d / MANIFEST_NAME) for name, d in tiny_run.items()}
    produced = {}
    for m in manifests.values():
        assert m.status == "ok" and m.wall_clock_s >= 0
        produced.update(m.outputs)
    for name, m in manifests.items():
        assert m.command and m.config and "master" in m.seeds
        assert ExperimentConfig.from_dict(m.config).model.d_model == 16
        for path, digest in m.inputs.items():
            if path.endswith(".toml"):
                continue
            assert produced.get(path) == digest, f"{name}: input {path} has no producing run"
        assert not verify_inputs(m)
        for path, digest in m.outputs.items():
            assert sha256_file(path) == digest


def test_same_seed_gives_identical_tables(tiny_run, tmp_path):
    again = pipeline(tmp_path)
    for name, fname in (("base", "losses.csv"), ("fid", "fidelity.csv"), ("steer", "steering.csv"),
                        ("order", "drift_by_layer.csv"), ("ai", "autointerp.jsonl"), ("saes", "sae_train.csv")):
        assert (again[name] / fname).read_bytes() == (tiny_run[name] / fname).read_bytes(), fname
    assert (again["base"] / "dlm.bin").read_bytes() == (tiny_run["base"] / "dlm.bin").read_bytes()


def test_autointerp_resume(tiny_run, tmp_path):
    cfg = tiny_run["base"].parent / "tiny.toml"
    out = tmp_path / "ai"
    args = ("autointerp", "--config", cfg, "--out", out, "--dlm", tiny_run["base"] / "dlm.bin",
            "--sae", tiny_run["saes"] / "sae_L1_k4.bin", "--corpus", tiny_run["base"] / "heldout.txt")
    assert run_cli(*args, "--n-latents", 3) == 0
    assert len((out / "autointerp.jsonl").read_text().splitlines()) == 3
    assert run_cli(*args) == 2
    assert run_cli(*args, "--resume") == 0
    lines = (out / "autointerp.jsonl").read_text().splitlines()
    assert [json.loads(x)["feature"] for x in lines] == list(range(8))
    assert (out / "autointerp.jsonl").read_text() == (tiny_run["ai"] / "autointerp.jsonl").read_text()


def test_transfer_degenerate_with_zero_finetune(tiny_run, tmp_path):
    cfg = tiny_run["base"].parent / "tiny.toml"
    dlm = tiny_run["base"] / "dlm.bin"
    assert run_cli("finetune-dlm", "--config", cfg, "--out", tmp_path / "sft0", "--dlm", dlm, "--steps", 0) == 0
    sft = tmp_path / "sft0" / "dlm.bin"
    train = tiny_run["base"] / "train.txt"
    assert run_cli("harvest", "--config", cfg, "--out", tmp_path / "acts0", "--dlm", sft, "--corpus", train) == 0
    assert run_cli("train-sae", "--config", cfg, "--out", tmp_path / "saes0", "--acts-dir", tmp_path / "acts0") == 0
    assert run_cli("transfer", "--config", cfg, "--out", tmp_path / "tr", "--target", sft,
                   "--base-saes", tiny_run["saes"], "--sft-saes", tmp_path / "saes0",
                   "--acts-dir", tiny_run["acts"], "--corpus", tiny_run["base"] / "heldout.txt") == 0
    gaps = (tmp_path / "tr" / "transfer_gap.csv").read_text().splitlines()[1:]
    assert len(gaps) == 2 * 2
    for row in gaps:
        _, _, d_base, d_sft, gap, ev_base, ev_sft = row.split(",")
        assert float(gap) == 0.0 and d_base == d_sft and ev_base == ev_sft
