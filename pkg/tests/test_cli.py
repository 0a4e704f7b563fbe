import subprocess
import sys
from pathlib import Path

import pytest

from signlab import cli

# micro settings so the end-to-end cases run in seconds
MICRO = [
    "--set", "data.vocab_size=12", "--set", "data.train=8",
    "--set", "data.val=2", "--set", "data.test=2",
    "--set", "data.documents=6", "--set", "data.doc_sentences=4",
    "--set", "lm.d_model=16", "--set", "lm.n_layers=1", "--set", "lm.n_heads=2",
    "--set", "lm.max_len=128",
    "--set", "visual.d_model=8", "--set", "visual.n_heads=2",
    "--set", "visual.local_depth=1", "--set", "visual.full_depth=1",
    "--set", "visual.d_co=8",
    "--set", "text.d_model=8", "--set", "text.n_heads=2", "--set", "text.depth=1",
    "--set", "text.d_co=8",
    "--set", "stage1.epochs=1", "--set", "stage1.batch=8", "--set", "stage1.context_k=32",
    "--set", "stage2.epochs=1", "--set", "stage2.batch=8",
    "--set", "stage3.epochs=1", "--set", "stage3.batch=8",
    "--set", "fulltune.epochs=1", "--set", "fulltune.batch=8",
]


def run(workdir, *argv):
    return cli.main(["--workdir", str(workdir), *argv])


def tree_bytes(root: Path):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and "train.log" not in p.name:
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


class TestExitCodes:
    def test_usage(self):
        assert cli.main(["definitely-not-a-command"]) == cli.EXIT_USAGE
        assert cli.main(["gen-data", "--bogus-flag"]) == cli.EXIT_USAGE

    def test_bad_override(self, tmp_path):
        assert run(tmp_path, "gen-data", "--set", "data.nope=3") == cli.EXIT_CONFIG
        assert run(tmp_path, "gen-data", "--set", "nosec.x=1") == cli.EXIT_CONFIG
        assert run(tmp_path, "gen-data", "--set", "data.train=tiny") == cli.EXIT_CONFIG

    def test_missing_data(self, tmp_path):
        assert run(tmp_path, "pretrain-visual", *MICRO) == cli.EXIT_CONFIG

    def test_missing_checkpoint(self, tmp_path):
        assert run(tmp_path, "gen-data", *MICRO) == 0
        assert run(tmp_path, "tune", *MICRO) == cli.EXIT_CHECKPOINT


class TestGenData:
    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(a, "gen-data", *MICRO) == 0
        assert run(b, "gen-data", *MICRO) == 0
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert ta.keys() == tb.keys() and len(ta) > 5
        assert all(ta[k] == tb[k] for k in ta)

    def test_flag_overrides_rows(self, tmp_path):
        assert run(tmp_path, "gen-data", *MICRO, "--train", "3") == 0
        manifest = (tmp_path / "data" / "train.tsv").read_text().strip().splitlines()
        assert len(manifest) == 3

    def test_seed_changes_content(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run(a, "gen-data", *MICRO)
        run(b, "gen-data", *MICRO, "--seed", "99")
        assert (a / "data" / "train.tsv").read_bytes() \
            != (b / "data" / "train.tsv").read_bytes()


class TestEval:
    def test_echo_stub_scores_perfect(self, tmp_path, capsys):
        run(tmp_path, "gen-data", *MICRO)
        assert run(tmp_path, "eval", *MICRO, "--split", "val",
                   "--bundle", "echo-stub") == 0
        out = capsys.readouterr().out
        assert "[scores]" in out
        for key in ("bleu4", "rouge_l", "exact"):
            assert f"{key} = 100.00" in out
        assert (tmp_path / "report-val.txt").exists()


class TestConfigFile:
    def test_layering(self, tmp_path, capsys):
        cfgfile = tmp_path / "mine.ini"
        cfgfile.write_text("[data]\ntrain = 5\nvocab_size = 12\n")
        pairs = list(zip(MICRO[::2], MICRO[1::2]))
        micro = [x for flag, val in pairs if val != "data.train=8"
                 for x in (flag, val)]
        assert run(tmp_path, "gen-data", *micro, "--config", str(cfgfile)) == 0
        rows = (tmp_path / "data" / "train.tsv").read_text().strip().splitlines()
        assert len(rows) == 5

    def test_set_beats_config_file(self, tmp_path):
        cfgfile = tmp_path / "mine.ini"
        cfgfile.write_text("[data]\ntrain = 5\nvocab_size = 12\n")
        assert run(tmp_path, "gen-data", *MICRO, "--config", str(cfgfile)) == 0
        rows = (tmp_path / "data" / "train.tsv").read_text().strip().splitlines()
        assert len(rows) == 8

    def test_missing_config_file(self, tmp_path):
        assert run(tmp_path, "gen-data", "--config",
                   str(tmp_path / "ghost.ini")) == cli.EXIT_CONFIG


class TestEndToEnd:
    def test_micro_pipeline_and_reports(self, tmp_path, capsys):
        wd = tmp_path
        assert run(wd, "gen-data", *MICRO) == 0
        assert run(wd, "pretrain-lm", *MICRO) == 0
        assert run(wd, "pretrain-visual", *MICRO) == 0
        assert run(wd, "tune", *MICRO) == 0
        assert run(wd, "full-tune", *MICRO) == 0
        assert run(wd, "eval", *MICRO, "--split", "test") == 0
        out = capsys.readouterr().out
        assert out.startswith("[scores]")
        assert (wd / "report-test.txt").read_text() == out

        first_row = (wd / "data" / "test.tsv").read_text().splitlines()[0]
        video = "data/" + first_row.split("\t")[3]
        assert run(wd, "translate", *MICRO, "--video", video) == 0
        said = capsys.readouterr().out
        assert isinstance(said, str)

    def test_resume_after_interrupt_is_bitwise(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for wd in (a, b):
            run(wd, "gen-data", *MICRO)
        assert run(a, "pretrain-lm", *MICRO) == 0
        assert run(b, "pretrain-lm", *MICRO, "--stop-at", "1") == 0
        assert run(b, "pretrain-lm", *MICRO, "--resume") == 0
        pa = a / "stage1" / "tensors.bin"
        pb = b / "stage1" / "tensors.bin"
        assert pa.read_bytes() == pb.read_bytes()


def test_module_entrypoint_runs():
    proc = subprocess.run([sys.executable, "-m", "signlab.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout
