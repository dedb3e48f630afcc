import subprocess

import pytest

from cmnt.cli import main
from cmnt.corpus import read_constraints, read_lines, write_lines
from cmnt.synthetic import make_task

TINY = ["--d-model", "16", "--heads", "2", "--ff-dim", "32", "--enc-layers", "1", "--dec-layers", "1",
        "--epochs", "2", "--batch-size", "16", "--bpe-merges", "50", "--warmup", "5"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    task = make_task(vocab=40, seed=3)
    train, test = task.sample(60, 1), task.sample(6, 2)
    for name, pairs in (("train", train), ("test", test)):
        write_lines(root / f"{name}.src", [s for s, _ in pairs])
        write_lines(root / f"{name}.ref", [r for _, r in pairs])
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert main(["train", "--codec", str(out / "codec"), "--out", str(out / "base.bin"),
                 "--train-src", str(corpus / "train.src"), "--train-ref", str(corpus / "train.ref"), *TINY]) == 0
    return out


def test_evaluate_identical_files(corpus, capsys):
    assert main(["evaluate", "--hyp", str(corpus / "train.ref"), "--ref", str(corpus / "train.ref")]) == 0
    assert "bleu=100.00" in capsys.readouterr().out


def test_bpe_round_trip(corpus, tmp_path):
    assert main(["bpe", "learn", "--input", str(corpus / "train.src"), "--model", str(tmp_path / "m"),
                 "--bpe-merges", "30"]) == 0
    assert main(["bpe", "apply", "--input", str(corpus / "test.src"), "--model", str(tmp_path / "m"),
                 "--output", str(tmp_path / "seg")]) == 0
    assert main(["bpe", "undo", "--input", str(tmp_path / "seg"), "--output", str(tmp_path / "back")]) == 0
    assert read_lines(tmp_path / "back") == read_lines(corpus / "test.src")


def test_fully_noisy_constraints_avoid_references(corpus, tmp_path, capsys):
    assert main(["build-table", "--src", str(corpus / "train.src"), "--ref", str(corpus / "train.ref"),
                 "--out", str(tmp_path / "t.tsv")]) == 0
    assert main(["gen-constraints", "--scenario", "2", "--noise-count", "5", "--ref", str(corpus / "test.ref"),
                 "--freq-corpus", str(corpus / "train.ref"), "--table", str(tmp_path / "t.tsv"),
                 "--out", str(tmp_path / "c.tsv"), "--noise-out", str(tmp_path / "n.txt")]) == 0
    assert "noisy_rate=100.0000" in capsys.readouterr().out
    for cons, ref in zip(read_constraints(tmp_path / "c.tsv"), read_lines(corpus / "test.ref")):
        assert len(cons) == 5 and not set(cons) & set(ref)


def test_gbs_translation_covers_constraints(corpus, trained, tmp_path):
    cons = [r[:2] for r in read_lines(corpus / "test.ref")]
    (tmp_path / "c.tsv").write_text("".join("\t".join(c) + "\n" for c in cons))
    assert main(["translate", "--checkpoint", str(trained / "base.bin"), "--codec", str(trained / "codec"),
                 "--src", str(corpus / "test.src"), "--constraints", str(tmp_path / "c.tsv"), "--decoder", "gbs",
                 "--beam", "2", "--out", str(tmp_path / "hyp"), "--meta", str(tmp_path / "meta")]) == 0
    for hyp, c in zip(read_lines(tmp_path / "hyp"), cons):
        assert all(w in hyp for w in c), (hyp, c)
    assert all("coverage=11\t" in line for line in (tmp_path / "meta").read_text().splitlines())


def test_finetune_and_soft_decoding(corpus, trained, tmp_path):
    cons = [r[:1] for r in read_lines(corpus / "train.ref")]
    (tmp_path / "c.tsv").write_text("".join("\t".join(c) + "\n" for c in cons))
    assert main(["finetune", "--base", str(trained / "base.bin"), "--codec", str(trained / "codec"),
                 "--constraints", str(tmp_path / "c.tsv"), "--out", str(tmp_path / "ft.bin"), "--finetune-epochs",
                 "1", "--integrator", "copy", "--train-src", str(corpus / "train.src"),
                 "--train-ref", str(corpus / "train.ref")]) == 0
    assert main(["translate", "--checkpoint", str(tmp_path / "ft.bin"), "--codec", str(trained / "codec"),
                 "--src", str(corpus / "test.src"), "--out", str(tmp_path / "hyp")]) == 0
    assert len(read_lines(tmp_path / "hyp")) == 6


def test_unknown_config_key_is_usage_error(corpus, tmp_path):
    code = main(["pipeline", "--set", "no_such_key=1", "--train-src", str(corpus / "train.src")])
    assert code == 1


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["translate", "--bogus"])
    assert exc.value.code == 1


def test_missing_file_is_data_error(tmp_path):
    assert main(["evaluate", "--hyp", str(tmp_path / "nope"), "--ref", str(tmp_path / "nope")]) == 2


def test_mismatched_lines_is_data_error(corpus):
    assert main(["evaluate", "--hyp", str(corpus / "test.ref"), "--ref", str(corpus / "train.ref")]) == 2


def pipeline(corpus, out, *extra):
    return main(["pipeline", "--train-src", str(corpus / "train.src"), "--train-ref", str(corpus / "train.ref"),
                 "--test-src", str(corpus / "test.src"), "--test-ref", str(corpus / "test.ref"),
                 "--out-dir", str(out), "--finetune-epochs", "1", "--beam", "2", *TINY, *extra])


def test_auto_scenario_needs_no_constraint_file(corpus, tmp_path, capsys):
    assert pipeline(corpus, tmp_path / "run", "--scenario", "3") == 0
    report = (tmp_path / "run" / "report.txt").read_text()
    assert "scenario=auto" in report and "noisy_rate=" in report and "bleu=" in report
    assert len(read_constraints(tmp_path / "run" / "constraints.test.tsv")) == 6


def without_timings(text):
    return "\n".join("\t".join(f for f in line.split("\t") if not f.startswith("micros=")) for line in text.split("\n"))


def test_pipeline_rerun_is_byte_identical(corpus, tmp_path):
    out = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        assert pipeline(corpus, out, "--scenario", "2", "--decoder", "dba") == 0
        snapshots.append({p.name: p.read_bytes() for p in out.iterdir() if p.is_file()})
    first, second = snapshots
    assert "checkpoint.ft.bin" in first and "manifest.txt" in first and first.keys() == second.keys()
    for name in first:
        if name == "hyp.meta.txt":
            # per-sentence wall-clock timings are the one non-reproducible column
            assert without_timings(first[name].decode()) == without_timings(second[name].decode())
        else:
            assert first[name] == second[name], name


def test_console_script():
    proc = subprocess.run(["cmnt", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "pipeline" in proc.stdout
