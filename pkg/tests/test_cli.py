import json
from dataclasses import asdict

import numpy as np
import pytest

from mad import gradcheck_suite
from mad import tensors as tt
from mad.cli import main
from mad.tensors import Tensor


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, (json.loads(out.out) if code == 0 else None), out.err


def test_eval_metrics(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("the cat sat\na dog\n")
    (tmp_path / "r.txt").write_text("the cat sat\na dog ran\n")
    code, out, _ = run(capsys, "eval-metrics", "--cand", str(tmp_path / "c.txt"), "--ref", str(tmp_path / "r.txt"))
    assert code == 0
    assert out["n_pairs"] == 2 and 0 < out["bleu1_pct"] <= 100


def test_missing_checkpoint_is_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--ckpt", str(tmp_path / "nope"))
    assert code == 2 and "nope" in err


def test_bad_noise_ratio_is_exit_2(tmp_path, capsys, tiny_dataset, pretrained_speech):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"batch_size": 8, "epochs": 1, "losses": ["Lm"], "max_val_segments": 4,
                               "eval": {"max_segments": 4}}))
    code, report, _ = run(capsys, "train", "--config", str(cfg), "--data", str(tiny_dataset),
                          "--out", str(tmp_path / "ck"))
    assert code == 0 and len(report["val_losses"]) == 1
    # the checkpoint remembers its dataset
    code, metrics, _ = run(capsys, "eval", "--ckpt", str(tmp_path / "ck"), "--noise", "gaussian", "--ratio", "0.5")
    assert code == 0 and metrics["n_pairs"] > 0
    code, _, _ = run(capsys, "eval", "--ckpt", str(tmp_path / "ck"), "--noise", "gaussian", "--ratio", "2")
    assert code == 2


def test_synth(tmp_path, capsys, tiny_config):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps(asdict(tiny_config)))
    code, out, _ = run(capsys, "synth", "--config", str(cfg), "--out", str(tmp_path / "ds"))
    assert code == 0 and out["segments"] > 0
    assert (tmp_path / "ds" / "manifest.jsonl").exists()


def test_gradcheck_tensors(capsys):
    code, out, _ = run(capsys, "gradcheck", "--module", "tensors", "--seeds", "2")
    assert code == 0 and out["failed"] == [] and out["max_rel_err"] < 1e-4


def test_gradcheck_failure_is_exit_3(capsys, monkeypatch):
    def broken(rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)

        def f():
            y = tt.sum(x * x)
            y._backward = lambda g: tuple(np.zeros_like(p.data) for p in y._parents)
            return y
        return f, [x]
    monkeypatch.setitem(gradcheck_suite.CASES, "tensors", {"broken": broken})
    code, _, err = run(capsys, "gradcheck", "--module", "tensors", "--seeds", "1")
    assert code == 3 and "broken" in err


def test_ablate_needs_data(tmp_path, capsys):
    (tmp_path / "g.json").write_text("[]")
    code, _, _ = run(capsys, "ablate", "--grid", str(tmp_path / "g.json"))
    assert code == 2


def test_unknown_command():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
