import math
import os

import pytest

import moelab


TINY = """
[run]
seed = 2
[teacher]
d_model = 16
n_layers = 2
n_heads = 2
d_ff = 16
max_seq_len = 24
moe_layers = 1
n_experts = 4
k = 2
[student]
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 16
max_seq_len = 24
[pretrain]
steps = 4
batch_size = 4
[distill]
steps = 2
batch_size = 3
lr_student = 0.001
max_response = 4
probe_size = 3
[data]
n = 60
max_seq = 20
max_request = 8
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return str(path)


def test_version():
    assert moelab.__version__ == "0.1.0"


def test_rouge_l():
    assert moelab.rouge_l("abc", "abc") == (1.0, 1.0, 1.0)
    assert moelab.rouge_l("", "abc")[2] == 0.0
    p, r, f = moelab.rouge_l("abd", "abcd")
    assert (p, r) == (1.0, 0.75)
    assert f == pytest.approx(2 * 0.75 / 1.75)


def test_equation_values():
    assert moelab.load_balance_loss([1, 3], [0.5, 0.5]) == pytest.approx(0.25, abs=1e-12)
    assert moelab.load_balance_loss([2, 2], [0.5, 0.5]) == 0.0
    kl = moelab.forward_kl([[0.5, 0.5]], [[0.25, 0.75]])
    assert kl == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(0.5 / 0.75), abs=1e-12)
    assert moelab.reverse_kl([[0.5, 0.5]], [[0.25, 0.75]]) == pytest.approx(
        moelab.forward_kl([[0.25, 0.75]], [[0.5, 0.5]]), abs=0)


def test_ka_select_law():
    logits = [math.log(0.9), math.log(0.1)]
    draws = moelab.ka_select(logits, 1.0, 1, seed=7, draws=4000)
    share = sum(d == [0] for d in draws) / len(draws)
    assert abs(share - 0.9) < 0.03
    assert all(d == [0] for d in moelab.ka_select(logits, 0.0, 1, draws=50))


def test_data_round_trip():
    pairs = moelab.synthetic("reverse", 5, seed=1)
    assert len(pairs) == 5
    request, response = pairs[0]
    tokens, mask = moelab.encode(request, response)
    assert len(tokens) == len(mask)
    assert sum(mask) == len(response) + 1
    assert moelab.decode(tokens).find(response.encode()) >= 0


def test_config_errors(config):
    assert len(moelab.config_hash(config)) == 16
    with pytest.raises(moelab.ConfigError):
        moelab.config_text(config, ["distill.nokey=1"])
    with pytest.raises(moelab.IoError):
        moelab.config_text("/nonexistent/x.ini")


def test_pipeline(config, tmp_path):
    pre = tmp_path / "pre"
    summary = moelab.pretrain(config, [f"run.out={pre}"])
    assert summary["provenance"]["seed"] == 2
    teacher = str(pre / "teacher.ckpt")
    info = moelab.checkpoint_info(teacher)
    assert info["parameter_count"] == summary["teacher"]["parameters"]
    assert any(".router." in name for name in info["parameters"])

    out = tmp_path / "sar"
    s = moelab.distill(config, [f"run.out={out}", "distill.method=sar", f"distill.teacher={teacher}"])
    assert s["non_router_tensors_changed"] == 0
    assert os.path.exists(out / "teacher_after.ckpt")

    gm = moelab.analyze(config, [f"run.out={tmp_path / 'gm'}", f"analyze.teacher={teacher}"])
    for row in gm["rows"]:
        assert row["activated_mass"] + row["nonactivated_mass"] == pytest.approx(1.0)

    ev = moelab.evaluate(config, [f"run.out={tmp_path / 'ev'}", f"eval.checkpoints={out / 'student.ckpt'}"])
    assert 0.0 <= ev["mean_f"] <= 1.0
    with pytest.raises(moelab.IoError):
        moelab.distill(config, [f"run.out={tmp_path / 'x'}", "distill.teacher=/nonexistent.ckpt"])
