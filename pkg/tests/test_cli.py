import json

import numpy as np
import pytest

from ressfl.cli import main, resolve_threads
from ressfl.config import config_from_dict, dump_config, load_config
from ressfl.errors import ConfigError

TINY = {
    "seed": 3,
    "dataset": {"num_samples": 80},
    "source_dataset": {"num_samples": 80, "seed_offset": 1000},
    "sfl": {"num_clients": 2, "epochs": 2},
    "pretrain": {"epochs": 1, "lambda": 0.5, "sim_tier": "L0"},
    "transfer": {"epochs": 2},
    "attack": {"tiers": ["L0"], "inversion_epochs": 2, "max_private": 16, "surrogate_epochs": 1},
}


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def _run(tmp_path, mode, data, out="out", extra=()):
    code = main([mode, "--config", _write(tmp_path, data), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


@pytest.mark.parametrize("patch, path", [
    ({"seed": "x"}, "$.seed"),
    ({"sfl": {"num_clients": 0}}, "$.sfl.num_clients"),
    ({"sfl": {"epochs": 1.5}}, "$.sfl.epochs"),
    ({"attack": {"tiers": ["L9"]}}, "$.attack.tiers"),
    ({"pretrain": {"bottleneck": "C0-S1"}}, "$.pretrain.bottleneck"),
    ({"bogus": 1}, "$.bogus"),
    ({"dataset": {"kind": "idx", "images": "/nonexistent"}}, "$.dataset"),
])
def test_config_errors_name_the_path(patch, path):
    data = {**TINY, "mode": "attack", **patch}
    with pytest.raises(ConfigError, match=path.replace("$", r"\$").replace(".", r"\.").replace("[", r"\[")):
        config_from_dict(data)


def test_seed_is_required():
    with pytest.raises(ConfigError, match=r"\$\.seed"):
        config_from_dict({"mode": "attack"})


def test_missing_and_invalid_files(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)


def test_exit_code_config_error(tmp_path, capsys):
    code, _ = _run(tmp_path, "attack", {**TINY, "sfl": {"num_clients": -1}})
    assert code == 1
    assert "$.sfl.num_clients" in capsys.readouterr().err


def test_exit_code_runtime_error_writes_error_txt(tmp_path):
    ck = tmp_path / "broken.rsfl"
    ck.write_bytes(b"RSFL garbage")
    code, out = _run(tmp_path, "transfer", {**TINY, "transfer": {"checkpoint": str(ck)}})
    assert code == 2
    assert (out / "error.txt").read_text().strip()
    assert (out / "epochs.csv").exists()


def test_attack_mode_outputs_and_rerun_identity(tmp_path, capsys):
    code, out = _run(tmp_path, "attack", TINY)
    assert code == 0
    assert "undefended" in capsys.readouterr().out
    for name in ("epochs.csv", "attack.csv", "summary.csv", "curves.svg", "recon.pgm", "resolved_config.json"):
        assert (out / name).exists(), name
    assert (out / "epochs.csv").read_text().splitlines()[0] == "run,epoch,train_loss,val_accuracy"
    header, *rows = (out / "attack.csv").read_text().splitlines()
    assert header == "epoch,tier,mse,ssim,psnr,mse_best,verdict"
    assert sorted({int(r.split(",")[0]) for r in rows}) == [1, 2]
    svg = (out / "curves.svg").read_text()
    assert svg.count('<polyline class="run"') == 1 and 'class="target"' in svg
    assert (out / "recon.pgm").read_bytes().startswith(b"P5\n")

    # re-running from the echoed config reproduces every table byte for byte
    resolved = json.loads((out / "resolved_config.json").read_text())
    code2, out2 = _run(tmp_path, "attack", resolved, out="again")
    assert code2 == 0
    for name in ("epochs.csv", "attack.csv", "summary.csv", "curves.svg"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes(), name


def test_resolved_config_round_trip(tmp_path):
    cfg = config_from_dict({**TINY, "mode": "pretrain"})
    again = config_from_dict(json.loads(dump_config(cfg)))
    assert dump_config(again) == dump_config(cfg)
    assert json.loads(dump_config(cfg))["pretrain"]["lambda"] == 0.5


def test_empty_schedule_gives_header_only_attack_csv(tmp_path):
    code, out = _run(tmp_path, "attack", {**TINY, "attack": {**TINY["attack"], "epochs": []}})
    assert code == 0
    assert (out / "attack.csv").read_text() == "epoch,tier,mse,ssim,psnr,mse_best,verdict\n"


def test_pretrain_then_transfer(tmp_path):
    code, out = _run(tmp_path, "pretrain", TINY, out="pre")
    assert code == 0
    ck = out / "checkpoints" / "pretrained.rsfl"
    assert ck.exists()
    code, out = _run(tmp_path, "transfer", {**TINY, "transfer": {"epochs": 2, "checkpoint": str(ck),
                                                                 "strategy": "freeze"}}, out="tr")
    assert code == 0
    assert len((out / "epochs.csv").read_text().splitlines()) == 3


def test_perturbation_attack_mode(tmp_path):
    code, out = _run(tmp_path, "attack", {**TINY, "defense": {"method": "topk", "value": 50}})
    assert code == 0
    assert (out / "summary.csv").read_text().splitlines()[1].startswith("TopkPrune(k=50)")


def test_thread_resolution(monkeypatch):
    monkeypatch.setenv("RESSFL_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv("RESSFL_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads(None)
    monkeypatch.delenv("RESSFL_THREADS")
    assert resolve_threads(None) is None


def test_threads_do_not_change_results(tmp_path, monkeypatch):
    _, a = _run(tmp_path, "attack", TINY, out="one")
    monkeypatch.setenv("RESSFL_THREADS", "2")
    _, b = _run(tmp_path, "attack", TINY, out="two")
    assert json.loads((b / "resolved_config.json").read_text())["threads"] == 2
    for name in ("epochs.csv", "attack.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
