import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from tpdm import metrics, volume
from tpdm.cli import main


def run(tmp_path, command, cfg, *extra, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), *extra])


def phantom_cfg(out, task=None, count=2, shape=(12, 12, 12)):
    pc = {"count": count, "shape": list(shape), "n_ellipsoids": 4}
    if task:
        pc["task"] = task
    return {"seed": 3, "out": str(out), "phantom": pc}


ORACLE_MODELS = {"primary": {"analytic": {"mu": 0.5, "tau": 0.2}}, "auxiliary": {"analytic": {"mu": 0.5, "tau": 0.2}}}


def test_phantom_count_and_determinism(tmp_path):
    cfg = phantom_cfg(tmp_path / "a", {"kind": "csmri", "R": 4})
    assert run(tmp_path, "phantom", cfg) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(man["volumes"]) == 2
    assert (tmp_path / "a" / "mask.pgm").exists()
    cfg["out"] = str(tmp_path / "b")
    assert run(tmp_path, "phantom", cfg) == 0
    for f in ("phantom_0000.tpdmvol", "meas_0001.tpdmvol", "manifest.json", "mask.pgm"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_invalid_config_key(tmp_path, capsys):
    cfg = phantom_cfg(tmp_path)
    cfg["phantom"]["colour"] = "red"
    assert run(tmp_path, "phantom", cfg) == 2
    assert "$.phantom" in capsys.readouterr().err
    assert run(tmp_path, "phantom", {"seed": 1}) == 2  # missing section


def test_missing_inputs(tmp_path):
    assert main(["phantom", "--config", str(tmp_path / "nope.json")]) == 3
    cfg = {"out": str(tmp_path), "train": {"data": str(tmp_path / "none"), "iterations": 1}}
    assert run(tmp_path, "train", cfg) == 3


def test_train_and_resume(tmp_path):
    assert run(tmp_path, "phantom", phantom_cfg(tmp_path / "data", count=2, shape=(8, 8, 8))) == 0
    tc = {"data": str(tmp_path / "data"), "iterations": 3, "batch_size": 2, "channels": 4, "layers": 2}
    cfg = {"seed": 0, "out": str(tmp_path / "m"), "train": tc}
    assert run(tmp_path, "train", cfg) == 0
    for name in ("primary", "auxiliary"):
        assert (tmp_path / "m" / f"{name}.ckpt").exists()
        assert len((tmp_path / "m" / f"{name}_loss.csv").read_text().splitlines()) == 4
    tc["resume"] = True
    tc["iterations"] = 2
    assert run(tmp_path, "train", cfg) == 0
    from tpdm.training import load_checkpoint

    _, state, header = load_checkpoint(tmp_path / "m" / "primary.ckpt")
    assert state.iteration == 5 and header["training"]["iteration"] == 5
    rows = (tmp_path / "m" / "primary_loss.csv").read_text().splitlines()
    assert len(rows) == 6 and rows[-1].startswith("5,")


def _recon_cfg(tmp_path, out, **sampler):
    sc = {"N": 30, "K": 2, "lambda": 0.5}
    sc.update(sampler)
    return {
        "seed": 1,
        "out": str(out),
        "models": ORACLE_MODELS,
        "sampler": sc,
        "reconstruct": {"manifest": str(tmp_path / "data" / "manifest.json"), "index": 0},
    }


def test_reconstruct_outputs_and_flags(tmp_path):
    assert run(tmp_path, "phantom", phantom_cfg(tmp_path / "data", {"kind": "zsr", "M": 2})) == 0
    assert run(tmp_path, "reconstruct", _recon_cfg(tmp_path, tmp_path / "r")) == 0
    man = json.loads((tmp_path / "r" / "run_manifest.json").read_text())
    assert man["unconditional"] is False and len(man["plan"]["branches"]) == 30
    assert len(man["residual_trace"]) == 15
    assert set(json.loads((tmp_path / "r" / "metrics.json").read_text())) == {"recon", "adjoint"}
    assert volume.load(tmp_path / "r" / "recon.tpdmvol").shape == (12, 12, 12)

    assert run(tmp_path, "reconstruct", _recon_cfg(tmp_path, tmp_path / "u", **{"lambda": 0.0})) == 0
    assert json.loads((tmp_path / "u" / "run_manifest.json").read_text())["unconditional"] is True


def test_reconstruct_without_ground_truth(tmp_path):
    assert run(tmp_path, "phantom", phantom_cfg(tmp_path / "data", {"kind": "svct", "n_angles": 4})) == 0
    cfg = _recon_cfg(tmp_path, tmp_path / "r")
    cfg["reconstruct"] = {
        "measurement": str(tmp_path / "data" / "meas_0000.tpdmvol"),
        "task": {"kind": "svct", "n_angles": 4},
        "shape": [12, 12, 12],
    }
    assert run(tmp_path, "reconstruct", cfg) == 0
    assert not (tmp_path / "r" / "metrics.json").exists()
    cfg["reconstruct"]["shape"] = [12, 12, 10]
    assert run(tmp_path, "reconstruct", cfg) == 5


def test_reconstruct_divergence_exit_code(tmp_path, capsys):
    assert run(tmp_path, "phantom", phantom_cfg(tmp_path / "data", {"kind": "zsr", "M": 1})) == 0
    assert run(tmp_path, "reconstruct", _recon_cfg(tmp_path, tmp_path / "r", **{"lambda": 1e300})) == 4
    assert "step" in capsys.readouterr().err


def test_generate_shape_determinism_and_pgm(tmp_path):
    base = {"seed": 4, "models": ORACLE_MODELS, "sampler": {"N": 20}, "generate": {"shape": [8, 10, 12], "export_pgm": True}}
    assert run(tmp_path, "generate", dict(base, out=str(tmp_path / "a"))) == 0
    assert run(tmp_path, "generate", dict(base, out=str(tmp_path / "b"))) == 0
    a = (tmp_path / "a" / "generated.tpdmvol").read_bytes()
    assert a == (tmp_path / "b" / "generated.tpdmvol").read_bytes()
    assert volume.load(tmp_path / "a" / "generated.tpdmvol").shape == (8, 10, 12)
    assert (tmp_path / "a" / "central_axis1.pgm").read_bytes().startswith(b"P5\n12 10\n255\n")  # width, height
    assert run(tmp_path, "generate", dict(base, out=str(tmp_path / "c")), "--seed", "5") == 0
    assert a != (tmp_path / "c" / "generated.tpdmvol").read_bytes()


def test_generate_gaussian_oracle_statistics(tmp_path):
    models = {"primary": {"analytic": {"mu": 0.5, "tau": 0.1}}, "auxiliary": {"analytic": {"mu": 0.5, "tau": 0.1}}}
    cfg = {"seed": 0, "out": str(tmp_path), "models": models, "sampler": {"N": 100}, "generate": {"shape": [16, 16, 16]}}
    assert run(tmp_path, "generate", cfg) == 0
    x = volume.load(tmp_path / "generated.tpdmvol").data
    assert abs(x.mean() - 0.5) < 4 * 0.1 / np.sqrt(x.size)
    assert x.std() == pytest.approx(0.1, rel=0.15)


def test_evaluate(tmp_path):
    r = np.random.default_rng(0)
    a, b = r.random((2, 12, 12, 12))
    volume.save(volume.Volume3D(a), tmp_path / "a.tpdmvol")
    volume.save(volume.Volume3D(b), tmp_path / "b.tpdmvol")
    volume.save(volume.Volume3D(a[:, :, :11]), tmp_path / "c.tpdmvol")
    pairs = [
        {"id": "same", "x": str(tmp_path / "a.tpdmvol"), "ref": str(tmp_path / "a.tpdmvol")},
        {"id": "diff", "x": str(tmp_path / "a.tpdmvol"), "ref": str(tmp_path / "b.tpdmvol")},
    ]
    cfg = {"out": str(tmp_path / "e"), "evaluate": {"pairs": pairs}}
    assert run(tmp_path, "evaluate", cfg) == 0
    rep = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert rep["same"]["psnr_3d"] == "inf" and rep["same"]["ssim_axis2"] == pytest.approx(1.0, abs=1e-12)
    lib = metrics.evaluate(volume.load(tmp_path / "a.tpdmvol"), volume.load(tmp_path / "b.tpdmvol"))
    assert rep["diff"] == lib.to_json()
    assert len(list(csv.reader(open(tmp_path / "e" / "metrics.csv")))) == 3
    cfg["evaluate"]["pairs"].append({"x": str(tmp_path / "a.tpdmvol"), "ref": str(tmp_path / "c.tpdmvol")})
    assert run(tmp_path, "evaluate", cfg) == 5


def test_threads_do_not_change_outputs(tmp_path):
    assert run(tmp_path, "phantom", phantom_cfg(tmp_path / "data", {"kind": "csmri", "R": 3})) == 0
    cfg = _recon_cfg(tmp_path, tmp_path / "t1", chunk=2)
    assert run(tmp_path, "reconstruct", cfg, "--threads", "1") == 0
    assert run(tmp_path, "reconstruct", cfg, "--threads", "4", "--out", str(tmp_path / "t4")) == 0
    for f in ("recon.tpdmvol", "adjoint.tpdmvol", "metrics.json", "metrics.csv"):
        assert (tmp_path / "t1" / f).read_bytes() == (tmp_path / "t4" / f).read_bytes()


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(phantom_cfg(tmp_path / "o", count=1, shape=(8, 8, 8))))
    proc = subprocess.run([sys.executable, "-m", "tpdm.cli", "phantom", "--config", str(cfg)], capture_output=True)
    assert proc.returncode == 0 and proc.stdout == b""
    assert (tmp_path / "o" / "phantom_0000.tpdmvol").exists()
