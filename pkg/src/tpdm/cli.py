"""Command-line entry point: ``tpdm {phantom,train,reconstruct,generate,evaluate}``.

Exit codes: 0 ok, 2 invalid config, 3 missing input, 4 sampler divergence,
5 shape mismatch.  Progress goes to stderr; results go to ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from . import metrics, phantom, sampler, training, volume
from .operators import KSpaceOperator, least_squares_adjoint, operator_norm_sq
from .score import AnalyticGaussianScore, NeuralScore, build_slice_datasets
from .sde import NoiseSchedule

log = logging.getLogger("tpdm")

EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED, EXIT_SHAPE = 2, 3, 4, 5


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _dump(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CommandError(EXIT_MISSING, f"missing input: {p}")
    return p


def _recorded(cfg: dict) -> dict:
    # output location and worker count do not influence results
    return {k: v for k, v in cfg.items() if k not in ("out", "threads")}


def _sampler_record(scfg) -> dict:
    d = scfg.to_dict()
    d.pop("threads")
    return d


def _schedule(cfg: dict, N: int = 2000) -> NoiseSchedule:
    s = cfg.get("schedule", {})
    return NoiseSchedule(s.get("sigma_min", 0.01), s.get("sigma_max", 378.0), N)


def _phantom_seed(seed: int, index: int) -> int:
    return seed * 1_000_003 + index


# ----------------------------------------------------------------- phantom


def cmd_phantom(cfg: dict, out: Path) -> int:
    pc = cfg["phantom"]
    seed = cfg.get("seed", 0)
    shape = tuple(pc["shape"])
    task = phantom.Task(**pc["task"]) if "task" in pc else None
    first = pc.get("first_index", 0)
    entries = []
    op = None
    for k in range(first, first + pc["count"]):
        spec = phantom.PhantomSpec(shape, pc.get("n_ellipsoids", 6), _phantom_seed(seed, k))
        vol = phantom.make_phantom(spec)
        name = f"phantom_{k:04d}.tpdmvol"
        volume.save(vol, out / name)
        entry = {"index": k, "phantom_seed": spec.seed, "volume": name}
        if task is not None:
            Y, op = phantom.simulate_measurement(vol, task, pc.get("noise_sigma", 0.0), spec.seed, op=op)
            mname = f"meas_{k:04d}.tpdmvol"
            volume.save_array(Y, out / mname)
            entry["measurement"] = mname
        entries.append(entry)
        log.info("phantom %d written", k)
    if isinstance(op, KSpaceOperator):
        volume.save_pgm(op.mask.mask.astype(float), out / "mask.pgm")
    manifest = {
        "seed": seed,
        "shape": list(shape),
        "n_ellipsoids": pc.get("n_ellipsoids", 6),
        "task": task.to_dict() if task else None,
        "noise_sigma": pc.get("noise_sigma", 0.0),
        "volumes": entries,
    }
    _dump(manifest, out / "manifest.json")
    return 0


# ----------------------------------------------------------------- train


def _load_volumes(data_dir: Path):
    man = _require(data_dir / "manifest.json")
    entries = json.loads(man.read_text())["volumes"]
    if not entries:
        raise CommandError(EXIT_MISSING, f"no volumes listed in {man}")
    return [volume.load(_require(data_dir / e["volume"])) for e in entries]


def cmd_train(cfg: dict, out: Path) -> int:
    tc = cfg["train"]
    seed = cfg.get("seed", 0)
    vols = _load_volumes(Path(tc["data"]))
    prim, aux = build_slice_datasets(vols)
    dtype = np.dtype(tc.get("dtype", "float32"))
    sched = _schedule(cfg)
    for offset, (name, data) in enumerate((("primary", prim), ("auxiliary", aux))):
        ckpt = out / f"{name}.ckpt"
        state = None
        if tc.get("resume") and ckpt.exists():
            model, state, _ = training.load_checkpoint(ckpt, dtype)
            log.info("resuming %s at iteration %d", name, state.iteration)
        else:
            model = NeuralScore(tc.get("layers", 4), tc.get("channels", 32), sched, seed + offset, dtype)
        start = state.iteration if state else 0
        tcfg = training.TrainConfig(tc.get("batch_size", 8), tc["iterations"], tc.get("lr", 2e-4), seed + offset)
        log.info("training %s model (%d params) on %d slices", name, model.n_params, len(data))
        model, state = training.train(model, data, tcfg, state)
        training.save_checkpoint(ckpt, model, state, {"n_slices": len(data), "slice_family": name})
        csv_path = out / f"{name}_loss.csv"
        if start and csv_path.exists():
            with open(csv_path, "a") as f:
                for i, loss in enumerate(state.losses, start=start + 1):
                    f.write(f"{i},{float(loss)!r}\n")
        else:
            training.write_loss_csv(csv_path, state.losses)
    return 0


# ----------------------------------------------------------------- sampling


def _model(spec: dict, dtype, sched: NoiseSchedule):
    if "analytic" in spec:
        a = spec["analytic"]
        return AnalyticGaussianScore(a["mu"], a["tau"], sched)
    model, _, _ = training.load_checkpoint(_require(spec["checkpoint"]), dtype)
    return model


def _sampler_config(cfg: dict, op=None) -> sampler.SamplerConfig:
    sc = cfg.get("sampler", {})
    K = sc.get("K", 2)
    K = math.inf if K == "inf" else K
    sched = _schedule(cfg)
    lam = sc.get("lambda", 0.0)
    if sc.get("lambda_per_op_norm") and op is not None and lam > 0:
        lam = lam / operator_norm_sq(op)
    return sampler.SamplerConfig(
        N=sc.get("N", 2000),
        K=K,
        lam=lam,
        snr=sc.get("snr", 0.16),
        corrector_steps=sc.get("corrector_steps", 1),
        seed=cfg.get("seed", 0),
        guidance_mode=sc.get("guidance_mode", "exact_vjp"),
        normalize_residual=sc.get("normalize_residual", False),
        sigma_min=sched.sigma_min,
        sigma_max=sched.sigma_max,
        chunk=sc.get("chunk", 8),
        threads=cfg.get("threads", 1),
    )


def _models(cfg: dict):
    mc = cfg["models"]
    dtype = np.dtype(mc.get("dtype", "float64"))
    sched = _schedule(cfg)
    return _model(mc["primary"], dtype, sched), _model(mc["auxiliary"], dtype, sched)


def _reconstruct_inputs(rc: dict):
    gt = rc.get("ground_truth")
    if "manifest" in rc:
        man_path = _require(rc["manifest"])
        man = json.loads(man_path.read_text())
        entry = next((e for e in man["volumes"] if e["index"] == rc.get("index", 0)), None)
        if entry is None or "measurement" not in entry:
            raise CommandError(EXIT_MISSING, f"no measurement for index {rc.get('index', 0)} in {man_path}")
        base = man_path.parent
        meas = base / entry["measurement"]
        task, shape = man["task"], man["shape"]
        gt = gt or str(base / entry["volume"])
    else:
        for key in ("measurement", "task", "shape"):
            if key not in rc:
                raise cfgmod.ConfigError(f"'{key}' is required without a manifest", f"$.reconstruct.{key}")
        meas, task, shape = rc["measurement"], rc["task"], rc["shape"]
    return Path(meas), phantom.Task(**task), tuple(shape), gt


def cmd_reconstruct(cfg: dict, out: Path) -> int:
    meas, task, shape, gt = _reconstruct_inputs(cfg["reconstruct"])
    Y = volume.load_array(_require(meas))
    op = phantom.make_operator(task, shape)
    if Y.shape != tuple(op.out_shape) + (shape[2],):
        raise CommandError(EXIT_SHAPE, f"measurement shape {Y.shape} does not fit task on volume {shape}")
    Y = Y.astype(np.complex128 if np.iscomplexobj(Y) else np.float64)
    model_p, model_a = _models(cfg)
    scfg = _sampler_config(cfg, op)
    info: dict = {}
    try:
        X = sampler.solve_inverse(Y, op, model_p, model_a, scfg, info=info)
    except sampler.DivergenceError as exc:
        raise CommandError(EXIT_DIVERGED, str(exc)) from None
    volume.save(X, out / "recon.tpdmvol")
    baseline = volume.Volume3D(volume.from_slices(least_squares_adjoint(op, np.moveaxis(Y, 2, 0)), volume.SliceAxis.AXIS3))
    volume.save(baseline, out / "adjoint.tpdmvol")
    manifest = {
        "config": _recorded(cfg),
        "task": task.to_dict(),
        "shape": list(shape),
        "sampler": _sampler_record(scfg),
        "unconditional": scfg.lam == 0,
        "plan": info["plan"],
        "residual_trace": [[i, r] for i, r in info["residual_trace"]],
    }
    if gt is not None and Path(gt).exists():
        ref = volume.load(gt)
        if ref.shape != X.shape:
            raise CommandError(EXIT_SHAPE, f"ground truth {ref.shape} vs reconstruction {X.shape}")
        rows = [("recon", metrics.evaluate(X, ref)), ("adjoint", metrics.evaluate(baseline, ref))]
        metrics.write_reports(rows, out / "metrics.json", out / "metrics.csv")
        manifest["metrics"] = {rid: r.to_json() for rid, r in rows}
    _dump(manifest, out / "run_manifest.json")
    return 0


def cmd_generate(cfg: dict, out: Path) -> int:
    gc = cfg["generate"]
    shape = tuple(gc["shape"])
    model_p, model_a = _models(cfg)
    scfg = _sampler_config(cfg)
    info: dict = {}
    try:
        X = sampler.generate(model_p, model_a, scfg, shape, info=info)
    except sampler.DivergenceError as exc:
        raise CommandError(EXIT_DIVERGED, str(exc)) from None
    volume.save(X, out / "generated.tpdmvol")
    if gc.get("export_pgm"):
        for ax in range(3):
            volume.save_pgm(np.take(X.data, shape[ax] // 2, axis=ax), out / f"central_axis{ax + 1}.pgm")
    _dump({"config": _recorded(cfg), "sampler": _sampler_record(scfg), "plan": info["plan"], "shape": list(shape)}, out / "run_manifest.json")
    return 0


def cmd_evaluate(cfg: dict, out: Path) -> int:
    ec = cfg["evaluate"]
    rng_ = ec.get("data_range", 1.0)
    rows = []
    for k, pair in enumerate(ec["pairs"]):
        x = volume.load(_require(pair["x"]))
        ref = volume.load(_require(pair["ref"]))
        if x.shape != ref.shape:
            raise CommandError(EXIT_SHAPE, f"pair {k}: shape {x.shape} vs {ref.shape}")
        rows.append((pair.get("id", f"pair{k}"), metrics.evaluate(x, ref, rng_)))
    metrics.write_reports(rows, out / "metrics.json", out / "metrics.csv")
    return 0


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tpdm", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--out")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if not Path(args.config).exists():
            raise CommandError(EXIT_MISSING, f"missing config file: {args.config}")
        cfg = cfgmod.load(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.threads is not None:
            cfg["threads"] = args.threads
        if args.out is not None:
            cfg["out"] = args.out
        cfgmod.validate(cfg, args.command)
        out = Path(cfg.get("out", "."))
        out.mkdir(parents=True, exist_ok=True)
        # BLAS stays single-threaded so results never depend on --threads;
        # the flag sizes the slice-chunk worker pool instead
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](cfg, out)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, IndexError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
