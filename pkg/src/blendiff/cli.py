"""Command-line entry point: one subcommand per pipeline stage.

Every command writes a JSON manifest next to its output recording the
resolved configuration, its hash, the seed and library versions.  Exit codes:
0 ok, 1 usage or I/O error, 2 numerical failure, 3 non-convergence.
"""

import argparse
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .coeff_fit import CoeffSequence, MotionSequence, QPConfig, assemble_qp, solve_qp
from .errors import BlendiffError, ConvergenceError, InputError, NumericalError
from .mesh import BlendshapeModel, load_model, read_correspondence, read_obj, save_model, write_obj
from .numerics import btsr
from .numerics.rng import Rng

log = logging.getLogger("blendiff")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CONVERGENCE = 0, 1, 2, 3


class UsageError(BlendiffError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    """Resolved settings for a run; sections map onto the library config types."""

    paths: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    denoiser: dict = field(default_factory=dict)
    guidance: dict = field(default_factory=dict)
    qp: dict = field(default_factory=dict)
    vae: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def _read_config_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"bad TOML in {path}: {exc}") from None
    try:
        return json.loads(text)
    except ValueError as exc:
        raise UsageError(f"bad JSON in {path}: {exc}") from None


def load_config(path=None, overrides=None):
    """Defaults, then the config file, then CLI overrides (highest precedence)."""
    raw = _read_config_file(path) if path else {}
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    cfg = PipelineConfig(**raw)
    for section, values in (overrides or {}).items():
        if section == "seed":
            if values is not None:
                cfg.seed = int(values)
            continue
        target = getattr(cfg, section)
        target.update({k: v for k, v in values.items() if v is not None})
    for name, value in cfg.paths.items():
        if name != "output" and not Path(value).exists():
            raise UsageError(f"configured path {name}={value} does not exist")
    return cfg


def _build(kind, values, **fixed):
    names = {f.name for f in fields(kind)}
    extra = set(values) - names
    if extra:
        raise UsageError(f"unknown {kind.__name__} keys: {sorted(extra)}")
    return kind(**{**values, **fixed})


def versions():
    return {"blendiff": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(path, command, cfg, extra=None):
    manifest = {"command": command, "seed": cfg.seed, "config": cfg.to_dict(),
                "config_hash": cfg.digest(), "versions": versions()}
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return manifest


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _manifest_for(output):
    output = Path(output)
    return output / "manifest.json" if output.is_dir() else output.with_name(output.name + ".manifest.json")


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


# --------------------------------------------------------------------------
# inputs


def _obj_files(directory):
    return sorted(p for p in Path(directory).glob("*.obj") if p.stem != "template")


def read_motion(path):
    """A directory of OBJ frames (sorted by name) or a BTSR ``(N, 3M)`` array."""
    path = _require(path, "motion")
    if path.is_dir():
        frames = [read_obj(p).position_vector() for p in sorted(path.glob("*.obj"))]
        if not frames:
            raise UsageError(f"no OBJ frames in {path}")
        return MotionSequence(np.stack(frames))
    return MotionSequence(btsr.load(path, rank=2).astype(np.float64))


def read_conditioning(path, n_frames=None, n_mels=None):
    from .audio import features_from_path

    path = _require(path, "conditioning input")
    kw = {"n_mels": n_mels} if n_mels else {}
    return features_from_path(path, n_frames, **kw).frames


def read_coeff_dir(path):
    path = _require(path, "coefficient directory")
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise UsageError(f"no coefficient CSVs in {path}")
    return files, [CoeffSequence.load(f) for f in files]


# --------------------------------------------------------------------------
# commands


def cmd_build_blendshapes(args, cfg):
    from .deformation_transfer import build_blendshapes, build_face_correspondence

    src_t = read_obj(_require(args.src_template, "source template"))
    tgt_t = read_obj(_require(args.tgt_template, "target template"))
    src_dir = _require(args.src_blendshapes, "source blendshape directory")
    vc = read_correspondence(_require(args.correspondence, "correspondence"))
    names_file = src_dir / "names.txt"
    if names_file.exists():
        names = names_file.read_text().split()
        files = [src_dir / f"{n}.obj" for n in names]
    else:
        files = _obj_files(src_dir)
        names = [p.stem for p in files]
    shapes = [read_obj(_require(p, "blendshape")) for p in files]
    out = Path(args.output)
    if shapes:
        vc.validate(src_t, tgt_t)
        fc = build_face_correspondence(src_t, tgt_t, vc)
        model, report = build_blendshapes(src_t, shapes, tgt_t, fc, names, return_report=True)
    else:
        model, report = BlendshapeModel.from_meshes(tgt_t, [], []), []
    save_model(out, model)
    write_manifest(out / "manifest.json", "build-blendshapes", cfg,
                   {"n_blendshapes": model.n_blendshapes, "n_vertices": model.n_vertices, "report": report})
    return EXIT_OK


def cmd_fit(args, cfg):
    model = load_model(_require(args.model, "blendshape model"))
    motion = read_motion(args.motion)
    if args.delta is not None:
        cfg.qp["delta"] = args.delta
    qcfg = _build(QPConfig, cfg.qp)
    res = solve_qp(assemble_qp(model, motion, qcfg), qcfg, raise_on_fail=False)
    seq = CoeffSequence(np.clip(res.u, 0.0, 1.0), motion.frame_rate, model.names)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    seq.save(out)
    write_manifest(_manifest_for(out), "fit", cfg, {"solver": res.diagnostics(), "partial": not res.converged})
    if not res.converged:
        print(json.dumps({"error": "MaxIterations", "output": str(out), **res.diagnostics()}), file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _training_pairs(data_dir, n_mels=None):
    files, seqs = read_coeff_dir(data_dir)
    feats = []
    for f, s in zip(files, seqs):
        cond = next((c for c in (f.with_suffix(".wav"), f.with_suffix(".btsr")) if c.exists()), None)
        if cond is None:
            raise UsageError(f"no .wav or .btsr conditioning next to {f}")
        feats.append(read_conditioning(cond, s.values.shape[0], n_mels))
    return seqs, feats


def cmd_train(args, cfg):
    from .denoiser import DenoiserConfig, TrainConfig, Trainer, TrainingSet, save_checkpoint

    data_dir = args.data or cfg.paths.get("data")
    if not data_dir:
        raise UsageError("no training data: pass --data or set paths.data")
    seqs, feats = _training_pairs(data_dir, cfg.denoiser.get("cond_dim"))
    data = TrainingSet([s.values for s in seqs], feats, seqs[0].names)
    if args.steps is not None:
        cfg.train["steps"] = args.steps
    tcfg = _build(TrainConfig, cfg.train, seed=cfg.seed)
    dcfg = _build(DenoiserConfig, cfg.denoiser, n_channels=data.n_channels, cond_dim=data.cond_dim)
    trainer = Trainer(data, dcfg, tcfg).fit(log_every=max(1, tcfg.steps // 20))
    use_ema = not args.raw_weights
    params = trainer.ema_params if use_ema else trainer.params
    out = Path(args.output or cfg.paths.get("checkpoints") or "checkpoint")
    save_checkpoint(out, params, dcfg, trainer.state.step, use_ema,
                    {"names": list(data.names), "T": tcfg.T, "train": tcfg.to_dict()})
    write_manifest(out / "run.json", "train", cfg, {"final_loss": trainer.state.history[-1] if trainer.state.history else None})
    return EXIT_OK


def _guidance(cfg, args):
    from .diffusion import GuidanceConfig

    for key in ("gamma", "steps", "sampler", "eta"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.guidance[key] = value
    return _build(GuidanceConfig, cfg.guidance)


def _sample_one(checkpoint, cond, gcfg_dict, seed, index):
    from .denoiser import denoiser_fn, load_checkpoint
    from .diffusion import GuidanceConfig, NoiseSchedule, sample

    params, dcfg, manifest = load_checkpoint(checkpoint)
    fn = denoiser_fn(params, dcfg)
    rng = Rng(seed).child(f"sample{index}")
    return sample(fn, cond, cond.shape[0], dcfg.n_channels, GuidanceConfig(**gcfg_dict), rng,
                  NoiseSchedule(manifest.get("T", 1000)), manifest.get("names", ()))


def cmd_sample(args, cfg):
    from .denoiser import load_checkpoint

    ckpt = _require(args.checkpoint, "checkpoint")
    _, dcfg, _ = load_checkpoint(ckpt)
    cond = read_conditioning(args.input, args.frames, dcfg.cond_dim)
    gcfg = _guidance(cfg, args)
    count = args.count
    jobs = max(1, args.jobs)
    gd = asdict(gcfg)
    if jobs == 1 or count == 1:
        seqs = [_sample_one(ckpt, cond, gd, cfg.seed, i) for i in range(count)]
    else:
        with ProcessPoolExecutor(jobs) as pool:
            seqs = list(pool.map(_sample_one, [ckpt] * count, [cond] * count, [gd] * count,
                                 [cfg.seed] * count, range(count)))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, seq in enumerate(seqs):
        path = out / f"sample_{i:03d}.csv"
        seq.save(path)
        written.append(path.name)
    write_manifest(out / "manifest.json", "sample", cfg,
                   {"checkpoint": str(ckpt), "input": str(args.input), "count": count, "files": written,
                    "sub_seeds": [f"sample{i}" for i in range(count)]})
    return EXIT_OK


def cmd_edit(args, cfg):
    from .denoiser import denoiser_fn, load_checkpoint
    from .diffusion import NoiseSchedule, edit, read_mask

    params, dcfg, manifest = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    ref = CoeffSequence.load(_require(args.reference, "reference CSV"))
    mask = read_mask(_require(args.mask, "mask CSV"), ref.shape)
    cond = read_conditioning(args.input, ref.shape[0], dcfg.cond_dim)
    gcfg = _guidance(cfg, args)
    seq = edit(denoiser_fn(params, dcfg), cond, ref, mask, gcfg, Rng(cfg.seed),
               NoiseSchedule(manifest.get("T", 1000)), ref.names)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    seq.save(out)
    write_manifest(_manifest_for(out), "edit", cfg, {"reference": str(args.reference), "mask": str(args.mask)})
    return EXIT_OK


def cmd_eval(args, cfg):
    from .metrics import (SUBSET_SIZE, VaeConfig, VaeModel, frechet_distance, gaussian_stats,
                          multimodality, train_vae, wind_repeated)
    from .metrics.vae import window_features

    _, real = read_coeff_dir(args.real)
    _, gen = read_coeff_dir(args.generated)
    if real[0].shape[1] != gen[0].shape[1]:
        raise UsageError("real and generated sequences have different channel counts")
    if args.vae:
        model = VaeModel.load(_require(args.vae, "VAE directory"))
        vae_source = str(args.vae)
    else:
        vcfg = _build(VaeConfig, cfg.vae, seed=cfg.seed)
        model = train_vae([s.values for s in real], vcfg)
        vae_source = "trained on real set"
    per_real = [window_features(model, s.values) for s in real]
    per_gen = [window_features(model, s.values) for s in gen]
    lat_r, lat_g = np.concatenate(per_real), np.concatenate(per_gen)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    btsr.save(out / "real_latents.btsr", lat_r)
    btsr.save(out / "generated_latents.btsr", lat_g)
    fd = frechet_distance(gaussian_stats(lat_r), gaussian_stats(lat_g))
    k = min(args.components, lat_r.shape[0], lat_g.shape[0])
    w_mean, w_std, _ = wind_repeated(lat_r, lat_g, args.repeats, Rng(cfg.seed).child("wind"), k)
    # multimodality over per-sequence features of the generated set, one condition
    seq_feats = np.stack([f.mean(axis=0) for f in per_gen])
    s_l = min(SUBSET_SIZE, len(seq_feats) // 2)
    mm = None
    if s_l >= 1:
        perm = Rng(cfg.seed).child("multimodality").permutation(len(seq_feats))
        mm = multimodality(seq_feats[perm[:s_l]][None], seq_feats[perm[s_l:2 * s_l]][None])
    report = {"fd": fd, "wind_mean": w_mean, "wind_std": w_std, "multimodality": mm,
              "subset_size": s_l, "gmm_components": k, "repeats": args.repeats, "vae": vae_source,
              "n_real": len(real), "n_generated": len(gen)}
    write_manifest(out / "metrics.json", "eval", cfg, {"metrics": report})
    print(json.dumps({k2: report[k2] for k2 in ("fd", "wind_mean", "wind_std", "multimodality")}))
    return EXIT_OK


def _reconstruct_frame(model_dir, values, path, name):
    model = load_model(model_dir)
    write_obj(path, model.mesh(values), name)
    return path.name


def cmd_reconstruct(args, cfg):
    model_dir = _require(args.model, "blendshape model")
    model = load_model(model_dir)
    seq = CoeffSequence.load(_require(args.coefficients, "coefficient CSV"))
    if seq.shape[1] != model.n_blendshapes:
        raise UsageError(f"CSV has {seq.shape[1]} channels, model has {model.n_blendshapes}")
    if tuple(seq.names) != tuple(model.names):
        # reorder columns by name when both sides are named consistently
        if set(seq.names) != set(model.names):
            raise UsageError("CSV channel names do not match the model")
        order = [seq.names.index(n) for n in model.names]
        seq = CoeffSequence(seq.values[:, order], seq.frame_rate, model.names)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"frame_{n:05d}.obj" for n in range(seq.shape[0])]
    names = [f"frame {n}" for n in range(seq.shape[0])]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            list(pool.map(_reconstruct_frame, [model_dir] * len(paths), seq.values, paths, names))
    else:
        for values, path, name in zip(seq.values, paths, names):
            write_obj(path, model.mesh(values), name)
    write_manifest(out / "manifest.json", "reconstruct", cfg, {"frames": len(paths)})
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config file)")
    common.add_argument("--config", help="JSON or TOML pipeline config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent items")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    guidance = argparse.ArgumentParser(add_help=False)
    guidance.add_argument("--gamma", type=float, help="guidance scale")
    guidance.add_argument("--steps", type=int, help="sampling steps")
    guidance.add_argument("--sampler", choices=("ddim", "ddpm"))
    guidance.add_argument("--eta", type=float, help="DDIM stochasticity")

    p = _Parser(prog="blendiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"blendiff {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build-blendshapes", parents=[common], help="transfer source blendshapes onto a target mesh")
    s.add_argument("src_template")
    s.add_argument("src_blendshapes", help="directory of source blendshape OBJs (names.txt optional)")
    s.add_argument("tgt_template")
    s.add_argument("correspondence", help="vertex correspondence file, 'src tgt' per line")
    s.add_argument("-o", "--output", required=True, help="output model directory")
    s.set_defaults(func=cmd_build_blendshapes)

    s = sub.add_parser("fit", parents=[common], help="fit coefficients to a motion sequence")
    s.add_argument("model", help="blendshape model directory")
    s.add_argument("motion", help="directory of OBJ frames or a BTSR (N, 3M) file")
    s.add_argument("--delta", type=float, help="per-frame velocity bound")
    s.add_argument("-o", "--output", required=True, help="coefficient CSV")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("train", parents=[common], help="train the denoiser")
    s.add_argument("--data", help="directory of <name>.csv with <name>.wav or <name>.btsr")
    s.add_argument("--steps", type=int, help="optimizer steps")
    s.add_argument("--raw-weights", action="store_true", help="save raw instead of EMA weights")
    s.add_argument("-o", "--output", help="checkpoint directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common, guidance], help="generate coefficient sequences")
    s.add_argument("checkpoint")
    s.add_argument("input", help="WAV file or BTSR feature file")
    s.add_argument("--count", type=int, default=8, help="sequences to draw (72 in the full protocol)")
    s.add_argument("--frames", type=int, help="override the frame count")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("edit", parents=[common, guidance], help="regenerate unmasked entries of a sequence")
    s.add_argument("checkpoint")
    s.add_argument("input", help="WAV file or BTSR feature file")
    s.add_argument("reference", help="reference coefficient CSV")
    s.add_argument("mask", help="0/1 CSV, 1 keeps the reference entry")
    s.add_argument("-o", "--output", required=True, help="output CSV")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("eval", parents=[common], help="FD, WInD and multimodality between two CSV directories")
    s.add_argument("real")
    s.add_argument("generated")
    s.add_argument("--vae", help="trained VAE directory (trained on the real set if omitted)")
    s.add_argument("--repeats", type=int, default=10, help="WInD refits")
    s.add_argument("--components", type=int, default=5, help="GMM components")
    s.add_argument("-o", "--output", required=True, help="report directory")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("reconstruct", parents=[common], help="coefficient CSV to an OBJ sequence")
    s.add_argument("model")
    s.add_argument("coefficients")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_reconstruct)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, {"seed": args.seed})
        return args.func(args, cfg)
    except ConvergenceError as exc:
        _report(exc)
        return EXIT_CONVERGENCE
    except NumericalError as exc:
        _report(exc)
        return EXIT_NUMERIC
    except (InputError, UsageError, OSError) as exc:
        _report(exc)
        return EXIT_USAGE


def _report(exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    diag = getattr(exc, "diagnostics", None)
    if diag:
        payload["diagnostics"] = diag
    print(json.dumps(payload, default=_json_default), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
