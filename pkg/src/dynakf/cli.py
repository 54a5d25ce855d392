"""Command-line entry point: ``dynakf <command> [options]``.

Settings resolve as flags > DYNAKF_SEED (seed only) > config file > defaults.
Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Invalid or inconsistent experiment settings."""


# --- configuration ------------------------------------------------------------


@dataclass
class DataConfig:
    episodes: int = 100
    length: int = 50


@dataclass
class EvalConfig:
    segments: tuple[float, ...] = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0)
    horizons: tuple[int, ...] = (5, 10)
    init: int = 5
    probe_episodes: int = 50
    stability_samples: int = 10_000
    stability_steps: int = 200

    def __post_init__(self):
        self.segments = tuple(float(s) for s in self.segments)
        self.horizons = tuple(int(h) for h in self.horizons)


@dataclass
class ExperimentConfig:
    system: object = None
    model: object = None
    train: object = None
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    corruption: object = "staircase"
    seed: int = 0

    def __post_init__(self):
        from .model import ModelConfig
        from .simlab import SystemSpec
        from .trainer import TrainConfig

        self.system = self.system or SystemSpec()
        self.model = self.model or ModelConfig()
        self.train = self.train or TrainConfig()

    def corruption_spec(self):
        from .simlab import STAIRCASE_RANGES, CorruptionSpec

        if self.corruption == "staircase":
            return CorruptionSpec.staircase()
        if self.corruption == "zero":
            return CorruptionSpec.constant(STAIRCASE_RANGES[-1][1], 0.0)
        return CorruptionSpec([tuple(r) for r in self.corruption])

    def to_dict(self) -> dict:
        return {
            "system": self.system.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "eval": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.eval).items()},
            "corruption": self.corruption,
            "seed": self.seed,
        }


def _section(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{name}]: {err}") from err


def read_config_file(path) -> dict:
    p = Path(path)
    text = p.read_bytes()
    if p.suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{p}: {err}") from err
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    try:
        return tomllib.loads(text.decode())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{p}: {err}") from err


def build_config(raw: dict, overrides: dict | None = None, env=os.environ) -> ExperimentConfig:
    """Defaults <- ``raw`` (config file) <- DYNAKF_SEED <- ``overrides`` (flags, dotted keys)."""
    from .model import ModelConfig
    from .simlab import SystemSpec
    from .trainer import TrainConfig

    raw = json.loads(json.dumps(raw))  # deep copy
    unknown = set(raw) - {"system", "model", "train", "data", "eval", "corruption", "seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if env.get("DYNAKF_SEED") is not None:
        try:
            raw["seed"] = int(env["DYNAKF_SEED"])
        except ValueError as err:
            raise ConfigError(f"DYNAKF_SEED must be an integer, got {env['DYNAKF_SEED']!r}") from err
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        head, _, tail = key.partition(".")
        if tail:
            raw.setdefault(head, {})[tail] = value
        else:
            raw[head] = value
    seed = int(raw.get("seed", 0))
    train = dict(raw.get("train", {}))
    train["seed"] = seed
    try:
        system = SystemSpec.from_dict(raw.get("system", {}))
        model = ModelConfig.from_dict(raw.get("model", {}))
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    cfg = ExperimentConfig(system, model, _section(TrainConfig, train, "train"),
                           _section(DataConfig, raw.get("data"), "data"),
                           _section(EvalConfig, raw.get("eval"), "eval"), raw.get("corruption", "staircase"), seed)
    try:
        cfg.corruption_spec()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"corruption: {err}") from err
    return cfg


# --- helpers ------------------------------------------------------------------


def _rel(path: Path, root: Path) -> str:
    return str(Path(path).relative_to(root))


def write_manifest(out: Path, command: str, argv: list[str], cfg: ExperimentConfig | None, outputs: list[Path],
                   started: float, timing: bool, extra: dict | None = None) -> Path:
    from . import __version__
    from .evalkit import write_json

    outputs = sorted({_rel(p, out) for p in outputs})
    missing = [p for p in outputs if not (out / p).exists()]
    if missing:
        raise OSError(f"manifest references missing files: {missing}")
    body = {
        "command": command,
        "argv": argv,
        "tool_version": __version__,
        "seed": None if cfg is None else cfg.seed,
        "config": None if cfg is None else cfg.to_dict(),
        "checkpoints": [p for p in outputs if p.endswith(".ckpt")],
        "metrics": [p for p in outputs if p.endswith((".csv", ".json"))],
        "files": outputs,
        "wall_clock_seconds": round(time.perf_counter() - started, 3) if timing else None,
    }
    body.update(extra or {})
    path = out / MANIFEST
    write_json(path, body)
    return path


def _episode_files(data: Path) -> list[Path]:
    folder = data / "episodes" if (data / "episodes").is_dir() else data
    if not folder.is_dir():
        raise OSError(f"dataset directory {data} does not exist")
    return sorted(folder.glob("*.bin"))


def load_data(data) -> list:
    from .simlab import load_dataset

    return load_dataset(_episode_files(Path(data)))


def check_dims(model, episodes) -> None:
    if not episodes:
        return
    width = episodes[0].observations.shape[1]
    if width != model.config.raw_dim:
        raise ConfigError(f"dataset observations are {width} wide, model expects raw_dim {model.config.raw_dim}")
    if getattr(model.config, "control_dim", 0) and episodes[0].controls is None:
        raise ConfigError("model expects controls but the dataset has none")


def load_model(path):
    """Rebuild a DynaNet or LstmBaseline from a training checkpoint."""
    from .model import DynaNet, ModelConfig
    from .nnkit import load_checkpoint
    from .trainer import BaselineConfig, LstmBaseline

    ck = load_checkpoint(path)
    kind = ck.config.get("kind", "DynaNet")
    if kind == "LstmBaseline":
        model = LstmBaseline.init(BaselineConfig.from_dict(ck.config["model"]), _rng(0))
    else:
        model = DynaNet.zeros(ModelConfig.from_dict(ck.config["model"]))
    model.load_state_dict({k[6:]: v for k, v in ck.tensors.items() if k.startswith("model/")})
    return model, ck


def _rng(seed, *key):
    from .diffmath import RngStream

    return RngStream(seed, tuple(key))


def forecaster_for(model, seed: int):
    from .evalkit import FilterForecaster
    from .trainer import BaselineForecaster, LstmBaseline

    return BaselineForecaster(model) if isinstance(model, LstmBaseline) else FilterForecaster(model, seed)


# --- commands -------------------------------------------------------------------


def cmd_simulate(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    import numpy as np

    from .evalkit import integrate_poses
    from .simlab import generate_dataset, save_episode

    episodes = generate_dataset(cfg.system, cfg.data.episodes, cfg.data.length, cfg.seed)
    folder = out / "episodes"
    folder.mkdir(parents=True, exist_ok=True)
    files, worst = [], 0.0
    for i, ep in enumerate(episodes):
        files.extend(save_episode(ep, folder / f"ep_{i:05d}"))
        if ep.abs_path is not None:
            worst = max(worst, float(np.max(np.abs(integrate_poses(ep.poses) - ep.abs_path))))
    args._extra = {"episodes": len(episodes), "path_check_max_error": worst}
    return files


def training_set(cfg: ExperimentConfig, episodes):
    from .trainer import make_windows, split_episodes

    train_eps, val_eps = split_episodes(episodes, cfg.train.val_fraction, cfg.seed)
    windows = [w for e in train_eps for w in make_windows(e, cfg.train.window)]
    return windows, val_eps


def _write_history(path: Path, hist, timing: bool) -> None:
    from .evalkit import write_csv
    from .trainer import HISTORY_COLUMNS

    write_csv(path, HISTORY_COLUMNS, hist.rows(timing))


def _train_common(args, cfg: ExperimentConfig, out: Path, model, kind: str) -> list[Path]:
    from .nnkit import load_checkpoint
    from .trainer import load_training_state, save_training_state, train

    episodes = load_data(args.data)
    if not episodes:
        raise ConfigError(f"dataset {args.data} is empty")
    check_dims(model, episodes)
    windows, val_eps = training_set(cfg, episodes)
    adam, start = None, 0
    if args.resume:
        adam, start, _ = load_training_state(args.resume, model)
    ckdir = out / "checkpoints"
    extra = {"system": cfg.system.to_dict(), "train": cfg.train.to_dict(), "mode": kind}
    model, hist = train(model, windows, cfg.train, val_eps, ckdir, adam=adam, start_epoch=start, extra=extra)
    final = out / "model.ckpt"
    if hist.checkpoints:
        final.write_bytes(Path(hist.checkpoints[-1]).read_bytes())
    else:
        from .nnkit import AdamState

        save_training_state(final, model, adam or AdamState(lr=cfg.train.lr), start, extra)
    _write_history(out / "history.csv", hist, args.timing)
    args._extra = {"mode": kind, "final_step": load_checkpoint(final).step, "resumed_from_epoch": start}
    return [final, out / "history.csv", *map(Path, hist.checkpoints)]


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    from .model import DynaNet

    model = DynaNet.init(cfg.model, _rng(cfg.seed, 1))
    kind = f"{cfg.model.transition_mode}/{cfg.model.layout}"
    return _train_common(args, cfg, out, model, kind)


def cmd_train_baseline(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    from .trainer import BaselineConfig, LstmBaseline

    model = LstmBaseline.init(BaselineConfig.matching(cfg.model), _rng(cfg.seed, 1))
    return _train_common(args, cfg, out, model, "lstm")


def _prediction_outputs(model, episodes, cfg: ExperimentConfig, out: Path) -> tuple[list[Path], dict]:
    from .evalkit import integrate_poses, prediction_protocol, write_csv, write_json, write_trajectory

    rep = prediction_protocol(forecaster_for(model, cfg.seed), episodes, cfg.eval.init, cfg.eval.horizons)
    hs = sorted(rep.rmse)
    rows = [(i, *[rep.per_episode[h][i] for h in hs]) for i in range(len(episodes))]
    write_csv(out / "prediction.csv", ("episode", *[f"rmse_h{h}" for h in hs]), rows)
    write_json(out / "prediction.json", rep.to_dict())
    files = [out / "prediction.csv", out / "prediction.json"]
    H = hs[-1]
    for tag, i in (("best", rep.best), ("worst", rep.worst)):
        truth = episodes[i].poses[cfg.eval.init : cfg.eval.init + H]
        write_trajectory(out / f"traj_{tag}_pred.csv", integrate_poses(rep.forecasts[i]))
        write_trajectory(out / f"traj_{tag}_gt.csv", integrate_poses(truth))
        files += [out / f"traj_{tag}_pred.csv", out / f"traj_{tag}_gt.csv"]
    return files, {f"prediction_rmse_h{h}": rep.rmse[h] for h in hs}


def cmd_eval(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    import numpy as np

    from .evalkit import DRIFT_COLUMNS, drift_metrics, integrate_poses, write_csv, write_json
    from .trainer import pose_rmse

    model, _ = load_model(args.checkpoint)
    episodes = load_data(args.data)
    if not episodes:
        raise ConfigError(f"dataset {args.data} is empty")
    check_dims(model, episodes)
    rows, per = [], []
    for i, ep in enumerate(episodes):
        gt = integrate_poses(ep.poses)
        if args.estimate == "gt":
            est = gt
        else:
            ctrl = None if ep.controls is None else ep.controls[None]
            rel = model.posterior_poses(ep.observations[None], _rng(cfg.seed, 3, i), ctrl)[0]
            est = integrate_poses(rel)
        m = drift_metrics(gt, est, cfg.eval.segments)
        rows.append((i, m.t_rel, m.r_rel, sum(v[2] for v in m.per_length.values())))
        per.append(m.to_dict())
    write_csv(out / "drift.csv", DRIFT_COLUMNS, rows)
    finite = [r for r in rows if np.isfinite(r[1])]
    summary = {
        "t_rel": float(np.mean([r[1] for r in finite])) if finite else None,
        "r_rel": float(np.mean([r[2] for r in finite])) if finite else None,
        "posterior_rmse": pose_rmse(model, episodes, cfg.seed) if args.estimate == "model" else 0.0,
    }
    write_json(out / "drift.json", {"summary": summary, "episodes": per})
    files = [out / "drift.csv", out / "drift.json"]
    if min(len(e) for e in episodes) >= cfg.eval.init + max(cfg.eval.horizons):
        pf, psum = _prediction_outputs(model, episodes, cfg, out)
        files += pf
        summary.update(psum)
    write_json(out / "metrics.json", summary)
    args._extra = {"summary": summary}
    return files + [out / "metrics.json"]


def cmd_predict(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    model, _ = load_model(args.checkpoint)
    episodes = load_data(args.data)
    check_dims(model, episodes)
    try:
        files, summary = _prediction_outputs(model, episodes, cfg, out)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    args._extra = {"summary": summary}
    return files


def probe_episodes(cfg: ExperimentConfig, n: int, data=None) -> list:
    """Corrupted episodes for the gain probe, cut to the schedule length."""
    from .simlab import corrupt, generate_dataset

    spec = cfg.corruption_spec()
    T = spec.length
    if data is not None:
        source = [e for e in load_data(data) if len(e) >= T][:n]
        if len(source) < n:
            raise ConfigError(f"dataset has {len(source)} episodes of length >= {T}, probe needs {n}")
        source = [e.replace(states=e.states[:T], observations=e.observations[:T], poses=e.poses[:T],
                            controls=None if e.controls is None else e.controls[:T], corruption=None,
                            abs_path=None) for e in source]
    else:
        source = generate_dataset(cfg.system, n, T, cfg.seed + 50_000)
    return [corrupt(e, spec, _rng(cfg.seed, 6, i)) for i, e in enumerate(source)]


def cmd_probe(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    from .evalkit import PROBE_COLUMNS, gain_probe, write_csv, write_json
    from .model import DynaNet

    from .simlab import SystemSpec

    model, ck = load_model(args.checkpoint)
    if not isinstance(model, DynaNet):
        raise ConfigError("the gain probe needs a filter checkpoint, not the LSTM baseline")
    if not args.config and "system" in ck.config:
        cfg.system = SystemSpec.from_dict(ck.config["system"])
    episodes = probe_episodes(cfg, args.episodes or cfg.eval.probe_episodes, args.data)
    check_dims(model, episodes)
    rep = gain_probe(model, episodes, cfg.seed)
    write_csv(out / "probe.csv", PROBE_COLUMNS, rep.rows())
    write_json(out / "probe_correlations.json", {"correlations": rep.correlations, "counts": rep.counts,
                                                  "levels": rep.levels, "episodes": len(episodes)})
    args._extra = {"correlations": rep.correlations}
    return [out / "probe.csv", out / "probe_correlations.json"]


def tiny_grad_check(seed: int = 0) -> dict:
    from .model import DynaNet, ModelConfig
    from .simlab import SystemSpec, generate_dataset

    window = generate_dataset(SystemSpec(kind="planar", modalities=(8,)), 1, 3, seed)[0]
    out = {}
    for mode in ("deterministic", "dirichlet"):
        from .trainer import model_grad_check

        cfg = ModelConfig(latent_dim=3, modalities=((8, 3),), encoder_hidden=(4,), transition_mode=mode)
        out[mode] = model_grad_check(DynaNet.init(cfg, _rng(seed, 1)), window, seed=seed)
    return out


def cmd_grad_check(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    from .evalkit import write_json

    reports = tiny_grad_check(cfg.seed)
    body = {mode: {"tolerance": r.tolerance, "passed": r.passed, "groups": [asdict(g) for g in r.groups]}
            for mode, r in reports.items()}
    write_json(out / "grad_check.json", body)
    for r in reports.values():
        print(r.summary())
    args._extra = {"passed": all(r.passed for r in reports.values())}
    if not args._extra["passed"]:
        args._exit = EXIT_NUMERIC
    return [out / "grad_check.json"]


def stability_suite(head, samples: int, steps: int, seed: int) -> dict:
    """Sample transitions of ``head`` at random latent states and roll one out."""
    import numpy as np

    from .diffmath import Tensor, no_tape
    from .transition import generate_transition, head_source, rollout_decay, stability_check

    d = head.latent_dim
    batch = 500
    norms = []
    with no_tape():
        for b in range(0, samples, batch):
            n = min(batch, samples - b)
            z = Tensor(_rng(seed, 8, b).normal((n, d)))
            pkt = generate_transition(head, z, head.initial_state(n), _rng(seed, 9, b))
            A = pkt.A.value
            norms.extend(stability_check(A[i]).inf_norm for i in range(n))
        z0 = _rng(seed, 10).normal((d,))
        roll = rollout_decay(head_source(head, _rng(seed, 11)), z0, steps)
    norms = np.array(norms)
    z0_inf = float(np.abs(z0).max())
    return {
        "samples": int(samples),
        "max_inf_norm": float(norms.max()),
        "mean_inf_norm": float(norms.mean()),
        "all_contractive": bool(np.all(norms < 1.0)),
        "rollout_steps": steps,
        "rollout_final_ratio": float(roll.norms[-1] / z0_inf),
        "rollout_max_inf_norm": roll.max_inf_norm,
        "rollout_within_bound": bool(np.all(roll.norms <= roll.bound + 1e-12)),
    }


def cmd_stability_report(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    from .evalkit import write_json
    from .transition import TransitionHead

    if args.checkpoint:
        model, _ = load_model(args.checkpoint)
        head = getattr(model, "head", None)
        if head is None:
            raise ConfigError("stability-report needs a filter checkpoint")
    else:
        m = cfg.model
        head = TransitionHead.init(m.latent_dim, _rng(cfg.seed, 1, 1), m.transition_mode, m.layout,
                                   m.transition_hidden, 0, m.alpha_jitter)
    if head.mode != "dirichlet":
        raise ConfigError("stability-report applies to Dirichlet transitions")
    body = stability_suite(head, args.samples or cfg.eval.stability_samples, args.steps or cfg.eval.stability_steps,
                           cfg.seed)
    write_json(out / "stability.json", body)
    args._extra = {"all_contractive": body["all_contractive"]}
    return [out / "stability.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "train-baseline": cmd_train_baseline,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "probe": cmd_probe,
    "grad-check": cmd_grad_check,
    "stability-report": cmd_stability_report,
}


# --- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynakf", description="Neural Kalman dynamical model experiments")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="TOML or JSON experiment config")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--timing", action="store_true", help="record wall-clock (outputs stop being byte-identical)")
        return p

    p = common(sub.add_parser("simulate", help="generate an episode dataset"))
    p.add_argument("--kind", choices=("linear", "pendulum", "planar"))
    p.add_argument("--episodes", type=int)
    p.add_argument("--length", type=int)

    for name in ("train", "train-baseline"):
        p = common(sub.add_parser(name, help=f"{name} on a simulated dataset"))
        p.add_argument("--data", required=True)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--window", type=int)
        p.add_argument("--latent-dim", type=int)
        p.add_argument("--mode", choices=("dirichlet", "deterministic"))
        p.add_argument("--layout", choices=("diagonal", "full"))
        p.add_argument("--resume", help="training checkpoint to continue from")

    p = common(sub.add_parser("eval", help="drift metrics and prediction on a dataset"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--estimate", choices=("model", "gt"), default="model")

    p = common(sub.add_parser("predict", help="open-loop prediction protocol"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", type=int)
    p.add_argument("--horizons", type=int, nargs="+")

    p = common(sub.add_parser("probe", help="Kalman-gain probe on corrupted episodes"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--schedule", help="staircase, zero, or a JSON list of [first, last, level]")
    p.add_argument("--episodes", type=int)

    common(sub.add_parser("grad-check", help="finite-difference check of a tiny full pipeline"))

    p = common(sub.add_parser("stability-report", help="contraction checks for Dirichlet transitions"))
    p.add_argument("--checkpoint")
    p.add_argument("--samples", type=int)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("run", help="re-run the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory (default: the manifest's directory)")
    return parser


FLAG_KEYS = {
    "kind": "system.kind",
    "episodes": "data.episodes",
    "length": "data.length",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "window": "train.window",
    "latent_dim": "model.latent_dim",
    "mode": "model.transition_mode",
    "layout": "model.layout",
    "init": "eval.init",
    "horizons": "eval.horizons",
    "seed": "seed",
}


def _overrides(args) -> dict:
    out = {}
    for attr, key in FLAG_KEYS.items():
        if attr == "episodes" and args.command == "probe":
            continue
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    schedule = getattr(args, "schedule", None)
    if schedule:
        out["corruption"] = schedule if schedule in ("staircase", "zero") else json.loads(schedule)
    return out


def _recorded_argv(argv: list[str]) -> list[str]:
    """argv without --out (implied by the manifest location) or --threads (no effect on results)."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--out", "--threads"):
            skip = True
            continue
        if a.startswith(("--out=", "--threads=")):
            continue
        out.append(a)
    return out


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be at least 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    if args.command == "run":
        manifest = Path(args.manifest)
        body = json.loads(manifest.read_text())
        out = args.out or str(manifest.parent)
        return dispatch(body["argv"] + ["--out", out])

    started = time.perf_counter()
    raw = read_config_file(args.config) if args.config else {}
    cfg = build_config(raw, _overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    args._extra, args._exit = {}, EXIT_OK
    files = COMMANDS[args.command](args, cfg, out)
    write_manifest(out, args.command, _recorded_argv(argv), cfg, files, started, args.timing, args._extra)
    return args._exit


def exit_code(err: BaseException) -> int | None:
    """Map an exception to the documented exit code; None means a genuine bug."""
    from .nnkit import CheckpointError
    from .transition import DivergenceError

    if isinstance(err, (CheckpointError, OSError)):
        return EXIT_IO
    if isinstance(err, (FloatingPointError, ArithmeticError, DivergenceError)):
        return EXIT_NUMERIC
    if isinstance(err, (ValueError, KeyError)):
        return EXIT_CONFIG
    return None


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return dispatch(argv)
    except Exception as err:
        code = exit_code(err)
        if code is None:
            raise
        label = {EXIT_CONFIG: "config error", EXIT_NUMERIC: "numeric failure", EXIT_IO: "I/O error"}[code]
        print(f"dynakf: {label}: {err}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
