"""Command-line driver.

Every subcommand writes into a fresh ``--out`` directory (an existing
non-empty one is refused unless ``--force``) and leaves a ``manifest.json``
there. Exit status: 0 on success, 1 for usage or validation errors, 2 when
the run itself fails.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config
from .data import RunManifest, ToyDataset, file_sha256, gen_toy_dataset, write_image
from .diffusion import build_schedule
from .evaluation import (PERTURBATIONS, first_strength_below, load_report_results, robustness_eval,
                         run_campaign, summary_table, transfer_eval, MetricsReport)
from .models import load_checkpoint, save_checkpoint, train_classifier, train_denoiser
from .workbench import ROLES, Workbench, build_workbench, split_dataset

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_CACHE = os.environ.get("SEMADV_CACHE", ".cache/workbench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ parser


def _common(p, jobs=False):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    p.add_argument("--force", action="store_true", help="write into a non-empty --out")
    if jobs:
        p.add_argument("--jobs", type=int, help="worker processes for campaign attacks")


def _bench_flags(p):
    p.add_argument("--workbench", action="append", default=[], metavar="DIR",
                   help="directory holding dataset.npz and/or checkpoints (repeatable)")
    p.add_argument("--cache", default=DEFAULT_CACHE,
                   help="where trained models are cached when --workbench is not given")
    p.add_argument("--n-images", type=int, dest="n_images", help="campaign size")


def _st_flags(p):
    p.add_argument("--mode", choices=["latent", "model", "both"])
    p.add_argument("--box", choices=["white", "black"])
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--steps-ft", type=int, dest="steps_ft")


def _lm_flags(p):
    p.add_argument("--strategy", choices=["source", "target", "sum"])
    p.add_argument("--method", choices=["gradcam", "simplefullgrad"])
    p.add_argument("--gamma", type=float)


def _step_flags(p):
    p.add_argument("--steps-df", type=int, dest="steps_df")
    p.add_argument("--steps-sp", type=int, dest="steps_sp")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semadv", description="Semantic adversarial attacks with diffusion models")
    parser.add_argument("--version", action="version", version=f"semadv {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="generate the toy dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--classes", type=int, dest="K", help="number of classes")
    p.add_argument("--channels", type=int, dest="C", choices=[1, 3])
    p.add_argument("--preview", type=int, default=8, help="images to export for a look")

    p = sub.add_parser("train-denoiser", help="train the noise-prediction network")
    _common(p)
    p.add_argument("--data", help="dataset.npz (default: generate from the config)")
    p.add_argument("--steps", type=int, help="optimizer steps")

    p = sub.add_parser("train-classifier", help="train one or all classifier roles")
    _common(p)
    p.add_argument("--data", help="dataset.npz (default: generate from the config)")
    p.add_argument("--role", choices=list(ROLES) + ["all"], default="all")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("attack-st", help="semantic transformation campaign")
    _common(p, jobs=True)
    _bench_flags(p)
    _st_flags(p)
    _step_flags(p)

    p = sub.add_parser("attack-lm", help="latent masking campaign")
    _common(p, jobs=True)
    _bench_flags(p)
    _lm_flags(p)
    _step_flags(p)

    p = sub.add_parser("evaluate", help="run every configured campaign setting and tabulate")
    _common(p, jobs=True)
    _bench_flags(p)
    _st_flags(p)
    _lm_flags(p)
    _step_flags(p)

    p = sub.add_parser("transfer", help="transfer ASR of a campaign's images on other classifiers")
    _common(p)
    _bench_flags(p)
    p.add_argument("--report", required=True, help="report_<setting>.json from a campaign")

    p = sub.add_parser("robustness", help="accuracy under natural perturbations")
    _common(p)
    _bench_flags(p)
    p.add_argument("--report", required=True, help="report_<setting>.json from a campaign")
    p.add_argument("--kind", choices=PERTURBATIONS, default="gaussian_blur")
    p.add_argument("--strengths", type=float, nargs="+",
                   help="strength grid (default depends on --kind)")

    p = sub.add_parser("report", help="summary table and difference images")
    _common(p)
    _bench_flags(p)
    p.add_argument("--report", required=True, action="append", help="campaign report (repeatable)")

    p = sub.add_parser("replay", help="re-run a campaign from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--cache", default=DEFAULT_CACHE)
    return parser


# ------------------------------------------------------------------ config


def _raw_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    parse_config(args.config)  # reports parse errors with their location
    src = Path(args.config)
    return json.loads(src.read_text() if src.exists() else args.config)


def _override(raw: dict, section: str, key: str, value):
    if value is not None:
        raw.setdefault(section, {})[key] = value


def resolve_config(args) -> RunConfig:
    raw = _raw_config(args)
    if args.seed is not None:
        raw["seed"] = args.seed
    g = lambda name: getattr(args, name, None)  # noqa: E731
    _override(raw, "data", "n", g("n"))
    _override(raw, "data", "K", g("K"))
    _override(raw, "data", "C", g("C"))
    _override(raw, "denoiser", "steps", g("steps"))
    if g("epochs") is not None:
        cls = raw.setdefault("classifiers", {})
        for role in ROLES:
            cls.setdefault(role, {})["epochs"] = g("epochs")
    for k_arg, k_cfg in (("mode", "mode"), ("box", "box"), ("lam", "lambda"), ("steps_ft", "s_ft")):
        _override(raw, "st", k_cfg, g(k_arg))
    for k_arg in ("strategy", "method", "gamma"):
        _override(raw, "lm", k_arg, g(k_arg))
    cmd = args.command
    for k_arg, k_cfg in (("steps_df", "s_df"), ("steps_sp", "s_sp")):
        if cmd in ("attack-st", "evaluate"):
            _override(raw, "st", k_cfg, g(k_arg))
        if cmd in ("attack-lm", "evaluate"):
            _override(raw, "lm", k_cfg, g(k_arg))
    _override(raw, "campaign", "n_images", g("n_images"))
    _override(raw, "campaign", "jobs", g("jobs"))
    if cmd == "attack-st":
        raw.setdefault("campaign", {})["settings"] = ["st"]
    elif cmd == "attack-lm":
        raw.setdefault("campaign", {})["settings"] = ["lm"]
    return parse_config(raw)


def prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    return out


# ------------------------------------------------------------------ helpers


def _load_dataset(args, config: RunConfig) -> ToyDataset:
    if getattr(args, "data", None):
        return ToyDataset.load(args.data)
    d = config.data
    return gen_toy_dataset(config.seed, d.K, d.n, d.H, d.W, d.C)


def _find(dirs, name):
    for d in dirs:
        p = Path(d) / name
        if p.exists():
            return p
    return None


def load_bench(args, config: RunConfig, log) -> tuple[Workbench, dict]:
    """Workbench from --workbench directories (missing pieces are an error),
    otherwise from the training cache, training whatever is absent."""
    if args.workbench:
        paths = {"dataset": _find(args.workbench, "dataset.npz"),
                 "denoiser": _find(args.workbench, "denoiser.ckpt")}
        for role in ROLES:
            paths[role] = _find(args.workbench, f"{role}.ckpt")
        missing = [k for k, v in paths.items() if v is None]
        if missing:
            raise FileNotFoundError(f"--workbench lacks {', '.join(missing)}")
        ds = ToyDataset.load(paths["dataset"])
        train, test = split_dataset(ds, config)
        sch = build_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
        models = {k: load_checkpoint(paths[k]) for k in ("denoiser",) + ROLES}
        bench = Workbench(ds, train, test, sch, **models)
    else:
        bench = build_workbench(config, cache_dir=args.cache, log=log)
        from .workbench import training_key
        base = Path(args.cache) / training_key(config)
        paths = {"dataset": base / "dataset.npz", "denoiser": base / "denoiser.ckpt"}
        paths.update({role: base / f"{role}.ckpt" for role in ROLES})
    return bench, paths


def _manifest(args, argv, config: RunConfig, dataset_fp=None) -> RunManifest:
    return RunManifest(
        command=shlex.join(["semadv"] + list(argv)),
        seeds={"seed": config.seed, "st": config.st.seed, "lm": config.lm.seed,
               "denoiser": config.denoiser.seed,
               **{f"classifier.{r}": c.seed for r, c in config.classifiers.items()}},
        config=config.to_dict(), dataset_fingerprint=dataset_fp)


def _finish(manifest: RunManifest, out: Path, files) -> None:
    for f in files:
        manifest.add_artifact(Path(f).relative_to(out).as_posix())
    manifest.write(out / "manifest.json")


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, config, out, argv, log):
    d = config.data
    ds = gen_toy_dataset(config.seed, d.K, d.n, d.H, d.W, d.C)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "dataset.npz"]
    ds.save(files[0])
    ext = "ppm" if d.C == 3 else "pgm"
    for i in range(min(args.preview, len(ds.labels))):
        f = out / "preview" / f"{i:04d}_class{ds.labels[i]}.{ext}"
        f.parent.mkdir(exist_ok=True)
        write_image(ds.images[i], f)
        files.append(f)
    m = _manifest(args, argv, config, ds.fingerprint())
    _finish(m, out, files)
    log(f"wrote {len(ds.labels)} images ({d.K} classes) to {out}")


def cmd_train_denoiser(args, config, out, argv, log):
    ds = _load_dataset(args, config)
    train, _ = split_dataset(ds, config)
    sch = build_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
    model = train_denoiser(train, sch, config.denoiser, log_every=max(1, config.denoiser.steps // 10))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "denoiser.ckpt"
    save_checkpoint(model, path)
    m = _manifest(args, argv, config, ds.fingerprint())
    m.add_checkpoint("denoiser", path)
    _finish(m, out, [path])


def cmd_train_classifier(args, config, out, argv, log):
    ds = _load_dataset(args, config)
    train, test = split_dataset(ds, config)
    roles = ROLES if args.role == "all" else (args.role,)
    out.mkdir(parents=True, exist_ok=True)
    m = _manifest(args, argv, config, ds.fingerprint())
    files = []
    for role in roles:
        model = train_classifier(train, config.classifiers[role], test)
        model.metadata["role"] = role
        path = out / f"{role}.ckpt"
        save_checkpoint(model, path)
        m.add_checkpoint(role, path)
        files.append(path)
        log(f"{role}: test accuracy {100 * model.metadata['test_accuracy']:.1f}%")
    _finish(m, out, files)


def _campaigns(args, config, out, argv, log, settings):
    bench, paths = load_bench(args, config, log)
    out.mkdir(parents=True, exist_ok=True)
    m = _manifest(args, argv, config, bench.dataset.fingerprint())
    for k, p in paths.items():
        if k != "dataset":
            m.add_checkpoint(k, p)
    reports, files = [], []
    for setting in settings:
        rep = run_campaign(bench, config, setting, out_dir=out, jobs=config.campaign.jobs,
                           progress=lambda r: log(f"{r.image_id} {r.setting}: "
                                                  f"{'success' if r.success else 'failure'}"))
        reports.append(rep)
        files.append(out / f"report_{setting}.json")
        files.extend(out / f for f in rep.image_files)
    (out / "summary.txt").write_text(summary_table(reports))
    files.append(out / "summary.txt")
    _finish(m, out, files)
    log(summary_table(reports))


def cmd_attack_st(args, config, out, argv, log):
    _campaigns(args, config, out, argv, log, ["st"])


def cmd_attack_lm(args, config, out, argv, log):
    _campaigns(args, config, out, argv, log, ["lm"])


def cmd_evaluate(args, config, out, argv, log):
    _campaigns(args, config, out, argv, log, config.campaign.settings)


def _report_inputs(path):
    doc = json.loads(Path(path).read_text())
    results = load_report_results(path)
    if any(r.image is None for r in results):
        raise FileNotFoundError(f"{path} lists records without image files")
    return doc, results


def cmd_transfer(args, config, out, argv, log):
    bench, _ = load_bench(args, config, log)
    doc, results = _report_inputs(args.report)
    adv = np.stack([r.image for r in results])
    labels = np.array([r.original_label for r in results])
    ids = [int(r.image_id[4:]) for r in results]
    victims = {role: bench.classifier(role) for role in ROLES if role != "extractor"}
    out_doc = {
        "setting": doc["setting"],
        "transfer_asr": transfer_eval(adv, labels, victims),
        "clean_baseline": transfer_eval(bench.test.images[ids], bench.test.labels[ids], victims),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "transfer.json").write_text(json.dumps(out_doc, indent=2, sort_keys=True) + "\n")
    _finish(_manifest(args, argv, config, bench.dataset.fingerprint()), out, [out / "transfer.json"])
    for name, v in out_doc["transfer_asr"].items():
        log(f"{name:<10} transfer ASR {v:6.1f}%   clean error {out_doc['clean_baseline'][name]:6.1f}%")


DEFAULT_STRENGTHS = {
    "gaussian_blur": [0.0, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0],
    "defocus_blur": [0.0, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0],
    "brightness": [0.0, 0.25, 0.5, 0.75, 1.0, 1.25],
    "jpeg_like": [100, 75, 50, 25, 10, 5, 1],
}


def cmd_robustness(args, config, out, argv, log):
    bench, _ = load_bench(args, config, log)
    doc, results = _report_inputs(args.report)
    adv = np.stack([r.image for r in results])
    adv_labels = np.array([r.original_label for r in results])
    strengths = args.strengths or DEFAULT_STRENGTHS[args.kind]
    rows = robustness_eval(bench.target, bench.test.images, bench.test.labels, adv, adv_labels,
                           args.kind, strengths)
    chosen = first_strength_below(rows, 60.0)
    out.mkdir(parents=True, exist_ok=True)
    (out / "robustness.json").write_text(json.dumps(
        {"setting": doc["setting"], "rows": rows, "first_below_60": chosen}, indent=2) + "\n")
    _finish(_manifest(args, argv, config, bench.dataset.fingerprint()), out, [out / "robustness.json"])
    for r in rows:
        log(f"{r['kind']} {r['strength']:6.2f}: clean acc {r['clean_accuracy']:5.1f}%  "
            f"adversarial misclassified {r['adv_misclassified']:5.1f}%")


def cmd_report(args, config, out, argv, log):
    bench, _ = load_bench(args, config, log)
    out.mkdir(parents=True, exist_ok=True)
    reports, files = [], []
    for path in args.report:
        doc, results = _report_inputs(path)
        rep = MetricsReport(setting=doc["setting"], label=doc["label"], config=doc["config"],
                            results=results, hardware=doc.get("hardware", {}))
        agg = doc["aggregates"]
        rep.fid_local, rep.kid_local = agg["fid_local"], agg["kid_local"]
        rep.kid_local_std, rep.fid_clean_floor = agg["kid_local_std"], agg["fid_local_clean_floor"]
        reports.append(rep)
        for r in results:
            orig = bench.test.images[int(r.image_id[4:])]
            diff = np.abs(r.image - orig).max(axis=0, keepdims=True)
            peak = diff.max()
            diff = diff / peak if peak > 0 else diff
            f = out / "difference" / f"{r.image_id}_{r.setting}_diff.pgm"
            f.parent.mkdir(exist_ok=True)
            write_image(diff * 2 - 1, f)
            files.append(f)
    (out / "summary.txt").write_text(summary_table(reports))
    files.append(out / "summary.txt")
    _finish(_manifest(args, argv, config, bench.dataset.fingerprint()), out, files)
    log(summary_table(reports))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-denoiser": cmd_train_denoiser,
    "train-classifier": cmd_train_classifier,
    "attack-st": cmd_attack_st,
    "attack-lm": cmd_attack_lm,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "robustness": cmd_robustness,
    "report": cmd_report,
}


def replay_argv(manifest_path, out, force=False, cache=None) -> tuple[list, str]:
    """Argument vector that re-runs the command recorded in a manifest, with
    the configuration snapshot written to a temporary file."""
    m = RunManifest.read(manifest_path)
    for name, ck in m.checkpoints.items():
        if Path(ck["path"]).exists() and file_sha256(ck["path"]) != ck["sha256"]:
            raise ValueError(f"checkpoint {name} at {ck['path']} no longer matches the manifest")
    argv = shlex.split(m.command)[1:]
    cleaned, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--out", "--config", "--cache"):
            skip = True
            continue
        if a == "--force" or a.startswith(("--out=", "--config=", "--cache=")):
            continue
        cleaned.append(a)
    fd, cfg_path = tempfile.mkstemp(suffix=".json", prefix="semadv-replay-")
    with os.fdopen(fd, "w") as fh:
        json.dump(m.config, fh)
    cleaned += ["--config", cfg_path, "--out", str(out)]
    if cache is not None and m.command.split()[1] not in ("gen-data", "train-denoiser", "train-classifier"):
        cleaned += ["--cache", str(cache)]
    if force:
        cleaned.append("--force")
    return cleaned, cfg_path


def run(argv=None, log=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    log = log or (lambda msg: print(msg, file=sys.stderr))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "replay":
            new_argv, cfg_path = replay_argv(args.manifest, args.out, args.force, args.cache)
            try:
                return run(new_argv, log)
            finally:
                os.unlink(cfg_path)
        config = resolve_config(args)
        out = prepare_out(args.out, args.force)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"semadv: invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"semadv: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args, config, out, argv, log)
    except Exception as e:  # noqa: BLE001 - any failure of the run maps to one exit code
        print(f"semadv: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
