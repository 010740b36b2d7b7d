"""Command-line front end: ``simulate``, ``align``, ``fit`` and ``cv``.

Every command writes into ``--out`` and leaves a ``manifest.json`` there with
the arguments needed to repeat the run. Failures exit with code 1 and an
``error.json`` describing them; ``fit`` exits with 2 when a component did
not converge.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    EventTable,
    IngestError,
    PairedStudy,
    Schema,
    align_to_event,
    export_long_csv,
    ingest_long_csv,
    standardize,
)
from .lme import TimeBasis
from .mm import MmConfig, fit
from .selection import cv_select, default_grid
from .simulate import DEFAULT_THETA, simulate_study


class CommandError(RuntimeError):
    """Invalid command input."""


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(args, extra=None) -> dict:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    out = {"command": args.command, "version": __version__, "config": config}
    inputs = {}
    for key in ("x", "y", "events", "from_cv"):
        path = config.get(key)
        if path:
            inputs[key] = {"path": str(path), "sha256": _sha256(path)}
    if inputs:
        out["inputs"] = inputs
    out.update(extra or {})
    return out


def _threads(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_study(args) -> PairedStudy:
    schema = Schema(missing=args.missing)
    return PairedStudy(ingest_long_csv(args.x, schema), ingest_long_csv(args.y, schema))


def _config(args, p_x, q_y) -> MmConfig:
    return MmConfig(
        n_components=getattr(args, "k", 1),
        p_x=p_x,
        q_y=q_y,
        basis_x=TimeBasis.parse(args.basis_x),
        basis_y=TimeBasis.parse(args.basis_y),
        tol=args.tol,
        max_iter=args.max_iter,
        seed=args.seed,
        n_starts=args.n_starts,
        solver=args.solver,
        rho_grid=args.rho_grid,
    )


# --------------------------------------------------------------------------


def _supports(size: int, dim: int) -> tuple[int, int]:
    # two disjoint supports; a one-feature view carries only the first component
    s = min(size, dim // 2)
    return (s, s) if s > 0 else (1, 0)


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    study, truth = simulate_study(
        n=args.n, p=args.p, q=args.q, n_times=args.n_times, theta=tuple(args.theta),
        noise_sd=args.noise_sd, sine=args.sine,
        support_x=_supports(args.support_x, args.p),
        support_y=_supports(args.support_y, args.q),
        phi_x=args.phi, phi_y=args.phi, drop_x=args.drop_x, drop_y=args.drop_y,
        seed=args.seed,
    )
    export_long_csv(study.x, out / "x.csv")
    export_long_csv(study.y, out / "y.csv")
    _write_json(out / "truth.json", truth.to_json())
    _write_json(out / "manifest.json", _manifest(args, {
        "rows": {"x": study.x.n_rows, "y": study.y.n_rows},
        "removed": {"x": int(truth.masks_x.sum()), "y": int(truth.masks_y.sum())},
    }))
    return 0


def cmd_align(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    events = EventTable.from_csv(args.events)
    schema = Schema(missing=args.missing)
    warn_list = []
    written = {}
    for key in ("x", "y"):
        path = getattr(args, key)
        if not path:
            continue
        view = ingest_long_csv(path, schema)
        unknown = sorted(set(events) - set(view.subjects))
        warn_list += [f"{key}: event for unknown subject {s!r}" for s in unknown]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            aligned = align_to_event(view, events, args.bin_width, args.eventless_offset)
        warn_list += [f"{key}: {w.message}" for w in caught]
        export_long_csv(aligned, out / f"{key}_aligned.csv")
        written[key] = f"{key}_aligned.csv"
    for w in warn_list:
        print(f"warning: {w}", file=sys.stderr)
    _write_json(out / "manifest.json", _manifest(args, {"outputs": written, "warnings": warn_list}))
    return 0


def _read_cv_selection(path) -> tuple[int, int]:
    with open(path, encoding="utf-8") as fh:
        sel = json.load(fh)["selected"]
    return int(sel["p_x"]), int(sel["q_y"])


def _fmt(v: float) -> str:
    return repr(float(v) + 0.0)


def cmd_fit(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    study = _load_study(args)
    p_x, q_y = args.px, args.qy
    if args.from_cv:
        p_x, q_y = _read_cv_selection(args.from_cv)
    dropped = {}
    if not args.no_standardize:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            xs, sx = standardize(study.x)
            ys, sy = standardize(study.y)
        dropped = {"x": [f for f in study.x.feature_names if f not in sx.feature_names],
                   "y": [f for f in study.y.feature_names if f not in sy.feature_names]}
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        study = PairedStudy(xs, ys)
    cfg = _config(args, p_x, q_y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        results = fit(study, cfg)

    with (out / "weights.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "view", "feature", "weight"])
        for r in results:
            for view, names, wts in (("x", study.x.feature_names, r.w_x),
                                     ("y", study.y.feature_names, r.w_y)):
                for name, val in zip(names, wts):
                    w.writerow([r.index, view, name, _fmt(val)])

    with (out / "latent_paths.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "view", "subject", "time", "observed_latent",
                    "predicted_latent", "cross_predicted_latent"])
        for r in results:
            for view, v, obs, own, cross in (
                ("x", study.x, r.latent_x, r.fitted_x(study), r.predicted_y_on_tx),
                ("y", study.y, r.latent_y, r.fitted_y(study), r.predicted_x_on_ty),
            ):
                for row in zip(v.subject_ids, v.times, obs, own, cross):
                    w.writerow([r.index, view, row[0], *(_fmt(a) for a in row[1:])])

    with (out / "mean_curves.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "view", "grid_t", "value"])
        for r in results:
            for view, v in (("x", study.x), ("y", study.y)):
                grid = np.unique(v.times)
                for t, val in zip(grid, r.mean_curve(view, grid)):
                    w.writerow([r.index, view, _fmt(t), _fmt(val)])

    components = [
        {"component": r.index, "rho": r.rho, "iterations": r.iterations,
         "converged": r.converged, "null": r.null,
         "var_random_x": None if r.fit_x is None else r.fit_x.var_random,
         "var_random_y": None if r.fit_y is None else r.fit_y.var_random}
        for r in results
    ]
    extra = {"mm_config": cfg.to_dict(), "components": components, "dropped_features": dropped}
    if args.from_cv:
        extra["selected_from_cv"] = {"p_x": p_x, "q_y": q_y}
    _write_json(out / "manifest.json", _manifest(args, extra))
    ok = all(r.converged or r.null for r in results)
    return 0 if ok else 2


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_cv(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    study = _load_study(args)
    if args.grid_px or args.grid_qy:
        if not (args.grid_px and args.grid_qy):
            raise CommandError("--grid-px and --grid-qy must be given together")
        grid = [(a, b) for a in _int_list(args.grid_px) for b in _int_list(args.grid_qy)]
    else:
        grid = default_grid(study.x.n_features, study.y.n_features)
    cfg = _config(args, None, None)
    report = cv_select(study, grid, args.folds, cfg, args.seed, n_jobs=args.threads or 1)
    with (out / "cv_folds.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["p_x", "q_y", "fold", "rho"], lineterminator="\n")
        w.writeheader()
        for row in report.rows():
            w.writerow({**row, "rho": _fmt(row["rho"])})
    summary = report.summary()
    summary["folds"] = report.folds
    _write_json(out / "cv_summary.json", summary)
    _write_json(out / "manifest.json", _manifest(args, {"mm_config": cfg.to_dict(),
                                                       "selected": summary["selected"]}))
    return 0


# --------------------------------------------------------------------------


def _add_fit_options(sp, with_sparsity=True):
    sp.add_argument("--x", required=True, help="long CSV of the first view")
    sp.add_argument("--y", required=True, help="long CSV of the second view")
    sp.add_argument("--basis-x", default="linear", help="linear | poly:D | changepoint:D:S")
    sp.add_argument("--basis-y", default="linear")
    if with_sparsity:
        sp.add_argument("--px", type=int, default=None, help="nonzero x weights per component")
        sp.add_argument("--qy", type=int, default=None, help="nonzero y weights per component")
        sp.add_argument("--k", type=int, default=1, help="number of components")
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--max-iter", type=int, default=200)
    sp.add_argument("--n-starts", type=int, default=1)
    sp.add_argument("--solver", choices=["auto", "lstsq", "crossprod"], default="auto")
    sp.add_argument("--rho-grid", choices=["x", "symmetric"], default="x")
    sp.add_argument("--missing", choices=["reject", "drop"], default="reject")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tosccamm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="write a simulated paired study")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--p", type=int, default=10000)
    sp.add_argument("--q", type=int, default=200)
    sp.add_argument("--n-times", type=int, default=10)
    sp.add_argument("--theta", type=float, nargs=3, default=list(DEFAULT_THETA))
    sp.add_argument("--noise-sd", type=float, default=0.25)
    sp.add_argument("--sine", choices=["power", "argument"], default="power")
    sp.add_argument("--support-x", type=int, default=10)
    sp.add_argument("--support-y", type=int, default=20)
    sp.add_argument("--phi", type=float, default=0.5, help="AR(1) time correlation of the noise")
    sp.add_argument("--drop-x", type=float, default=0.2)
    sp.add_argument("--drop-y", type=float, default=0.3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("align", help="center times on each subject's first event")
    sp.add_argument("--x", required=True)
    sp.add_argument("--y", default=None)
    sp.add_argument("--events", required=True, help="CSV with columns id,event_time")
    sp.add_argument("--bin-width", type=float, default=1.0)
    sp.add_argument("--eventless-offset", type=int, default=0,
                    help="bin of the last visit of subjects without an event (<= 0)")
    sp.add_argument("--missing", choices=["reject", "drop"], default="reject")
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("fit", help="fit TOSCCA-MM components")
    _add_fit_options(sp)
    sp.add_argument("--from-cv", default=None, help="cv_summary.json whose selected cell to use")
    sp.add_argument("--no-standardize", action="store_true")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("cv", help="cross-validate the sparsity grid")
    _add_fit_options(sp, with_sparsity=False)
    sp.add_argument("--grid-px", default=None, help="comma-separated p_x values")
    sp.add_argument("--grid-qy", default=None, help="comma-separated q_y values")
    sp.add_argument("--folds", type=int, default=5)
    sp.set_defaults(func=cmd_cv)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _threads(args.threads):
            return args.func(args)
    except (CommandError, IngestError, ValueError, OSError, RuntimeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        try:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "error.json", err)
        except OSError:
            pass
        return 1


if __name__ == "__main__":
    sys.exit(main())
