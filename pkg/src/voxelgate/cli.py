"""Command-line surface: phantom, preprocess, split, train, eval, predict,
render, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
fault. VOXELGATE_THREADS caps kernel workers; VOXELGATE_BACKEND selects
the compiled or NumPy convolution backend.
"""

import argparse
import sys
import traceback
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import (
    metrics,
    model,
    nifti,
    phantom,
    pipeline,
    render,
    training,
    vseg,
)
from .errors import (
    DataError,
    NumericalError,
    UsageError,
    VoxelgateError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flag(p):
    p.add_argument("--config", help="key = value config file; flags override it")


def _settings(args, defaults: dict) -> dict:
    file_values = cfgmod.load_config(args.config) if args.config else {}
    resolved = cfgmod.resolve(args, file_values, defaults)
    cfgmod.print_resolved(args.command, resolved)
    return resolved


# -- phantom -------------------------------------------------------------------

_PHANTOM_DEFAULTS = {
    "n": 8, "extent": 32, "seed": 0, "noise_sigma": 12.0,
    "brain_radius_frac": 0.5, "tumor_radius_lo": 0.28, "tumor_radius_hi": 0.38,
    "tumor_center_lo": 0.40, "tumor_center_hi": 0.60,
    "enhancing_frac": 0.75, "necrosis_frac": 0.45, "min_tumor_fraction": 0.01,
}


def cmd_phantom(args) -> int:
    s = _settings(args, _PHANTOM_DEFAULTS)
    spec = phantom.PhantomSpec(
        extent=s["extent"],
        brain_radius_frac=s["brain_radius_frac"],
        tumor_radius_frac=(s["tumor_radius_lo"], s["tumor_radius_hi"]),
        tumor_center_frac=(s["tumor_center_lo"], s["tumor_center_hi"]),
        enhancing_frac=s["enhancing_frac"],
        necrosis_frac=s["necrosis_frac"],
        noise_sigma=s["noise_sigma"],
        min_tumor_fraction=s["min_tumor_fraction"],
        seed=s["seed"],
    )
    cases = phantom.generate_phantoms(spec, s["n"], args.out)
    print(f"wrote {len(cases)} cases under {args.out}")
    for case in cases:
        files = [case.flair_path, case.t1ce_path, case.t2_path, case.seg_path]
        print(f"  {case.case_id}: " + ", ".join(p.name for p in files))
    return 0


# -- preprocess -----------------------------------------------------------------

def _source_checksums(case: pipeline.MultiModalCase) -> str:
    paths = [*case.modality_paths(), *([case.seg_path] if case.seg_path else [])]
    return ";".join(f"{p.name}:{pipeline._sha256(Path(p))}" for p in paths)


def cmd_preprocess(args) -> int:
    s = _settings(args, {"keep_fraction": pipeline.MASK_KEEP_FRACTION})
    in_dir, out_dir = Path(args.input), Path(args.output)
    cases = pipeline.find_cases(in_dir)
    if not cases:
        raise DataError(f"no cases found under {in_dir}")
    retained, filtered, hits, errors = [], [], [], []
    for case in cases:
        meta_path = out_dir / case.case_id / "meta.txt"
        if meta_path.exists():
            meta = vseg.load_sidecar(meta_path)
            if meta.get("source_checksums") == _source_checksums(case):
                hits.append(case.case_id)
                retained.append(case.case_id)
                continue
        try:
            result = pipeline.preprocess_case(case, out_dir,
                                              keep_fraction=s["keep_fraction"])
        except VoxelgateError as exc:
            errors.append((case.case_id, exc))
            continue
        if result is None:
            filtered.append(case.case_id)
        else:
            retained.append(case.case_id)

    print(f"retained {len(retained)} / {len(cases)} cases "
          f"({len(hits)} cache hits), filtered {len(filtered)}, errors {len(errors)}")
    for cid in filtered:
        print(f"  filtered (mask < {s['keep_fraction']:g}): {cid}")
    for cid, exc in errors:
        print(f"  error: {cid}: {exc}")
    if errors:
        raise DataError(f"{len(errors)} case(s) failed preprocessing")
    return 0


# -- split ------------------------------------------------------------------------

def cmd_split(args) -> int:
    s = _settings(args, {"seed": 0})
    if args.ids_file:
        ids = [l.strip() for l in Path(args.ids_file).read_text().splitlines() if l.strip()]
    else:
        root = Path(args.cases)
        ids = sorted(p.name for p in root.iterdir() if (p / "meta.txt").exists())
    if not ids:
        raise DataError("no case ids to split")
    split = pipeline.split_dataset(ids, s["seed"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", split.train), ("validation", split.validation),
                       ("test", split.test)):
        (out_dir / f"{name}.txt").write_text("\n".join(part) + "\n")
    print(f"split {len(ids)} cases -> train {len(split.train)} / "
          f"validation {len(split.validation)} / test {len(split.test)} (seed {s['seed']})")
    return 0


# -- train -------------------------------------------------------------------------

def _load_ids(path) -> list:
    return [l.strip() for l in Path(path).read_text().splitlines() if l.strip()]


def _load_cases(data_dir, ids) -> list:
    data_dir = Path(data_dir)
    out = []
    for cid in ids:
        case_dir = data_dir / cid
        if not (case_dir / "meta.txt").exists():
            raise DataError(f"case {cid} not found under {data_dir}")
        out.append(pipeline.load_stacked_case(case_dir))
    return out


_TRAIN_DEFAULTS = {
    "depth": 2, "base_filters": 8, "activation": "relu", "min_extent": 0,
    "learning_rate": 1e-4, "batch_size": 2, "epochs": 10, "seed": 0,
    "tversky_alpha": 0.7, "tversky_beta": 0.3,
}


def cmd_train(args) -> int:
    s = _settings(args, _TRAIN_DEFAULTS)
    train_cases = _load_cases(args.data, _load_ids(args.train_ids))
    val_cases = _load_cases(args.data, _load_ids(args.val_ids))
    min_extent = s["min_extent"] or min(
        min(c.image.shape[1:]) for c in train_cases + val_cases)

    train_cfg = training.TrainConfig(
        learning_rate=s["learning_rate"], batch_size=s["batch_size"],
        epochs=s["epochs"], seed=s["seed"], activation=s["activation"],
        tversky=metrics.TverskyWeights(s["tversky_alpha"], s["tversky_beta"]),
    ).validate()

    out_dir = Path(args.out)
    resume_from = None
    if args.resume:
        resume_from = out_dir / "checkpoints" / "last"
        if not resume_from.exists():
            raise DataError(f"nothing to resume at {resume_from}")
        _, params, *_ = training.load_checkpoint(resume_from)
    else:
        unet_cfg = model.UNetConfig(
            depth=s["depth"], base_filters=s["base_filters"],
            activation=s["activation"], min_extent=min_extent).validate()
        params = model.build_model(unet_cfg, seed=s["seed"])

    rows = training.train(train_cfg, params, train_cases, val_cases,
                          out_dir=out_dir, resume_from=resume_from)
    if rows:
        last = rows[-1]
        print(f"finished at epoch {last.epoch}: train_loss {last.train_loss:.4f}, "
              f"val_dice {last.val_dice:.4f}, val_tversky_loss {last.val_tversky_loss:.4f}")
    print(f"log: {out_dir / 'log.csv'}; best checkpoint: "
          f"{out_dir / 'checkpoints' / 'best'}")
    return 0


# -- eval --------------------------------------------------------------------------

def _load_model(path) -> model.ModelParams:
    path = Path(path)
    if (path / "model" / "manifest.txt").exists():
        return model.load_params(path / "model")
    return model.load_params(path)


def cmd_eval(args) -> int:
    _settings(args, {"tversky_alpha": 0.7, "tversky_beta": 0.3})
    params = _load_model(args.model)
    cases = _load_cases(args.data, _load_ids(args.ids))
    report = metrics.evaluate_split(params, cases)
    label = f"trial ({params.config.activation})"
    text = metrics.report_text(report, label)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "report.csv").write_text(metrics.report_csv(report))
        print(f"wrote {out / 'report.txt'} and {out / 'report.csv'}")
    return 0


# -- predict ------------------------------------------------------------------------

def cmd_predict(args) -> int:
    _settings(args, {})
    params = _load_model(args.model)
    case = pipeline.load_stacked_case(args.case)
    labels, _ = training.predict_case(
        params, case, out_path=args.out,
        probs_path=args.probs if args.probs else None)
    values, counts = np.unique(labels, return_counts=True)
    hist = ", ".join(f"{v}: {c}" for v, c in zip(values.tolist(), counts.tolist()))
    print(f"predicted {case.case_id} -> {args.out} (voxels by class: {hist})")
    return 0


# -- render --------------------------------------------------------------------------

def _load_prediction(path, extents) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".vseg":
        arr = vseg.load_array(path)
    else:
        arr = np.rint(nifti.read_volume(path).data).astype(np.uint8)
    if arr.shape != tuple(extents):
        raise DataError(f"prediction extents {arr.shape} != case extents {tuple(extents)}")
    return arr


def cmd_render(args) -> int:
    _settings(args, {})
    case = pipeline.load_stacked_case(args.case)
    pred = _load_prediction(args.pred, case.image.shape[1:]) if args.pred else None
    n_slices = case.image.shape[3]
    indices = range(n_slices) if args.all else [args.slice]
    out_dir = Path(args.out)
    for idx in indices:
        rgb = render.render_case_slice(case.image, idx, truth=case.labels, pred=pred)
        render.write_ppm(out_dir / f"{case.case_id}_slice{idx:04d}.ppm", rgb)
    print(f"wrote {len(list(indices))} slice image(s) to {out_dir}")
    return 0


# -- gradcheck -------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    _settings(args, {"seed": 0})
    from .verification import run_gradient_checks
    results = run_gradient_checks(seed=getattr(args, "seed", 0) or 0,
                                  full=not args.quick)
    worst_name, worst = "", 0.0
    for name, err, tol in results:
        status = "ok" if err < tol else "FAIL"
        print(f"  {name:<28} max rel err {err:.3e}  (tol {tol:.0e})  {status}")
        if err >= tol and err > worst:
            worst_name, worst = name, err
    if worst_name:
        raise NumericalError(f"gradient check failed: {worst_name} at {worst:.3e}")
    print("all gradient checks passed")
    return 0


# -- parser ------------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="voxelgate",
                     description="3D attention U-Net segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic phantom cases")
    _add_config_flag(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--extent", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--brain-radius-frac", dest="brain_radius_frac", type=float)
    p.add_argument("--tumor-radius-lo", dest="tumor_radius_lo", type=float)
    p.add_argument("--tumor-radius-hi", dest="tumor_radius_hi", type=float)
    p.add_argument("--tumor-center-lo", dest="tumor_center_lo", type=float)
    p.add_argument("--tumor-center-hi", dest="tumor_center_hi", type=float)
    p.add_argument("--enhancing-frac", dest="enhancing_frac", type=float)
    p.add_argument("--necrosis-frac", dest="necrosis_frac", type=float)
    p.add_argument("--min-tumor-fraction", dest="min_tumor_fraction", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="scale, stack, crop, and filter cases")
    _add_config_flag(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--keep-fraction", dest="keep_fraction", type=float)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="deterministic 6:2:2 dataset split")
    _add_config_flag(p)
    p.add_argument("--cases", help="preprocessed cases directory")
    p.add_argument("--ids-file", dest="ids_file", help="text file, one id per line")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the attention U-Net")
    _add_config_flag(p)
    p.add_argument("--data", required=True, help="preprocessed cases directory")
    p.add_argument("--train-ids", dest="train_ids", required=True)
    p.add_argument("--val-ids", dest="val_ids", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--depth", type=int)
    p.add_argument("--base-filters", dest="base_filters", type=int)
    p.add_argument("--activation")
    p.add_argument("--min-extent", dest="min_extent", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tversky-alpha", dest="tversky_alpha", type=float)
    p.add_argument("--tversky-beta", dest="tversky_beta", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model over labeled cases")
    _add_config_flag(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    p.add_argument("--tversky-alpha", dest="tversky_alpha", type=float)
    p.add_argument("--tversky-beta", dest="tversky_beta", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write a predicted label volume")
    _add_config_flag(p)
    p.add_argument("--model", required=True)
    p.add_argument("--case", required=True, help="preprocessed case directory")
    p.add_argument("--out", required=True, help="output .nii or .nii.gz path")
    p.add_argument("--probs", help="optional VSEG1 path for class probabilities")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("render", help="overlay slices as PPM images")
    _add_config_flag(p)
    p.add_argument("--case", required=True, help="preprocessed case directory")
    p.add_argument("--pred", help="predicted labels (.nii/.nii.gz/.vseg)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--slice", type=int)
    group.add_argument("--all", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="run the tensor-core verification suite")
    _add_config_flag(p)
    p.add_argument("--quick", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return 3
    except VoxelgateError as exc:
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
