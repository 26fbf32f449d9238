"""Command-line entry point.

Every subcommand accepts ``--config FILE``: a JSON object whose keys are
option names (``learning_rate``, ``steps``, ...). Values from the file become
defaults; flags given on the command line override them.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from voxface import audio, fitting, harness, metrics, morphable, nnkit
from voxface.errors import DataError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("voxface")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _ratio_spec(path: Optional[str]) -> metrics.RatioSpec:
    return metrics.RatioSpec.load(path) if path else metrics.RatioSpec()


def _icp_cfg(args) -> metrics.IcpConfig:
    return metrics.IcpConfig(max_iterations=args.icp_iterations, convergence_tol=args.icp_tol)


def cmd_reconstruct(args) -> int:
    basis = morphable.load_basis(args.basis)
    if args.coeffs:
        coeffs = morphable.load_coefficients(args.coeffs)
    else:
        coeffs = np.zeros(basis.coeff_count)
    mesh = morphable.reconstruct(basis, coeffs)
    if args.pose:
        mesh = morphable.apply_pose(mesh, morphable.load_pose(args.pose))
    morphable.save_obj(args.out, mesh)
    _emit({"out": args.out, "vertices": mesh.vertex_count, "faces": len(mesh.faces)})
    return EXIT_OK


def cmd_pose(args) -> int:
    mesh = morphable.apply_pose(morphable.load_obj(args.mesh), morphable.load_pose(args.pose))
    morphable.save_obj(args.out, mesh)
    _emit({"out": args.out, "vertices": mesh.vertex_count})
    return EXIT_OK


def cmd_fit(args) -> int:
    basis = morphable.load_basis(args.basis)
    lms = fitting.load_landmarks(args.landmarks)
    coeffs, rms = fitting.fit_report(lms, basis, fitting.FitConfig(ridge_lambda=args.ridge_lambda))
    morphable.save_coefficients(args.out, coeffs)
    _emit({"out": args.out, "residual_rms": rms, "coeff_count": len(coeffs)})
    return EXIT_OK


def cmd_eval(args) -> int:
    basis = morphable.load_basis(args.basis)
    preds = harness.read_coeff_table(args.pred)
    refs = dict(harness.read_coeff_table(args.ref))
    regions = metrics.RegionMap.load(args.regions) if args.regions else None
    result = harness.evaluate(
        preds, refs, basis, _ratio_spec(args.ratios), regions, _icp_cfg(args), args.workers
    )
    doc = result.aggregate.to_dict()
    if args.out:
        Path(args.out).write_text(result.aggregate.to_json() + "\n")
    if args.table_out:
        with open(args.table_out, "w") as fh:
            for table in metrics.TABLES:
                fh.write(metrics.format_table({args.label: result.aggregate}, table))
    _emit(doc)
    return EXIT_OK


def _load_split(manifest_path: str):
    m = harness.DatasetManifest.load(manifest_path)
    train, evals = harness.split_manifest(m)
    return m, train, evals


def _pairs(m: harness.DatasetManifest, entries):
    """Embedding matrix, coefficient matrix and identity indices for ``entries``."""
    xs, ys, ids = [], [], []
    for i, e in enumerate(entries):
        coeffs = harness.load_vector(m.resolve(e.coefficients)) if e.coefficients else None
        for utt in e.utterances:
            xs.append(harness.load_vector(m.resolve(utt)))
            ys.append(coeffs)
            ids.append(i)
    if not xs:
        raise DataError("no utterances in the selected split")
    return np.array(xs), ys, np.array(ids)


def cmd_oracle(args) -> int:
    m, train, evals = _load_split(args.manifest)
    coeffs = [harness.load_vector(m.resolve(e.coefficients)) for e in train]
    groups = [e.gender for e in train]
    kind = "per_group_mean" if args.kind == "group" else "global_mean"
    oracle = harness.fit_oracle(np.array(coeffs), kind, groups if kind == "per_group_mean" else None)
    rows = []
    for e in evals:
        for _ in e.utterances or ("",):
            rows.append((e.name, oracle.predict(e.gender or None)))
    harness.write_coeff_table(args.out, rows)
    _emit({"out": args.out, "kind": kind, "predictions": len(rows), "train_identities": len(train)})
    return EXIT_OK


def _train_cfg(args) -> nnkit.TrainConfig:
    hidden = tuple(int(h) for h in args.hidden.split(",") if h) if args.hidden else ()
    return nnkit.TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        steps=args.steps,
        seed=args.seed,
        tri_weight=args.tri_weight,
        div_weight=getattr(args, "div_weight", 1.0),
        hidden=hidden,
        activation=args.activation,
    )


def cmd_train(args) -> int:
    m, train, evals = _load_split(args.manifest)
    x, ys, ids = _pairs(m, train)
    if any(y is None for y in ys):
        raise DataError("every training identity needs a coefficient file")
    data = nnkit.SyntheticDataset(x, np.array(ys), ids, tuple(e.name for e in train))
    result = nnkit.train_supervised(data, _train_cfg(args))
    nnkit.save_checkpoint(args.out_model, result.model)
    if args.log:
        nnkit.write_trace(args.log, result.trace)
    out = {"model": args.out_model, "steps": len(result.trace), "final_loss": result.trace[-1]["total"]}
    if args.predictions_out:
        ex, _, eids = _pairs(m, evals)
        pred = nnkit.forward(result.model, ex)
        harness.write_coeff_table(args.predictions_out, [(evals[i].name, p) for i, p in zip(eids, pred)])
        out["predictions"] = args.predictions_out
    _emit(out)
    return EXIT_OK


def cmd_distill(args) -> int:
    m, train, evals = _load_split(args.manifest)
    x, _, _ = _pairs(m, train)
    expert = nnkit.linear_expert(nnkit.load_checkpoint(args.expert))
    result = nnkit.train_distilled(expert, x, _train_cfg(args))
    nnkit.save_checkpoint(args.out_model, result.model)
    if args.log:
        nnkit.write_trace(args.log, result.trace)
    last = result.trace[-1]
    _emit({"model": args.out_model, "steps": len(result.trace), **{k: last[k] for k in last if k != "step"}})
    return EXIT_OK


def cmd_melspec(args) -> int:
    w = audio.load_wav(args.wav)
    mel = audio.melspectrogram(w, window=args.window, hop=args.hop, n_fft=args.n_fft)
    if args.normalize:
        mel = audio.normalize_per_bin(mel)
    audio.save_matrix(args.out, mel)
    _emit({"out": args.out, "frames": mel.n_frames, "normalized": mel.normalized})
    return EXIT_OK


def cmd_sigtest(args) -> int:
    res = harness.significance_test(harness.PreferenceTally(args.n, args.k, args.gamma), args.p0)
    _emit({"reject": res.reject, "p_value": res.p_value, "threshold": res.threshold,
           "n": args.n, "k": args.k, "gamma": args.gamma})
    return EXIT_OK


def cmd_synth_data(args) -> int:
    out = Path(args.out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    (out / "coeffs").mkdir(exist_ok=True)
    basis = morphable.synthetic_basis(args.coeff_count, seed=args.seed)
    morphable.save_basis(out / "basis.txt", basis)
    metrics.synthetic_regions(basis).save(out / "regions.txt")
    metrics.RatioSpec().save(out / "ratios.txt")
    data = nnkit.make_synthetic_dataset(
        args.identities, args.per_identity, args.coeff_count, noise=args.noise, seed=args.seed
    )
    rng = np.random.default_rng(args.seed + 1)
    genders = rng.choice(["male", "female"], size=len(data.names))
    entries = []
    for i, name in enumerate(data.names):
        rows = np.flatnonzero(data.ids == i)
        utts = []
        for j, r in enumerate(rows):
            rel = f"feats/{name}_{j}.txt"
            np.savetxt(out / rel, data.embeddings[r], fmt="%.17g")
            utts.append(rel)
        # one reference per identity: the coefficients of its first utterance
        rel = f"coeffs/{name}.txt"
        morphable.save_coefficients(out / rel, data.coeffs[rows[0]])
        entries.append(harness.ManifestEntry(name, str(genders[i]), tuple(utts), rel))
    harness.DatasetManifest(tuple(entries)).save(out / "manifest.json")
    harness.write_coeff_table(
        out / "references.csv",
        [(name, data.coeffs[np.flatnonzero(data.ids == i)[0]]) for i, name in enumerate(data.names)],
    )
    expert = nnkit.MlpModel.init((nnkit.EMBEDDING_DIM, 16, args.coeff_count), args.seed + 2, "identity")
    nnkit.save_checkpoint(out / "expert.txt", expert)
    _, evals = harness.split_names(data.names)
    _emit({"out_dir": str(out), "identities": len(entries), "eval_identities": len(evals)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxface", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of option defaults")
        sp.set_defaults(func=fn)
        return sp

    def add_icp(sp):
        sp.add_argument("--icp-iterations", dest="icp_iterations", type=int, default=50)
        sp.add_argument("--icp-tol", dest="icp_tol", type=float, default=1e-7)

    def add_train(sp, lr=2e-4):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--out-model", dest="out_model", required=True)
        sp.add_argument("--log")
        sp.add_argument("--learning-rate", dest="learning_rate", type=float, default=lr)
        sp.add_argument("--batch-size", dest="batch_size", type=int, default=64)
        sp.add_argument("--steps", type=int, default=2000)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--tri-weight", dest="tri_weight", type=float, default=1.0)
        sp.add_argument("--hidden", default="128,128", help="comma-separated hidden widths")
        sp.add_argument("--activation", choices=nnkit.ACTIVATIONS, default="relu")

    sp = add("reconstruct", cmd_reconstruct, "mesh from basis and coefficients")
    sp.add_argument("--basis", required=True)
    sp.add_argument("--coeffs", help="one coefficient per line (default: all zero)")
    sp.add_argument("--pose", help="pose file: 3 rotation rows then a translation row")
    sp.add_argument("--out", required=True)

    sp = add("pose", cmd_pose, "apply a rigid pose to an OBJ mesh")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--pose", required=True)
    sp.add_argument("--out", required=True)

    sp = add("fit", cmd_fit, "fit coefficients to 68 landmarks")
    sp.add_argument("--basis", required=True)
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--ridge-lambda", dest="ridge_lambda", type=float, default=None)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score predictions against references")
    sp.add_argument("--basis", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--regions")
    sp.add_argument("--ratios")
    sp.add_argument("--out", help="JSON report path")
    sp.add_argument("--table-out", dest="table_out", help="CSV tables path")
    sp.add_argument("--label", default="model")
    sp.add_argument("--workers", type=int, default=1)
    add_icp(sp)

    sp = add("oracle", cmd_oracle, "mean-shape oracle predictions for the eval split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--kind", choices=("global", "group"), default="global")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "supervised decoder training")
    add_train(sp)
    sp.add_argument("--predictions-out", dest="predictions_out")

    sp = add("distill", cmd_distill, "distill a student from a frozen expert checkpoint")
    add_train(sp)
    sp.add_argument("--expert", required=True)
    sp.add_argument("--div-weight", dest="div_weight", type=float, default=1.0)

    sp = add("melspec", cmd_melspec, "log-mel spectrogram of a WAV file")
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--window", type=float, default=0.025)
    sp.add_argument("--hop", type=float, default=0.010)
    sp.add_argument("--n-fft", dest="n_fft", type=int, default=None)
    sp.add_argument("--normalize", action="store_true")

    sp = add("sigtest", cmd_sigtest, "one-sided exact binomial preference test")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--gamma", type=float, default=0.001)
    sp.add_argument("--p0", type=float, default=0.5)

    sp = add("synth-data", cmd_synth_data, "write a synthetic basis, manifest and features")
    sp.add_argument("--out-dir", dest="out_dir", required=True)
    sp.add_argument("--identities", type=int, default=40)
    sp.add_argument("--per-identity", dest="per_identity", type=int, default=3)
    sp.add_argument("--coeff-count", dest="coeff_count", type=int, default=10)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _config_path(argv: list[str]) -> Optional[str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install config-file values as defaults of the chosen subcommand."""
    path = _config_path(argv)
    if path is None:
        return
    choices = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in choices), None)
    if command is None:
        return
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError("config file must hold a JSON object")
    sub = choices[command]
    known = {a.dest for a in sub._actions}
    unknown = set(doc) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for a in sub._actions:
        if a.dest in doc:
            a.required = False
    sub.set_defaults(**doc)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "voxface: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"voxface: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"voxface: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
