"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, audit, codec, fixtures, forge, plotting, tensorio
from .diffcore import ContractError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("disguise")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(path, command: str, args, inputs: list, outputs: list, started: float,
                    seed=None) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "seed": seed,
        "tool_version": __version__,
        "wall_time_s": round(time.time() - started, 3),
    }
    _dump_json(path, manifest)


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    if path.suffix == ".dtns":
        return tensorio.read_dtns(path)
    if path.suffix == ".png":
        return tensorio.read_png(path)
    raise UsageError(f"unsupported image extension {path.suffix!r} (use .dtns or .png)")


def _read_dataset(path) -> tuple[list[str], list[np.ndarray], list[Path]]:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    files = sorted(list(path.glob("*.dtns")) + list(path.glob("*.png")))
    if not files:
        raise UsageError(f"dataset directory {path} contains no .dtns or .png images")
    return [f.stem for f in files], [_read_image(f) for f in files], files


def _load_weights(path) -> codec.AutoencoderWeights:
    if not Path(path).is_file():
        raise UsageError(f"weights file not found: {path}")
    return codec.load_weights(path)


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


# -------------------------------------------------------------------- commands


def cmd_fixtures(args) -> int:
    started = time.time()
    if args.verify:
        problems = fixtures.verify(args.verify)
        for p in problems:
            print(f"integrity error: {p}", file=sys.stderr)
        return EXIT_DATA if problems else EXIT_OK
    if not args.spec or not args.out:
        raise UsageError("fixtures: --spec and --out are required (or --verify DIR)")
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise UsageError(f"spec file not found: {spec_path}")
    try:
        spec = fixtures.FixtureSpec.from_dict(json.loads(spec_path.read_text()))
    except (json.JSONDecodeError, TypeError) as exc:
        raise DataError(f"invalid fixture spec: {exc}") from exc
    out = Path(args.out)
    index = fixtures.materialize(spec, out)
    outputs = [out / "index.json"] + [out / g / n for g, names in index["files"].items() for n in names]
    _write_manifest(out / "manifest.json", "fixtures", args, [spec_path], outputs, started,
                    spec.texture_seed)
    print(json.dumps(index["counts"], sort_keys=True))
    return EXIT_OK


def cmd_train_ae(args) -> int:
    started = time.time()
    if args.epochs < 1:
        raise UsageError("train-ae: --epochs must be >= 1")
    if args.lr <= 0:
        raise UsageError("train-ae: --lr must be positive")
    _, images, files = _read_dataset(args.corpus)
    cfg = codec.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                            seed=args.seed, corpus_path=str(args.corpus))
    result = codec.train_autoencoder(cfg, images)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    codec.save_weights(out, result.weights)
    loss_log = out.with_name(out.stem + ".losses.json")
    _dump_json(loss_log, {"epoch_loss": result.losses})
    curve = out.with_name(out.stem + ".losses.png")
    plotting.plot_losses(result.losses, curve)
    for i, loss in enumerate(result.losses, 1):
        print(f"epoch {i}\tloss {loss:.6f}")
    _write_manifest(_manifest_path(out), "train-ae", args, files, [out, loss_log, curve], started,
                    args.seed)
    return EXIT_OK


def _parse_init(text: str) -> tuple[str, float]:
    if text in ("base", "zeros"):
        return text, 0.1
    if text.startswith("gaussian"):
        _, _, sigma = text.partition(":")
        try:
            value = float(sigma) if sigma else 0.1
        except ValueError as exc:
            raise UsageError(f"bad gaussian sigma in --init {text!r}") from exc
        if value <= 0:
            raise UsageError("gaussian sigma must be positive")
        return "gaussian", value
    raise UsageError(f"--init must be base, zeros or gaussian:SIGMA, got {text!r}")


def cmd_forge(args) -> int:
    started = time.time()
    w = _load_weights(args.weights)
    x_c, x_b = _read_image(args.target), _read_image(args.base)
    init, sigma = _parse_init(args.init)
    variant = {"standard": "standard", "flip": "flip_robust", "evasion": "evasion"}[args.variant]
    try:
        cfg = forge.DisguiseConfig(alpha=args.alpha, eta=args.eta, gamma1=args.gamma1,
                                   gamma2=args.gamma2, max_epochs=args.max_epochs, variant=variant,
                                   init=init, init_sigma=sigma, optimizer=args.optimizer,
                                   adam_lr=args.adam_lr, log_every=args.log_every, seed=args.seed)
    except ContractError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = forge.generate_disguise(w, x_c, x_b, cfg)
    except forge.NumericalAbort as exc:
        _dump_json(out / "trace.json", {"error": str(exc), "trace": exc.trace})
        print(f"numerical abort: {exc}; trace written to {out / 'trace.json'}", file=sys.stderr)
        return EXIT_NUMERIC
    names = result.save(out)
    plotting.plot_trace(result.trace, out / "trace.png", cfg.gamma1, cfg.gamma2)
    outputs = [out / n for n in names.values()] + [out / "trace.png"]
    _write_manifest(out / "manifest.json", "forge", args, [args.weights, args.target, args.base],
                    outputs, started, args.seed)
    final = result.final
    print(f"converged={result.converged}\tepochs={result.epochs_run}\t"
          f"d1={final['d1']:.6f}\td2={final['d2']:.6f}")
    return EXIT_OK


def cmd_screen(args) -> int:
    started = time.time()
    w = _load_weights(args.weights)
    x_c = _read_image(args.target)
    ids, images, files = _read_dataset(args.dataset)
    if args.gamma2 < 0:
        raise UsageError("screen: --gamma2 must be non-negative")
    report = audit.feature_screen(w, x_c, images, args.gamma2, ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(out, {"kind": "screen", **report.to_dict()})
    fig = out.with_suffix(".png")
    plotting.plot_scores(report.distances, args.gamma2, fig, xlabel="latent distance to target")
    _write_manifest(_manifest_path(out), "screen", args, [args.weights, args.target, *files],
                    [out, fig], started)
    for e in report.entries:
        print(f"{e.id}\t{e.distance:.6f}\t{'suspect' if e.suspect else '-'}")
    return EXIT_OK


def cmd_exam(args) -> int:
    started = time.time()
    if (args.zeta is None) == (args.calibrate is None):
        raise UsageError("exam: give exactly one of --zeta or --calibrate")
    w = _load_weights(args.weights)
    ids, images, files = _read_dataset(args.dataset)
    inputs = [args.weights, *files]
    if args.calibrate is not None:
        _, disguises, dfiles = _read_dataset(args.calibrate)
        losses, _ = audit.reconstruction_losses(w, disguises)
        zeta = audit.calibrate_threshold(losses)
        inputs += dfiles
    else:
        if args.zeta < 0:
            raise UsageError("exam: --zeta must be non-negative")
        zeta = args.zeta
    report = audit.encoder_decoder_exam(w, images, zeta, ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(out, {"kind": "exam", **report.to_dict()})
    fig = out.with_suffix(".png")
    plotting.plot_scores(report.losses, zeta, fig)
    outputs = [out, fig]
    if args.dump_recon:
        dump = Path(args.dump_recon)
        dump.mkdir(parents=True, exist_ok=True)
        for name, recon in zip(ids, report.reconstructions):
            tensorio.write_dtns(dump / f"{name}.dtns", recon)
            tensorio.write_png(dump / f"{name}.png", recon)
            outputs += [dump / f"{name}.dtns", dump / f"{name}.png"]
    _write_manifest(_manifest_path(out), "exam", args, inputs, outputs, started)
    for e in report.entries:
        print(f"{e.id}\t{e.loss:.6f}\t{'disguise' if e.disguise else 'clean'}")
    return EXIT_OK


def _read_labels(path) -> dict[str, bool]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"labels file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"labels file is not JSON: {exc}") from exc
    labels = {}
    for key, value in raw.items():
        if value in ("disguise", 1, True):
            labels[key] = True
        elif value in ("clean", 0, False):
            labels[key] = False
        else:
            raise DataError(f"label for {key!r} must be 'disguise' or 'clean', got {value!r}")
    return labels


def cmd_eval(args) -> int:
    started = time.time()
    report_path = Path(args.report)
    if not report_path.is_file():
        raise UsageError(f"report not found: {report_path}")
    report = json.loads(report_path.read_text())
    labels = _read_labels(args.labels)
    entries = report.get("entries", [])
    missing = [e["id"] for e in entries if e["id"] not in labels]
    if missing:
        raise DataError(f"no label for report ids: {missing[:5]}")
    is_dis = np.array([labels[e["id"]] for e in entries], dtype=bool)
    if not is_dis.any() or is_dis.all():
        raise DataError("labels must include both disguise and clean samples")
    kind = report.get("kind")
    if kind == "exam":
        scores = np.array([e["loss"] for e in entries])
        metrics = audit.summarize(scores[is_dis], scores[~is_dis], report["zeta"])
        body = {"kind": "exam", "metrics": metrics.to_dict(), "table": metrics.table()}
        rows = metrics.table()
        pos, neg, auc = scores[is_dis], scores[~is_dis], metrics.auroc
    elif kind == "screen":
        # closer latents are more suspicious
        scores = -np.array([e["distance"] for e in entries])
        flagged = np.array([e["suspect"] for e in entries], dtype=bool)
        auc = audit.auroc(scores[is_dis], scores[~is_dis])
        fp, fn = int(np.sum(flagged & ~is_dis)), int(np.sum(~flagged & is_dis))
        metrics = {
            "gamma2": report["gamma2"], "auroc": auc, "false_positives": fp,
            "false_positive_rate": fp / int((~is_dis).sum()), "false_negatives": fn,
            "false_negative_rate": fn / int(is_dis.sum()),
            "n_disguise": int(is_dis.sum()), "n_clean": int((~is_dis).sum()),
        }
        rows = [("threshold gamma2", f"{report['gamma2']:.4f}"),
                ("FPR (clean flagged)", f"{fp}/{metrics['n_clean']}"),
                ("FNR (disguise missed)", f"{fn}/{metrics['n_disguise']}"),
                ("AUC", f"{auc:.4f}")]
        body = {"kind": "screen", "metrics": metrics, "table": rows}
        pos, neg = scores[is_dis], scores[~is_dis]
    else:
        raise DataError(f"unknown report kind {kind!r}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(out, body)
    tsv = out.with_suffix(".tsv")
    tsv.write_text("".join(f"{k}\t{v}\n" for k, v in rows))
    fig = out.with_suffix(".roc.png")
    plotting.plot_roc(pos, neg, fig, auc)
    _write_manifest(_manifest_path(out), "eval", args, [report_path, args.labels],
                    [out, tsv, fig], started)
    sys.stdout.write(tsv.read_text())
    return EXIT_OK


def cmd_convert(args) -> int:
    started = time.time()
    src, dst = Path(args.input), Path(args.out)
    if dst.suffix not in (".dtns", ".png"):
        raise UsageError(f"unsupported output extension {dst.suffix!r} (use .dtns or .png)")
    img = _read_image(src)
    if dst.suffix == ".dtns":
        tensorio.write_dtns(dst, img)
    else:
        tensorio.write_png(dst, img)
    _write_manifest(_manifest_path(dst), "convert", args, [src], [dst], started)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="disguise", description="Disguise generation and detection toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("fixtures", help="write a synthetic symbol-task corpus")
    s.add_argument("--spec")
    s.add_argument("--out")
    s.add_argument("--verify", metavar="DIR", help="check a materialized directory against its index")
    s.set_defaults(func=cmd_fixtures)

    s = sub.add_parser("train-ae", help="train the autoencoder")
    s.add_argument("--corpus", required=True)
    s.add_argument("--epochs", type=int, required=True)
    s.add_argument("--lr", type=float, default=codec.TrainConfig.lr)
    s.add_argument("--batch-size", type=int, default=codec.TrainConfig.batch_size)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_ae)

    s = sub.add_parser("forge", help="generate a disguise")
    s.add_argument("--weights", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--eta", type=float, default=forge.DisguiseConfig.eta)
    s.add_argument("--gamma1", type=float, required=True)
    s.add_argument("--gamma2", type=float, required=True)
    s.add_argument("--variant", choices=("standard", "flip", "evasion"), default="standard")
    s.add_argument("--init", default="base")
    s.add_argument("--optimizer", choices=forge.OPTIMIZERS, default="gd")
    s.add_argument("--adam-lr", type=float, default=forge.DisguiseConfig.adam_lr)
    s.add_argument("--max-epochs", type=int, default=forge.DisguiseConfig.max_epochs)
    s.add_argument("--log-every", type=int, default=forge.DisguiseConfig.log_every)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forge)

    s = sub.add_parser("screen", help="feature-similarity search against a target")
    s.add_argument("--weights", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--gamma2", type=float, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_screen)

    s = sub.add_parser("exam", help="encoder-decoder examination by reconstruction loss")
    s.add_argument("--weights", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--zeta", type=float)
    s.add_argument("--calibrate", metavar="DISGUISE_DIR")
    s.add_argument("--out", required=True)
    s.add_argument("--dump-recon", metavar="DIR")
    s.set_defaults(func=cmd_exam)

    s = sub.add_parser("eval", help="detection metrics for a labelled report")
    s.add_argument("--report", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("convert", help="convert between PNG and DTNS")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_convert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not getattr(args, "func", None):
            raise UsageError("a command is required; see --help")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (tensorio.FormatError, DataError, ShapeError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
