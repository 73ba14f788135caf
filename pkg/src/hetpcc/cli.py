"""Command-line entry point: ``hetpcc <subcommand> ...``.

Exit codes:
    0  success
    2  usage error (bad or conflicting flags)
    3  I/O error (missing file, unreadable PLY)
    4  corrupt container or checkpoint
    5  decode mode conflicts with the container (full decode of a skip container)
    6  model does not match the operating point
    7  invalid data for the requested computation (e.g. too few R-D points)

``HETPCC_THREADS`` caps the BLAS/OpenMP thread count; it must be set before
numpy is loaded, which is why this module sets it before the other imports.
"""

from __future__ import annotations

import os

_threads = os.environ.get("HETPCC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .base import QuantizerConfig, quantize  # noqa: E402
from .codec import (  # noqa: E402
    CodecModel,
    ContainerError,
    EncodeConfig,
    ModeError,
    ModelMismatch,
    decode,
    deserialize,
    encode,
    infer_bit_depth,
    serialize,
)
from .geometry import PlyError, read_ply, save_ply  # noqa: E402
from .metrics import (  # noqa: E402
    BDError,
    RDCurve,
    bd_psnr,
    bd_rate,
    bpp,
    d1_psnr,
    d2_psnr,
    estimate_normals,
    peak_for_bit_depth,
)
from .nn.params import CheckpointError  # noqa: E402
from .residual import default_k  # noqa: E402
from .scale import counts_per_scale, dimension_spectrum  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CORRUPT, EXIT_MODE, EXIT_MODEL, EXIT_DATA = 0, 2, 3, 4, 5, 6, 7

log = logging.getLogger("hetpcc")

EVAL_FIELDS = ["cloud_id", "mode", "bpp", "d1_psnr", "d2_psnr"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _load_model(path, **expect) -> CodecModel:
    return CodecModel.from_bytes(_read_bytes(path), {k: v for k, v in expect.items() if v is not None})


def _write_text(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _fmt(x: float) -> str:
    return "inf" if x == float("inf") else repr(float(x))


def _step(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


# ------------------------------------------------------------------ commands

def cmd_encode(a) -> int:
    cloud = read_ply(a.input)
    model = _load_model(a.model) if a.model else None
    if model is None and not a.skip:
        raise UsageError("encode: --model is required unless --skip is given")
    k = a.k or (model.k if model else default_k(a.scale))
    h = a.hierarchies or (model.hierarchies if model else 1)
    cfg = EncodeConfig(a.scale, k, h, skip=a.skip, bit_depth=a.bitdepth)
    data = serialize(encode(cloud, model, cfg))
    Path(a.out).write_bytes(data)
    log.info("wrote %d bytes (%.4f bpp)", len(data), bpp(data, len(cloud)))
    return EXIT_OK


def cmd_decode(a) -> int:
    container = deserialize(_read_bytes(getattr(a, "in")))
    if a.mode != "base_only" and not a.model:
        raise UsageError(f"decode: --mode {a.mode} needs --model")
    model = _load_model(a.model) if a.model else None
    rec = decode(container, model, a.mode)
    save_ply(rec, a.out, format="ascii" if a.ascii else "binary_le", dtype="float64")
    return EXIT_OK


def cmd_eval(a) -> int:
    ref = read_ply(a.ref)
    rec = read_ply(a.rec)
    container = deserialize(_read_bytes(a.container))
    mode = a.mode or ("skip" if container.skip_encoded else "full")
    peak = peak_for_bit_depth(a.bitdepth)
    normals = estimate_normals(ref)
    row = {
        "cloud_id": a.id or Path(a.ref).stem,
        "mode": mode,
        "bpp": _fmt(bpp(container, len(ref))),
        "d1_psnr": _fmt(d1_psnr(ref, rec, peak)),
        "d2_psnr": _fmt(d2_psnr(ref, rec, normals, peak)),
    }
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EVAL_FIELDS, lineterminator="\n")
    if not a.no_header:
        w.writeheader()
    w.writerow(row)
    _write_text(buf.getvalue(), a.out)
    return EXIT_OK


def cmd_dimspec(a) -> int:
    cloud = read_ply(a.input)
    B = a.bitdepth or infer_bit_depth(cloud)
    vox = quantize(cloud, QuantizerConfig(1.0, B))
    _write_text(dimension_spectrum(counts_per_scale(vox)).to_csv(), a.out)
    return EXIT_OK


def _read_curves(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"bpp", "d1_psnr"} <= set(rows[0]):
        raise BDError(f"{path}: expected CSV columns bpp and d1_psnr")
    curves: dict = {}
    for r in rows:
        key = r.get("cloud_id") or "all"
        curves.setdefault(key, []).append(r)
    return {
        key: RDCurve.from_arrays(
            [float(r["bpp"]) for r in rs], [float(r["d1_psnr"]) for r in rs],
            [float(r.get("d2_psnr") or "nan") for r in rs],
        )
        for key, rs in curves.items()
    }


def cmd_bdrate(a) -> int:
    ref, test = _read_curves(a.ref), _read_curves(a.test)
    common = [k for k in ref if k in test]
    if not common:
        raise BDError("no cloud id appears in both CSV files")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cloud_id", "bd_rate_d1", "bd_psnr_d1", "bd_rate_d2", "bd_psnr_d2"])
    for key in common:
        d2 = ["", ""]
        if not (np.isnan(ref[key].psnrs("d2")).any() or np.isnan(test[key].psnrs("d2")).any()):
            d2 = [_fmt(bd_rate(ref[key], test[key], "d2")), _fmt(bd_psnr(ref[key], test[key], "d2"))]
        w.writerow([key, _fmt(bd_rate(ref[key], test[key])), _fmt(bd_psnr(ref[key], test[key])), *d2])
    _write_text(buf.getvalue(), a.out)
    return EXIT_OK


def _training_data(cfg, data_dir):
    from .train import make_dataset

    if data_dir:
        files = sorted(Path(data_dir).glob("*.ply"))
        if not files:
            raise FileNotFoundError(f"no .ply files in {data_dir}")
        clouds = [read_ply(f) for f in files]
        n_val = min(cfg.val_clouds, max(0, len(clouds) - 1))
        return clouds[: len(clouds) - n_val], clouds[len(clouds) - n_val:]
    fams = tuple(f.strip() for f in cfg.families.split(",") if f.strip())
    train = make_dataset(cfg.train_clouds, cfg.seed, cfg.bit_depth, families=fams, relief=cfg.relief)
    val = make_dataset(cfg.val_clouds, cfg.seed + 1, cfg.bit_depth, families=fams, relief=cfg.relief)
    return train, val


def _load_config(path):
    from .train import TrainingConfig

    return TrainingConfig.from_text(Path(path).read_text(encoding="utf-8"))


def cmd_train(a) -> int:
    from .train import log_to_csv, train

    cfg = _load_config(a.config)
    data, val = _training_data(cfg, a.data)
    model = CodecModel.create(cfg.k, cfg.hierarchies, step=cfg.step, seed=cfg.seed, skip_trained=cfg.skip)
    model, rows = train(model, data, cfg, val=val or None)
    Path(a.out).write_bytes(model.to_bytes())
    if a.log:
        _write_text(log_to_csv(rows), a.log)
    return EXIT_OK


def cmd_sweep_beta(a) -> int:
    from .train import log_to_csv, sweep_beta

    cfg = _load_config(a.config)
    data, val = _training_data(cfg, a.data)
    if not val:
        raise BDError("the sweep needs validation clouds")
    betas = [float(b) for b in a.betas.split(",")]
    rows = sweep_beta(data, val, cfg, betas, seed=cfg.seed)
    _write_text(log_to_csv(rows), a.out)
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hetpcc", description="Layered point cloud geometry codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("encode", help="compress a PLY point cloud into a .grsp container")
    e.add_argument("--input", required=True)
    e.add_argument("--model")
    e.add_argument("--scale", required=True, type=_step, help="quantization step s, e.g. 4 or 8/3")
    e.add_argument("--out", required=True)
    e.add_argument("--skip", action="store_true", help="base layer only; the decoder hallucinates detail")
    e.add_argument("--k", type=int, help="points per anchor (default: from the model)")
    e.add_argument("--hierarchies", type=int, choices=(1, 2))
    e.add_argument("--bitdepth", type=int, help="input bit depth (default: inferred)")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct a point cloud from a container")
    d.add_argument("--in", required=True, dest="in")
    d.add_argument("--model")
    d.add_argument("--mode", choices=("full", "skip", "base_only"), default="full")
    d.add_argument("--out", required=True)
    d.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    d.set_defaults(func=cmd_decode)

    t = sub.add_parser("train", help="train a codec model from a key = value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="epoch log CSV path ('-' for stdout)")
    t.add_argument("--data", help="directory of training PLY files (default: synthetic shapes)")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="one CSV row of rate and D1/D2 PSNR")
    v.add_argument("--ref", required=True)
    v.add_argument("--rec", required=True)
    v.add_argument("--container", required=True)
    v.add_argument("--bitdepth", required=True, type=int)
    v.add_argument("--id", help="cloud id column (default: reference file stem)")
    v.add_argument("--mode", help="mode label (default: from the container flag)")
    v.add_argument("--no-header", action="store_true")
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("dimspec", help="per-scale counts and dimension spectrum as CSV")
    s.add_argument("--input", required=True)
    s.add_argument("--bitdepth", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_dimspec)

    b = sub.add_parser("bdrate", help="Bjontegaard deltas between two eval CSV files")
    b.add_argument("--ref", required=True)
    b.add_argument("--test", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bdrate)

    w = sub.add_parser("sweep-beta", help="train one model per beta and report validation rate/distortion")
    w.add_argument("--config", required=True)
    w.add_argument("--betas", default="0.05,0.2,0.8")
    w.add_argument("--data")
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep_beta)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ModeError as e:
        print(f"mode conflict: {e}", file=sys.stderr)
        return EXIT_MODE
    except ModelMismatch as e:
        print(f"model mismatch: {e}", file=sys.stderr)
        return EXIT_MODEL
    except CheckpointError as e:
        # a readable checkpoint with the wrong operating point is a mismatch, anything else is corruption
        code = EXIT_MODEL if "was expected" in str(e) else EXIT_CORRUPT
        print(f"checkpoint error: {e}", file=sys.stderr)
        return code
    except ContainerError as e:
        print(f"corrupt container: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except (OSError, PlyError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (BDError, ValueError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
