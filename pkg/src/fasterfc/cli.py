"""Command-line entry point.

Every command writes NAV1 containers, CSV reports or PGM images.  Usage
errors exit with status 2; failed invariants print one ``error:`` line and
exit with status 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .bench import KINDS, bench_blocks
from .fasnet import FasNet, FasNetSpec
from .kspace import KNet, KNetSpec, RakiSpec
from .metrics import MetricsReport
from .pipeline import (
    Sample,
    fasnet_reconstruct,
    fasnet_stage,
    knet_images,
    knet_stage,
    make_dataset,
    raki_stage,
    stage_rss,
    to_f32,
)
from .simdata import (
    MaskSpec,
    decode_json,
    encode_json,
    kspace_from_arrays,
    kspace_to_arrays,
    load_container,
    save_container,
    zero_filled,
)
from .unet import UNetSpec, build_unet, count_params_actual, count_params_closed_form, param_ratio
from .varnet import VarNet, VarNetSpec, varnet_train

log = logging.getLogger("fasterfc")

_MODELS = {"knet": (KNet, KNetSpec), "fasnet": (FasNet, FasNetSpec), "varnet": (VarNet, VarNetSpec)}


class InvariantError(Exception):
    pass


# --- artifacts ------------------------------------------------------------


def provenance(args: argparse.Namespace) -> dict:
    """Command and content-relevant flags; output locations are left out so reruns are byte-identical."""
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "func", "verbose")}
    return {"command": args.command, "flags": flags, "seed": flags.get("seed"), "version": __version__}


def save_model(path: Path, kind: str, model: torch.nn.Module, extra: dict, prov: dict) -> None:
    arrays: dict[str, object] = {f"param/{k}": v for k, v in model.state_dict().items()}
    config = {"kind": kind, "spec": dataclasses.asdict(model.spec), **extra}
    arrays["__config__"] = encode_json(config)
    arrays["__provenance__"] = encode_json(prov)
    save_container(path, arrays)


def load_model(path: Path, expect: str) -> torch.nn.Module:
    arrays = load_container(path)
    if "__config__" not in arrays:
        raise InvariantError(f"{path} is not a model checkpoint")
    config = decode_json(arrays["__config__"])
    if config["kind"] != expect:
        raise InvariantError(f"{path} holds a {config['kind']} model, expected {expect}")
    cls, spec_cls = _MODELS[expect]
    spec = spec_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in config["spec"].items()})
    model = cls(config["n_coils"], spec) if expect == "knet" else cls(spec)
    state = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    return model.float() if expect != "varnet" else model


def _volumes(data: Path) -> list[Path]:
    paths = sorted(p for p in data.glob("vol*.nav") if p.name.count(".") == 1)
    if not paths:
        raise InvariantError(f"no vol*.nav volumes in {data}")
    return paths


def _stage_path(vol: Path, stage: str) -> Path:
    return vol.with_name(f"{vol.stem}.{stage}.nav")


def _load_volume(path: Path):
    arrays = load_container(path)
    return kspace_from_arrays(arrays), arrays["target"]


def write_pgm(path: Path, image: np.ndarray, peak: float) -> None:
    """Binary 16-bit graymap, big-endian samples, scaled so ``peak`` maps to 65535."""
    img = np.clip(np.asarray(image, dtype=np.float64) / (peak or 1.0), 0, 1)
    data = np.round(img * 65535).astype(">u2")
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + data.tobytes())


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if len(shape) not in (2, 3) or min(shape) < 8:
        raise argparse.ArgumentTypeError(f"shape needs 2 or 3 extents of at least 8, got {text!r}")
    return shape


# --- commands -------------------------------------------------------------


def cmd_gen_data(args) -> None:
    if args.volumes < 1 or args.coils < 1:
        raise InvariantError("--volumes and --coils must be positive")
    kind = args.mask or ("equispaced-2d" if len(args.shape) == 3 else "random-1d")
    cf = args.center_frac if args.center_frac is not None else (0.16 if kind == "equispaced-2d" else 0.08)
    samples = make_dataset(args.volumes, args.coils, args.shape, MaskSpec(kind, args.af, cf, args.seed), args.seed,
                           args.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(args)
    for j, s in enumerate(samples):
        arrays = kspace_to_arrays(s.kvol)
        arrays["target"] = s.target
        arrays["__provenance__"] = encode_json({**prov, "volume": j, "volume_seed": s.seed})
        save_container(out / f"vol{j:03d}.nav", arrays)
    print(f"wrote {len(samples)} volumes to {out}")


def cmd_train_raki(args) -> None:
    spec = RakiSpec(lr=args.lr, epochs=args.epochs, rule=args.rule, seed=args.seed)
    prov = provenance(args)
    for vol in _volumes(Path(args.data)):
        kvol, _ = _load_volume(vol)
        filled = raki_stage(kvol, spec)
        save_container(_stage_path(vol, "raki"), {"kspace_filled": filled, "__provenance__": encode_json(prov)})
        print(f"{vol.name}: filled k-space written")


def cmd_train_knet(args) -> None:
    vols = _volumes(Path(args.data))
    samples, filled = [], []
    for vol in vols:
        kvol, target = _load_volume(vol)
        raki = _stage_path(vol, "raki")
        if not raki.exists():
            raise InvariantError(f"missing {raki.name}; run train-raki first")
        samples.append(Sample(kvol, target, 0))
        filled.append(load_container(raki)["kspace_filled"])
    spec = KNetSpec(c=args.c, levels=args.levels, lr=args.lr, epochs=args.epochs,
                    drop_epoch=min(KNetSpec.drop_epoch, int(args.epochs * 0.96)))
    knet, history = knet_stage(samples, filled, spec, steps=args.steps, seed=args.seed)
    prov = provenance(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, "knet", knet, {"n_coils": samples[0].kvol.data.shape[0], "loss": history}, prov)
    for vol, s, f in zip(vols, samples, filled):
        save_container(_stage_path(vol, "knet"), {"images": knet_images(knet, s, f), "__provenance__": encode_json(prov)})
    print(f"K-Net trained for {len(history)} steps, final loss {history[-1]:.4f}")


def cmd_train_fasnet(args) -> None:
    vols = _volumes(Path(args.data))
    images, targets = [], []
    for vol in vols:
        stage = _stage_path(vol, "knet")
        if not stage.exists():
            raise InvariantError(f"missing {stage.name}; run train-knet first")
        images.append(load_container(stage)["images"])
        targets.append(load_container(vol)["target"])
    spec = FasNetSpec(L=args.L, cascades=args.cascades, refine_c=args.c, refine_levels=args.levels, lr=args.lr,
                      epochs=args.epochs, epochs_late=args.epochs_late)
    model, history = fasnet_stage(images, targets, spec, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, "fasnet", model, {"loss": history}, provenance(args))
    print(f"FAS-Net trained on {len(history)} block steps, final loss {history[-1]:.4f}")


def cmd_train_varnet(args) -> None:
    data = [_load_volume(v) for v in _volumes(Path(args.data))]
    if data[0][0].ndim != 2:
        raise InvariantError("train-varnet needs 2D volumes (gen-data --shape F,P)")
    torch.manual_seed(args.seed)
    spec = VarNetSpec(cascades=args.cascades, sens_c=args.sens_c, sens_levels=args.levels, refine_c=args.c,
                      refine_levels=args.levels, block=args.block)
    model = VarNet(spec).double()
    history = varnet_train(model, [(k, t.double()) for k, t in data], args.steps, args.lr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, "varnet", model, {"loss": history}, provenance(args))
    print(f"VarNet trained for {len(history)} steps, final loss {history[-1]:.4f}")


def cmd_reconstruct(args) -> None:
    vol = Path(args.input)
    kvol, target = _load_volume(vol)
    if args.method == "zero-filled":
        image = zero_filled(kvol)
    elif args.method == "varnet":
        model = load_model(Path(args.checkpoint), "varnet").double()
        with torch.no_grad():
            image = model(kvol)
    else:
        knet = load_model(Path(args.knet), "knet")
        fas = load_model(Path(args.checkpoint), "fasnet")
        filled = raki_stage(kvol, RakiSpec(epochs=args.raki_epochs, rule=args.rule, seed=args.seed))
        if args.method == "raki":
            image = stage_rss(filled)
        else:
            sample = Sample(kvol, target, 0)
            image = fasnet_reconstruct(fas, knet_images(knet, sample, filled))
    image = image.detach().double()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_container(out, {"image": image, "__provenance__": encode_json(provenance(args))})
    if args.pgm:
        pgm = Path(args.pgm)
        pgm.mkdir(parents=True, exist_ok=True)
        vol3 = image if image.dim() == 3 else image.unsqueeze(0)
        peak = float(vol3.max())
        idx = range(vol3.shape[0]) if args.pgm_all else [vol3.shape[0] // 2]
        for i in idx:
            write_pgm(pgm / f"{out.stem}_f{i:03d}.pgm", vol3[i].numpy(), peak)
    print(f"reconstruction written to {out}")


def cmd_evaluate(args) -> None:
    pred = load_container(Path(args.pred))
    gt = load_container(Path(args.gt))
    p = pred["image"] if "image" in pred else pred["target"]
    report = MetricsReport.from_volume(p, gt["target"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(f"provenance: {json.dumps(provenance(args), sort_keys=True)}"))
    m = report.means()
    print(f"slices={len(report.rows)} nmse={m['nmse']:.6g} psnr={m['psnr']:.4f} ssim={m['ssim']:.4f}")


def cmd_bench(args) -> None:
    shape = (1, args.channels) + tuple([args.size] * args.ndim)
    report = bench_blocks([shape], args.kinds, repeats=args.repeats, warmups=args.warmups, backward=not args.forward_only)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(f"# provenance: {json.dumps(provenance(args), sort_keys=True)}\n" + text)
    print(text, end="")


def cmd_count_params(args) -> None:
    spec = UNetSpec(args.c, args.L, args.in_channels, args.out_channels, args.ndim,
                    "fasterfc" if args.kind == "fasterfc-unet" else "ffc" if args.kind == "ffc-unet" else "two-conv")
    actual = count_params_actual(build_unet(spec))
    print(f"kind={args.kind} c={args.c} L={args.L}")
    print(f"enumerated={actual}")
    if args.kind in ("unet", "fasterfc-unet"):
        closed = count_params_closed_form(args.kind, args.c, args.L)
        print(f"closed_form={closed}")
        print(f"relative_gap={(actual - closed) / closed:.6f}")
    print(f"r={param_ratio(args.c, args.L):.6f}")


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fasterfc", description="FasterFC reconstruction toolkit")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate multi-coil undersampled volumes")
    g.add_argument("--volumes", type=int, default=2)
    g.add_argument("--coils", type=int, default=4)
    g.add_argument("--shape", type=_parse_shape, default=(32, 32, 32), help="F,P[,S]")
    g.add_argument("--af", type=int, default=4)
    g.add_argument("--center-frac", type=float, default=None)
    g.add_argument("--mask", choices=("random-1d", "equispaced-2d"), default=None)
    g.add_argument("--sigma", type=float, default=0.0, help="noise std relative to the phantom peak")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("train-raki", help="scan-specific k-space fill for every volume")
    r.add_argument("--data", required=True)
    r.add_argument("--epochs", type=int, default=RakiSpec.epochs)
    r.add_argument("--lr", type=float, default=RakiSpec.lr)
    r.add_argument("--rule", choices=("sgd-momentum", "adaptive-moments", "lbfgs"), default=RakiSpec.rule)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_train_raki)

    k = sub.add_parser("train-knet", help="group k-space network on RAKI outputs")
    k.add_argument("--data", required=True)
    k.add_argument("--epochs", type=int, default=KNetSpec.epochs)
    k.add_argument("--steps", type=int, default=None, help="override the epoch count with a step count")
    k.add_argument("--lr", type=float, default=KNetSpec.lr)
    k.add_argument("--c", type=int, default=KNetSpec.c)
    k.add_argument("--levels", type=int, default=KNetSpec.levels)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_train_knet)

    f = sub.add_parser("train-fasnet", help="split-slice image refinement on K-Net outputs")
    f.add_argument("--data", required=True)
    f.add_argument("--L", type=int, default=FasNetSpec.L)
    f.add_argument("--cascades", type=int, default=FasNetSpec.cascades)
    f.add_argument("--c", type=int, default=FasNetSpec.refine_c)
    f.add_argument("--levels", type=int, default=FasNetSpec.refine_levels)
    f.add_argument("--epochs", type=int, default=FasNetSpec.epochs)
    f.add_argument("--epochs-late", type=int, default=FasNetSpec.epochs_late)
    f.add_argument("--lr", type=float, default=FasNetSpec.lr)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_train_fasnet)

    v = sub.add_parser("train-varnet", help="unrolled 2D network")
    v.add_argument("--data", required=True)
    v.add_argument("--cascades", type=int, default=4)
    v.add_argument("--block", choices=KINDS, default="fasterfc")
    v.add_argument("--c", type=int, default=8)
    v.add_argument("--sens-c", type=int, default=4)
    v.add_argument("--levels", type=int, default=2)
    v.add_argument("--steps", type=int, default=50)
    v.add_argument("--lr", type=float, default=1e-3)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_train_varnet)

    c = sub.add_parser("reconstruct", help="reconstruct one volume")
    c.add_argument("--input", required=True)
    c.add_argument("--method", choices=("zero-filled", "raki", "fasnet", "varnet"), default="zero-filled")
    c.add_argument("--checkpoint", help="FAS-Net or VarNet checkpoint")
    c.add_argument("--knet", help="K-Net checkpoint (fasnet method)")
    c.add_argument("--raki-epochs", type=int, default=RakiSpec.epochs)
    c.add_argument("--rule", choices=("sgd-momentum", "adaptive-moments", "lbfgs"), default=RakiSpec.rule)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--pgm", help="directory for 16-bit PGM slice exports")
    c.add_argument("--pgm-all", action="store_true", help="export every F slice instead of the middle one")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="per-slice metrics along F")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="block timing and cost table")
    b.add_argument("--kinds", nargs="+", choices=KINDS, default=list(KINDS))
    b.add_argument("--channels", type=int, default=32)
    b.add_argument("--size", type=int, default=320)
    b.add_argument("--ndim", type=int, choices=(2, 3), default=2)
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--warmups", type=int, default=3)
    b.add_argument("--forward-only", action="store_true")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    n = sub.add_parser("count-params", help="closed-form and enumerated parameter counts")
    n.add_argument("--kind", choices=("unet", "ffc-unet", "fasterfc-unet"), default="fasterfc-unet")
    n.add_argument("--c", type=int, default=32)
    n.add_argument("--L", type=int, default=4)
    n.add_argument("--in-channels", type=int, default=1)
    n.add_argument("--out-channels", type=int, default=1)
    n.add_argument("--ndim", type=int, choices=(2, 3), default=2)
    n.set_defaults(func=cmd_count_params)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (InvariantError, ValueError, FloatingPointError, KeyError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
