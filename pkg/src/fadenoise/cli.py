"""``fadenoise`` command line: one binary with a subcommand per workflow step.

Every run writes ``manifest.json`` next to its outputs. Outputs go to
``--out`` or, by default, ``$FADENOISE_OUT/<command>`` (``runs/<command>``
when the variable is unset).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import __version__

OUT_ENV = "FADENOISE_OUT"
log = logging.getLogger("fadenoise")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, "manifest.json")
        body = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "outputs": self.outputs,
            "version": self.version,
            "python": platform.python_version(),
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        }
        with open(path, "w") as f:
            json.dump(body, f, indent=2, sort_keys=True, default=str)
        return path


def output_dir(args, command: str) -> str:
    out = args.out or os.path.join(os.environ.get(OUT_ENV, "runs"), command)
    os.makedirs(out, exist_ok=True)
    return out


def report(result, out_dir: str, stem: str = "report") -> dict:
    """Write a :class:`MetricReport` as JSON and CSV; returns the paths."""
    paths = {"json": os.path.join(out_dir, f"{stem}.json"), "csv": os.path.join(out_dir, f"{stem}.csv")}
    result.write(paths["json"], paths["csv"])
    return paths


# -- subcommands -------------------------------------------------------------------

def _config(args):
    from .config import load_config

    overrides = list(args.set or [])
    for flag in ("iterations", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"train.{flag}={v}")
    return load_config(args.config, overrides)


def cmd_calibrate(args) -> RunManifest:
    from .noise import calibrate, load_calibration_dir

    out = output_dir(args, "calibrate")
    model = calibrate(load_calibration_dir(args.input))
    path = os.path.join(out, "sensor.json")
    model.save(path)
    print(json.dumps({"sensor": path, "a_range": [model.a_min, model.a_max], "logb_line": list(model.logb_line)}))
    return RunManifest("calibrate", {"input": os.path.abspath(args.input)}, None, {"sensor": path})


def cmd_synth(args) -> RunManifest:
    from . import data
    from .noise import synthesize_calibration, write_calibration_dir

    out = output_dir(args, "synth")
    rc = _config(args)
    if args.kind == "train":
        paths = data.write_dataset(out, data.synthetic_dataset(args.count, args.size, seed=rc.train.seed))
        outputs = {"frames": len(paths)}
    elif args.kind == "pairs":
        path = data.write_pairs(out, data.synthetic_pairs(args.count, args.size, rc.train.noise, rc.train.seed))
        outputs = {"pairs": str(path)}
    else:
        path = write_calibration_dir(out, synthesize_calibration(seed=rc.train.seed))
        outputs = {"calibration": path}
    print(json.dumps({"kind": args.kind, "out": out, **outputs}))
    return RunManifest("synth", {"kind": args.kind, "count": args.count, "size": args.size, **rc.resolved()},
                       rc.train.seed, outputs)


def cmd_train(args) -> RunManifest:
    from .training import train, train_teacher

    out = output_dir(args, "train")
    rc = _config(args)
    fn = train_teacher if args.teacher else train
    res = fn(rc.train, out)
    print(json.dumps({"checkpoint": res.checkpoint, **res.final}))
    return RunManifest("train", rc.resolved(), rc.train.seed, {"checkpoint": res.checkpoint, "log": res.log_path})


def cmd_train_array(args) -> RunManifest:
    from .nsma import partition, train_array

    out = output_dir(args, "train-array")
    rc = _config(args)
    n = args.n or rc.nsma_n
    noise = rc.train.noise
    part = train_array(rc.train, partition(noise.a_min, noise.a_max, n), out)
    manifest = os.path.join(out, "array.json")
    print(json.dumps({"array": manifest, "bounds": part.bounds}))
    return RunManifest("train-array", {**rc.resolved(), "nsma": {"n": n}}, rc.train.seed,
                       {"array": manifest, "checkpoints": part.checkpoints})


def cmd_denoise(args) -> RunManifest:
    from .data import list_raw, read_raw, write_raw
    from .evaluation import load_model
    from .inference import annotation
    from .noise import SensorNoiseModel

    out = output_dir(args, "denoise")
    model = load_model(args.model)
    sensor = SensorNoiseModel.load(args.sensor) if args.sensor else None
    files = [args.input] if os.path.isfile(args.input) else list_raw(args.input)
    if not files:
        raise FileNotFoundError(f"no RAW frames under {args.input}")
    written = []
    for f in files:
        img = read_raw(f)
        res = model(img, annotation(img, sensor))
        path = os.path.join(out, f"{img.name}.pgm")
        write_raw(path, res)
        written.append(path)
    print(json.dumps({"denoised": len(written), "out": out}))
    return RunManifest("denoise", {"model": os.path.abspath(args.model), "sensor": args.sensor}, None,
                       {"frames": written})


def cmd_eval(args) -> RunManifest:
    from .config import load_config
    from .data import load_pairs
    from .evaluation import evaluate
    from .noise import SensorNoiseModel

    out = output_dir(args, "eval")
    rc = load_config(args.config, args.set or [])
    sensor = SensorNoiseModel.load(args.sensor) if args.sensor else None
    result = evaluate(args.model, load_pairs(args.pairs), rc.train.isp, sensor)
    paths = report(result, out)
    summary = {k: v for k, v in result.to_json().items() if k != "per_image"}
    print(json.dumps(summary, sort_keys=True))
    return RunManifest("eval", {"model": os.path.abspath(args.model), "pairs": os.path.abspath(args.pairs),
                                "isp": rc.resolved()["isp"]}, None, paths)


def cmd_macs(args) -> RunManifest:
    from .fanet import count_macs

    rc = _config(args)
    g = count_macs(rc.model, args.height, args.width)
    print(json.dumps({"config": args.config or "default", "gmacs_per_mp": g, "height": args.height,
                      "width": args.width}, sort_keys=True))
    return RunManifest("macs", {"model": rc.model.to_json()}, None, {"gmacs_per_mp": g})


def cmd_align(args) -> RunManifest:
    from .align import align_directory

    out = output_dir(args, "align")
    results = align_directory(args.input, out)
    print(json.dumps({"aligned": len(results), "out": out}))
    return RunManifest("align", {"input": os.path.abspath(args.input)}, None, {"pairs": results})


# -- parser ---------------------------------------------------------------------------

def _add_config(p, shortcuts: bool = False):
    p.add_argument("--config", help="JSON config file or preset (default, desk, teacher)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    if shortcuts:
        p.add_argument("--iterations", type=int, help="shortcut for --set train.iterations=N")
        p.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fadenoise", description="RAW denoising toolkit")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{name})")
        return p

    p = add("calibrate", cmd_calibrate, "fit a sensor noise model from flat-field stacks")
    p.add_argument("--input", required=True, help="calibration directory with calibration.json")

    p = add("synth", cmd_synth, "write synthetic training frames, test pairs or calibration stacks")
    p.add_argument("--kind", choices=("train", "pairs", "calibration"), default="train")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=128)
    _add_config(p, shortcuts=True)

    p = add("train", cmd_train, "train one denoiser")
    p.add_argument("--teacher", action="store_true", help="train the teacher-sized plain U-Net")
    _add_config(p, shortcuts=True)

    p = add("train-array", cmd_train_array, "train one model per noise subrange")
    p.add_argument("--n", type=int, help="number of subranges (default nsma.n)")
    _add_config(p, shortcuts=True)

    p = add("denoise", cmd_denoise, "denoise RAW frames")
    p.add_argument("--model", required=True, help="checkpoint directory or array.json")
    p.add_argument("--input", required=True, help="RAW frame or directory")
    p.add_argument("--sensor", help="sensor model for frames without (a, b)")

    p = add("eval", cmd_eval, "score a model on a paired test set")
    p.add_argument("--model", required=True, help="checkpoint directory or array.json")
    p.add_argument("--pairs", required=True, help="directory with pairs.json")
    p.add_argument("--sensor", help="sensor model for frames without (a, b)")
    _add_config(p)

    p = add("macs", cmd_macs, "print GMACs per megapixel of a model config")
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--width", type=int, default=512)
    _add_config(p)

    p = add("align", cmd_align, "align noisy/clean pairs listed in pairs.json")
    p.add_argument("--input", required=True)
    return ap


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        manifest = args.fn(args)
        # macs only prints unless an output directory is requested
        if args.command != "macs" or args.out:
            manifest.write(output_dir(args, args.command))
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # every module error becomes exit code 1
        if args.verbose:
            log.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())
