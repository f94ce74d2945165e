"""mxsim - command-line entry point

    mxsim quantize  tensor.f64m --orientation row --out tensor.mxt1
    mxsim build     models/toy --model toy --seed 0
    mxsim calibrate models/toy --sequences 5
    mxsim run       models/toy --mode analog --cm 3 --adc 10
    mxsim sweep     seq --system base --range 32:512:32
    mxsim tables    t1 t3 t5 t8

Exit codes: 0 success, 1 tolerance failure, 2 usage or input error.
"""

import argparse
import sys

from dotenv import load_dotenv

from src.api.model_bundle import load_bundle, load_tokens, save_bundle
from src.api.tensor_files import read_f64m, write_mxt1
from src.core.diagnostics import Diagnostics
from src.core.errors import ConfigurationError, EmptyInputError, MxSimError
from src.core.mxfp_core import MxTensor
from src.core.settings import RunManifest, parse_adc, parse_cm, resolve_settings
from src.services.analog_cim import AnalogConfig, TargetStrategy
from src.services.calibration import CalibrationStore, calibrate_model
from src.services.presets import presets
from src.services.sweeps import (
    SWEEP_KINDS,
    adc_sweep,
    build_tables,
    cm_sweep,
    flops_sweep,
    saturation_sweep,
    seq_sweep,
    strategy_sweep,
)
from src.services.transformer_runner import (
    ExecutionMode,
    build_random_model,
    compare_modes,
    model_forward,
    per_layer_errors,
    relative_error,
)
from src.ui.components import render_table, render_tolerance_summary, write_csv, write_json
from src.utils.log import configure_logging, get_logger, verbosity_level
from src.utils.synthetic import token_batches

logger = get_logger("app")

EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE = 0, 1, 2
DEFAULT_RANGES = {"seq": "32:512:32", "adc": "8:12", "cm": "1:6", "strategy": "1:6", "saturation": "0:6"}


def parse_range(text):
    """`a:b[:step]` (inclusive) or a comma list; `inf` and `ideal` pass through as None"""
    if text is None:
        raise EmptyInputError("sweep range is empty")
    text = text.strip()
    if ":" in text:
        parts = [int(p) for p in text.split(":")]
        if len(parts) not in (2, 3):
            raise ConfigurationError(f"bad range {text!r}; use start:stop[:step]")
        start, stop = parts[0], parts[1]
        step = parts[2] if len(parts) == 3 else 1
        if step <= 0:
            raise ConfigurationError(f"range step must be positive, got {step}")
        values = list(range(start, stop + 1, step))
    else:
        values = [None if v.strip().lower() in ("inf", "ideal") else int(v) for v in text.split(",") if v.strip()]
    if not values:
        raise EmptyInputError(f"sweep range {text!r} is empty")
    return values


def _settings(args, calibration=None):
    cli = {
        "seed": args.seed,
        "threads": args.threads,
        "cm": args.cm,
        "adc": args.adc,
        "two_pass": args.two_pass,
        "strategy": args.strategy,
        "offset": getattr(args, "offset", None),
        "percentile": getattr(args, "percentile", None),
        "k_window": getattr(args, "k_window", None),
        "system": getattr(args, "system", None),
    }
    stored = {"strategy": calibration.strategy.value} if calibration is not None else None
    return resolve_settings(cli, args.config, stored)


def _manifest(args, settings, outputs=()):
    paths = [p for p in (args.config,) if p]
    return RunManifest(
        command=args.command,
        seed=settings.seed,
        settings=settings.as_dict(),
        config_paths=paths,
        outputs=[str(o) for o in outputs if o],
    )


def _sequences(args, model, settings):
    if args.input:
        return [load_tokens(path, model.config) for path in args.input]
    n = min(args.tokens or model.config.seq_len, model.config.max_seq)
    return token_batches(args.sequences, n, model.config.d_model, seed=settings.seed)


# ------------------------------------------------------------------ commands

def cmd_quantize(args):
    settings = _settings(args)
    matrix = read_f64m(args.input)
    diagnostics = Diagnostics()
    tensor = MxTensor.quantize(matrix, args.orientation, args.rounding, diagnostics)
    write_mxt1(args.out, tensor)
    exponents = tensor.block_exponents()
    stats = {
        "rows": tensor.rows,
        "cols": tensor.cols,
        "orientation": tensor.orientation,
        "blocks": int(exponents.size),
        "max_exponent": int(exponents.max()) if exponents.size else None,
        "zero_blocks": int((tensor.scales == 127).sum()),
        "fp4_saturations": diagnostics.fp4_saturations,
        "bf16_saturations": diagnostics.bf16_saturations,
    }
    stats_out = args.stats or f"{args.out}.json"
    manifest = _manifest(args, settings, [args.out, stats_out]).finish()
    write_json({"stats": stats}, stats_out, manifest)
    return EXIT_OK


def cmd_build(args):
    settings = _settings(args)
    config = presets.model(args.model)
    model = build_random_model(config, seed=settings.seed, scale_spread=args.scale_spread)
    save_bundle(model, args.model_dir, provenance={"seed": settings.seed, "scale_spread": args.scale_spread})
    print(f"{config.name}: {model.fingerprint()} -> {args.model_dir}")
    return EXIT_OK


def cmd_calibrate(args):
    settings = _settings(args)
    model = load_bundle(args.model_dir)
    batches = _sequences(args, model, settings)
    calibration = calibrate_model(
        model,
        batches,
        strategy=settings.strategy,
        percentile=settings.percentile,
        k_window=settings.k_window,
        cm_bits=settings.cm,
    )
    path = CalibrationStore(args.model_dir).save(calibration)
    summary = {
        "strategy": calibration.strategy.value,
        "layers": {
            name: {"E_N": entry.target_exponent, "adc_fullscale": entry.adc_fullscale}
            for name, entry in calibration.layers.items()
        },
    }
    manifest = _manifest(args, settings, [path, args.out]).finish()
    write_json(summary, args.out, manifest)
    return EXIT_OK


def cmd_run(args):
    model = load_bundle(args.model_dir)
    if args.mode == "analog":
        calibration = CalibrationStore(args.model_dir).require(model)
        settings = _settings(args, calibration)
        batches = _sequences(args, model, settings)
        cfg = AnalogConfig.from_settings(settings)
        report = compare_modes(model, batches, cfg, calibration, settings.threads)
    else:
        settings = _settings(args)
        batches = _sequences(args, model, settings)
        mode = ExecutionMode.parse(args.mode)
        outputs = [model_forward(model, tokens, mode) for tokens in batches]
        diagnostics = Diagnostics()
        for out in outputs:
            diagnostics.merge(out.diagnostics)
        report = {
            "mode": args.mode,
            "sequences": len(batches),
            "predictions": [out.prediction for out in outputs],
            "diagnostics": diagnostics.as_dict(),
        }
        if args.mode == "digital":
            reference = [model_forward(model, t, ExecutionMode.reference()) for t in batches]
            report["digital_vs_reference"] = [
                relative_error(out.embeddings, ref.embeddings) for out, ref in zip(outputs, reference)
            ]
            # same-input error of each layer, worst case over the sequences
            per_layer = [per_layer_errors(model, t, mode, ExecutionMode.reference()) for t in batches]
            report["digital_vs_reference_per_layer"] = [max(errors) for errors in zip(*per_layer)]
    logger.info(f"Diagnostics: {report['diagnostics']}")
    manifest = _manifest(args, settings, [args.out]).finish()
    write_json(report, args.out, manifest)
    return EXIT_OK


def _sweep_model(args, settings):
    if not args.model_dir:
        raise ConfigurationError(f"sweep {args.kind} needs --model-dir")
    model = load_bundle(args.model_dir)
    return model, _sequences(args, model, settings)


def cmd_sweep(args):
    settings = _settings(args)
    kind = args.kind
    text = args.range or DEFAULT_RANGES.get(kind)
    points = parse_range(text) if kind != "flops" else []
    if kind == "seq":
        system = presets.system(settings.system)
        model = presets.model(args.model) if args.model else system.filling_model()
        rows, columns, _ = seq_sweep(model, system, points)
    elif kind == "flops":
        rows, columns = flops_sweep(presets.zoo())
    elif kind == "strategy":
        model, batches = _sweep_model(args, settings)
        rows, columns = strategy_sweep(model, batches, points, settings.adc, settings.offset, settings.threads)
    else:
        model, batches = _sweep_model(args, settings)
        calibration = CalibrationStore(args.model_dir).require(model)
        settings = _settings(args, calibration)
        cfg = AnalogConfig.from_settings(settings)
        if kind == "adc":
            points = [parse_adc(p) for p in points]
            rows, columns = adc_sweep(model, batches, calibration, points, cfg, settings.threads)
        elif kind == "cm":
            points = [parse_cm(p) for p in points]
            rows, columns = cm_sweep(model, batches, calibration, points, cfg, settings.threads)
        else:
            rows, columns = saturation_sweep(model, batches, calibration, points, settings.two_pass)
    manifest = _manifest(args, settings, [args.out]).finish()
    write_csv(rows, columns, args.out, manifest.manifest_hash)
    return EXIT_OK


def cmd_tables(args):
    settings = _settings(args)
    rows, columns, all_within = build_tables(presets, args.which or ("t1", "t3", "t5", "t8"))
    manifest = _manifest(args, settings, [args.out]).finish()
    write_csv(rows, columns, args.out, manifest.manifest_hash)
    if args.out not in (None, "-"):
        print(render_table(rows, ["table", "row", "metric", "model_value", "reference_value", "within"]))
    print(render_tolerance_summary(rows), file=sys.stderr)
    return EXIT_OK if all_within else EXIT_TOLERANCE


# ------------------------------------------------------------------ parser

def _add_common(parser):
    parser.add_argument("--config", help="JSON file with default settings")
    parser.add_argument("--seed", type=int, help="RNG seed (default 0)")
    parser.add_argument("--out", help="output path; '-' writes to stdout")
    parser.add_argument("--threads", type=int, help="worker threads (env MXSIM_THREADS)")
    parser.add_argument("--cm", help="current-mirror bits: integer or 'inf'")
    parser.add_argument("--adc", help="ADC bits: integer >= 4 or 'ideal'")
    parser.add_argument("--two-pass", dest="two_pass", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--strategy", choices=[s.value for s in TargetStrategy])
    parser.add_argument("-v", "--verbose", action="count", default=0)


def _add_inputs(parser):
    parser.add_argument("--input", nargs="+", help="F64M token files, one per sequence")
    parser.add_argument("--sequences", type=int, default=4, help="synthetic sequences when no --input")
    parser.add_argument("--tokens", type=int, help="tokens per synthetic sequence (default: model seq_len)")


def build_parser():
    parser = argparse.ArgumentParser(prog="mxsim", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="F64M matrix -> MXT1 tensor plus stats")
    _add_common(p)
    p.add_argument("input")
    p.add_argument("--orientation", choices=["row", "col"], default="row")
    p.add_argument("--rounding", choices=["nearest", "truncate"], default="nearest")
    p.add_argument("--stats", help="stats JSON path (default: <out>.json)")
    p.set_defaults(handler=cmd_quantize)

    p = sub.add_parser("build", help="seeded random model bundle from a model preset")
    _add_common(p)
    p.add_argument("model_dir")
    p.add_argument("--model", default="toy", help="preset name or model JSON path")
    p.add_argument("--scale-spread", type=int, default=2, help="binades of per-block weight spread")
    p.set_defaults(handler=cmd_build)

    p = sub.add_parser("calibrate", help="write calibration.json into a model bundle")
    _add_common(p)
    _add_inputs(p)
    p.add_argument("model_dir")
    p.add_argument("--percentile", type=float)
    p.add_argument("--k-window", dest="k_window", type=int)
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("run", help="forward a model and report errors between modes")
    _add_common(p)
    _add_inputs(p)
    p.add_argument("model_dir")
    p.add_argument("--mode", choices=["reference", "digital", "analog"], default="analog")
    p.add_argument("--offset", type=int)
    p.add_argument("--k-window", dest="k_window", type=int)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("sweep", help="CSV sweep over one parameter")
    _add_common(p)
    _add_inputs(p)
    p.add_argument("kind", choices=SWEEP_KINDS)
    p.add_argument("--range", help="start:stop[:step] or comma list")
    p.add_argument("--system", help="system preset (seq sweeps)")
    p.add_argument("--model", help="model preset (seq sweeps; default fills the system)")
    p.add_argument("--model-dir", dest="model_dir", help="calibrated bundle (adc/cm/strategy/saturation)")
    p.add_argument("--offset", type=int)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("tables", help="published tables next to model values")
    _add_common(p)
    p.add_argument("which", nargs="*", help="any of t1 t3 t5 t8 (default: all)")
    p.set_defaults(handler=cmd_tables)
    return parser


def main(argv=None):
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(verbosity_level(args.verbose))
    try:
        return args.handler(args)
    except MxSimError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
