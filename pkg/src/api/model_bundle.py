"""Model Bundle - Directory layout for a model's weights, norms, head and calibration

    <model_dir>/config.json          ModelConfig plus provenance
    <model_dir>/layerNN/<name>.mxt1  column-blocked projection weights
    <model_dir>/layerNN/norms.f64m   rows: ln1_gamma, ln1_beta, ln2_gamma, ln2_beta
    <model_dir>/head.f64m            toy classification head (d x classes)
    <model_dir>/calibration.json     written by `mxsim calibrate`
"""

import json
from pathlib import Path

import numpy as np

from src.api.tensor_files import read_f64m, read_mxt1, write_f64m, write_mxt1
from src.core.errors import ConfigurationError, FileFormatError
from src.services.transformer_runner import LINEAR_NAMES, LayerWeights, ModelConfig, TransformerModel
from src.utils.log import get_logger

logger = get_logger(__name__)

CONFIG_FILE = "config.json"
HEAD_FILE = "head.f64m"
NORMS_FILE = "norms.f64m"
NORM_ROWS = ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")


def _layer_dir(root, index):
    return Path(root) / f"layer{index:02d}"


def save_bundle(model, model_dir, provenance=None):
    """Write every tensor of `model` under model_dir; returns the directory"""
    root = Path(model_dir)
    root.mkdir(parents=True, exist_ok=True)
    for index, layer in enumerate(model.layers):
        layer_dir = _layer_dir(root, index)
        layer_dir.mkdir(exist_ok=True)
        for name in LINEAR_NAMES:
            write_mxt1(layer_dir / f"{name}.mxt1", layer.linear(name))
        write_f64m(layer_dir / NORMS_FILE, np.stack([getattr(layer, row) for row in NORM_ROWS]))
    write_f64m(root / HEAD_FILE, model.head)
    config = {
        "model": model.config.to_dict(),
        "fingerprint": model.fingerprint(),
        "provenance": provenance or {},
    }
    with open(root / CONFIG_FILE, "w") as f:
        json.dump(config, f, indent=2)
    logger.info(f"Saved {model.config.name} ({model.config.layers} layers) to {root}")
    return root


def _load_config(root):
    path = root / CONFIG_FILE
    if not path.exists():
        raise FileFormatError(f"{root} is not a model bundle: {CONFIG_FILE} is missing")
    try:
        with open(path, "r") as f:
            data = json.load(f)
        return ModelConfig.from_dict(data["model"]), data
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: {e}") from e
    except (KeyError, TypeError) as e:
        raise FileFormatError(f"{path}: missing model section ({e})") from e


def _check_shape(tensor, rows, cols, label):
    if (tensor.rows, tensor.cols) != (rows, cols) or tensor.orientation != "col":
        raise FileFormatError(
            f"{label}: expected a {rows}x{cols} column-blocked tensor, got "
            f"{tensor.rows}x{tensor.cols} {tensor.orientation}-blocked"
        )


def load_bundle(model_dir):
    """Read a bundle written by save_bundle (or an externally converted checkpoint)"""
    root = Path(model_dir)
    config, data = _load_config(root)
    d, ffn = config.d_model, config.ffn_dim
    shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "ffn1": (d, ffn), "ffn2": (ffn, d)}
    layers = []
    for index in range(config.layers):
        layer_dir = _layer_dir(root, index)
        linears = {}
        for name in LINEAR_NAMES:
            tensor = read_mxt1(layer_dir / f"{name}.mxt1")
            _check_shape(tensor, *shapes[name], label=f"{layer_dir.name}/{name}")
            linears[name] = tensor
        norms = read_f64m(layer_dir / NORMS_FILE)
        if norms.shape != (len(NORM_ROWS), d):
            raise FileFormatError(f"{layer_dir / NORMS_FILE}: expected {len(NORM_ROWS)}x{d}, got {norms.shape}")
        layers.append(LayerWeights(**linears, **dict(zip(NORM_ROWS, norms))))
    head = read_f64m(root / HEAD_FILE)
    if head.shape[0] != d:
        raise FileFormatError(f"{root / HEAD_FILE}: expected {d} rows, got {head.shape[0]}")
    model = TransformerModel(config=config, layers=layers, head=head)
    stored = data.get("fingerprint")
    if stored and stored != model.fingerprint():
        logger.warning(f"{root}: stored fingerprint {stored} does not match the loaded tensors")
    logger.debug(f"Loaded {config.name} from {root}")
    return model


def load_tokens(path, config):
    """F64M token matrix checked against the model width"""
    tokens = read_f64m(path)
    if tokens.shape[1] != config.d_model:
        raise ConfigurationError(f"{path}: tokens have {tokens.shape[1]} features, model expects {config.d_model}")
    return tokens
