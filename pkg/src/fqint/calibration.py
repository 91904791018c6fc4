"""Calibration, evaluation, diagnostics and model/dataset persistence."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .errors import CalibrationError, DimensionError, FormatError
from .model import (
    EncoderConfig,
    FloatEncoder,
    QuantizedEncoderModel,
    float_reference_forward,
)
from .ptf import PTFObserver, PTFParams, ptf_reconstruction_errors
from .quantizers import MinMaxObserver, QuantParams, quantize_weight_symmetric

log = logging.getLogger(__name__)

LINEAR_LAYERS = ("q", "k", "v", "proj", "fc1", "fc2")
BATCH = 64


@dataclass(frozen=True)
class CalibrationConfig:
    num_samples: int = 1000
    K: int = 3
    weight_bits: int = 8
    act_bits: int = 8
    attn_bits: int = 4
    attention_mode: str = "lis"
    layernorm_mode: str = "ptf"
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise CalibrationError("num_samples must be >= 1")
        if self.K < 0:
            raise CalibrationError("K must be non-negative")


def _is_ptf_site(name: str) -> bool:
    return name.endswith(".in") and (".ln" in name or name.startswith("norm"))


def _select(data: np.ndarray, n: int, seed: int) -> np.ndarray:
    if len(data) < n:
        raise CalibrationError(f"dataset has {len(data)} samples, calibration needs {n}")
    idx = np.sort(np.random.default_rng(seed).choice(len(data), size=n, replace=False))
    return data[idx]


def collect_observers(model: FloatEncoder, data: np.ndarray) -> dict:
    """One float pass over ``data`` recording every quantization site."""
    observers: dict[str, object] = {}

    def tap(name, value):
        obs = observers.get(name)
        if obs is None:
            obs = observers[name] = PTFObserver() if _is_ptf_site(name) else MinMaxObserver()
        obs.update(value)

    for start in range(0, len(data), BATCH):
        float_reference_forward(data[start:start + BATCH], model, tap)
    return observers


def run_calibration(model: FloatEncoder, data, cfg: CalibrationConfig = CalibrationConfig()) -> QuantizedEncoderModel:
    """Post-training calibration: float statistics, then MinMax/PTF finalization."""
    data = np.asarray(data, dtype=np.float64)
    mc = model.config
    if data.ndim != 3 or data.shape[1:] != (mc.tokens, mc.embed_dim):
        raise DimensionError(f"dataset shape {data.shape[1:]} != ({mc.tokens}, {mc.embed_dim})")
    samples = _select(data, cfg.num_samples, cfg.seed)
    observers = collect_observers(model, samples)

    sites: dict[str, QuantParams | PTFParams] = {}
    for name, obs in sorted(observers.items()):
        if isinstance(obs, PTFObserver):
            sites[name] = obs.finalize(cfg.act_bits, cfg.K)
        elif name.endswith(".attn"):
            sites[name] = obs.finalize(cfg.attn_bits)
        else:
            sites[name] = obs.finalize(cfg.act_bits)

    tensors: dict[str, np.ndarray] = {}
    for name, value in model.weights.items():
        if name.endswith(".weight"):
            base = name[: -len(".weight")]
            w_q, scales = quantize_weight_symmetric(value, cfg.weight_bits, axis=0)
            tensors[f"{base}.weight_q"] = w_q.data.astype(np.int8 if cfg.weight_bits <= 8 else np.int16)
            tensors[f"{base}.weight_scale"] = scales
        else:
            tensors[name] = np.asarray(value, dtype=np.float64)
    qcfg = EncoderConfig(**{**mc.to_dict(), "attn_bits": cfg.attn_bits, "act_bits": cfg.act_bits,
                            "weight_bits": cfg.weight_bits, "attention_mode": cfg.attention_mode,
                            "layernorm_mode": cfg.layernorm_mode, "K": cfg.K})
    log.info("calibrated %d sites on %d samples", len(sites), len(samples))
    return QuantizedEncoderModel(qcfg, tensors, sites)


# -- evaluation ---------------------------------------------------------------

def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where((a == b).all(axis=1), 1.0, 0.0))


def _forward(model, data: np.ndarray) -> np.ndarray:
    if isinstance(model, QuantizedEncoderModel):
        return np.stack([model.forward(x) for x in data])
    return float_reference_forward(data, model)


def evaluate(model, data, reference: FloatEncoder, labels=None) -> dict:
    """Compare ``model`` (float or quantized) against the float ``reference``."""
    data = np.asarray(data, dtype=np.float64)
    got = _forward(model, data)
    want = float_reference_forward(data, reference)
    cos = _cosine_rows(got, want)
    diff = np.linalg.norm((got - want).ravel())
    norm = np.linalg.norm(want.ravel())
    pred_got = got.mean(axis=1).argmax(axis=-1)
    pred_want = want.mean(axis=1).argmax(axis=-1)
    metrics = {
        "samples": int(len(data)),
        "cosine_mean": float(cos.mean()),
        "cosine_min": float(cos.min()),
        "relative_l2": float(diff / norm) if norm > 0 else float(diff),
        "argmax_agreement": float((pred_got == pred_want).mean()),
    }
    if labels is not None:
        labels = np.asarray(labels)
        metrics["accuracy"] = float((pred_got == labels).mean())
        metrics["reference_accuracy"] = float((pred_want == labels).mean())
    return metrics


# -- diagnostics --------------------------------------------------------------

def range_ratio(lo: np.ndarray, hi: np.ndarray) -> float:
    """Max channel range over median channel range; 1 when every range is zero."""
    ranges = hi - lo
    med = float(np.median(ranges))
    if med == 0:
        return 1.0 if float(ranges.max()) == 0 else float("inf")
    return float(ranges.max() / med)


def emit_channel_range_report(model: FloatEncoder, data) -> dict:
    data = np.asarray(data, dtype=np.float64)
    stats: dict[str, list] = {}

    def tap(name, value):
        if _is_ptf_site(name):
            flat = value.reshape(-1, value.shape[-1])
            lo, hi = flat.min(axis=0), flat.max(axis=0)
            if name in stats:
                stats[name] = [np.minimum(stats[name][0], lo), np.maximum(stats[name][1], hi)]
            else:
                stats[name] = [lo, hi]

    for start in range(0, len(data), BATCH):
        float_reference_forward(data[start:start + BATCH], model, tap)
    layers = {}
    for name, (lo, hi) in stats.items():
        ranges = hi - lo
        layers[name] = {
            "channels": [{"channel": c, "min": float(lo[c]), "max": float(hi[c])} for c in range(len(lo))],
            "max_range": float(ranges.max()),
            "median_range": float(np.median(ranges)),
            "range_ratio": range_ratio(lo, hi),
        }
    return {"report": "channel-ranges", "samples": int(len(data)), "layers": layers}


def log2_histogram(values, bins: int = 16) -> dict:
    """Bin ``k < bins-1`` holds ``[2^-(k+1), 2^-k)`` (bin 0 also holds 1); the last bin holds ``[0, 2^-(bins-1))``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    counts = np.zeros(bins, dtype=np.int64)
    pos = v > 0
    k = np.full(v.shape, bins - 1)
    k[pos] = np.clip(np.floor(-np.log2(v[pos])).astype(np.int64), 0, bins - 1)
    np.add.at(counts, k, 1)
    total = int(v.size)
    return {
        "edges": [2.0 ** -k for k in range(bins)] + [0.0],
        "counts": counts.tolist(),
        "fractions": (counts / max(total, 1)).tolist(),
        "total": total,
        "fraction_below_1_16": float((v < 1 / 16).mean()) if total else 0.0,
    }


def emit_attention_histogram(model: FloatEncoder, data, bins: int = 16) -> dict:
    data = np.asarray(data, dtype=np.float64)
    attn = []

    def tap(name, value):
        if name.endswith(".attn"):
            attn.append(value.ravel())

    for start in range(0, len(data), BATCH):
        float_reference_forward(data[start:start + BATCH], model, tap)
    values = np.concatenate(attn) if attn else np.zeros(0)
    return {"report": "attention-histogram", "samples": int(len(data)), **log2_histogram(values, bins)}


def layernorm_input_errors(model: FloatEncoder, data, K: int, bit_width: int = 8) -> dict:
    """Squared PTF reconstruction error of every LayerNorm input, calibrated and measured on ``data``."""
    observers = {n: o for n, o in collect_observers(model, np.asarray(data, dtype=np.float64)).items()
                 if isinstance(o, PTFObserver)}
    out = {}
    for name, obs in sorted(observers.items()):
        p = obs.finalize(bit_width, K)
        x = np.concatenate(obs.chunks)
        errs = ptf_reconstruction_errors(x, p.scale, p.zero_point, K, bit_width)
        out[name] = float(errs[p.alpha, np.arange(x.shape[1])].sum())
    return out


def sweep_k(model: FloatEncoder, data, ks=range(0, 5), bit_width: int = 8) -> dict:
    return {int(k): layernorm_input_errors(model, data, k, bit_width) for k in ks}


# -- synthetic data -----------------------------------------------------------

def gen_gaussian(n: int, tokens: int, channels: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(n, tokens, channels))


def gen_channel_variance(n: int, tokens: int, channels: int, seed: int = 0,
                         spread: float = 40.0, outliers: int = 1) -> np.ndarray:
    """Gaussian tokens where ``outliers`` channels are ``spread`` times wider than the rest."""
    rng = np.random.default_rng(seed)
    scale = np.ones(channels)
    scale[rng.choice(channels, size=outliers, replace=False)] = spread
    return rng.normal(size=(n, tokens, channels)) * scale


def toy_labels(data: np.ndarray) -> np.ndarray:
    """Labels for the toy task: channel with the largest token-mean."""
    return data.mean(axis=1).argmax(axis=-1)


# -- persistence ----------------------------------------------------------------

def float_model_blob(model: FloatEncoder) -> bytes:
    meta = {"format": "float-encoder", "config": model.config.to_dict()}
    return container.dumps({k: np.asarray(v, dtype=np.float64) for k, v in model.weights.items()}, meta)


def quantized_model_blob(model: QuantizedEncoderModel) -> bytes:
    tensors = dict(model.tensors)
    meta = {"format": "quantized-encoder", "config": model.config.to_dict()}
    for name, p in model.sites.items():
        if isinstance(p, PTFParams):
            d = p.to_dict()
            tensors[f"site.{name}.alpha"] = np.asarray(d.pop("alpha"), dtype=np.uint8)
            meta[f"site.{name}"] = {"type": "ptf", **d}
        else:
            meta[f"site.{name}"] = {"type": "uniform", **p.to_dict()}
    return container.dumps(tensors, meta)


def save_model(model, path) -> None:
    blob = quantized_model_blob(model) if isinstance(model, QuantizedEncoderModel) else float_model_blob(model)
    Path(path).write_bytes(blob)


def load_model(path):
    tensors, meta = container.load(path)
    kind = meta.get("format")
    config = EncoderConfig.from_dict(meta["config"])
    if kind == "float-encoder":
        return FloatEncoder(config, tensors)
    if kind != "quantized-encoder":
        raise FormatError(f"unknown model format {kind!r}")
    sites: dict[str, QuantParams | PTFParams] = {}
    for key, d in meta.items():
        if not key.startswith("site."):
            continue
        name = key[len("site."):]
        d = dict(d)
        kind = d.pop("type")
        if kind == "ptf":
            d["alpha"] = tensors.pop(f"site.{name}.alpha").astype(np.int64)
            sites[name] = PTFParams.from_dict(d)
        else:
            sites[name] = QuantParams.from_dict(d)
    return QuantizedEncoderModel(config, tensors, sites)


def save_dataset(directory, data: np.ndarray, labels=None, shard_size: int = 256) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for i, start in enumerate(range(0, len(data), shard_size)):
        container.save(out / f"shard_{i:05d}.fqc", {"x": np.asarray(data[start:start + shard_size], dtype=np.float64)},
                       {"format": "dataset-shard"})
    if labels is not None:
        (out / "labels.txt").write_text("".join(f"{int(v)}\n" for v in labels))


def load_dataset(directory) -> tuple[np.ndarray, np.ndarray | None]:
    root = Path(directory)
    shards = sorted(root.glob("shard_*.fqc"))
    if not shards:
        raise FormatError(f"no dataset shards in {root}")
    data = np.concatenate([container.load(p)[0]["x"] for p in shards])
    labels_path = root / "labels.txt"
    labels = None
    if labels_path.exists():
        labels = np.array([int(s) for s in labels_path.read_text().split()], dtype=np.int64)
        if len(labels) != len(data):
            raise FormatError("label count does not match sample count")
    return data, labels
