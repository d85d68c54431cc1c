"""Encoders, pairwise cross-attention fusion and the mean/std pooled classifier.

Modalities are tagged ``e`` (eye movement), ``p`` (PPG) and ``s`` (video
semantic). Eye and PPG pass through a kernel-size-1 Conv1D, ReLU and an LSTM;
the PCA-reduced semantic sequence goes straight into its own LSTM. Every
encoder emits ``d_model`` features per timestep.

Fusion runs multi-head attention for each ordered pair (query modality,
key/value modality), averages the output over query time, and stacks the
pair vectors in the order es, ps, se, pe, sp, ep. The classifier sees the
per-dimension mean and population std over the stacked rows, concatenated.

Parameters live in a flat ``dict[str, np.ndarray]``; names ending in ``.b``
or ``.bo`` are biases and are excluded from L2 regularisation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import Tensor

PARAMS_SCHEMA = "vsfusion.params/1"
MODALITY_TAGS = ("e", "p", "s")
MODALITY_NAMES = {"e": "eye", "p": "ppg", "s": "semantic"}
PAIR_ORDER = ("es", "ps", "se", "pe", "sp", "ep")

_ALIASES = {"e": "e", "eye": "e", "em": "e", "p": "p", "ppg": "p",
            "s": "s", "semantic": "s", "vsi": "s", "sem": "s"}


def parse_modalities(spec) -> tuple[str, ...]:
    """Normalise ``"em,ppg"`` / ``["eye", "vsi"]`` style masks to ordered tags."""
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    tags = set()
    for item in items:
        key = str(item).strip().lower()
        if not key:
            continue
        if key not in _ALIASES:
            raise ValueError(f"unknown modality {item!r}")
        tags.add(_ALIASES[key])
    if not tags:
        raise ValueError("modality mask selects no modality")
    return tuple(t for t in MODALITY_TAGS if t in tags)


def active_pairs(modalities) -> tuple[str, ...]:
    return tuple(p for p in PAIR_ORDER if p[0] in modalities and p[1] in modalities)


@dataclass
class ModelConfig:
    eye_dim: int = 8
    ppg_dim: int = 6
    semantic_dim: int = 25
    n_classes: int = 4
    d_model: int = 64
    conv_filters: int = 16
    n_heads: int = 8
    key_dim: int = 128
    value_dim: int = 64
    hidden_units: int = 64
    l2: float = 0.001
    modalities: tuple = MODALITY_TAGS
    cross_attention: bool = True
    seed: int = 7

    def __post_init__(self):
        self.modalities = parse_modalities(self.modalities)

    def validate(self) -> None:
        for name in ("eye_dim", "ppg_dim", "semantic_dim", "d_model", "conv_filters",
                     "n_heads", "key_dim", "value_dim", "hidden_units"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")

    @property
    def uses_fusion(self) -> bool:
        return self.cross_attention and len(self.modalities) >= 2

    @property
    def classifier_input(self) -> int:
        if self.uses_fusion:
            return 2 * self.d_model
        return self.d_model * len(self.modalities)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def is_weight(name: str) -> bool:
    return not (name.endswith(".b") or name.endswith(".bo"))


def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    U, dm = config.hidden_units, config.d_model
    if U != dm:
        raise ValueError("hidden_units must equal d_model (encoders feed fusion directly)")
    params: dict[str, np.ndarray] = {}

    def lstm(prefix: str, n_in: int) -> None:
        params[f"{prefix}.wx"] = _glorot(rng, (n_in, 4 * U), n_in, 4 * U)
        params[f"{prefix}.wh"] = _glorot(rng, (U, 4 * U), U, 4 * U)
        b = np.zeros(4 * U)
        b[U:2 * U] = 1.0
        params[f"{prefix}.b"] = b

    for tag in config.modalities:
        name = MODALITY_NAMES[tag]
        if tag == "s":
            lstm("enc.semantic.lstm", config.semantic_dim)
            continue
        d_in = config.eye_dim if tag == "e" else config.ppg_dim
        F = config.conv_filters
        params[f"enc.{name}.conv.w"] = _glorot(rng, (d_in, F), d_in, F)
        params[f"enc.{name}.conv.b"] = np.zeros(F)
        lstm(f"enc.{name}.lstm", F)

    if config.uses_fusion:
        H, dk, dv = config.n_heads, config.key_dim, config.value_dim
        for pair in active_pairs(config.modalities):
            params[f"fuse.{pair}.wq"] = _glorot(rng, (H, dm, dk), dm, dk)
            params[f"fuse.{pair}.wk"] = _glorot(rng, (H, dm, dk), dm, dk)
            params[f"fuse.{pair}.wv"] = _glorot(rng, (H, dm, dv), dm, dv)
            params[f"fuse.{pair}.wo"] = _glorot(rng, (H * dv, dm), H * dv, dm)
            params[f"fuse.{pair}.bo"] = np.zeros(dm)

    n_in, K = config.classifier_input, config.n_classes
    params["cls.fc1.w"] = _glorot(rng, (n_in, dm), n_in, dm)
    params["cls.fc1.b"] = np.zeros(dm)
    params["cls.fc2.w"] = _glorot(rng, (dm, K), dm, K)
    params["cls.fc2.b"] = np.zeros(K)
    return params


def count_params(params: dict) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def params_megabytes(n: int) -> float:
    """Size at 4 bytes per parameter, in units of 10^6 bytes."""
    return 4.0 * n / 1e6


# --- building blocks ---------------------------------------------------------------

def _as_batch(x):
    x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))
    if x.ndim == 2:
        return tn.reshape(x, (1,) + x.shape), True
    return x, False


def encode_modality(x, P: dict, tag: str) -> Tensor:
    """(B, T, D) raw block -> (B, T, d_model) encoding."""
    name = MODALITY_NAMES[tag]
    h = x
    if tag != "s":
        h = tn.relu(tn.conv1d_k1(h, P[f"enc.{name}.conv.w"], P[f"enc.{name}.conv.b"]))
    pre = f"enc.{name}.lstm"
    return tn.lstm_seq(h, P[f"{pre}.wx"], P[f"{pre}.wh"], P[f"{pre}.b"])


def encode(inputs: dict, P: dict, modalities=MODALITY_TAGS) -> dict[str, Tensor]:
    """Encode every selected modality; ``inputs`` maps eye/ppg/semantic to (B, T, D)."""
    out = {}
    for tag in modalities:
        x, _ = _as_batch(inputs[MODALITY_NAMES[tag]])
        out[tag] = encode_modality(x, P, tag)
    return out


def mha(query_seq, kv_seq, P: dict, pair: str) -> Tensor:
    """Multi-head cross-attention: queries from ``query_seq``, keys and values from ``kv_seq``.

    Accepts (T, d_model) or (B, T, d_model) inputs and returns the same layout.
    """
    q, squeeze = _as_batch(query_seq)
    kv, _ = _as_batch(kv_seq)
    wq, wk, wv = P[f"fuse.{pair}.wq"], P[f"fuse.{pair}.wk"], P[f"fuse.{pair}.wv"]
    H, dm, dk = wq.shape
    dv = wv.shape[2]
    B, Tq, _ = q.shape
    Tk = kv.shape[1]
    if q.shape[2] != dm or kv.shape[2] != dm or kv.shape[0] != B:
        raise tn.DimensionError(f"mha inputs {q.shape}, {kv.shape} do not match width {dm}")

    def project(x, w, T, d):
        # (B, T, dm) @ (dm, H*d) in one GEMM, then split heads -> (B, H, T, d)
        w2 = tn.reshape(tn.transpose(w, (1, 0, 2)), (dm, H * d))
        y = tn.matmul(tn.reshape(x, (B * T, dm)), w2)
        return tn.transpose(tn.reshape(y, (B, T, H, d)), (0, 2, 1, 3))

    Q = project(q, wq, Tq, dk)
    K = project(kv, wk, Tk, dk)
    V = project(kv, wv, Tk, dv)
    scores = tn.mul(tn.matmul(Q, tn.transpose(K, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    att = tn.matmul(tn.softmax(scores, axis=-1), V)  # (B, H, Tq, dv)
    heads = tn.reshape(tn.transpose(att, (0, 2, 1, 3)), (B, Tq, H * dv))
    out = tn.dense(heads, P[f"fuse.{pair}.wo"], P[f"fuse.{pair}.bo"])
    return tn.reshape(out, out.shape[1:]) if squeeze else out


def pair_weight(f_query, f_kv, P: dict, pair: str) -> Tensor:
    """Cross-attention output averaged over query time: (B, d_model) or (d_model,)."""
    out = mha(f_query, f_kv, P, pair)
    return tn.mean(out, axis=-2)


def fuse(encoded: dict[str, Tensor], P: dict, pairs=PAIR_ORDER) -> tuple[Tensor, dict[str, Tensor]]:
    """Stack pair weights in the fixed pair order -> (B, n_pairs, d_model)."""
    weights = {pair: pair_weight(encoded[pair[0]], encoded[pair[1]], P, pair) for pair in pairs}
    return tn.stack([weights[p] for p in pairs], axis=-2), weights


def pool_stack(stack: Tensor) -> Tensor:
    """concat(mean, std) over the stacked pair rows -> (B, 2*d_model)."""
    mu, sigma = tn.reduce_mean_std(stack, axis=-2)
    return tn.concat([mu, sigma], axis=-1)


def classify_features(features: Tensor, P: dict) -> Tensor:
    hidden = tn.dense(features, P["cls.fc1.w"], P["cls.fc1.b"])
    return tn.softmax(tn.dense(hidden, P["cls.fc2.w"], P["cls.fc2.b"]), axis=-1)


def classify(stack, P: dict) -> Tensor:
    """Class probabilities from a (n_pairs, d_model) or (B, n_pairs, d_model) stack."""
    stack = stack if isinstance(stack, Tensor) else Tensor._wrap(np.asarray(stack, dtype=np.float64))
    return classify_features(pool_stack(stack), P)


def penultimate(inputs: dict, P: dict, config: ModelConfig) -> Tensor:
    """Classifier input features for a batch (before the first dense layer)."""
    mods = config.modalities
    enc = encode(inputs, P, mods)
    if config.uses_fusion:
        stack, _ = fuse(enc, P, active_pairs(mods))
        return pool_stack(stack)
    pooled = [tn.mean(enc[t], axis=1) for t in mods]
    return pooled[0] if len(pooled) == 1 else tn.concat(pooled, axis=-1)


def forward(inputs: dict, P: dict, config: ModelConfig, modalities=None, cross_attention=None) -> Tensor:
    """Full pipeline: (B, K) class probabilities.

    ``modalities`` / ``cross_attention`` default to the config; passing them
    explicitly checks they match the architecture the parameters were built for.
    """
    if modalities is not None and parse_modalities(modalities) != config.modalities:
        raise ValueError(f"parameters were built for modalities {config.modalities}")
    if cross_attention is not None and bool(cross_attention) != config.cross_attention:
        raise ValueError(f"parameters were built with cross_attention={config.cross_attention}")
    return classify_features(penultimate(inputs, P, config), P)


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor._wrap(np.array(v, dtype=np.float64), requires_grad=requires_grad)
            for k, v in params.items()}


def predict_proba(params: dict[str, np.ndarray], inputs: dict, config: ModelConfig,
                  batch_size: int = 256) -> np.ndarray:
    P = as_tensors(params)
    n = next(iter(inputs.values())).shape[0]
    out = []
    for start in range(0, n, batch_size):
        chunk = {k: v[start:start + batch_size] for k, v in inputs.items()}
        out.append(forward(chunk, P, config).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, config.n_classes))


def extract_features(params: dict[str, np.ndarray], inputs: dict, config: ModelConfig,
                     batch_size: int = 256) -> np.ndarray:
    P = as_tensors(params)
    n = next(iter(inputs.values())).shape[0]
    out = [penultimate({k: v[s:s + batch_size] for k, v in inputs.items()}, P, config).data
           for s in range(0, n, batch_size)]
    return np.concatenate(out, axis=0)


# --- serialisation -------------------------------------------------------------------

def params_to_dict(params: dict[str, np.ndarray], config: ModelConfig) -> dict:
    return {
        "schema": PARAMS_SCHEMA,
        "config": config.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": np.asarray(v).reshape(-1).tolist()}
                   for k, v in sorted(params.items())},
    }


def params_from_dict(doc: dict) -> tuple[dict[str, np.ndarray], ModelConfig]:
    if doc.get("schema") != PARAMS_SCHEMA:
        raise ValueError(f"unsupported parameter schema {doc.get('schema')!r}")
    config = ModelConfig.from_dict(doc["config"])
    params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    expected = init_params(config)
    if set(expected) != set(params):
        raise ValueError("parameter names do not match the stored configuration")
    for k, v in expected.items():
        if v.shape != params[k].shape:
            raise ValueError(f"parameter {k} has shape {params[k].shape}, expected {v.shape}")
    return params, config


def save_params(path, params: dict[str, np.ndarray], config: ModelConfig) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params, config), sort_keys=True), encoding="utf-8")


def load_params(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing parameter file {path}")
    return params_from_dict(json.loads(path.read_text(encoding="utf-8")))
