"""Heterogeneous per-client MLP classifiers with hand-written backprop.

Parameters live in one flat float64 vector; each dense layer contributes a
``fan_in x fan_out`` weight block (row-major) followed by its bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numeric
from .errors import InvalidArgument, ParseError

ARCHITECTURES: dict[str, tuple[int, ...]] = {
    "mlp_small": (32,),
    "mlp_medium": (64,),
    "mlp_large": (128, 64),
}
HETERO_ORDER = ("mlp_small", "mlp_medium", "mlp_large")


@dataclass(frozen=True)
class ModelSpec:
    architecture_id: str
    input_dim: int
    hidden_widths: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        if self.architecture_id not in ARCHITECTURES:
            raise InvalidArgument(f"unknown architecture {self.architecture_id!r}")
        if not self.hidden_widths or min(self.hidden_widths) <= 0:
            raise InvalidArgument("hidden_widths must be non-empty and positive")
        if self.input_dim <= 0 or self.num_classes < 2:
            raise InvalidArgument("input_dim must be positive and num_classes >= 2")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.num_classes)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return list(zip(w[:-1], w[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


def make_spec(architecture_id: str, input_dim: int, num_classes: int, width_scale: int = 1) -> ModelSpec:
    hidden = tuple(w * width_scale for w in ARCHITECTURES[architecture_id])
    return ModelSpec(architecture_id, input_dim, hidden, num_classes)


def assign_architecture(client_id: int, rule: str) -> str:
    """``hetero`` cycles small/medium/large by client index mod 3; otherwise ``rule`` names one architecture."""
    if rule == "hetero":
        return HETERO_ORDER[client_id % 3]
    if rule in ARCHITECTURES:
        return rule
    raise InvalidArgument(f"unknown model assignment rule {rule!r}")


@dataclass
class ClientModel:
    spec: ModelSpec
    params: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.num_params,):
            raise InvalidArgument(
                f"expected {self.spec.num_params} parameters, got {self.params.shape}"
            )

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (weight, bias) into ``params`` (defaults to this model's)."""
        flat = self.params if params is None else params
        out, pos = [], 0
        for fan_in, fan_out in self.spec.layer_shapes:
            w = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = flat[pos : pos + fan_out]
            pos += fan_out
            out.append((w, b))
        return out


def build_model(spec: ModelSpec, seed: int) -> ClientModel:
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_shapes:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return ClientModel(spec, np.concatenate(chunks), seed)


def _check_inputs(model: ClientModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.spec.input_dim:
        raise InvalidArgument(f"input has dim {x.shape[-1]}, model expects {model.spec.input_dim}")
    return x


def forward_batch(model: ClientModel, xs: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
    h = _check_inputs(model, xs)
    layers = model.layers(params)
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
    w, b = layers[-1]
    return h @ w + b


def forward(model: ClientModel, x) -> np.ndarray:
    """Raw logits for a single sample."""
    x = _check_inputs(model, x)
    if x.ndim != 1:
        raise InvalidArgument("forward takes one sample; use forward_batch for many")
    return forward_batch(model, x[None, :])[0]


def objective_and_grad(
    model: ClientModel,
    xs: np.ndarray,
    labels: np.ndarray,
    teachers: np.ndarray | None = None,
    has_teacher: np.ndarray | None = None,
    beta: float = 0.0,
    temperature: float = 1.0,
    distill: str = "kl",
    params: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. the flat parameters.

    Per sample: CE(softmax(z/T), y) + beta * D(softmax(z/T), teacher), where D
    is KL(student || teacher) (``distill="kl"``) or cross-entropy against the
    soft teacher (``distill="soft_ce"``). Samples whose ``has_teacher`` entry
    is False contribute only the CE term.
    """
    flat = model.params if params is None else params
    xs = _check_inputs(model, xs)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = len(xs), model.spec.num_classes
    if n == 0:
        raise InvalidArgument("empty batch")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= C:
        raise InvalidArgument("labels must be one class index per sample in [0, C)")

    layers = model.layers(flat)
    acts = [xs]
    h = xs
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    w_out, b_out = layers[-1]
    logits = h @ w_out + b_out

    probs = numeric.softmax_temp(logits, temperature)
    rows = np.arange(n)
    loss_vec = -np.log(probs[rows, labels])
    dz = numeric.ce_logit_grad(probs, labels, temperature)

    if teachers is not None and beta > 0:
        teachers = np.asarray(teachers, dtype=np.float64)
        if teachers.shape != (n, C):
            raise InvalidArgument(f"teachers must have shape {(n, C)}, got {teachers.shape}")
        mask = np.ones(n, dtype=bool) if has_teacher is None else np.asarray(has_teacher, dtype=bool)
        if mask.any():
            p, t = probs[mask], teachers[mask]
            if distill == "kl":
                q = np.maximum(t, numeric.KL_TEACHER_FLOOR)
                term = np.sum(p * (np.log(np.maximum(p, 1e-300)) - np.log(q)), axis=1)
                g = numeric.kl_logit_grad(p, t, temperature)
            elif distill == "soft_ce":
                term = -np.sum(t * np.log(np.maximum(p, 1e-300)), axis=1)
                g = numeric.soft_ce_logit_grad(p, t, temperature)
            else:
                raise InvalidArgument(f"unknown distillation loss {distill!r}")
            loss_vec[mask] += beta * term
            dz[mask] += beta * g

    dz /= n
    grads = []
    delta = dz
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        a = acts[li]
        grads.append(delta.sum(axis=0))
        grads.append((a.T @ delta).ravel())
        if li > 0:
            delta = (delta @ w.T) * (acts[li] > 0)
    grad = np.concatenate(grads[::-1])
    return float(loss_vec.mean()), grad


def train_step(
    model: ClientModel,
    xs: np.ndarray,
    labels: np.ndarray,
    teachers: np.ndarray | None = None,
    has_teacher: np.ndarray | None = None,
    *,
    beta: float = 0.0,
    temperature: float = 1.0,
    lr: float = 0.01,
    distill: str = "kl",
) -> tuple[ClientModel, float]:
    loss, grad = objective_and_grad(model, xs, labels, teachers, has_teacher, beta, temperature, distill)
    return replace(model, params=numeric.sgd_step(model.params, grad, lr)), loss


def train_batch(
    model: ClientModel,
    batch: Sequence[tuple[np.ndarray, int, np.ndarray | None]],
    beta: float,
    temperature: float,
    lr: float,
) -> tuple[ClientModel, float]:
    """One SGD step on a batch of ``(x, label, teacher_or_None)`` triples."""
    if not batch:
        raise InvalidArgument("empty batch")
    C = model.spec.num_classes
    xs = np.stack([np.asarray(x, dtype=np.float64) for x, _, _ in batch])
    labels = np.array([y for _, y, _ in batch], dtype=np.int64)
    has = np.array([t is not None for _, _, t in batch])
    teachers = np.zeros((len(batch), C))
    for row, (_, _, t) in enumerate(batch):
        if t is not None:
            teachers[row] = t
    return train_step(model, xs, labels, teachers, has, beta=beta, temperature=temperature, lr=lr)


def predict(model: ClientModel, xs: np.ndarray) -> np.ndarray:
    return np.argmax(forward_batch(model, xs), axis=1)


def evaluate(model: ClientModel, xs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose argmax logit equals the label (ties -> lowest class)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InvalidArgument("cannot evaluate on an empty split")
    return float(np.mean(predict(model, xs) == labels))


_CKPT_MAGIC = b"FCMODEL1\n"


def save_checkpoint(model: ClientModel, path: str | Path) -> None:
    header = {
        "architecture_id": model.spec.architecture_id,
        "input_dim": model.spec.input_dim,
        "hidden_widths": list(model.spec.hidden_widths),
        "num_classes": model.spec.num_classes,
        "seed": model.seed,
        "num_params": model.spec.num_params,
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(blob)
        fh.write(model.params.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> ClientModel:
    data = Path(path).read_bytes()
    if not data.startswith(_CKPT_MAGIC):
        raise ParseError("not a model checkpoint", offset=0)
    pos = len(_CKPT_MAGIC)
    end = data.find(b"\n", pos)
    if end < 0:
        raise ParseError("unterminated checkpoint header", offset=pos)
    try:
        header = json.loads(data[pos:end])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad checkpoint header: {exc.msg}", offset=pos + exc.pos) from None
    spec = ModelSpec(
        header["architecture_id"], header["input_dim"], tuple(header["hidden_widths"]), header["num_classes"]
    )
    block = data[end + 1 :]
    if len(block) != 8 * spec.num_params:
        raise ParseError(
            f"parameter block has {len(block)} bytes, expected {8 * spec.num_params}", offset=end + 1
        )
    params = np.frombuffer(block, dtype="<f8").astype(np.float64)
    return ClientModel(spec, params, int(header["seed"]))


def param_bytes(model: ClientModel) -> int:
    return 8 * model.spec.num_params


__all__ = [
    "ARCHITECTURES",
    "ClientModel",
    "ModelSpec",
    "assign_architecture",
    "build_model",
    "evaluate",
    "forward",
    "forward_batch",
    "load_checkpoint",
    "make_spec",
    "objective_and_grad",
    "save_checkpoint",
    "train_batch",
    "train_step",
]
