"""Heterogeneous client models: per-client feature extractor + shared-shape classifier."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .ndgrad import Tensor

ARCH_KINDS = ("linear", "mlp_small", "mlp_wide", "mlp_deep")

DEFAULT_HIDDEN = {
    "linear": (),
    "mlp_small": (32,),
    "mlp_wide": (128,),
    "mlp_deep": (32, 32, 32),
}

DEFAULT_FEATURE_DIM = 64


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    hidden_sizes: tuple[int, ...] | None = None
    feature_dim: int = DEFAULT_FEATURE_DIM
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown arch kind {self.kind!r}; expected one of {ARCH_KINDS}")
        hidden = DEFAULT_HIDDEN[self.kind] if self.hidden_sizes is None else tuple(self.hidden_sizes)
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in hidden))
        if self.kind == "linear" and self.hidden_sizes:
            raise ValueError("linear arch takes no hidden layers")
        if self.kind != "linear" and not self.hidden_sizes:
            raise ValueError(f"{self.kind} needs at least one hidden layer")
        if any(h < 1 for h in self.hidden_sizes) or self.feature_dim < 1:
            raise ValueError(f"layer widths must be positive: {self.hidden_sizes}, {self.feature_dim}")
        if self.activation != "relu":
            raise ValueError(f"only relu activation is supported, got {self.activation!r}")


@dataclass
class ClassifierWeights:
    weight: Tensor  # (feature_dim, num_classes)
    bias: Tensor  # (num_classes,)

    def __post_init__(self):
        if self.weight.data.ndim != 2 or self.bias.data.ndim != 1:
            raise ng.ShapeError(f"classifier needs a matrix and a vector, got {self.weight.shape}, {self.bias.shape}")
        if self.weight.shape[1] != self.bias.shape[0]:
            raise ng.ShapeError(f"classifier weight {self.weight.shape} does not match bias {self.bias.shape}")

    @classmethod
    def from_arrays(cls, weight, bias, requires_grad: bool = False) -> "ClassifierWeights":
        return cls(Tensor(weight, requires_grad=requires_grad), Tensor(bias, requires_grad=requires_grad))

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    @property
    def num_parameters(self) -> int:
        return self.weight.size + self.bias.size

    def arrays(self) -> list[np.ndarray]:
        return [self.weight.data, self.bias.data]

    def copy(self) -> "ClassifierWeights":
        return ClassifierWeights(self.weight.detach(), self.bias.detach())

    def equals(self, other: "ClassifierWeights") -> bool:
        """Bitwise equality."""
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class ClientModel:
    arch: ArchSpec
    input_dim: int
    extractor: list[tuple[Tensor, Tensor]]
    classifier: ClassifierWeights

    def __post_init__(self):
        if self.classifier.feature_dim != self.arch.feature_dim:
            raise ng.ShapeError(
                f"classifier input dim {self.classifier.feature_dim} != feature_dim {self.arch.feature_dim}"
            )

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    def extractor_parameters(self) -> list[Tensor]:
        return [t for layer in self.extractor for t in layer]

    def parameters(self) -> list[Tensor]:
        return self.extractor_parameters() + [self.classifier.weight, self.classifier.bias]

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _dense(rng, fan_in: int, fan_out: int, dtype) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return Tensor(w, requires_grad=True, dtype=dtype), Tensor(b, requires_grad=True, dtype=dtype)


def build_model(arch: ArchSpec, input_dim: int, num_classes: int, seed: int) -> ClientModel:
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, for every layer.

    The head comes from its own random stream, so every model built with
    the same seed starts from the same head whatever its extractor.
    """
    if input_dim < 1 or num_classes < 1:
        raise ValueError(f"input_dim and num_classes must be positive, got {input_dim}, {num_classes}")
    rng = np.random.default_rng([seed, 0])
    dtype = ng.get_default_dtype()
    widths = [input_dim, *arch.hidden_sizes, arch.feature_dim]
    extractor = [_dense(rng, widths[i], widths[i + 1], dtype) for i in range(len(widths) - 1)]
    head = init_classifier(arch.feature_dim, num_classes, seed)
    w = Tensor(head.weight.data, requires_grad=True, dtype=dtype)
    b = Tensor(head.bias.data, requires_grad=True, dtype=dtype)
    return ClientModel(arch, input_dim, extractor, ClassifierWeights(w, b))


def init_classifier(feature_dim: int, num_classes: int, seed: int) -> ClassifierWeights:
    """The head ``build_model`` would create for ``seed``, as a standalone payload."""
    w, b = _dense(np.random.default_rng([seed, 1]), feature_dim, num_classes, ng.get_default_dtype())
    return ClassifierWeights(w.detach(), b.detach())


def _as_input(m: ClientModel, x) -> Tensor:
    if not isinstance(x, Tensor):
        arr = np.asarray(x)
        x = Tensor(arr.reshape(len(arr), -1))
    elif x.data.ndim != 2:
        x = Tensor(x.data.reshape(x.shape[0], -1))
    if x.shape[1] != m.input_dim:
        raise ng.ShapeError(f"model expects input width {m.input_dim}, got batch shape {x.shape}")
    return x


def forward_features(m: ClientModel, x) -> Tensor:
    h = _as_input(m, x)
    last = len(m.extractor) - 1
    for i, (w, b) in enumerate(m.extractor):
        h = ng.bias_add(ng.matmul(h, w), b)
        if i < last:
            h = ng.relu(h)
    return h


def forward_logits(m: ClientModel, features: Tensor) -> Tensor:
    if features.data.ndim != 2 or features.shape[1] != m.arch.feature_dim:
        raise ng.ShapeError(f"features must be (batch, {m.arch.feature_dim}), got {features.shape}")
    return ng.bias_add(ng.matmul(features, m.classifier.weight), m.classifier.bias)


def predict(m: ClientModel, x) -> np.ndarray:
    return forward_logits(m, forward_features(m, x)).data.argmax(axis=1)


def get_classifier(m: ClientModel) -> ClassifierWeights:
    return m.classifier.copy()


def set_classifier(m: ClientModel, c: ClassifierWeights) -> None:
    """Overwrite the head in place; parameter tensors keep their identity."""
    mine = m.classifier
    if c.weight.shape != mine.weight.shape or c.bias.shape != mine.bias.shape:
        raise ng.ShapeError(
            f"classifier shape {c.weight.shape}/{c.bias.shape} does not fit model head "
            f"{mine.weight.shape}/{mine.bias.shape}"
        )
    mine.weight.data[...] = c.weight.data
    mine.bias.data[...] = c.bias.data


def get_weights(m: ClientModel) -> list[np.ndarray]:
    return [p.data.copy() for p in m.parameters()]


def set_weights(m: ClientModel, arrays) -> None:
    params = m.parameters()
    if len(arrays) != len(params) or any(p.shape != np.shape(a) for p, a in zip(params, arrays)):
        raise ng.ShapeError(
            f"weight list {[np.shape(a) for a in arrays]} does not match model {[p.shape for p in params]}"
        )
    for p, a in zip(params, arrays):
        p.data[...] = a


def weight_shapes(m: ClientModel) -> list[tuple]:
    return [p.shape for p in m.parameters()]


# ---------------------------------------------------------------------------
# snapshots: b"FCAM" | version u32 | header_len u32 | key=value header | weight block
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"FCAM"
MODEL_VERSION = 1


def _header(m: ClientModel) -> str:
    lines = [
        f"kind={m.arch.kind}",
        f"hidden_sizes={','.join(str(h) for h in m.arch.hidden_sizes)}",
        f"feature_dim={m.arch.feature_dim}",
        f"activation={m.arch.activation}",
        f"input_dim={m.input_dim}",
        f"num_classes={m.num_classes}",
    ]
    return "\n".join(lines) + "\n"


def save_model(path, m: ClientModel) -> None:
    header = _header(m).encode("utf-8")
    blob = ng.encode_weights([p.data for p in m.parameters()])
    Path(path).write_bytes(MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(header)) + header + blob)


def load_model(path) -> ClientModel:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ng.SnapshotFormatError(f"{path}: bad magic {data[:4]!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != MODEL_VERSION:
        raise ng.SnapshotFormatError(f"{path}: unsupported model snapshot version {version}")
    header = dict(
        line.split("=", 1) for line in data[12 : 12 + hlen].decode("utf-8").splitlines() if line
    )
    hidden = tuple(int(h) for h in header["hidden_sizes"].split(",") if h)
    arch = ArchSpec(header["kind"], hidden, int(header["feature_dim"]), header["activation"])
    arrays, used = ng.decode_weights(data[12 + hlen :])
    if 12 + hlen + used != len(data):
        raise ng.SnapshotFormatError(f"{path}: trailing bytes after weights")
    with ng.precision(np.float32):
        m = build_model(arch, int(header["input_dim"]), int(header["num_classes"]), seed=0)
    set_weights(m, arrays)
    return m
