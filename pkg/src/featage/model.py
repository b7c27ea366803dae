"""Age-conditioned linear encoder/decoder over embedding space.

The model consumes a feature vector plus the source and target ages (each
divided by ``age_scale``, appended as two extra input coordinates) and
produces a feature vector of the same dimension. Encoder and decoder are
stacks of fully connected layers with no activation, so the whole model is
one affine map; the default is a single layer on each side with the latent
size equal to the feature size.

Training minimizes the mean squared distance between the predicted vector
and the genuine target vector over all within-subject (source age, target
age) record pairs, using hand-rolled Adam on analytic gradients. Identity
initialization makes the untrained model an exact no-op on the feature
block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, ValidationError
from .store import EmbeddingRecord, LongitudinalDataset, vec_norm

MODEL_MAGIC = b"FAGM"
MODEL_VERSION = 1

RENORM_TOL = 1e-12


def renorm(v: np.ndarray) -> np.ndarray:
    """Exact unit renormalization for scoring; no-op if already unit."""
    n = vec_norm(v)
    if n == 0.0:
        raise ValidationError("cannot renormalize a zero vector")
    if abs(n - 1.0) <= RENORM_TOL:
        return v
    return v / n


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValidationError(
                f"layer shape mismatch: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("layer contains non-finite parameters")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias


@dataclass(frozen=True)
class ModelSpec:
    """Structural configuration: layer counts, latent size, age scaling."""

    latent_dim: int | None = None  # None -> same as feature dim
    encoder_layers: int = 1
    decoder_layers: int = 1
    age_scale: float = 100.0
    init: str = "identity"  # or "random"

    def resolve_latent(self, dim: int) -> int:
        return dim if self.latent_dim is None else int(self.latent_dim)


class AgeProgressionModel:
    """Encoder/decoder pair acting on (feature, source age, target age)."""

    def __init__(
        self,
        dim: int,
        latent_dim: int,
        encoder: list[LinearLayer],
        decoder: list[LinearLayer],
        age_scale: float = 100.0,
    ):
        if dim < 1 or latent_dim < 1:
            raise ValidationError(f"bad dimensions: d={dim}, k={latent_dim}")
        if not encoder or not decoder:
            raise ValidationError("encoder and decoder each need at least one layer")
        if age_scale <= 0:
            raise ValidationError(f"age_scale must be positive, got {age_scale}")
        self.dim = int(dim)
        self.latent_dim = int(latent_dim)
        self.encoder = list(encoder)
        self.decoder = list(decoder)
        self.age_scale = float(age_scale)
        expected_in = dim + 2
        for name, stack, final_out in (("encoder", self.encoder, latent_dim),
                                       ("decoder", self.decoder, dim)):
            for layer in stack:
                if layer.weight.shape[1] != expected_in:
                    raise ValidationError(
                        f"{name} layer expects input {layer.weight.shape[1]}, got {expected_in}"
                    )
                expected_in = layer.weight.shape[0]
            if expected_in != final_out:
                raise ValidationError(
                    f"{name} stack ends at {expected_in}, expected {final_out}"
                )

    @property
    def layers(self) -> list[LinearLayer]:
        return self.encoder + self.decoder

    def conditioned(self, phi: np.ndarray, t1: float, t2: float) -> np.ndarray:
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (self.dim,):
            raise ValidationError(f"expected a {self.dim}-vector, got shape {phi.shape}")
        if t1 < 0 or t2 < 0:
            raise ValidationError(f"ages must be >= 0, got ({t1}, {t2})")
        return np.concatenate([phi, [t1 / self.age_scale, t2 / self.age_scale]])

    def forward(self, phi: np.ndarray, t1: float, t2: float) -> np.ndarray:
        """Raw decoder output; not renormalized (this is what the loss sees)."""
        x = self.conditioned(phi, t1, t2)
        for layer in self.layers:
            x = layer.apply(x)
        return x

    def forward_unit(self, phi: np.ndarray, t1: float, t2: float) -> np.ndarray:
        """Forward pass renormalized to unit length, for scoring."""
        return renorm(self.forward(phi, t1, t2))

    def forward_batch(self, phis: np.ndarray, t1s, t2s) -> np.ndarray:
        """Vectorized raw forward over rows of ``phis``.

        ``t1s``/``t2s`` may be scalars or per-row arrays.
        """
        phis = np.asarray(phis, dtype=np.float64)
        if phis.ndim != 2 or phis.shape[1] != self.dim:
            raise ValidationError(f"expected (n, {self.dim}) inputs, got {phis.shape}")
        n = phis.shape[0]
        col1 = np.broadcast_to(np.asarray(t1s, dtype=np.float64), (n,)) / self.age_scale
        col2 = np.broadcast_to(np.asarray(t2s, dtype=np.float64), (n,)) / self.age_scale
        x = np.hstack([phis, col1[:, None], col2[:, None]])
        for layer in self.layers:
            x = layer.apply(x)
        return x

    def compose(self) -> tuple[np.ndarray, np.ndarray]:
        """Collapse all layers into one affine map (W, b) on the conditioned input."""
        w = np.eye(self.dim + 2)
        b = np.zeros(self.dim + 2)
        for layer in self.layers:
            b = layer.weight @ b + layer.bias
            w = layer.weight @ w
        return w, b

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out


def _stack_dims(dim: int, latent: int, n_layers: int, first_in: int, last_out: int) -> list[tuple[int, int]]:
    """(out, in) shapes for a stack whose interior width is the latent size."""
    dims = []
    in_dim = first_in
    for i in range(n_layers):
        out_dim = last_out if i == n_layers - 1 else latent
        dims.append((out_dim, in_dim))
        in_dim = out_dim
    return dims


def init_model(d: int, seed: int = 0, spec: ModelSpec | None = None) -> AgeProgressionModel:
    """Build a model; identity init makes forward(phi, t1, t2) == phi exactly.

    Identity weights are rectangular eyes (ones down the feature diagonal,
    zero columns for the two age inputs), biases zero. Random init draws
    Gaussian weights scaled by 1/sqrt(fan_in); the seed only matters there.
    """
    spec = spec or ModelSpec()
    if d < 1:
        raise ConfigError(f"feature dimension must be >= 1, got {d}")
    if spec.encoder_layers < 1 or spec.decoder_layers < 1:
        raise ConfigError("encoder_layers and decoder_layers must be >= 1")
    if spec.init not in ("identity", "random"):
        raise ConfigError(f"unknown init mode {spec.init!r}")
    k = spec.resolve_latent(d)
    enc_dims = _stack_dims(d, k, spec.encoder_layers, d + 2, k)
    dec_dims = _stack_dims(d, k, spec.decoder_layers, k, d)
    rng = np.random.default_rng(seed)

    def build(dims):
        layers = []
        for out_dim, in_dim in dims:
            if spec.init == "identity":
                w = np.eye(out_dim, in_dim)
            else:
                w = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
            layers.append(LinearLayer(w, np.zeros(out_dim)))
        return layers

    return AgeProgressionModel(d, k, build(enc_dims), build(dec_dims), spec.age_scale)


# ---------------------------------------------------------------------------
# Training pairs and loss
# ---------------------------------------------------------------------------


@dataclass
class TrainingPairSet:
    """Ordered genuine (input record, target record) pairs."""

    pairs: list[tuple[EmbeddingRecord, EmbeddingRecord]]

    def __len__(self) -> int:
        return len(self.pairs)


def build_pairs(ds: LongitudinalDataset, include_same_age: bool = False) -> TrainingPairSet:
    """All ordered within-subject record pairs across different ages.

    Both directions are generated (the model learns progression and
    regression from the same data). Same-age pairs between distinct images
    are added only when requested.
    """
    pairs: list[tuple[EmbeddingRecord, EmbeddingRecord]] = []
    for sid in ds.subjects:
        recs = ds.by_subject[sid]
        for a in recs:
            for b in recs:
                if a.key == b.key:
                    continue
                if a.age == b.age and not include_same_age:
                    continue
                pairs.append((a, b))
    return TrainingPairSet(pairs)


def _batch_arrays(model: AgeProgressionModel, pairs) -> tuple[np.ndarray, np.ndarray]:
    n = len(pairs)
    x = np.zeros((n, model.dim + 2))
    y = np.zeros((n, model.dim))
    for i, (src, tgt) in enumerate(pairs):
        x[i, : model.dim] = src.vector
        x[i, model.dim] = src.age / model.age_scale
        x[i, model.dim + 1] = tgt.age / model.age_scale
        y[i] = tgt.vector
    return x, y


def _forward_all(model: AgeProgressionModel, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    for layer in model.layers:
        acts.append(layer.apply(acts[-1]))
    return acts


def _loss_and_grads(model, x, y, want_grads=True):
    acts = _forward_all(model, x)
    resid = acts[-1] - y
    loss_val = float(np.mean(np.sum(resid * resid, axis=1)))
    if not want_grads:
        return loss_val, None
    n = x.shape[0]
    delta = (2.0 / n) * resid
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        grads.append((delta.T @ acts[i], delta.sum(axis=0)))
        if i > 0:
            delta = delta @ layer.weight
    grads.reverse()
    return loss_val, grads


def _require_pairs(pairs) -> list:
    items = pairs.pairs if isinstance(pairs, TrainingPairSet) else list(pairs)
    if not items:
        raise ValidationError("batch of training pairs is empty")
    for src, tgt in items:
        if src.subject_id != tgt.subject_id:
            raise ValidationError(
                f"impostor pair ({src.subject_id!r}, {tgt.subject_id!r}) in training batch"
            )
    return items


def loss(model: AgeProgressionModel, pairs) -> float:
    """Mean squared distance between raw forward outputs and target vectors."""
    items = _require_pairs(pairs)
    x, y = _batch_arrays(model, items)
    val, _ = _loss_and_grads(model, x, y, want_grads=False)
    return val


def gradients(model: AgeProgressionModel, pairs) -> list[tuple[np.ndarray, np.ndarray]]:
    """Analytic (d/dW, d/db) of the batch loss, per layer, encoder first."""
    items = _require_pairs(pairs)
    x, y = _batch_arrays(model, items)
    _, grads = _loss_and_grads(model, x, y)
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    beta1: float = 0.5
    beta2: float = 0.9
    epsilon: float = 1e-8
    learning_rate: float = 0.1


def init_adam_state(
    model: AgeProgressionModel,
    learning_rate: float = 0.1,
    beta1: float = 0.5,
    beta2: float = 0.9,
    epsilon: float = 1e-8,
) -> AdamState:
    params = model.parameters()
    return AdamState(
        step=0,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        learning_rate=learning_rate,
    )


def adam_step(
    model: AgeProgressionModel,
    grads: list[tuple[np.ndarray, np.ndarray]],
    state: AdamState,
    learning_rate: float | None = None,
) -> AdamState:
    """One bias-corrected Adam update, applied to the model in place."""
    params = model.parameters()
    flat = [g for pair in grads for g in pair]
    if len(flat) != len(params):
        raise ValidationError(f"expected {len(params)} gradient arrays, got {len(flat)}")
    lr = state.learning_rate if learning_rate is None else learning_rate
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, flat, state.first_moment, state.second_moment):
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    spec: ModelSpec = field(default_factory=ModelSpec)
    iterations: int = 2000
    learning_rate: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.9
    epsilon: float = 1e-8
    lr_schedule: str = "linear"  # "linear" decays to 0; "constant" holds
    batch_size: int = 256
    full_batch_limit: int = 4096
    include_same_age: bool = False
    seed: int = 0


@dataclass
class TrainResult:
    model: AgeProgressionModel
    loss_history: list[float]

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1]


def train(ds: LongitudinalDataset, config: TrainConfig | None = None) -> TrainResult:
    """Fit the model on all genuine pairs of the dataset.

    Full-batch when the pair set is small enough, otherwise seeded
    mini-batches with one optimizer step per iteration. The recorded
    history holds the pre-step batch loss per iteration plus the final
    full-set loss, so history[0] is the loss of the initial model and
    history[-1] the loss of the returned one. Deterministic for a fixed
    (dataset, config) including the mini-batch draw order.

    The default learning-rate schedule decays linearly from
    ``learning_rate`` to zero: with a constant step size, Adam's
    bias-corrected updates keep a fixed magnitude and orbit the optimum
    instead of settling onto it.
    """
    config = config or TrainConfig()
    if config.iterations < 0:
        raise ConfigError(f"iterations must be >= 0, got {config.iterations}")
    if config.lr_schedule not in ("linear", "constant"):
        raise ConfigError(f"unknown lr_schedule {config.lr_schedule!r}")
    pair_set = build_pairs(ds, include_same_age=config.include_same_age)
    if not pair_set.pairs:
        raise ValidationError("dataset yields no genuine training pairs")
    model = init_model(ds.dim, config.seed, config.spec)
    x_all, y_all = _batch_arrays(model, pair_set.pairs)
    n = len(pair_set)
    full_batch = n <= config.full_batch_limit
    rng = np.random.default_rng(config.seed)
    state = init_adam_state(
        model, config.learning_rate, config.beta1, config.beta2, config.epsilon
    )
    history: list[float] = []
    for it in range(config.iterations):
        if full_batch:
            xb, yb = x_all, y_all
        else:
            idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
            xb, yb = x_all[idx], y_all[idx]
        batch_loss, grads = _loss_and_grads(model, xb, yb)
        history.append(batch_loss)
        if config.lr_schedule == "linear":
            lr = config.learning_rate * (1.0 - it / config.iterations)
        else:
            lr = config.learning_rate
        adam_step(model, grads, state, learning_rate=lr)
    for p in model.parameters():
        if not np.all(np.isfinite(p)):
            raise ValidationError("training diverged: non-finite parameters")
    final, _ = _loss_and_grads(model, x_all, y_all, want_grads=False)
    history.append(final)
    return TrainResult(model, history)


# ---------------------------------------------------------------------------
# Serialization: magic FAGM, version 1, u32 d/k/layer counts, f64 age_scale,
# then row-major f64 weights and biases per layer, encoder first. Layer
# shapes are implied by (d, k, counts) since interior widths equal k.
# ---------------------------------------------------------------------------


def save_model(model: AgeProgressionModel) -> bytes:
    parts = [
        MODEL_MAGIC,
        struct.pack("<B", MODEL_VERSION),
        struct.pack(
            "<IIII",
            model.dim,
            model.latent_dim,
            len(model.encoder),
            len(model.decoder),
        ),
        struct.pack("<d", model.age_scale),
    ]
    for layer in model.layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def load_model(data: bytes) -> AgeProgressionModel:
    view = memoryview(data)
    pos = 0

    def take(nbytes: int, what: str) -> memoryview:
        nonlocal pos
        if pos + nbytes > len(view):
            raise DataFormatError(f"truncated model stream while reading {what}")
        chunk = view[pos : pos + nbytes]
        pos += nbytes
        return chunk

    if bytes(take(4, "magic")) != MODEL_MAGIC:
        raise DataFormatError("bad magic bytes, not a FAGM stream")
    version = take(1, "version")[0]
    if version != MODEL_VERSION:
        raise DataFormatError(f"unsupported FAGM version {version}")
    d, k, n_enc, n_dec = struct.unpack("<IIII", take(16, "dimensions"))
    if d < 1 or k < 1 or n_enc < 1 or n_dec < 1:
        raise DataFormatError(f"invalid model dimensions (d={d}, k={k}, enc={n_enc}, dec={n_dec})")
    (age_scale,) = struct.unpack("<d", take(8, "age_scale"))

    def read_stack(dims):
        layers = []
        for out_dim, in_dim in dims:
            w = np.frombuffer(take(8 * out_dim * in_dim, "weights"), dtype="<f8").reshape(
                out_dim, in_dim
            )
            b = np.frombuffer(take(8 * out_dim, "bias"), dtype="<f8")
            layers.append(LinearLayer(w.copy(), b.copy()))
        return layers

    encoder = read_stack(_stack_dims(d, k, n_enc, d + 2, k))
    decoder = read_stack(_stack_dims(d, k, n_dec, k, d))
    if pos != len(view):
        raise DataFormatError(f"{len(view) - pos} trailing bytes in model stream")
    try:
        return AgeProgressionModel(d, k, encoder, decoder, age_scale)
    except ValidationError as exc:
        raise DataFormatError(f"model stream violates the dimension chain: {exc}") from exc
