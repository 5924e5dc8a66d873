"""Base embedding functions with unit-norm outputs.

Every model maps inputs of dimension ``input_dim`` to vectors on the unit
sphere of dimension ``embed_dim``. Analytic kinds (constant, circle, step)
have closed-form Gaussian smoothings used as test oracles; ``MlpModel`` is a
small trainable network with a hard output normalization; ``FileBackedModel``
serves embeddings computed elsewhere, keyed by (point id, noise index).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateEmbeddingError,
    DivergenceError,
    DomainError,
    MissingEmbeddingError,
    NoOracleError,
    NotDifferentiableError,
    ParseError,
    SchemaError,
    ShapeError,
    ValidationError,
)

MODEL_SCHEMA = "protosmooth.model/1"
DEGENERATE_NORM = 1e-12
FILE_NORM_TOL = 1e-6


def _as_batch(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise ShapeError(f"expected inputs of dimension {dim}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ShapeError("inputs contain non-finite values")
    return X


class EmbeddingModel:
    """Common interface. Subclasses implement ``forward`` and, if differentiable, ``vjp``."""

    kind = "abstract"
    differentiable = True

    def __init__(self, input_dim: int, embed_dim: int):
        self.input_dim = int(input_dim)
        self.embed_dim = int(embed_dim)

    def forward(self, X) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, X, U) -> np.ndarray:
        raise NotDifferentiableError(f"{self.kind} model has no vector-Jacobian product")

    def embed(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ShapeError(f"embed expects a single input vector, got shape {x.shape}")
        return self.forward(x[None, :])[0]

    def noisy_embeddings(self, x, stream, start: int, n: int) -> np.ndarray:
        """Embeddings f(x + eps_i) for stream indices ``start .. start+n-1``."""
        x = _as_batch(x, self.input_dim)[0]
        return self.forward(x + stream.batch(start, n))


class ConstantModel(EmbeddingModel):
    kind = "constant"

    def __init__(self, vector, input_dim: int):
        vector = np.asarray(vector, dtype=np.float64)
        norm = np.linalg.norm(vector)
        if vector.ndim != 1 or abs(norm - 1.0) > 1e-9:
            raise ValidationError(f"constant embedding must be a unit vector (norm {norm!r})")
        super().__init__(input_dim, vector.size)
        self.vector = vector

    def forward(self, X):
        X = _as_batch(X, self.input_dim)
        return np.broadcast_to(self.vector, (X.shape[0], self.embed_dim)).copy()

    def vjp(self, X, U):
        X = _as_batch(X, self.input_dim)
        return np.zeros_like(X)


class CircleModel(EmbeddingModel):
    """f(x) = (cos <w, x>, sin <w, x>)."""

    kind = "circle"

    def __init__(self, direction):
        w = np.asarray(direction, dtype=np.float64)
        if w.ndim != 1:
            raise ShapeError("circle direction must be a vector")
        super().__init__(w.size, 2)
        self.direction = w

    def forward(self, X):
        X = _as_batch(X, self.input_dim)
        phase = X @ self.direction
        return np.stack([np.cos(phase), np.sin(phase)], axis=1)

    def vjp(self, X, U):
        X = _as_batch(X, self.input_dim)
        U = np.asarray(U, dtype=np.float64).reshape(X.shape[0], 2)
        phase = X @ self.direction
        scale = -U[:, 0] * np.sin(phase) + U[:, 1] * np.cos(phase)
        return scale[:, None] * self.direction[None, :]


class StepModel(EmbeddingModel):
    """e1 where x[axis] >= 0, e2 elsewhere."""

    kind = "step"

    def __init__(self, input_dim: int, embed_dim: int = 2, axis: int = 0):
        if embed_dim < 2:
            raise ShapeError("step model needs embed_dim >= 2")
        if not 0 <= axis < input_dim:
            raise ShapeError(f"axis {axis} out of range for input_dim {input_dim}")
        super().__init__(input_dim, embed_dim)
        self.axis = int(axis)

    def forward(self, X):
        X = _as_batch(X, self.input_dim)
        out = np.zeros((X.shape[0], self.embed_dim))
        pos = X[:, self.axis] >= 0.0
        out[pos, 0] = 1.0
        out[~pos, 1] = 1.0
        return out

    def vjp(self, X, U):
        # zero almost everywhere
        X = _as_batch(X, self.input_dim)
        return np.zeros_like(X)


@dataclass
class MlpSpec:
    layer_dims: Sequence[int]
    activation: str = "tanh"

    def __post_init__(self):
        dims = [int(v) for v in self.layer_dims]
        if len(dims) < 3 or any(v <= 0 for v in dims):
            raise ShapeError(f"layer_dims needs input, >=1 hidden, output (all positive): {dims}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        self.layer_dims = dims


class MlpModel(EmbeddingModel):
    """tanh MLP followed by division by the output norm.

    Inference uses ``np.einsum`` rather than BLAS so that each row's result
    does not depend on the batch it was computed in.
    """

    kind = "mlp"

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) < 2 or len(weights) != len(biases):
            raise SchemaError("mlp needs at least two layers with matching biases")
        ws = [np.array(w, dtype=np.float64) for w in weights]
        bs = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise SchemaError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and ws[i - 1].shape[1] != w.shape[0]:
                raise SchemaError(f"layer {i}: expects {w.shape[0]} inputs, previous gives {ws[i - 1].shape[1]}")
        super().__init__(ws[0].shape[0], ws[-1].shape[1])
        self.weights = ws
        self.biases = bs

    @classmethod
    def initialize(cls, spec: MlpSpec, seed) -> "MlpModel":
        rng = np.random.default_rng(seed)
        dims = spec.layer_dims
        ws = [rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
        bs = [np.zeros(b) for b in dims[1:]]
        return cls(ws, bs)

    @property
    def layer_dims(self):
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    def _raw(self, X, matmul):
        acts = [X]
        h = X
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(matmul(h, w) + b)
            acts.append(h)
        out = matmul(h, self.weights[-1]) + self.biases[-1]
        return acts, out

    @staticmethod
    def _normalize(out):
        norms = np.linalg.norm(out, axis=1)
        bad = np.flatnonzero(norms < DEGENERATE_NORM)
        if bad.size:
            raise DegenerateEmbeddingError(
                f"pre-normalization output norm {norms[bad[0]]!r} < {DEGENERATE_NORM} at row {bad[0]}"
            )
        return out / norms[:, None], norms

    def forward(self, X):
        X = _as_batch(X, self.input_dim)
        _, out = self._raw(X, _rowstable_matmul)
        return self._normalize(out)[0]

    def vjp(self, X, U):
        X = _as_batch(X, self.input_dim)
        U = np.asarray(U, dtype=np.float64).reshape(X.shape[0], self.embed_dim)
        acts, out = self._raw(X, np.matmul)
        y, norms = self._normalize(out)
        grad = (U - y * np.sum(y * U, axis=1, keepdims=True)) / norms[:, None]
        return self._backward(acts, grad)[0]

    def _backward(self, acts, grad_out):
        """Backprop d(loss)/d(raw output) through the layers; returns (dX, dWs, dbs)."""
        dws = [None] * len(self.weights)
        dbs = [None] * len(self.biases)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            dws[i] = acts[i].T @ g
            dbs[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (1.0 - acts[i] ** 2)
        return g, dws, dbs


def _rowstable_matmul(a, b):
    return np.einsum("ij,jk->ik", a, b)


class FileBackedModel(EmbeddingModel):
    """Embeddings looked up by (point id, noise index); no gradients."""

    kind = "file-backed"
    differentiable = False

    def __init__(self, table: dict, embed_dim: int | None = None):
        if not table and embed_dim is None:
            raise ValidationError("empty embedding table")
        clean = {}
        for pid, rows in table.items():
            rows = np.array(rows, dtype=np.float64)
            if rows.ndim != 2:
                raise SchemaError(f"point {pid}: embeddings must be a 2-D array")
            if embed_dim is None:
                embed_dim = rows.shape[1]
            if rows.shape[1] != embed_dim:
                raise SchemaError(f"point {pid}: dimension {rows.shape[1]} != {embed_dim}")
            norms = np.linalg.norm(rows, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > FILE_NORM_TOL)
            if bad.size:
                raise ValidationError(
                    f"row (point {pid}, noise index {bad[0]}) has norm {norms[bad[0]]!r}, expected 1"
                )
            clean[str(pid)] = rows
        super().__init__(0, embed_dim)
        self.table = clean

    def _rows(self, point_id):
        try:
            return self.table[str(point_id)]
        except KeyError:
            raise MissingEmbeddingError(f"no embeddings for point {point_id!r}") from None

    def lookup(self, point_id, noise_index: int) -> np.ndarray:
        rows = self._rows(point_id)
        if not 0 <= noise_index < rows.shape[0]:
            raise MissingEmbeddingError(f"point {point_id!r} has no noise index {noise_index}")
        return rows[noise_index].copy()

    def embed(self, key):
        point_id, noise_index = key
        return self.lookup(point_id, noise_index)

    def forward(self, X):
        raise NotDifferentiableError("file-backed model is keyed by (point id, noise index), not inputs")

    def noisy_embeddings(self, x, stream, start, n):
        rows = self._rows(x)
        if start + n > rows.shape[0]:
            raise MissingEmbeddingError(
                f"point {x!r} has {rows.shape[0]} noise indices, needed up to {start + n - 1}"
            )
        return rows[start:start + n]


def embed(model: EmbeddingModel, x) -> np.ndarray:
    return model.embed(x)


def embed_vjp(model: EmbeddingModel, x, upstream) -> np.ndarray:
    if not model.differentiable:
        raise NotDifferentiableError(f"{model.kind} model is not differentiable")
    return model.vjp(np.asarray(x, dtype=np.float64)[None, :], np.asarray(upstream)[None, :])[0]


def _std_normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def smoothed_oracle(model: EmbeddingModel, x, sigma: float) -> np.ndarray:
    """Exact E f(x + eps), eps ~ N(0, sigma^2 I), for analytic model kinds.

    Accepts one input (returns a d-vector) or a batch (returns (n, d)).
    """
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    single = np.ndim(x) == 1
    X = _as_batch(x, model.input_dim)
    if isinstance(model, ConstantModel):
        out = np.tile(model.vector, (len(X), 1))
    elif isinstance(model, CircleModel):
        w = model.direction
        damp = math.exp(-0.5 * sigma**2 * float(w @ w))
        phase = X @ w
        out = damp * np.stack([np.cos(phase), np.sin(phase)], axis=1)
    elif isinstance(model, StepModel):
        p = np.array([_std_normal_cdf(v / sigma) for v in X[:, model.axis]])
        out = np.zeros((len(X), model.embed_dim))
        out[:, 0], out[:, 1] = p, 1.0 - p
    else:
        raise NoOracleError(f"no closed-form smoothing for {model.kind} model")
    return out[0] if single else out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class NoiseAugmentation:
    sigma: float = 1.0
    probability: float = 0.3


@dataclass
class _Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def prototypical_loss(model: MlpModel, support_x, support_y, query_x, query_y):
    """Episode loss and parameter gradients.

    Loss is the mean over queries of cross-entropy on logits -||f(q) - c_k||^2,
    with prototypes c_k the mean support embedding of class k.
    """
    X = np.concatenate([support_x, query_x])
    acts, out = model._raw(X, np.matmul)
    emb, norms = model._normalize(out)
    ns = len(support_x)
    s_emb, q_emb = emb[:ns], emb[ns:]
    classes = sorted(set(int(c) for c in support_y))
    index = {c: i for i, c in enumerate(classes)}
    s_idx = np.array([index[int(c)] for c in support_y])
    q_idx = np.array([index[int(c)] for c in query_y])
    counts = np.bincount(s_idx, minlength=len(classes)).astype(np.float64)
    protos = np.zeros((len(classes), emb.shape[1]))
    np.add.at(protos, s_idx, s_emb)
    protos /= counts[:, None]

    diff = q_emb[:, None, :] - protos[None, :, :]
    logits = -np.sum(diff**2, axis=2)
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.sum(np.exp(logits), axis=1, keepdims=True))
    nq = len(query_x)
    loss = -np.mean(logp[np.arange(nq), q_idx])

    dlogits = np.exp(logp)
    dlogits[np.arange(nq), q_idx] -= 1.0
    dlogits /= nq
    d_q = -2.0 * np.sum(dlogits[:, :, None] * diff, axis=1)
    d_protos = 2.0 * np.sum(dlogits[:, :, None] * diff, axis=0)
    d_s = d_protos[s_idx] / counts[s_idx][:, None]
    d_emb = np.concatenate([d_s, d_q])
    d_out = (d_emb - emb * np.sum(emb * d_emb, axis=1, keepdims=True)) / norms[:, None]
    _, dws, dbs = model._backward(acts, d_out)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == q_idx))
    return loss, dws, dbs, accuracy


def train_mlp(spec: MlpSpec, episodes: Iterable, lr: float, steps: int,
              noise_aug: NoiseAugmentation | None = None, seed=0) -> MlpModel:
    """Episodic prototypical training with Adam.

    With probability ``noise_aug.probability`` each support and query input gets
    additive N(0, sigma^2 I) noise before embedding.
    """
    if lr <= 0:
        raise DomainError("lr must be positive")
    if noise_aug is None:
        noise_aug = NoiseAugmentation(0.0, 0.0)
    seeds = np.random.SeedSequence(seed).spawn(2)
    model = MlpModel.initialize(spec, seeds[0])
    rng = np.random.default_rng(seeds[1])
    opt = _Adam(lr)
    it = iter(episodes)
    for step in range(steps):
        try:
            ep = next(it)
        except StopIteration:
            raise ValueError(f"episode stream exhausted after {step} steps") from None
        sx, sy = ep.support_arrays()
        qx, qy = ep.query_arrays()
        if sx.shape[1] != spec.layer_dims[0]:
            raise ShapeError(f"episode input_dim {sx.shape[1]} != model input {spec.layer_dims[0]}")
        if noise_aug.probability > 0 and noise_aug.sigma > 0:
            X = np.concatenate([sx, qx])
            mask = rng.random(len(X)) < noise_aug.probability
            X = X + mask[:, None] * rng.normal(0.0, noise_aug.sigma, size=X.shape)
            sx, qx = X[: len(sx)], X[len(sx):]
        loss, dws, dbs, _ = prototypical_loss(model, sx, sy, qx, qy)
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        opt.step(model.weights + model.biases, dws + dbs)
    return model


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _pack(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": " ".join("%.17g" % v for v in a.ravel())}


def _unpack(obj, where: str) -> np.ndarray:
    try:
        shape = [int(s) for s in obj["shape"]]
        values = [float(tok) for tok in obj["data"].split()]
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise SchemaError(f"{where}: malformed array ({exc})") from None
    if math.prod(shape) != len(values):
        raise SchemaError(f"{where}: shape {shape} needs {math.prod(shape)} values, found {len(values)}")
    return np.array(values, dtype=np.float64).reshape(shape)


def model_to_dict(model: EmbeddingModel) -> dict:
    doc = {"schema": MODEL_SCHEMA, "kind": model.kind,
           "input_dim": model.input_dim, "embed_dim": model.embed_dim}
    if isinstance(model, ConstantModel):
        doc["params"] = {"vector": _pack(model.vector)}
    elif isinstance(model, CircleModel):
        doc["params"] = {"direction": _pack(model.direction)}
    elif isinstance(model, StepModel):
        doc["params"] = {"axis": model.axis}
    elif isinstance(model, MlpModel):
        doc["params"] = {"layers": [{"weight": _pack(w), "bias": _pack(b)}
                                    for w, b in zip(model.weights, model.biases)]}
    elif isinstance(model, FileBackedModel):
        doc["params"] = {"table": [{"point_id": pid, "embeddings": _pack(rows)}
                                   for pid, rows in model.table.items()]}
    else:
        raise SchemaError(f"cannot serialize model kind {model.kind!r}")
    return doc


def model_from_dict(doc: dict) -> EmbeddingModel:
    if not isinstance(doc, dict) or doc.get("schema") != MODEL_SCHEMA:
        raise SchemaError(f"not a {MODEL_SCHEMA} document")
    try:
        kind = doc["kind"]
        params = doc["params"]
        input_dim = int(doc["input_dim"])
        embed_dim = int(doc["embed_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"missing or bad header field: {exc}") from None

    if kind == "constant":
        model = ConstantModel(_unpack(params["vector"], "vector"), input_dim)
    elif kind == "circle":
        model = CircleModel(_unpack(params["direction"], "direction"))
    elif kind == "step":
        model = StepModel(input_dim, embed_dim, int(params["axis"]))
    elif kind == "mlp":
        layers = params.get("layers") or []
        ws = [_unpack(layer["weight"], f"layer {i} weight") for i, layer in enumerate(layers)]
        bs = [_unpack(layer["bias"], f"layer {i} bias") for i, layer in enumerate(layers)]
        model = MlpModel(ws, bs)
    elif kind == "file-backed":
        table = {str(r["point_id"]): _unpack(r["embeddings"], f"point {r['point_id']}")
                 for r in params["table"]}
        model = FileBackedModel(table, embed_dim)
    else:
        raise SchemaError(f"unknown model kind {kind!r}")
    if model.embed_dim != embed_dim or (kind != "file-backed" and model.input_dim != input_dim):
        raise SchemaError(
            f"declared dims ({input_dim}, {embed_dim}) disagree with parameters "
            f"({model.input_dim}, {model.embed_dim})"
        )
    return model


def loads_json(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed document: {exc.msg}", len(text[: exc.pos].encode())) from None


def save_model(model: EmbeddingModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> EmbeddingModel:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return model_from_dict(loads_json(text))
