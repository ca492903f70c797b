"""Three-stage training, prediction and model persistence.

Stage 1 pretrains each encoder on labeled pairs with the contrastive loss.
Stage 2 fits the single-variable prototype layers together with a temporary
dense head over the concatenated similarities, with the encoders frozen.
Stage 3 fits the multivariable prototype layer and the final dense head with
everything upstream frozen.

Every public function takes raw (unnormalized) data; the model stores the
per-variable statistics computed on the training split in stage 1.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, Sample, pair_arrays, variable_statistics
from .encoder import DEFAULT_HIDDEN, EncoderParams, encode_array, encode_batch, init_encoder
from .errors import ConfigError, ContractError, ModelLoadError
from .losses import RegularizerWeights, contrastive_batch, total_stage_loss
from .prototype import MULTI, SINGLE, PrototypeLayer, block_boundaries, init_prototypes, similarity_matrix
from .tensor import Adam, Tensor, add_rowwise, clip_grad_norm, concat, matmul, softmax, softmax_cross_entropy, take

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FORMAT_NAME = "protomts-model"
STAGE_NAMES = ("contrastive", "single", "multi")


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 45
    epochs_stage2: int = 40
    epochs_stage3: int = 80
    batch_size: int = 32
    lr_stage1: float = 3e-3
    lr_stage2: float = 1e-3
    lr_stage3: float = 0.2
    pairs_per_epoch: int = 4096
    grad_clip: float = 1.0
    chrono_init: bool = True
    single_prototypes: int = 4
    multi_prototypes: int = 64
    hidden: int = DEFAULT_HIDDEN
    seed: int = 0
    weights: RegularizerWeights = field(default_factory=RegularizerWeights)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name in ("weights", "seed", "chrono_init"):
                continue
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        data = dict(data)
        weights = RegularizerWeights(**data.pop("weights", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(weights=weights, **data)


@dataclass
class DenseHead:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> DenseHead:
        s = 1.0 / np.sqrt(n_in)
        return cls(
            Tensor(rng.uniform(-s, s, size=(n_in, n_out)), requires_grad=True),
            Tensor(np.zeros(n_out), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return add_rowwise(matmul(x, self.W), self.b)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.W.data + self.b.data

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


@dataclass
class Model:
    d: int
    n: int
    class_names: list[str]
    config: TrainConfig
    encoders: list[EncoderParams]
    single: list[PrototypeLayer] = field(default_factory=list)
    multi: PrototypeLayer | None = None
    temp_head: DenseHead | None = None
    head: DenseHead | None = None
    stages: list[bool] = field(default_factory=lambda: [False, False, False])
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def complete(self) -> bool:
        return all(self.stages)

    @property
    def boundaries(self) -> list[int]:
        return block_boundaries([layer.count for layer in self.single])

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.norm_mean is not None:
            out["norm/mean"] = self.norm_mean
            out["norm/std"] = self.norm_std
        for k, enc in enumerate(self.encoders):
            for name, arr in enc.arrays().items():
                out[f"encoder{k}/{name}"] = arr
        for k, layer in enumerate(self.single):
            out[f"single{k}/prototypes"] = layer.prototypes.data
        if self.multi is not None:
            out["multi/prototypes"] = self.multi.prototypes.data
        for name, head in (("temp_head", self.temp_head), ("head", self.head)):
            if head is not None:
                out[f"{name}/W"] = head.W.data
                out[f"{name}/b"] = head.b.data
        return out

    def parameter_hashes(self) -> dict[str, str]:
        return {name: hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest() for name, a in self.named_arrays().items()}

    def prepare(self, X: np.ndarray) -> np.ndarray:
        """Apply the stored training normalization to raw (count, d, n) data."""
        if self.norm_mean is None:
            raise ContractError("model has no normalization statistics; run stage 1 first")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1] != self.d or X.shape[2] != self.n:
            raise ContractError(f"expected data of shape (count, {self.d}, {self.n}), got {X.shape}")
        return (X - self.norm_mean[None, :, None]) / self.norm_std[None, :, None]


def new_model(d: int, n: int, class_names, config: TrainConfig = TrainConfig()) -> Model:
    chrono = n if config.chrono_init and n >= 3 else None
    encoders = [init_encoder(k, config.hidden, _sub_seed(config.seed, "encoder", k), chrono) for k in range(d)]
    return Model(d=d, n=n, class_names=list(class_names), config=config, encoders=encoders)


def model_for(data: Dataset, config: TrainConfig = TrainConfig()) -> Model:
    return new_model(data.d, data.n, data.class_names, config)


def _sub_seed(seed: int, *keys) -> int:
    material = [seed] + [int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:4], "little") for k in keys]
    return int(np.random.SeedSequence(material).generate_state(1)[0])


def _check_data(model: Model, data: Dataset) -> None:
    if len(data) == 0:
        raise ContractError("training data is empty")
    if data.d != model.d or data.n != model.n:
        raise ContractError(f"data shape (d={data.d}, n={data.n}) does not match model (d={model.d}, n={model.n})")
    if list(data.class_names) != list(model.class_names):
        raise ContractError("data class names differ from the model's")


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """Learning rate at ``step`` (0-based) of a half-cosine decay from ``base`` to 0."""
    return 0.5 * base * (1.0 + np.cos(np.pi * step / max(total_steps, 1)))


class _Stepper:
    """Adam with global-norm clipping and a per-stage cosine learning-rate decay."""

    def __init__(self, params, base_lr: float, total_steps: int, clip: float):
        self.opt = Adam(params, lr=base_lr)
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.clip = clip
        self.t = 0

    def step(self) -> None:
        self.opt.state.lr = cosine_lr(self.base_lr, self.t, self.total_steps)
        clip_grad_norm(self.opt.params, self.clip)
        self.opt.step()
        self.t += 1


def _steps(count: int, batch_size: int, epochs: int) -> int:
    return epochs * -(-count // batch_size)


def _record(log, **fields) -> None:
    if log is not None:
        log.append(fields)


# -- stage 1 ---------------------------------------------------------------
def pretrain_encoders(model: Model, train: Dataset, cfg: TrainConfig | None = None, log: list | None = None) -> None:
    """Contrastive pretraining of every encoder, each on its own variable."""
    cfg = cfg or model.config
    if any(model.stages):
        raise ContractError("stage 1 requires a fresh model")
    _check_data(model, train)
    model.norm_mean, model.norm_std = variable_statistics(train)
    X = model.prepare(train.X)
    y = train.y
    monitor = pair_arrays(y, min(512, max(2, cfg.pairs_per_epoch)), _sub_seed(cfg.seed, "monitor"))
    for k, enc in enumerate(model.encoders):
        series = X[:, k, :]
        opt = _Stepper(enc.parameters(), cfg.lr_stage1, _steps(cfg.pairs_per_epoch, cfg.batch_size, cfg.epochs_stage1), cfg.grad_clip)
        _record(log, stage=1, variable=k, epoch=0, loss=_pair_loss(enc, series, monitor, cfg.weights.margin))
        for epoch in range(1, cfg.epochs_stage1 + 1):
            a, b, flags = pair_arrays(y, cfg.pairs_per_epoch, _sub_seed(cfg.seed, "pairs", k, epoch))
            running = 0.0
            for start in range(0, a.size, cfg.batch_size):
                sl = slice(start, start + cfg.batch_size)
                ia, ib, yy = a[sl], b[sl], flags[sl]
                B = ia.size
                enc_all = encode_batch(enc, np.concatenate([series[ia], series[ib]]))
                loss = contrastive_batch(take(enc_all, slice(0, B)), take(enc_all, slice(B, 2 * B)), yy, cfg.weights.margin)
                loss.backward()
                opt.step()
                running += float(loss.data) * B
            held = _pair_loss(enc, series, monitor, cfg.weights.margin)
            _record(log, stage=1, variable=k, epoch=epoch, loss=running / max(a.size, 1), heldout=held)
            logger.info("stage 1 var %d epoch %d loss %.4f held-out %.4f", k, epoch, running / max(a.size, 1), held)
    model.stages[0] = True


def _pair_loss(enc: EncoderParams, series: np.ndarray, pairs, margin: float) -> float:
    a, b, flags = pairs
    ea = encode_array(enc, series[a])
    eb = encode_array(enc, series[b])
    return float(contrastive_batch(Tensor(ea), Tensor(eb), flags, margin).data)


# -- shared forward pieces -------------------------------------------------
def encode_dataset(model: Model, X_norm: np.ndarray) -> list[np.ndarray]:
    """Per-variable encodings of normalized data, each (count, hidden)."""
    return [encode_array(enc, X_norm[:, k, :]) for k, enc in enumerate(model.encoders)]


def multivariable_array(model: Model, encodings: list[np.ndarray]) -> np.ndarray:
    """Concatenated single-variable similarities, (count, sum n_k)."""
    return np.concatenate(
        [similarity_matrix(Tensor(E), Tensor(layer.prototypes.data)).data for E, layer in zip(encodings, model.single)],
        axis=1,
    )


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == y)) if y.size else float("nan")


def _batches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


# -- stage 2 ---------------------------------------------------------------
def train_single_variable_stage(
    model: Model, train: Dataset, cfg: TrainConfig | None = None, log: list | None = None
) -> None:
    """Fit single-variable prototypes and a temporary head; encoders stay frozen."""
    cfg = cfg or model.config
    if not model.stages[0] or model.stages[1]:
        raise ContractError("stage 2 requires stage 1 complete and stage 2 not yet run")
    _check_data(model, train)
    encodings = encode_dataset(model, model.prepare(train.X))
    model.single = [
        init_prototypes(SINGLE, cfg.single_prototypes, E, _sub_seed(cfg.seed, "single-init", k), variable=k)
        for k, E in enumerate(encodings)
    ]
    rng = np.random.default_rng(_sub_seed(cfg.seed, "stage2"))
    model.temp_head = DenseHead.init(sum(layer.count for layer in model.single), model.n_classes, rng)
    params = [layer.prototypes for layer in model.single] + model.temp_head.parameters()
    opt = _Stepper(params, cfg.lr_stage2, _steps(len(train), cfg.batch_size, cfg.epochs_stage2), cfg.grad_clip)
    y = train.y
    for epoch in range(1, cfg.epochs_stage2 + 1):
        sums = dict.fromkeys(("loss", "ce", "diversity", "similarity", "coverage"), 0.0)
        for idx in _batches(len(train), cfg.batch_size, rng):
            enc_batch = [Tensor(E[idx]) for E in encodings]
            sims = [similarity_matrix(e, layer.prototypes) for e, layer in zip(enc_batch, model.single)]
            logits = model.temp_head(concat(sims, axis=1))
            ce = softmax_cross_entropy(logits, y[idx])
            loss, parts = total_stage_loss(ce, cfg.weights, [layer.prototypes for layer in model.single], enc_batch)
            loss.backward()
            opt.step()
            sums["loss"] += float(loss.data) * idx.size
            for key, v in parts.items():
                sums[key] += v * idx.size
        acc = _accuracy(model.temp_head.logits(multivariable_array(model, encodings)), y)
        _record(log, stage=2, epoch=epoch, accuracy=acc, **{k: v / len(train) for k, v in sums.items()})
        logger.info("stage 2 epoch %d loss %.4f acc %.4f", epoch, sums["loss"] / len(train), acc)
    model.stages[1] = True


# -- stage 3 ---------------------------------------------------------------
def train_multivariable_stage(
    model: Model, train: Dataset, cfg: TrainConfig | None = None, log: list | None = None
) -> None:
    """Fit the multivariable prototypes and final head; all else frozen."""
    cfg = cfg or model.config
    if not model.stages[1] or model.stages[2]:
        raise ContractError("stage 3 requires stage 2 complete and stage 3 not yet run")
    _check_data(model, train)
    M = multivariable_array(model, encode_dataset(model, model.prepare(train.X)))
    model.multi = init_prototypes(MULTI, cfg.multi_prototypes, M, _sub_seed(cfg.seed, "multi-init"))
    rng = np.random.default_rng(_sub_seed(cfg.seed, "stage3"))
    model.head = DenseHead.init(model.multi.count, model.n_classes, rng)
    params = [model.multi.prototypes] + model.head.parameters()
    opt = _Stepper(params, cfg.lr_stage3, _steps(len(train), cfg.batch_size, cfg.epochs_stage3), cfg.grad_clip)
    y = train.y
    for epoch in range(1, cfg.epochs_stage3 + 1):
        sums = dict.fromkeys(("loss", "ce", "diversity", "similarity", "coverage"), 0.0)
        for idx in _batches(len(train), cfg.batch_size, rng):
            m = Tensor(M[idx])
            logits = model.head(similarity_matrix(m, model.multi.prototypes))
            ce = softmax_cross_entropy(logits, y[idx])
            loss, parts = total_stage_loss(ce, cfg.weights, [model.multi.prototypes], [m])
            loss.backward()
            opt.step()
            sums["loss"] += float(loss.data) * idx.size
            for key, v in parts.items():
                sums[key] += v * idx.size
        sim = similarity_matrix(Tensor(M), Tensor(model.multi.prototypes.data)).data
        acc = _accuracy(model.head.logits(sim), y)
        _record(log, stage=3, epoch=epoch, accuracy=acc, **{k: v / len(train) for k, v in sums.items()})
        logger.info("stage 3 epoch %d loss %.4f acc %.4f", epoch, sums["loss"] / len(train), acc)
    model.stages[2] = True


# -- pipeline ----------------------------------------------------------------
def fit(
    train: Dataset,
    config: TrainConfig = TrainConfig(),
    model: Model | None = None,
    log: list | None = None,
    checkpoint=None,
) -> Model:
    """Run whichever stages ``model`` still lacks (all three for a new model).

    ``checkpoint``, if given, is called with (model, stage_number) after each
    completed stage. A resumed ``model`` must carry the same ``config``.
    """
    if model is None:
        model = model_for(train, config)
    elif model.config != config:
        raise ContractError("configuration differs from the one the checkpoint was trained with")
    stages = (pretrain_encoders, train_single_variable_stage, train_multivariable_stage)
    for number, run in enumerate(stages, start=1):
        if model.stages[number - 1]:
            continue
        run(model, train, model.config, log)
        if checkpoint is not None:
            checkpoint(model, number)
    return model


def composed_logits(model: Model, X_norm: np.ndarray) -> Tensor:
    """Differentiable end-to-end forward pass on normalized data (count, d, n).

    Gradients reach every parameter: encoders, both prototype levels and the
    final head. Training never uses this path (stages are trained
    separately); it exists for inspection and gradient checking.
    """
    if model.multi is None or model.head is None or len(model.single) != model.d:
        raise ContractError("composed forward needs every layer initialized")
    sims = [
        similarity_matrix(encode_batch(enc, X_norm[:, k, :]), layer.prototypes)
        for k, (enc, layer) in enumerate(zip(model.encoders, model.single))
    ]
    m = concat(sims, axis=1)
    return model.head(similarity_matrix(m, model.multi.prototypes))


def parameters(model: Model) -> list[Tensor]:
    out = [p for enc in model.encoders for p in enc.parameters()]
    out += [layer.prototypes for layer in model.single]
    if model.multi is not None:
        out.append(model.multi.prototypes)
    for head in (model.temp_head, model.head):
        if head is not None:
            out += head.parameters()
    return out


# -- inference -------------------------------------------------------------
@dataclass
class Forward:
    encodings: list[np.ndarray]
    multivariable: np.ndarray
    similarities: np.ndarray
    probabilities: np.ndarray

    @property
    def classes(self) -> np.ndarray:
        return np.argmax(self.probabilities, axis=1)


def forward(model: Model, X_raw: np.ndarray) -> Forward:
    if not model.complete:
        raise ContractError("model has not completed all three training stages")
    enc = encode_dataset(model, model.prepare(X_raw))
    M = multivariable_array(model, enc)
    S = similarity_matrix(Tensor(M), Tensor(model.multi.prototypes.data)).data
    return Forward(enc, M, S, softmax(model.head.logits(S)))


def predict(model: Model, sample: Sample) -> tuple[int, np.ndarray, np.ndarray]:
    """Class, class probabilities and multivariable similarities for one sample."""
    out = forward(model, np.asarray(sample.variables, dtype=np.float64)[None])
    return int(out.classes[0]), out.probabilities[0], out.similarities[0]


def evaluate(model: Model, data: Dataset) -> dict:
    out = forward(model, data.X)
    pred = out.classes
    C = model.n_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (data.y, pred), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    return {
        "accuracy": _accuracy(np.eye(C)[pred], data.y) if len(data) else float("nan"),
        "per_class": per_class,
        "confusion": confusion,
        "predictions": pred,
    }


# -- persistence -------------------------------------------------------------
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_model(model: Model, sink) -> None:
    """Write a versioned zip of .npy arrays plus a JSON manifest.

    Entry timestamps are fixed, so equal models give byte-identical files.
    """
    arrays = model.named_arrays()
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "d": model.d,
        "n": model.n,
        "class_names": model.class_names,
        "config": model.config.to_dict(),
        "stages": list(model.stages),
        "single_variables": [layer.variable for layer in model.single],
        "arrays": {name: list(a.shape) for name, a in arrays.items()},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        for name, arr in arrays.items():
            npy = io.BytesIO()
            np.lib.format.write_array(npy, np.ascontiguousarray(arr, dtype=np.float64), allow_pickle=False)
            _zip_write(zf, f"arrays/{name}.npy", npy.getvalue())
    if hasattr(sink, "write"):
        sink.write(buf.getvalue())
    else:
        with open(sink, "wb") as fh:
            fh.write(buf.getvalue())


def load_model(source) -> Model:
    """Inverse of :func:`save_model`; raises ModelLoadError on any inconsistency."""
    raw = source.read() if hasattr(source, "read") else open(source, "rb").read()
    try:
        zf = zipfile.ZipFile(io.BytesIO(raw))
        manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, EOFError, json.JSONDecodeError, zipfile.LargeZipFile) as exc:
        raise ModelLoadError(f"not a readable model file ({exc})", "manifest") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise ModelLoadError(f"unexpected format {manifest.get('format')!r}", "format")
    if manifest.get("version") != FORMAT_VERSION:
        raise ModelLoadError(f"unsupported version {manifest.get('version')!r}", "version")

    arrays: dict[str, np.ndarray] = {}
    for name, shape in manifest["arrays"].items():
        try:
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
        except Exception as exc:  # zlib, KeyError, ValueError from a damaged entry
            raise ModelLoadError(f"cannot read array ({exc})", name) from exc
        if list(arr.shape) != list(shape):
            raise ModelLoadError(f"shape {list(arr.shape)} != manifest {shape}", name)
        arrays[name] = arr

    try:
        config = TrainConfig.from_dict(manifest["config"])
    except (ConfigError, TypeError) as exc:
        raise ModelLoadError(str(exc), "config") from exc
    d, n = int(manifest["d"]), int(manifest["n"])

    def grab(name):
        if name not in arrays:
            raise ModelLoadError("missing array", name)
        return Tensor(arrays[name], requires_grad=True)

    encoders = []
    for k in range(d):
        W_rec = grab(f"encoder{k}/W_rec")
        h = W_rec.shape[0]
        enc = EncoderParams(k, h, grab(f"encoder{k}/W_in"), W_rec, grab(f"encoder{k}/bias"))
        if enc.W_in.shape != (1, 4 * h) or W_rec.shape != (h, 4 * h) or enc.bias.shape != (4 * h,):
            raise ModelLoadError("inconsistent LSTM weight shapes", f"encoder{k}")
        encoders.append(enc)
    model = Model(d=d, n=n, class_names=list(manifest["class_names"]), config=config, encoders=encoders)
    model.stages = [bool(s) for s in manifest["stages"]]
    if "norm/mean" in arrays:
        model.norm_mean = arrays["norm/mean"]
        model.norm_std = arrays["norm/std"]
    single_vars = manifest.get("single_variables", [])
    model.single = [PrototypeLayer(grab(f"single{k}/prototypes"), SINGLE, v) for k, v in enumerate(single_vars)]
    if "multi/prototypes" in arrays:
        model.multi = PrototypeLayer(grab("multi/prototypes"), MULTI)
    if "temp_head/W" in arrays:
        model.temp_head = DenseHead(grab("temp_head/W"), grab("temp_head/b"))
    if "head/W" in arrays:
        model.head = DenseHead(grab("head/W"), grab("head/b"))
    _validate(model)
    return model


def _validate(model: Model) -> None:
    if model.stages[0] and model.norm_mean is None:
        raise ModelLoadError("stage 1 marked complete but no normalization statistics", "norm/mean")
    if model.stages[1]:
        if len(model.single) != model.d:
            raise ModelLoadError(f"expected {model.d} single-variable layers, found {len(model.single)}", "single")
        for k, (layer, enc) in enumerate(zip(model.single, model.encoders)):
            if layer.dim != enc.hidden:
                raise ModelLoadError(f"prototype dim {layer.dim} != encoder width {enc.hidden}", f"single{k}/prototypes")
    if model.stages[2]:
        if model.multi is None or model.head is None:
            raise ModelLoadError("stage 3 marked complete but layers are missing", "multi/prototypes")
        width = sum(layer.count for layer in model.single)
        if model.multi.dim != width:
            raise ModelLoadError(f"multivariable dim {model.multi.dim} != {width}", "multi/prototypes")
        if model.head.W.shape != (model.multi.count, model.n_classes):
            raise ModelLoadError(f"head shape {model.head.W.shape} is inconsistent", "head/W")
