"""Seeded synthetic segmentation benchmark.

Scenes are Voronoi partitions of an ``H x W`` grid into K category
regions. Pixel features carry the category's codebook vector plus iid
Gaussian noise, and one extra channel carries a noisy indicator of
contour proximity, so region identity is readable from (denoised) local
features while contour saliency is readable globally. The model is a
3x3 conv stem, a rectifier, an optional attention block, and a 1x1
classifier, trained with plain momentum SGD under a polynomial
learning-rate decay on mean pixelwise cross-entropy.

Everything is deterministic given (seed, config): scene geometry, the
codebook, weight init, the visiting order of training scenes, and hence
every metric in the trace, bit for bit in 64-bit mode. Independent runs
of a sweep may execute in parallel; results are keyed by (variant, seed).
"""

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import blocks, metrics, tensor
from .blocks import BlockParams, Variant
from .precision import scalar_dtype

# streams for hierarchical seeding (SeedSequence entropy tags)
_CODEBOOK_STREAM = 101
_SCENE_STREAM = 202
_INIT_STREAM = 303
_VAL_SCENE_OFFSET = 100_000

TRACE_HEADER = ("iter", "lr", "loss", "train_miou", "val_miou")


class GenerationError(RuntimeError):
    """Scene generation could not satisfy its constraints."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the iteration index."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite training loss at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    """Benchmark configuration; defaults are the standard desk-scale setup."""

    variant: str | None = "DNL"       # None trains the stem+classifier baseline
    iterations: int = 2000
    base_lr: float = 0.02
    lr_power: float = 0.9
    momentum: float = 0.9
    grad_clip: float = 5.0            # global grad-norm bound; 0 disables
    batch_size: int = 1
    seed: int = 0
    channels: int = 16                # attention block width C
    height: int = 32
    width: int = 32
    num_categories: int = 4
    code_dim: int = 4                 # channels carrying the category code
    noise_sigma: float = 0.5
    style_ratio: float = 1.5          # per-scene correlated noise, std = ratio * sigma
    boundary_gain: float = 1.5        # amplitude of the contour-proximity channel
    indicator_radius: float = 1.0     # radius of that channel's indicator
    contour_code_fade: float = 1.0    # category-code attenuation at contour pixels
    boundary_radius: float = 5.0      # radius of the derived boundary map
    train_scenes: int = 64
    val_scenes: int = 16
    eval_every: int = 250
    eval_train_scenes: int = 8

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.num_categories < 2:
            raise ValueError("need at least two categories")
        if self.variant is not None:
            blocks.parse_variant(self.variant)

    @property
    def feature_channels(self) -> int:
        return self.code_dim + 1

    def to_flat_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["variant"] = "" if self.variant is None else self.variant
        return out

    @classmethod
    def from_flat_dict(cls, data: dict) -> "TrainConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            raw = data[f.name]
            if f.name == "variant":
                kwargs[f.name] = None if raw in ("", "None", None) else str(raw)
            elif f.type is int:
                kwargs[f.name] = int(raw)
            elif f.type is float:
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


@dataclass
class SceneSample:
    """One synthetic scene: features, labels, derived boundary map."""

    features: np.ndarray   # [code_dim + 1, H, W]
    labels: np.ndarray     # int [H, W]
    boundary: np.ndarray   # uint8 [H, W], contour dilated to boundary_radius
    seed: int = 0


def category_codebook(cfg: TrainConfig) -> np.ndarray:
    """Fixed per-config category code vectors with pairwise distance >= 1.

    Drawn Gaussian, then rescaled so the *minimum* pairwise distance is
    exactly 1: the ratio of code separation to feature noise is what sets
    the task's local difficulty, and pinning it keeps difficulty uniform
    across dataset seeds.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _CODEBOOK_STREAM]))
    for _ in range(100):
        book = rng.normal(size=(cfg.num_categories, cfg.code_dim))
        d2 = ((book[:, None, :] - book[None, :, :]) ** 2).sum(axis=2)
        d2[np.diag_indices_from(d2)] = np.inf
        min_dist = float(np.sqrt(d2.min()))
        if min_dist > 0:
            return (book / min_dist).astype(scalar_dtype())
    raise GenerationError("could not draw a codebook with pairwise distance >= 1")


def _place_sites(rng: np.random.Generator, k: int, h: int, w: int,
                 min_dist: float) -> np.ndarray:
    sites = np.empty((k, 2))
    placed = 0
    for _ in range(100 * k):
        cand = rng.uniform(low=(0.0, 0.0), high=(h, w))
        if placed == 0 or np.sqrt(((sites[:placed] - cand) ** 2).sum(axis=1)).min() >= min_dist:
            sites[placed] = cand
            placed += 1
            if placed == k:
                return sites
    raise GenerationError(
        f"could not place {k} sites with min distance {min_dist} in {h}x{w}"
    )


def generate_scene(seed: int, cfg: TrainConfig) -> SceneSample:
    """Deterministic scene from (seed, config).

    Labels are the Voronoi cells of K sites (minimum site distance
    enforced, ties broken toward the lower site index). Code channels
    carry the category code plus Gaussian noise whose correlated
    component is a per-scene style shift (std ``style_ratio * sigma``,
    shared by every pixel); the last channel carries the noisy contour
    indicator. At contour pixels the category code is faded out
    (boundary blur), which makes the contour the one place where the
    style shift can be read without category bias: recovering it demands
    global boundary context, while classifying the faded contour pixels
    demands within-region context. Setting ``noise_sigma`` to zero
    removes both the iid and the correlated noise. Regenerates with a
    derived sub-seed in the (theoretical) case of an empty category.
    """
    if cfg.height < 8 or cfg.width < 8:
        raise ValueError("scene generation expects H, W >= 8")
    codebook = category_codebook(cfg)
    k = cfg.num_categories
    min_dist = max(2.0, min(cfg.height, cfg.width) / 4.0)
    for attempt in range(100):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _SCENE_STREAM, seed, attempt])
        )
        sites = _place_sites(rng, k, cfg.height, cfg.width, min_dist)
        gy, gx = np.mgrid[0:cfg.height, 0:cfg.width]
        d2 = ((gy[..., None] - sites[:, 0]) ** 2 + (gx[..., None] - sites[:, 1]) ** 2)
        labels = d2.argmin(axis=2)
        if np.unique(labels).size == k:
            break
    else:
        raise GenerationError(f"scene {seed}: some category stayed empty")

    dt = scalar_dtype()
    noise = rng.normal(size=(cfg.feature_channels, cfg.height, cfg.width))
    style = rng.normal(size=cfg.code_dim) * (cfg.noise_sigma * cfg.style_ratio)
    features = np.empty((cfg.feature_channels, cfg.height, cfg.width), dtype=dt)
    indicator = metrics.boundary_map(labels, radius=cfg.indicator_radius)
    fade = 1.0 - cfg.contour_code_fade * indicator
    features[: cfg.code_dim] = codebook[labels].transpose(2, 0, 1) * fade[None]
    features[: cfg.code_dim] += style[:, None, None]
    features[cfg.code_dim] = cfg.boundary_gain * indicator
    features += (cfg.noise_sigma * noise).astype(dt)
    return SceneSample(
        features=features,
        labels=labels,
        boundary=metrics.boundary_map(labels, radius=cfg.boundary_radius),
        seed=seed,
    )


def make_datasets(cfg: TrainConfig):
    """The standard train/val scene lists for a config."""
    train = [generate_scene(i, cfg) for i in range(cfg.train_scenes)]
    val = [generate_scene(_VAL_SCENE_OFFSET + j, cfg) for j in range(cfg.val_scenes)]
    return train, val


# ---------------------------------------------------------------------------
# schedule, loss, metric
# ---------------------------------------------------------------------------


def poly_lr(iteration: int, max_iter: int, base: float, power: float = 0.9) -> float:
    """Polynomial decay: ``base * (1 - iteration/max_iter) ** power``."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean over pixels of -log softmax(logits)[label], max-stabilized."""
    z = np.asarray(logits, dtype=float)
    if z.ndim == 3:
        z = z.reshape(z.shape[0], -1)
    lab = np.asarray(labels).reshape(-1)
    if z.shape[1] != lab.size:
        raise tensor.DimensionError(
            f"cross_entropy: {z.shape[1]} pixels vs {lab.size} labels"
        )
    shifted = z - z.max(axis=0, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=0))
    return float((lse - shifted[lab, np.arange(lab.size)]).mean())


def miou(pred: np.ndarray, gt: np.ndarray, num_categories: int) -> float:
    """Mean IoU over the classes present in prediction or ground truth."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise tensor.DimensionError(f"miou: shapes differ {pred.shape} vs {gt.shape}")
    ious = []
    for c in range(num_categories):
        p = pred == c
        g = gt == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

BLOCK_KEYS = ("Wq", "Wk", "Wv", "Wout", "Wm")


@dataclass
class ModelWeights:
    """Stem + optional attention block + classifier."""

    stem: np.ndarray                 # [C, C_in, 3, 3]
    classifier: np.ndarray           # [K, C]
    block: BlockParams | None
    variant: Variant | None

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"stem": self.stem, "classifier": self.classifier}
        if self.block is not None:
            for key, arr in self.block.named_arrays().items():
                out[f"block.{key}"] = arr
        return out

    @classmethod
    def from_named_arrays(cls, arrays: dict, variant: Variant | None) -> "ModelWeights":
        block = None
        if variant is not None:
            block = BlockParams(
                Wq=arrays["block.Wq"], Wk=arrays["block.Wk"], Wv=arrays["block.Wv"],
                Wout=arrays["block.Wout"], Wm=arrays.get("block.Wm"),
            )
        return cls(stem=arrays["stem"], classifier=arrays["classifier"],
                   block=block, variant=variant)


def init_model(cfg: TrainConfig) -> ModelWeights:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _INIT_STREAM]))
    dt = scalar_dtype()
    c_in, c, k = cfg.feature_channels, cfg.channels, cfg.num_categories
    stem = (rng.normal(size=(c, c_in, 3, 3)) * (9 * c_in) ** -0.5).astype(dt)
    classifier = (rng.normal(size=(k, c)) * c ** -0.5).astype(dt)
    variant = None if cfg.variant is None else blocks.parse_variant(cfg.variant)
    block = blocks.init_block_params(c, variant, rng) if variant is not None else None
    return ModelWeights(stem=stem, classifier=classifier, block=block, variant=variant)


def model_graph(weights: dict[str, ag.Node], variant: Variant | None,
                features: np.ndarray):
    """Differentiable stem -> rectifier -> block -> classifier forward."""
    x = ag.constant(features)
    h = ag.relu(ag.conv3x3(x, weights["stem"]))
    if variant is not None:
        block_nodes = {k.split(".", 1)[1]: v for k, v in weights.items()
                       if k.startswith("block.")}
        h, _ = blocks.block_graph(h, block_nodes, variant)
    c = h.value.shape[0]
    n = h.value.shape[1] * h.value.shape[2]
    return ag.matmul(weights["classifier"], ag.reshape(h, (c, n)))


def loss_graph(weights: dict[str, ag.Node], variant: Variant | None,
               scene: SceneSample) -> ag.Node:
    logits = model_graph(weights, variant, scene.features)
    return ag.cross_entropy_mean(logits, scene.labels.reshape(-1))


def forward_numpy(model: ModelWeights, features: np.ndarray):
    """Pure-numpy forward to logits, plus the block input and decomposition."""
    s = tensor.conv3x3(features, model.stem)
    h = np.where(s > 0, s, 0.0)
    decomp = None
    if model.variant is not None:
        h, decomp = blocks.block_forward(h, model.block, model.variant)
    logits = tensor.matmul(model.classifier, h.reshape(h.shape[0], -1))
    return logits, decomp


def predict_labels(model: ModelWeights, features: np.ndarray) -> np.ndarray:
    logits, _ = forward_numpy(model, features)
    h, w = features.shape[1:]
    return logits.argmax(axis=0).reshape(h, w)


@dataclass
class TrainedModel:
    """Trained weights plus the config; the consistency-table provider."""

    weights: ModelWeights
    config: TrainConfig

    def stem_features(self, sample: SceneSample) -> np.ndarray:
        s = tensor.conv3x3(sample.features, self.weights.stem)
        return np.where(s > 0, s, 0.0)

    def attention_for(self, sample: SceneSample) -> blocks.AttentionDecomposition:
        if self.weights.variant is None:
            raise ValueError("baseline model has no attention block")
        emb = blocks.compute_embeddings(
            self.stem_features(sample), self.weights.block, self.weights.variant
        )
        return blocks.attention(self.weights.variant, emb)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    iteration: int
    lr: float
    loss: float
    train_miou: float
    val_miou: float


@dataclass
class TrainResult:
    model: TrainedModel
    trace: list[TraceRow] = field(default_factory=list)

    @property
    def final(self) -> TraceRow:
        return self.trace[-1]


def write_trace_csv(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        for row in trace:
            fh.write(f"{row.iteration},{row.lr:.10g},{row.loss:.10g},"
                     f"{row.train_miou:.10g},{row.val_miou:.10g}\n")


def _mean_miou(model: ModelWeights, scenes, k: int) -> float:
    vals = [miou(predict_labels(model, s.features), s.labels, k) for s in scenes]
    return float(np.mean(vals)) if vals else 0.0


def train(cfg: TrainConfig, dataset: list[SceneSample] | None = None,
          val_dataset: list[SceneSample] | None = None) -> TrainResult:
    """Momentum SGD under the polynomial schedule; deterministic per config.

    Scenes are visited round-robin in dataset order. Checkpoints record
    the mean training loss over the window since the previous checkpoint
    and train/val mean IoU at the current weights. Aborts with
    :class:`DivergenceError` on a non-finite loss.
    """
    if dataset is None or val_dataset is None:
        gen_train, gen_val = make_datasets(cfg)
        dataset = dataset if dataset is not None else gen_train
        val_dataset = val_dataset if val_dataset is not None else gen_val
    if not dataset:
        raise ValueError("training dataset is empty")

    model = init_model(cfg)
    params = {name: np.array(arr) for name, arr in model.named_arrays().items()}
    velocity = {name: np.zeros_like(arr) for name, arr in params.items()}
    variant = model.variant
    eval_train = dataset[: cfg.eval_train_scenes]

    def snapshot() -> ModelWeights:
        arrays = {name: arr.copy() for name, arr in params.items()}
        return ModelWeights.from_named_arrays(arrays, variant)

    def checkpoint(it: int, window_loss: float) -> TraceRow:
        snap = snapshot()
        return TraceRow(
            iteration=it,
            lr=poly_lr(it, cfg.iterations, cfg.base_lr, cfg.lr_power) if it < cfg.iterations else 0.0,
            loss=window_loss,
            train_miou=_mean_miou(snap, eval_train, cfg.num_categories),
            val_miou=_mean_miou(snap, val_dataset, cfg.num_categories),
        )

    trace: list[TraceRow] = []
    first_nodes = {name: ag.param(name, arr) for name, arr in params.items()}
    initial_loss = float(loss_graph(first_nodes, variant, dataset[0]).value)
    trace.append(checkpoint(0, initial_loss))

    window: list[float] = []
    for it in range(cfg.iterations):
        lr = poly_lr(it, cfg.iterations, cfg.base_lr, cfg.lr_power)
        batch_losses = []
        grad_acc = {name: np.zeros_like(arr) for name, arr in params.items()}
        for b in range(cfg.batch_size):
            scene = dataset[(it * cfg.batch_size + b) % len(dataset)]
            nodes = {name: ag.param(name, arr) for name, arr in params.items()}
            try:
                loss = loss_graph(nodes, variant, scene)
            except tensor.NonFiniteError as exc:
                raise DivergenceError(it) from exc
            value = float(loss.value)
            if not np.isfinite(value):
                raise DivergenceError(it)
            batch_losses.append(value)
            grads, _ = ag.backward(loss, nodes)
            for name in params:
                grad_acc[name] += grads[name]
        window.append(float(np.mean(batch_losses)))
        inv_b = 1.0 / cfg.batch_size
        if cfg.grad_clip > 0:
            # rare safety bound: single-scene gradient spikes through the
            # saturating attention softmax otherwise compound via momentum
            norm = np.sqrt(sum(float((g * g).sum()) for g in grad_acc.values())) * inv_b
            if norm > cfg.grad_clip:
                inv_b *= cfg.grad_clip / norm
        for name in params:
            velocity[name] = cfg.momentum * velocity[name] + grad_acc[name] * inv_b
            params[name] -= lr * velocity[name]
        done = it + 1
        if done % cfg.eval_every == 0 or done == cfg.iterations:
            trace.append(checkpoint(done, float(np.mean(window))))
            window = []

    return TrainResult(model=TrainedModel(weights=snapshot(), config=cfg), trace=trace)


# ---------------------------------------------------------------------------
# sweep across variants and seeds
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    """Summary of one (variant, seed) run on its validation scenes."""

    variant: str           # "" for the baseline
    seed: int
    final_val_miou: float
    final_train_loss: float
    pair_within: float | None
    pair_boundary: float | None
    unary_boundary: float | None


def consistency_stats(model: TrainedModel, samples) -> tuple:
    """Mean (pair_within, pair_boundary, unary_boundary) over samples."""
    sums = [0.0, 0.0, 0.0]
    counts = [0, 0, 0]
    for sample in samples:
        decomp = model.attention_for(sample)
        stats = metrics._sample_stats(decomp, sample.labels, sample.boundary)
        for slot, value in enumerate(stats):
            if value is not None:
                sums[slot] += value
                counts[slot] += 1
    return tuple(s / c if c else None for s, c in zip(sums, counts))


def run_experiment(cfg: TrainConfig) -> ExperimentResult:
    result = train(cfg)
    if cfg.variant is None:
        stats = (None, None, None)
    else:
        _, val = make_datasets(cfg)
        stats = consistency_stats(result.model, val)
    return ExperimentResult(
        variant=cfg.variant or "",
        seed=cfg.seed,
        final_val_miou=result.final.val_miou,
        final_train_loss=result.final.loss,
        pair_within=stats[0],
        pair_boundary=stats[1],
        unary_boundary=stats[2],
    )


def run_sweep(base_cfg: TrainConfig, variants, seeds, n_jobs: int = 1):
    """Independent runs over a variant x seed grid, keyed by (variant, seed).

    ``variants`` entries may be variant tokens or None (baseline). Runs
    are embarrassingly parallel; results are merged in grid order so the
    output does not depend on scheduling.
    """
    configs = [
        dataclasses.replace(base_cfg, variant=v, seed=s)
        for v in variants for s in seeds
    ]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run_experiment, configs))
    else:
        results = [run_experiment(cfg) for cfg in configs]
    return {(r.variant or None, r.seed): r for r in results}
