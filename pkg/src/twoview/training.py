"""Two-stage training: single-view pretraining, then multi-view fusion training."""

from __future__ import annotations

import copy
import csv
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .nets import (
    FUSIONS,
    FeatureExtractor,
    HeadConfig,
    MultiViewModel,
    SingleViewModel,
    build_head,
    default_head,
    duplicate,
    init_parameters,
    parameter_digest,
)
from .seeding import derive_seed, rng_for

PAIRING_POLICIES = ("specimen_first", "class_random")


class TrainingError(RuntimeError):
    pass


class FrozenParameterError(TrainingError):
    """A frozen branch changed during training; this is an internal error."""


class Adam(torch.optim.Optimizer):
    """Adam with bias correction; no weight decay."""

    def __init__(self, params, lr: float = 2e-4, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        super().__init__(params, {"lr": lr, "betas": betas, "eps": eps})

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr, (b1, b2), eps = group["lr"], group["betas"], group["eps"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["t"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["t"] += 1
                t, m, v, g = state["t"], state["m"], state["v"], p.grad
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
        return loss


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float = 2e-4
    batch_size: int = 64
    seed: int = 0
    shuffle: bool = True
    loss: str = "cross_entropy"
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    repair_each_epoch: bool = False
    select_best: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.loss != "cross_entropy" or self.optimizer != "adam":
            raise ValueError("only cross_entropy loss with the adam optimizer is supported")
        self.betas = tuple(self.betas)

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_state: dict | None = None

    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc),
                            "" if r.val_loss is None else repr(r.val_loss),
                            "" if r.val_acc is None else repr(r.val_acc), f"{r.seconds:.3f}"])  # fmt: skip


def _batches(n: int, config: TrainConfig, epoch: int) -> list[np.ndarray]:
    order = rng_for(config.seed, "epoch", epoch).permutation(n) if config.shuffle else np.arange(n)
    return [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]


def evaluate_loss(logits_fn, n: int, labels: torch.Tensor, batches: list[np.ndarray] | None = None,
                  batch_size: int = 256) -> tuple[float, float]:  # fmt: skip
    """Mean cross-entropy and accuracy over ``n`` items, evaluated batchwise without gradients."""
    if batches is None:
        batches = [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    total, correct = 0.0, 0
    with torch.no_grad():
        for idx in batches:
            idx_t = torch.from_numpy(np.asarray(idx))
            logits = logits_fn(idx_t)
            y = labels[idx_t]
            total += float(F.cross_entropy(logits, y, reduction="sum"))
            correct += int((logits.argmax(dim=1) == y).sum())
    return total / n, correct / n


def _fit(module, params, logits_fn, labels: torch.Tensor, val, config: TrainConfig, before_epoch=None) -> TrainHistory:
    n = labels.shape[0]
    if n == 0:
        raise TrainingError("empty training set")
    torch.manual_seed(derive_seed(config.seed, "torch"))
    opt = Adam(params, lr=config.learning_rate, betas=config.betas, eps=config.eps)
    history = TrainHistory()
    best_acc = -1.0
    for epoch in range(1, config.epochs + 1):
        if before_epoch is not None:
            before_epoch(epoch)
        t0 = time.perf_counter()
        module.train()
        total, correct = 0.0, 0
        for b, idx in enumerate(_batches(n, config, epoch)):
            idx_t = torch.from_numpy(idx)
            logits = logits_fn(idx_t)
            y = labels[idx_t]
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.detach().argmax(dim=1) == y).sum())
        module.eval()
        val_loss = val_acc = None
        if val is not None:
            val_loss, val_acc = val()
            if config.select_best and val_acc > best_acc:
                best_acc = val_acc
                history.best_epoch = epoch
                history.best_state = copy.deepcopy(module.state_dict())
        history.records.append(EpochRecord(epoch, total / n, correct / n, val_loss, val_acc, time.perf_counter() - t0))
    return history


def _dtype_of(module) -> torch.dtype:
    return next(module.parameters()).dtype


def _to_arrays(items, class_set: list[str], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([it.values for it in items])).to(dtype)
    y = torch.tensor([class_set.index(it.label) for it in items], dtype=torch.long)
    return x, y


def train_single_view(model: SingleViewModel, train, val, config: TrainConfig, class_set: list[str]):
    """Pretrain extractor + head on mixed surface and section patches."""
    if not train:
        raise TrainingError("empty training set")
    if model.head.config.num_classes != len(class_set):
        raise TrainingError(f"head has {model.head.config.num_classes} outputs for {len(class_set)} classes")
    dtype = _dtype_of(model)
    x, y = _to_arrays(train, class_set, dtype)
    val_fn = None
    if val:
        xv, yv = _to_arrays(val, class_set, dtype)
        val_fn = lambda: evaluate_loss(lambda i: model(xv[i]), len(yv), yv)  # noqa: E731
    params = [p for p in model.parameters() if p.requires_grad]
    history = _fit(model, params, lambda i: model(x[i]), y, val_fn, config)
    return model, history


def freeze_features(model: SingleViewModel | FeatureExtractor) -> FeatureExtractor:
    """Detach the extractor from a trained model and freeze it; the head is dropped."""
    ext = model if isinstance(model, FeatureExtractor) else model.extractor
    if ext.frozen:
        return ext
    return duplicate(ext).freeze()


def build_multiview(frozen: FeatureExtractor, strategy: str, num_classes: int, init_seed: int,
                    head_config: HeadConfig | None = None) -> MultiViewModel:  # fmt: skip
    if not frozen.frozen:
        raise ValueError("build_multiview needs a frozen extractor; call freeze_features first")
    if strategy not in FUSIONS:
        raise ValueError(f"unknown fusion strategy {strategy!r}")
    dtype = frozen.dtype
    head_config = head_config or default_head(frozen.feature_dim, num_classes)
    head = build_head(head_config, derive_seed(init_seed, "head"), dtype)
    model = MultiViewModel(duplicate(frozen), duplicate(frozen), strategy, head).to(dtype)
    if model.fusion_dense is not None:
        init_parameters(model.fusion_dense, derive_seed(init_seed, "fusion"))
    return model


@dataclass(frozen=True)
class PatchPair:
    surface: object
    section: object
    label: str
    specimen_match: bool


def pair_views(patches, policy: str = "specimen_first", seed: int = 0) -> list[PatchPair]:
    """Pair every surface patch with one section patch of the same class.

    ``specimen_first`` prefers a section patch of the same specimen; the
    choice is uniform and keyed by (seed, surface patch_id).
    """
    if policy not in PAIRING_POLICIES:
        raise ValueError(f"unknown pairing policy {policy!r}; expected one of {PAIRING_POLICIES}")
    ordered = sorted(patches, key=lambda p: p.patch_id)
    surfaces = [p for p in ordered if p.view == "surface"]
    by_specimen: dict[tuple[str, str], list] = defaultdict(list)
    by_class: dict[str, list] = defaultdict(list)
    for p in ordered:
        if p.view == "section":
            by_specimen[(p.label, p.specimen_id)].append(p)
            by_class[p.label].append(p)
    missing = sorted({s.label for s in surfaces if not by_class.get(s.label)})
    if missing:
        raise ValueError(f"class(es) {', '.join(missing)} have surface patches but no section patches")
    pairs = []
    for s in surfaces:
        rng = rng_for(seed, "pair", policy, s.patch_id)
        pool = by_specimen.get((s.label, s.specimen_id)) if policy == "specimen_first" else None
        if not pool:
            pool = by_class[s.label]
        t = pool[int(rng.integers(len(pool)))]
        pairs.append(PatchPair(s, t, s.label, t.specimen_id == s.specimen_id))
    return pairs


def _pair_features(model: MultiViewModel, pairs: list[PatchPair], batch_size: int = 256):
    """Frozen-branch features for every pair; branches are fixed so this is computed once."""
    dtype = _dtype_of(model)
    cache: dict[tuple[str, str], torch.Tensor] = {}
    todo = {"surface": {}, "section": {}}
    for pr in pairs:
        todo["surface"].setdefault(pr.surface.patch_id, pr.surface)
        todo["section"].setdefault(pr.section.patch_id, pr.section)
    for view, branch in (("surface", model.branch_surface), ("section", model.branch_section)):
        items = list(todo[view].values())
        for i in range(0, len(items), batch_size):
            chunk = items[i : i + batch_size]
            x = torch.from_numpy(np.stack([c.values for c in chunk])).to(dtype)
            with torch.no_grad():
                f = branch(x)
            for c, row in zip(chunk, f):
                cache[(view, c.patch_id)] = row
    fa = torch.stack([cache[("surface", p.surface.patch_id)] for p in pairs])
    fb = torch.stack([cache[("section", p.section.patch_id)] for p in pairs])
    return fa, fb


def train_multiview(model: MultiViewModel, pairs: list[PatchPair], val_pairs, config: TrainConfig,
                    class_set: list[str], repair_from=None, policy: str = "specimen_first"):  # fmt: skip
    """Train the fusion layer and head on paired views; frozen branches are checked afterwards."""
    if not pairs:
        raise TrainingError("empty training set")
    if not (model.branch_surface.frozen and model.branch_section.frozen):
        raise TrainingError("multi-view branches must be frozen before training")
    digests = (parameter_digest(model.branch_surface), parameter_digest(model.branch_section))

    state = {}

    def load(pair_list):
        state["fa"], state["fb"] = _pair_features(model, pair_list)
        state["y"] = torch.tensor([class_set.index(p.label) for p in pair_list], dtype=torch.long)

    load(pairs)
    before_epoch = None
    if config.repair_each_epoch and repair_from is not None:
        def before_epoch(epoch):
            if epoch > 1:
                load(pair_views(repair_from, policy, derive_seed(config.seed, "repair", epoch)))
                if state["y"].shape[0] != labels.shape[0]:
                    raise TrainingError("re-pairing changed the number of training pairs")
                labels.copy_(state["y"])

    labels = state["y"].clone()
    val_fn = None
    if val_pairs:
        va, vb = _pair_features(model, val_pairs)
        vy = torch.tensor([class_set.index(p.label) for p in val_pairs], dtype=torch.long)
        val_fn = lambda: evaluate_loss(lambda i: model.logits_from_features(va[i], vb[i]), len(vy), vy)  # noqa: E731

    history = _fit(
        model,
        model.trainable_parameters(),
        lambda i: model.logits_from_features(state["fa"][i], state["fb"][i]),
        labels,
        val_fn,
        config,
        before_epoch,
    )
    after = (parameter_digest(model.branch_surface), parameter_digest(model.branch_section))
    if after != digests:
        raise FrozenParameterError("internal error: a frozen branch changed during multi-view training")
    return model, history


def adam_quadratic_probe(w0, target, lr: float = 2e-4, steps: int = 5000, dtype=torch.float64):
    """Minimise ||w - target||^2 with Adam for ``steps`` iterations.

    Returns the final iterate and the first step at which ||w - target|| < 1e-3
    (None if never reached).
    """
    w = torch.tensor(np.asarray(w0, float), dtype=dtype, requires_grad=True)
    t = torch.tensor(np.asarray(target, float), dtype=dtype)
    opt = Adam([w], lr=lr)
    first = None
    for k in range(1, steps + 1):
        opt.zero_grad()
        loss = ((w - t) ** 2).sum()
        loss.backward()
        opt.step()
        if first is None and math.sqrt(float(((w.detach() - t) ** 2).sum())) < 1e-3:
            first = k
    return w.detach().numpy(), first
