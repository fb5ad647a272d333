"""Two-stage training loop: balanced cross-modality batches, Adam with a
staircase learning-rate schedule, and a stage switch that turns on the
prototype-bank losses partway through the run.

Stage I trains the disentangling branch alone (classification plus the
orthogonality penalty).  From ``stage2_start_epoch`` on, each batch also
refreshes the per-identity prototype bank and adds the intra- and
inter-modality prototype-contrastive terms.  Every loss component is logged
per iteration so a run's arithmetic can be re-verified from its own log.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bpl, checkpoint, dbdl, encoder, evalkit
from . import diffcore as dc
from . import model as model_mod
from .diffcore import Tensor
from .synthbench import Manifest, SPLIT_TRAIN, VISIBLE

DEFAULT_BASE_LR = 3.5e-4
DEFAULT_LR_DECAY = 0.1
DEFAULT_LAMBDA_ORTH = 0.5
DEFAULT_LAMBDA_INTER = 1.5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainerError(RuntimeError):
    """Base class for training-loop failures."""


class InsufficientSamplesError(TrainerError):
    """A batch cannot be filled from the available training rows."""


class MissingGradientError(TrainerError):
    """An optimizer step found a parameter without a gradient."""


class StageTermMismatchError(TrainerError):
    """Prototype-loss terms were supplied in the stage that excludes them."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    The defaults are the desk-scale schedule: 30 epochs with the prototype
    stage starting at epoch 18 and the learning rate decaying every 10
    epochs — one third of the full-scale 90/55/30 schedule.
    """

    epochs: int = 30
    stage2_start_epoch: int = 18
    base_lr: float = DEFAULT_BASE_LR
    lr_decay: float = DEFAULT_LR_DECAY
    lr_decay_period_epochs: int = 10
    ids_per_batch: int = 8
    instances_per_modality: int = 4
    lambda_orth: float = DEFAULT_LAMBDA_ORTH
    lambda_inter: float = DEFAULT_LAMBDA_INTER
    tau: float = bpl.DEFAULT_TAU
    alpha: float = bpl.DEFAULT_ALPHA
    flip_probability: float = 0.5
    use_dbdl: bool = True
    use_orth: bool = True
    use_intra: bool = True
    use_inter: bool = True
    eval_every: int = 1
    seed: int = 0
    image_height: int = 64
    image_width: int = 32
    widths: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (4, 2, 1)
    kernel_size: int = 3
    attention_kernel_size: int = 7
    pooling_mode: str = "gap_gmp"
    use_final_bn: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.stage2_start_epoch:
            raise ValueError("stage2_start_epoch must be >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.lr_decay_period_epochs < 1:
            raise ValueError("lr_decay_period_epochs must be >= 1")
        if self.ids_per_batch < 2:
            raise ValueError("ids_per_batch must be >= 2")
        if self.instances_per_modality < 1:
            raise ValueError("instances_per_modality must be >= 1")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip_probability must be in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must be in [0, 1)")
        if self.use_orth and not self.use_dbdl:
            raise ValueError("the orthogonality term needs the dual branch enabled")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        encoder.validate_architecture(
            tuple(self.widths), tuple(self.strides), self.kernel_size
        )
        if self.attention_kernel_size % 2 != 1 or self.attention_kernel_size < 1:
            raise ValueError(
                f"attention kernel size must be odd and positive, "
                f"got {self.attention_kernel_size}"
            )

    @property
    def batch_size(self) -> int:
        return 2 * self.ids_per_batch * self.instances_per_modality

    def model_config(self, num_identities: int, num_clothing_classes: int) -> model_mod.ModelConfig:
        return model_mod.ModelConfig(
            image_height=self.image_height,
            image_width=self.image_width,
            widths=tuple(self.widths),
            strides=tuple(self.strides),
            kernel_size=self.kernel_size,
            attention_kernel_size=self.attention_kernel_size,
            pooling_mode=self.pooling_mode,
            use_final_bn=self.use_final_bn,
            use_dbdl=self.use_dbdl,
            num_identities=num_identities,
            num_clothing_classes=num_clothing_classes,
            seed=self.seed,
        )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Staircase schedule: multiply by ``lr_decay`` every decay period."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.base_lr * cfg.lr_decay ** (epoch // cfg.lr_decay_period_epochs)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators, keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    """One Adam update over every parameter; gradients must all be present."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(
            "optimizer step with missing gradients: " + ", ".join(sorted(missing))
        )
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        grad = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m[...] = beta1 * m + (1.0 - beta1) * grad
        v[...] = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data[...] = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# balanced sampling


class BalancedSampler:
    """Batches of P identities x T visible + T infrared training images.

    Identities cycle through shuffled permutations so every identity is
    visited at the same rate; per-identity image pools reshuffle when
    exhausted.  All randomness comes from the generator passed in, so a
    fixed seed reproduces the exact batch sequence.
    """

    def __init__(self, manifest: Manifest, ids_per_batch: int,
                 instances_per_modality: int):
        self.ids_per_batch = ids_per_batch
        self.instances_per_modality = instances_per_modality
        train_rows = manifest.rows_for_split(SPLIT_TRAIN)
        if not train_rows:
            raise InsufficientSamplesError("manifest has no training rows")
        self.identities = sorted({manifest.rows[i].identity for i in train_rows})
        if ids_per_batch > len(self.identities):
            raise InsufficientSamplesError(
                f"ids_per_batch {ids_per_batch} exceeds the "
                f"{len(self.identities)} training identities"
            )
        self._pools: dict[tuple[int, bool], list[int]] = {}
        for row_index in train_rows:
            row = manifest.rows[row_index]
            key = (row.identity, row.modality == VISIBLE)
            self._pools.setdefault(key, []).append(row_index)
        for identity in self.identities:
            for visible in (True, False):
                pool = self._pools.get((identity, visible), [])
                if len(pool) < instances_per_modality:
                    modality = "visible" if visible else "infrared"
                    raise InsufficientSamplesError(
                        f"identity {identity} has {len(pool)} {modality} training "
                        f"images; need at least {instances_per_modality}"
                    )
        self.total_rows = len(train_rows)
        self._queues: dict[tuple[int, bool], list[int]] = {}

    @property
    def batch_size(self) -> int:
        return 2 * self.ids_per_batch * self.instances_per_modality

    def iterations_per_epoch(self) -> int:
        iterations = self.total_rows // self.batch_size
        if iterations < 1:
            raise InsufficientSamplesError(
                f"batch size {self.batch_size} exceeds the {self.total_rows} "
                "training rows; no full batch fits"
            )
        return iterations

    def epoch_identity_schedule(self, rng: np.random.Generator) -> list[list[int]]:
        """Identity groups for one epoch; each group has distinct identities."""
        schedule: list[list[int]] = []
        queue: list[int] = []
        for _ in range(self.iterations_per_epoch()):
            group: list[int] = []
            while len(group) < self.ids_per_batch:
                if not queue:
                    queue = [self.identities[i] for i in rng.permutation(len(self.identities))]
                for position, candidate in enumerate(queue):
                    if candidate not in group:
                        group.append(queue.pop(position))
                        break
                else:
                    # everything left is a duplicate of this group; start a new cycle
                    queue = []
            schedule.append(group)
        return schedule

    def _draw(self, identity: int, visible: bool, rng: np.random.Generator) -> list[int]:
        key = (identity, visible)
        queue = self._queues.setdefault(key, [])
        picked = []
        for _ in range(self.instances_per_modality):
            if not queue:
                pool = self._pools[key]
                queue.extend(pool[i] for i in rng.permutation(len(pool)))
            picked.append(queue.pop(0))
        return picked

    def assemble(self, group: list[int], rng: np.random.Generator
                 ) -> tuple[list[int], np.ndarray, np.ndarray]:
        """Row indices plus aligned identity/modality arrays, visible half first."""
        rows: list[int] = []
        ids: list[int] = []
        for visible in (True, False):
            for identity in group:
                rows.extend(self._draw(identity, visible, rng))
                ids.extend([identity] * self.instances_per_modality)
        half = len(rows) // 2
        is_visible = np.zeros(len(rows), dtype=bool)
        is_visible[:half] = True
        return rows, np.asarray(ids), is_visible


# ---------------------------------------------------------------------------
# loss assembly and reporting


@dataclass
class StageTerms:
    """Scalar loss tensors for one batch; absent terms stay None."""

    ce_id: Tensor
    ce_clothing: Tensor | None = None
    orth: Tensor | None = None
    intra_v: Tensor | None = None
    intra_i: Tensor | None = None
    inter_v: Tensor | None = None
    inter_i: Tensor | None = None


def stage_loss(stage: int, terms: StageTerms, cfg: TrainConfig) -> Tensor:
    """Combine the active terms in a fixed order.

    Stage I: ce_id [+ ce_clothing] [+ lambda_orth * orth].  Stage II adds
    the prototype terms: + (intra_v + intra_i) + lambda_inter * (inter_v +
    inter_i).  Prototype terms in Stage I are a caller bug and raise.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    prototype_terms = (terms.intra_v, terms.intra_i, terms.inter_v, terms.inter_i)
    if stage == 1 and any(t is not None for t in prototype_terms):
        raise StageTermMismatchError("prototype losses are not part of stage 1")
    total = terms.ce_id
    if terms.ce_clothing is not None:
        total = dc.add(total, terms.ce_clothing)
    if terms.orth is not None:
        total = dc.add(total, dc.scale(terms.orth, cfg.lambda_orth))
    if terms.intra_v is not None:
        total = dc.add(total, dc.add(terms.intra_v, terms.intra_i))
    if terms.inter_v is not None:
        total = dc.add(total, dc.scale(dc.add(terms.inter_v, terms.inter_i), cfg.lambda_inter))
    return total


@dataclass
class LossReport:
    """Logged scalars for one iteration; absent terms are omitted from dicts."""

    epoch: int
    iteration: int
    stage: int
    lr: float
    total: float
    ce_id: float
    ce_clothing: float | None = None
    orth: float | None = None
    intra_v: float | None = None
    intra_i: float | None = None
    inter_v: float | None = None
    inter_i: float | None = None

    def to_dict(self) -> dict:
        out = {
            "epoch": self.epoch,
            "iteration": self.iteration,
            "stage": self.stage,
            "lr": self.lr,
            "total": self.total,
            "ce_id": self.ce_id,
        }
        for key in ("ce_clothing", "orth", "intra_v", "intra_i", "inter_v", "inter_i"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    def expected_total(self, lambda_orth: float, lambda_inter: float) -> float:
        """Recombine the logged terms exactly as ``stage_loss`` combines tensors."""
        total = self.ce_id
        if self.ce_clothing is not None:
            total = total + self.ce_clothing
        if self.orth is not None:
            total = total + self.orth * lambda_orth
        if self.intra_v is not None:
            total = total + (self.intra_v + self.intra_i)
        if self.inter_v is not None:
            total = total + (self.inter_v + self.inter_i) * lambda_inter
        return total

    @classmethod
    def from_terms(cls, epoch: int, iteration: int, stage: int, lr: float,
                   total: Tensor, terms: StageTerms) -> "LossReport":
        def value(t: Tensor | None) -> float | None:
            return None if t is None else float(t.data)

        return cls(
            epoch=epoch,
            iteration=iteration,
            stage=stage,
            lr=lr,
            total=float(total.data),
            ce_id=float(terms.ce_id.data),
            ce_clothing=value(terms.ce_clothing),
            orth=value(terms.orth),
            intra_v=value(terms.intra_v),
            intra_i=value(terms.intra_i),
            inter_v=value(terms.inter_v),
            inter_i=value(terms.inter_i),
        )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    state: model_mod.ModelState
    bank: bpl.PrototypeBank
    config: TrainConfig
    epoch_records: list[dict]
    abs_cos_init: float | None = None
    abs_cos_stage1_end: float | None = None
    checkpoint_path: Path | None = None
    log_path: Path | None = None

    def iteration_reports(self) -> list[dict]:
        return [r for record in self.epoch_records for r in record["iterations"]]


def _dense_remap(labels: list[int], kind: str) -> dict[int, int]:
    distinct = sorted(set(labels))
    if not distinct:
        raise InsufficientSamplesError(f"no {kind} labels in the training split")
    return {label: index for index, label in enumerate(distinct)}


def _epoch_means(reports: list[LossReport]) -> dict[str, float]:
    means: dict[str, float] = {}
    for key in ("total", "ce_id", "ce_clothing", "orth",
                "intra_v", "intra_i", "inter_v", "inter_i"):
        values = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if values:
            means[key] = float(np.mean(values))
    return means


def _validation_abs_cos(manifest: Manifest, state: model_mod.ModelState) -> float:
    table = evalkit.test_feature_table(manifest, state, with_clothing=True)
    return dbdl.mean_abs_cosine(table.features, table.clothing_features)


def train(manifest: Manifest, cfg: TrainConfig,
          out_dir: str | Path | None = None) -> TrainResult:
    """Run the full two-stage schedule over the manifest's training split.

    Writes ``checkpoint.bin`` and ``train_log.jsonl`` into ``out_dir`` when
    given.  Identical manifest + config reproduce the run bit-for-bit.
    """
    cfg.validate()
    sampler = BalancedSampler(manifest, cfg.ids_per_batch, cfg.instances_per_modality)
    train_rows = manifest.rows_for_split(SPLIT_TRAIN)
    id_remap = _dense_remap([manifest.rows[i].identity for i in train_rows], "identity")
    clothing_remap = _dense_remap([manifest.rows[i].clothing for i in train_rows], "clothing")

    model_cfg = cfg.model_config(len(id_remap), len(clothing_remap))
    state = model_mod.build_model(model_cfg)
    bank = bpl.PrototypeBank.create(len(id_remap), model_cfg.embedding_dim, alpha=cfg.alpha)
    adam = AdamState()
    rng = np.random.default_rng([cfg.seed, 1])

    abs_cos_init = _validation_abs_cos(manifest, state) if cfg.use_dbdl else None
    abs_cos_stage1_end = None
    stage1_end_epoch = min(cfg.stage2_start_epoch, cfg.epochs) - 1

    epoch_records: list[dict] = []
    for epoch in range(cfg.epochs):
        stage = 2 if epoch >= cfg.stage2_start_epoch else 1
        prototype_losses_on = stage == 2 and (cfg.use_intra or cfg.use_inter)
        lr = lr_at(epoch, cfg)
        reports: list[LossReport] = []

        for iteration, group in enumerate(sampler.epoch_identity_schedule(rng)):
            rows, raw_ids, is_visible = sampler.assemble(group, rng)
            pixels = np.stack([manifest.load_pixels(i) for i in rows])
            flips = rng.random(len(rows)) < cfg.flip_probability
            pixels[flips] = pixels[flips][..., ::-1]
            y_id = np.array([id_remap[i] for i in raw_ids])
            y_clothing = np.array(
                [clothing_remap[manifest.rows[i].clothing] for i in rows]
            )

            with dc.Tape() as tape:
                f, f_c, _ = model_mod.forward_embeddings(
                    state, dc.constant(pixels), training=True
                )
                if cfg.use_dbdl:
                    classified = dbdl.classification_loss(
                        f, f_c, y_id, y_clothing, state.heads
                    )
                    terms = StageTerms(
                        ce_id=classified.ce_identity,
                        ce_clothing=classified.ce_clothing,
                        orth=dbdl.orthogonality_loss(f, f_c) if cfg.use_orth else None,
                    )
                else:
                    terms = StageTerms(
                        ce_id=dbdl.cross_entropy(
                            f, state.heads.id_weight, state.heads.id_bias, y_id
                        )
                    )
                if prototype_losses_on:
                    batch = bpl.ModalityBatch(f, y_id, is_visible)
                    bpl.absorb_batch(bank, batch)
                    if cfg.use_intra:
                        intra = bpl.intra_loss(batch, bank, tau=cfg.tau)
                        terms.intra_v, terms.intra_i = intra.visible, intra.infrared
                    if cfg.use_inter:
                        inter = bpl.inter_loss(batch, bank, tau=cfg.tau)
                        terms.inter_v, terms.inter_i = inter.visible, inter.infrared
                total = stage_loss(stage, terms, cfg)
                dc.backward(total, tape)

            params = state.named_parameters()
            adam_step(params, adam, lr)
            dc.zero_grads(params.values())
            reports.append(LossReport.from_terms(epoch, iteration, stage, lr, total, terms))

        record: dict = {
            "epoch": epoch,
            "stage": stage,
            "lr": lr,
            "iterations": [r.to_dict() for r in reports],
            "means": _epoch_means(reports),
        }

        if prototype_losses_on and epoch == cfg.stage2_start_epoch and not bank.fully_initialized:
            raise TrainerError(
                "prototype bank not fully initialized after the first "
                "prototype-stage epoch; the sampler did not reach every identity"
            )
        if cfg.use_dbdl and epoch == stage1_end_epoch:
            abs_cos_stage1_end = _validation_abs_cos(manifest, state)
            record["val_abs_cos"] = abs_cos_stage1_end
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            table = evalkit.test_feature_table(manifest, state)
            record["eval"] = {
                direction: report.to_dict()
                for direction, report in evalkit.evaluate_both(manifest, state, table).items()
            }
        epoch_records.append(record)

    result = TrainResult(
        state=state,
        bank=bank,
        config=cfg,
        epoch_records=epoch_records,
        abs_cos_init=abs_cos_init,
        abs_cos_stage1_end=abs_cos_stage1_end,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out / "checkpoint.bin"
        checkpoint.save(
            result.checkpoint_path, state, bank,
            model_mod.model_config_text(model_cfg),
        )
        result.log_path = out / "train_log.jsonl"
        with open(result.log_path, "w", encoding="utf-8") as handle:
            for record in epoch_records:
                handle.write(json.dumps(record, sort_keys=False) + "\n")
    return result
