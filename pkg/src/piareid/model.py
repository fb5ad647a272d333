"""Model assembly: encoder, attention, heads, and branch batch norms in one
state object with a stable parameter naming scheme."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dbdl
from . import diffcore as dc
from . import encoder
from .diffcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 64
    image_width: int = 32
    widths: tuple[int, ...] = encoder.DEFAULT_WIDTHS
    strides: tuple[int, ...] = encoder.DEFAULT_STRIDES
    kernel_size: int = encoder.DEFAULT_KERNEL
    attention_kernel_size: int = dbdl.DEFAULT_ATTENTION_KERNEL
    pooling_mode: str = encoder.POOL_GAP_GMP
    use_final_bn: bool = True
    use_dbdl: bool = True
    num_identities: int = 8
    num_clothing_classes: int = 16
    seed: int = 0

    @property
    def embedding_dim(self) -> int:
        return encoder.embedding_dim(self.widths, self.pooling_mode)


@dataclass
class ModelState:
    cfg: ModelConfig
    backbone: encoder.EncoderParams
    attention: dbdl.AttentionParams
    heads: encoder.ClassifierHeads
    bn_identity: encoder.BatchNormState | None
    bn_clothing: encoder.BatchNormState | None

    def named_parameters(self) -> dict[str, Tensor]:
        """Every trainable tensor under the active configuration, in a fixed order."""
        named: dict[str, Tensor] = {}
        for i, (weight, bias) in enumerate(zip(self.backbone.weights, self.backbone.biases)):
            named[f"backbone.conv{i}.weight"] = weight
            named[f"backbone.conv{i}.bias"] = bias
        if self.cfg.use_dbdl:
            named["attention.weight"] = self.attention.weight
            named["attention.bias"] = self.attention.bias
            named["attention.lambda_raw"] = self.attention.lambda_raw
        if self.bn_identity is not None:
            named["bn_identity.gamma"] = self.bn_identity.gamma
            named["bn_identity.beta"] = self.bn_identity.beta
        if self.cfg.use_dbdl and self.bn_clothing is not None:
            named["bn_clothing.gamma"] = self.bn_clothing.gamma
            named["bn_clothing.beta"] = self.bn_clothing.beta
        named["heads.id.weight"] = self.heads.id_weight
        named["heads.id.bias"] = self.heads.id_bias
        if self.cfg.use_dbdl:
            named["heads.clothing.weight"] = self.heads.clothing_weight
            named["heads.clothing.bias"] = self.heads.clothing_bias
        return named

    def named_buffers(self) -> dict[str, np.ndarray]:
        buffers: dict[str, np.ndarray] = {}
        for tag, bn in (("bn_identity", self.bn_identity), ("bn_clothing", self.bn_clothing)):
            if bn is not None:
                buffers[f"{tag}.running_mean"] = bn.running_mean
                buffers[f"{tag}.running_var"] = bn.running_var
        return buffers


def build_model(cfg: ModelConfig) -> ModelState:
    """Deterministic construction: one rng stream, fixed draw order."""
    rng = np.random.default_rng([cfg.seed, 0])
    backbone = encoder.init_encoder(
        rng,
        widths=cfg.widths,
        strides=cfg.strides,
        kernel_size=cfg.kernel_size,
        input_hw=(cfg.image_height, cfg.image_width),
    )
    attention = dbdl.init_attention(rng, cfg.attention_kernel_size)
    dim = cfg.embedding_dim
    heads = encoder.init_heads(
        rng, dim, cfg.num_identities,
        cfg.num_clothing_classes if cfg.use_dbdl else None,
    )
    bn_identity = encoder.BatchNormState.create(dim) if cfg.use_final_bn else None
    bn_clothing = (
        encoder.BatchNormState.create(dim) if (cfg.use_final_bn and cfg.use_dbdl) else None
    )
    return ModelState(
        cfg=cfg,
        backbone=backbone,
        attention=attention,
        heads=heads,
        bn_identity=bn_identity,
        bn_clothing=bn_clothing,
    )


def model_config_text(cfg: ModelConfig) -> str:
    """Flat `key = value` rendering, sufficient to rebuild the model."""
    lines = [
        f"image_height = {cfg.image_height}",
        f"image_width = {cfg.image_width}",
        "widths = " + ",".join(str(w) for w in cfg.widths),
        "strides = " + ",".join(str(s) for s in cfg.strides),
        f"kernel_size = {cfg.kernel_size}",
        f"attention_kernel_size = {cfg.attention_kernel_size}",
        f"pooling_mode = {cfg.pooling_mode}",
        f"use_final_bn = {str(cfg.use_final_bn).lower()}",
        f"use_dbdl = {str(cfg.use_dbdl).lower()}",
        f"num_identities = {cfg.num_identities}",
        f"num_clothing_classes = {cfg.num_clothing_classes}",
        f"seed = {cfg.seed}",
    ]
    return "\n".join(lines) + "\n"


def parse_model_config_text(text: str) -> ModelConfig:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"model config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()

    def ints(key: str) -> tuple[int, ...]:
        return tuple(int(part) for part in values.pop(key).split(","))

    def boolean(key: str) -> bool:
        raw = values.pop(key)
        if raw not in ("true", "false"):
            raise ValueError(f"model config key {key}: expected true/false, got {raw!r}")
        return raw == "true"

    try:
        cfg = ModelConfig(
            image_height=int(values.pop("image_height")),
            image_width=int(values.pop("image_width")),
            widths=ints("widths"),
            strides=ints("strides"),
            kernel_size=int(values.pop("kernel_size")),
            attention_kernel_size=int(values.pop("attention_kernel_size")),
            pooling_mode=values.pop("pooling_mode"),
            use_final_bn=boolean("use_final_bn"),
            use_dbdl=boolean("use_dbdl"),
            num_identities=int(values.pop("num_identities")),
            num_clothing_classes=int(values.pop("num_clothing_classes")),
            seed=int(values.pop("seed")),
        )
    except KeyError as missing:
        raise ValueError(f"model config missing key {missing.args[0]}") from None
    if values:
        raise ValueError(f"model config has unknown keys: {sorted(values)}")
    return cfg


def forward_embeddings(model: ModelState, pixels: Tensor, *, training: bool):
    """Pixels to (f, f_c, masks); f_c and masks are None without the dual branch."""
    fmap = encoder.forward_backbone(pixels, model.backbone, training=training)
    if not model.cfg.use_dbdl:
        f = encoder.embed(
            fmap, pooling_mode=model.cfg.pooling_mode,
            bn=model.bn_identity, training=training,
        )
        return f, None, None
    masks = dbdl.build_masks(fmap, model.attention)
    f, f_c = dbdl.disentangle(
        fmap, masks,
        pooling_mode=model.cfg.pooling_mode,
        bn_identity=model.bn_identity,
        bn_clothing=model.bn_clothing,
        training=training,
    )
    return f, f_c, masks


def extract_embeddings(model: ModelState, pixel_batches) -> np.ndarray:
    """Eval-mode identity embeddings for an iterable of [N,3,H,W] arrays."""
    chunks = []
    for batch in pixel_batches:
        f, _, _ = forward_embeddings(model, dc.constant(batch), training=False)
        chunks.append(f.data)
    if not chunks:
        dim = model.cfg.embedding_dim
        return np.zeros((0, dim))
    return np.concatenate(chunks, axis=0)


def extract_branch_embeddings(model: ModelState, pixel_batches) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode (f, f_c) pairs; requires the dual branch."""
    if not model.cfg.use_dbdl:
        raise ValueError("branch extraction needs the dual-branch configuration")
    f_chunks, fc_chunks = [], []
    for batch in pixel_batches:
        f, f_c, _ = forward_embeddings(model, dc.constant(batch), training=False)
        f_chunks.append(f.data)
        fc_chunks.append(f_c.data)
    return np.concatenate(f_chunks, axis=0), np.concatenate(fc_chunks, axis=0)
