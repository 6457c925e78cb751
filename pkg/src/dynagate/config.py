"""INI-style run configuration.

Sections: [model] picks a preset or spells out the architecture,
[data] sizes the synthetic task, [train] holds teacher/optimizer
settings, [prune] holds the student run. Every run directory receives
the fully resolved configuration so results are reconstructible from
the artifacts alone. Flags override config values; environment
variables never do.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .distill import KD_CHOICES, MODE_CHOICES, DistillConfig
from .errors import UsageError
from .model import MitConfig, PRESETS, StageConfig

VAL_SEED_OFFSET = 1_000_003


@dataclass
class DataConfig:
    train_size: int = 64
    val_size: int = 16
    noise_sigma: float = 0.05
    max_shapes: int = 3
    void_border: int = 0
    class_split: bool = False

    def __post_init__(self):
        if self.train_size < 1 or self.val_size < 1:
            raise ValueError("train_size and val_size must be positive, got "
                             f"{self.train_size} and {self.val_size}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.max_shapes < 0 or self.void_border < 0:
            raise ValueError("max_shapes and void_border must be >= 0, got "
                             f"{self.max_shapes} and {self.void_border}")


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 2e-3
    poly_power: float = 0.9

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.poly_power < 0:
            raise ValueError(f"poly_power must be >= 0, got {self.poly_power}")


@dataclass
class RunConfig:
    model: MitConfig
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: DistillConfig = field(default_factory=lambda: DistillConfig(120, 180))
    preset: str = "tiny"


def _get(parser, section, key, cast, default, path):
    if not parser.has_option(section, key):
        if default is None:
            raise UsageError(f"{path}: missing required [{section}] {key}")
        return default
    raw = parser.get(section, key)
    try:
        return cast(raw)
    except (ValueError, UsageError) as exc:
        raise UsageError(f"{path}: bad value for [{section}] {key}: {raw!r} "
                         f"({exc})") from None


def _int_list(raw: str):
    return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)


def _hw(raw: str):
    parts = raw.lower().replace(" ", "").split("x")
    if len(parts) != 2:
        raise ValueError("expected HxW")
    return (int(parts[0]), int(parts[1]))


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected on/off")


def _choice(options):
    def cast(raw: str):
        low = raw.strip().lower()
        if low not in options:
            raise ValueError(f"expected one of {options}")
        return low
    return cast


def _build_model(parser, path) -> tuple:
    preset = _get(parser, "model", "preset", _choice(tuple(PRESETS)), "tiny",
                  path)
    num_classes = _get(parser, "model", "num_classes", int,
                       4 if preset == "tiny" else 150, path)
    input_hw = _get(parser, "model", "input", _hw,
                    (32, 32) if preset == "tiny" else (512, 512), path)
    base = PRESETS[preset](num_classes=num_classes, input_hw=input_hw)
    explicit = {k: _get(parser, "model", k, _int_list, None, path)
                for k in ("dims", "depths", "heads", "sr", "kernels",
                          "strides", "pads")
                if parser.has_option("model", k)}
    stages = base.stages
    if explicit:
        lists = {
            "dims": [s.dim for s in stages],
            "depths": [s.depth for s in stages],
            "heads": [s.heads for s in stages],
            "sr": [s.sr_ratio for s in stages],
            "kernels": [s.patch_kernel for s in stages],
            "strides": [s.patch_stride for s in stages],
            "pads": [s.patch_pad for s in stages],
        }
        for key, values in explicit.items():
            if len(values) != len(stages):
                raise UsageError(
                    f"{path}: [model] {key} needs {len(stages)} entries, "
                    f"got {len(values)}")
            lists[key] = list(values)
        stages = tuple(
            StageConfig(dim=lists["dims"][i], depth=lists["depths"][i],
                        heads=lists["heads"][i], sr_ratio=lists["sr"][i],
                        patch_kernel=lists["kernels"][i],
                        patch_stride=lists["strides"][i],
                        patch_pad=lists["pads"][i])
            for i in range(len(stages)))
    model = MitConfig(
        stages=stages,
        num_classes=num_classes,
        decoder_dim=_get(parser, "model", "decoder_dim", int,
                         base.decoder_dim, path),
        fusion=_get(parser, "model", "fusion", _choice(("concat", "add")),
                    base.fusion, path),
        ffn_expand=_get(parser, "model", "ffn_expand", int, base.ffn_expand,
                        path),
        input_hw=input_hw,
    )
    return model, preset


def load_config(path: str) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"cannot read config file {path}")
    try:
        model, preset = _build_model(parser, path)
    except UsageError:
        raise
    except Exception as exc:
        raise UsageError(f"{path}: invalid [model] section: {exc}") from None
    try:
        data = DataConfig(
            train_size=_get(parser, "data", "train_size", int, 64, path),
            val_size=_get(parser, "data", "val_size", int, 16, path),
            noise_sigma=_get(parser, "data", "noise_sigma", float, 0.05, path),
            max_shapes=_get(parser, "data", "max_shapes", int, 3, path),
            void_border=_get(parser, "data", "void_border", int, 0, path),
            class_split=_get(parser, "data", "class_split", _bool, False, path),
        )
    except UsageError:
        raise
    except Exception as exc:
        raise UsageError(f"{path}: invalid [data] section: {exc}") from None
    if data.class_split:
        if model.num_classes < 3:
            raise UsageError(f"{path}: class_split needs num_classes >= 3 "
                             f"to form two shape-class pools")
        if data.train_size % 2 or data.val_size % 2:
            raise UsageError(f"{path}: class_split interleaves two equal "
                             f"halves; train_size and val_size must be even")
    try:
        train = TrainConfig(
            steps=_get(parser, "train", "steps", int, 300, path),
            batch_size=_get(parser, "train", "batch_size", int, 8, path),
            lr=_get(parser, "train", "lr", float, 2e-3, path),
            poly_power=_get(parser, "train", "poly_power", float, 0.9, path),
        )
    except UsageError:
        raise
    except Exception as exc:
        raise UsageError(f"{path}: invalid [train] section: {exc}") from None
    try:
        prune = DistillConfig(
            stage1_steps=_get(parser, "prune", "stage1_steps", int, 120, path),
            stage2_steps=_get(parser, "prune", "stage2_steps", int, 180, path),
            batch_size=_get(parser, "prune", "batch_size", int,
                            train.batch_size, path),
            lr=_get(parser, "prune", "lr", float, train.lr, path),
            poly_power=_get(parser, "prune", "poly_power", float,
                            train.poly_power, path),
            lambda_s=_get(parser, "prune", "lambda_s", float, 0.5, path),
            lambda_m=_get(parser, "prune", "lambda_m", float, 0.005, path),
            target_sparsity=_get(parser, "prune", "sparsity", float, 0.5, path),
            anneal=_get(parser, "prune", "anneal", _bool, True, path),
            kd=_get(parser, "prune", "kd", _choice(KD_CHOICES), "both", path),
            mode=_get(parser, "prune", "mode", _choice(MODE_CHOICES),
                      "dynamic", path),
        )
    except UsageError:
        raise
    except Exception as exc:
        raise UsageError(f"{path}: invalid [prune] section: {exc}") from None
    return RunConfig(model=model, data=data, train=train, prune=prune,
                     preset=preset)


def resolved_text(cfg: RunConfig, seed: int) -> str:
    """Fully resolved configuration, suitable to re-load."""
    m = cfg.model
    lines = [
        "[model]",
        f"preset = {cfg.preset}",
        f"num_classes = {m.num_classes}",
        f"input = {m.input_hw[0]}x{m.input_hw[1]}",
        f"dims = {','.join(str(s.dim) for s in m.stages)}",
        f"depths = {','.join(str(s.depth) for s in m.stages)}",
        f"heads = {','.join(str(s.heads) for s in m.stages)}",
        f"sr = {','.join(str(s.sr_ratio) for s in m.stages)}",
        f"kernels = {','.join(str(s.patch_kernel) for s in m.stages)}",
        f"strides = {','.join(str(s.patch_stride) for s in m.stages)}",
        f"pads = {','.join(str(s.patch_pad) for s in m.stages)}",
        f"decoder_dim = {m.decoder_dim}",
        f"fusion = {m.fusion}",
        f"ffn_expand = {m.ffn_expand}",
        "",
        "[data]",
        f"train_size = {cfg.data.train_size}",
        f"val_size = {cfg.data.val_size}",
        f"noise_sigma = {cfg.data.noise_sigma!r}",
        f"max_shapes = {cfg.data.max_shapes}",
        f"void_border = {cfg.data.void_border}",
        f"class_split = {'on' if cfg.data.class_split else 'off'}",
        "",
        "[train]",
        f"steps = {cfg.train.steps}",
        f"batch_size = {cfg.train.batch_size}",
        f"lr = {cfg.train.lr!r}",
        f"poly_power = {cfg.train.poly_power!r}",
        "",
        "[prune]",
        f"stage1_steps = {cfg.prune.stage1_steps}",
        f"stage2_steps = {cfg.prune.stage2_steps}",
        f"batch_size = {cfg.prune.batch_size}",
        f"lr = {cfg.prune.lr!r}",
        f"poly_power = {cfg.prune.poly_power!r}",
        f"lambda_s = {cfg.prune.lambda_s!r}",
        f"lambda_m = {cfg.prune.lambda_m!r}",
        f"sparsity = {cfg.prune.target_sparsity!r}",
        f"anneal = {'on' if cfg.prune.anneal else 'off'}",
        f"kd = {cfg.prune.kd}",
        f"mode = {cfg.prune.mode}",
        "",
        "[run]",
        f"seed = {seed}",
    ]
    return "\n".join(lines) + "\n"
