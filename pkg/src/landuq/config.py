"""Single experiment configuration document.

One JSON file controls everything: topology and shape-sampling ranges,
dataset sizes, model and training hyperparameters, corruption ladders, OOD
settings, and the global seed. Every field has a default; unknown keys are
rejected with their path so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .synth import DEFAULT_STRUCTURES, StructureDef
from .train import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_ood_per_category: int = 100
    image_hw: tuple[int, int] = (64, 64)
    degrade: bool = True  # per-sample quality degradation + evidence-linked masks


@dataclass(frozen=True)
class CorruptionConfig:
    occlusion_side: int = 16
    noise_levels: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.4, 0.8)
    n_images: int = 50
    n_samples: int = 50


@dataclass(frozen=True)
class OODConfig:
    n_samples: int = 50
    n_trees_grid: tuple[int, ...] = (50, 100, 200)
    forest_train_cap: int = 1000  # latent-sigma vectors used to fit the forest


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 1234
    n_predict_samples: int = 50
    structures: tuple[StructureDef, ...] = DEFAULT_STRUCTURES
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig(seed=1234)  # train.seed follows the global seed
    corruption: CorruptionConfig = CorruptionConfig()
    ood: OODConfig = OODConfig()

    def model_for(self, variant: str) -> ModelConfig:
        base = asdict(self.model)
        base["variant"] = variant
        base["image_hw"] = tuple(self.data.image_hw)
        base["topology"] = tuple((s.name, s.node_count, s.closed) for s in self.structures)
        base["encoder_channels"] = tuple(base["encoder_channels"])
        base["decoder_widths"] = tuple(base["decoder_widths"])
        return ModelConfig(**base)


def _structure_to_dict(s: StructureDef) -> dict:
    return {
        "name": s.name,
        "node_count": s.node_count,
        "closed": s.closed,
        "intensity": s.intensity,
        "center_x": list(s.center_x),
        "center_y": list(s.center_y),
        "semi_a": list(s.semi_a),
        "semi_b": list(s.semi_b),
        "rotation": list(s.rotation),
        "perturb_frac": s.perturb_frac,
    }


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "seed": cfg.seed,
        "n_predict_samples": cfg.n_predict_samples,
        "structures": [_structure_to_dict(s) for s in cfg.structures],
        "data": {
            "n_train": cfg.data.n_train,
            "n_val": cfg.data.n_val,
            "n_test": cfg.data.n_test,
            "n_ood_per_category": cfg.data.n_ood_per_category,
            "image_hw": list(cfg.data.image_hw),
            "degrade": cfg.data.degrade,
        },
        "model": {
            "variant": cfg.model.variant,
            "latent_dim": cfg.model.latent_dim,
            "encoder_channels": list(cfg.model.encoder_channels),
            "decoder_widths": list(cfg.model.decoder_widths),
            "skip_stage": cfg.model.skip_stage,
        },
        "train": {
            "epochs": cfg.train.epochs,
            "batch_size": cfg.train.batch_size,
            "learning_rate": cfg.train.learning_rate,
            "beta1": cfg.train.beta1,
            "beta2": cfg.train.beta2,
            "epsilon": cfg.train.epsilon,
            "kl_start": cfg.train.kl_start,
            "kl_end": cfg.train.kl_end,
            "kl_warmup_fraction": cfg.train.kl_warmup_fraction,
            "max_steps": cfg.train.max_steps,
            "val_interval": cfg.train.val_interval,
        },
        "corruption": {
            "occlusion_side": cfg.corruption.occlusion_side,
            "noise_levels": list(cfg.corruption.noise_levels),
            "n_images": cfg.corruption.n_images,
            "n_samples": cfg.corruption.n_samples,
        },
        "ood": {
            "n_samples": cfg.ood.n_samples,
            "n_trees_grid": list(cfg.ood.n_trees_grid),
            "forest_train_cap": cfg.ood.forest_train_cap,
        },
    }


def _check_keys(d: dict, allowed: set[str], path: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path}: {sorted(unknown)}")


def _merge_structure(d: dict, idx: int) -> StructureDef:
    allowed = {
        "name",
        "node_count",
        "closed",
        "intensity",
        "center_x",
        "center_y",
        "semi_a",
        "semi_b",
        "rotation",
        "perturb_frac",
    }
    _check_keys(d, allowed, f"structures[{idx}]")
    if "name" not in d or "node_count" not in d:
        raise ConfigError(f"structures[{idx}] needs at least name and node_count")
    base = dict(
        closed=True,
        intensity=0.5,
        center_x=(0.4, 0.6),
        center_y=(0.4, 0.6),
        semi_a=(0.1, 0.2),
        semi_b=(0.1, 0.2),
        rotation=(-0.2, 0.2),
        perturb_frac=0.15,
    )
    base.update(d)
    for key in ("center_x", "center_y", "semi_a", "semi_b", "rotation"):
        base[key] = tuple(base[key])
    return StructureDef(**base)


def config_from_dict(d: dict) -> ExperimentConfig:
    _check_keys(
        d,
        {"seed", "n_predict_samples", "structures", "data", "model", "train", "corruption", "ood"},
        "top level",
    )
    defaults = ExperimentConfig()

    structures = defaults.structures
    if "structures" in d:
        structures = tuple(_merge_structure(s, i) for i, s in enumerate(d["structures"]))

    data_d = dict(d.get("data", {}))
    _check_keys(data_d, {"n_train", "n_val", "n_test", "n_ood_per_category", "image_hw", "degrade"}, "data")
    if "image_hw" in data_d:
        data_d["image_hw"] = tuple(data_d["image_hw"])
    data = DataConfig(**{**asdict(defaults.data), **data_d})

    model_d = dict(d.get("model", {}))
    _check_keys(
        model_d, {"variant", "latent_dim", "encoder_channels", "decoder_widths", "skip_stage"}, "model"
    )
    for key in ("encoder_channels", "decoder_widths"):
        if key in model_d:
            model_d[key] = tuple(model_d[key])
    model = ModelConfig(
        **{
            "variant": model_d.get("variant", defaults.model.variant),
            "latent_dim": model_d.get("latent_dim", defaults.model.latent_dim),
            "encoder_channels": model_d.get("encoder_channels", defaults.model.encoder_channels),
            "decoder_widths": model_d.get("decoder_widths", defaults.model.decoder_widths),
            "skip_stage": model_d.get("skip_stage", defaults.model.skip_stage),
            "image_hw": data.image_hw,
            "topology": tuple((s.name, s.node_count, s.closed) for s in structures),
        }
    )

    train_d = dict(d.get("train", {}))
    allowed_train = {f.name for f in fields(TrainConfig)} - {"seed"}
    _check_keys(train_d, allowed_train, "train")
    train = TrainConfig(**{**{k: v for k, v in asdict(defaults.train).items() if k != "seed"}, **train_d, "seed": d.get("seed", defaults.seed)})

    corr_d = dict(d.get("corruption", {}))
    _check_keys(corr_d, {"occlusion_side", "noise_levels", "n_images", "n_samples"}, "corruption")
    if "noise_levels" in corr_d:
        corr_d["noise_levels"] = tuple(corr_d["noise_levels"])
    corruption = CorruptionConfig(**{**asdict(defaults.corruption), **corr_d})

    ood_d = dict(d.get("ood", {}))
    _check_keys(ood_d, {"n_samples", "n_trees_grid", "forest_train_cap"}, "ood")
    if "n_trees_grid" in ood_d:
        ood_d["n_trees_grid"] = tuple(ood_d["n_trees_grid"])
    ood = OODConfig(**{**asdict(defaults.ood), **ood_d})

    return ExperimentConfig(
        seed=d.get("seed", defaults.seed),
        n_predict_samples=d.get("n_predict_samples", defaults.n_predict_samples),
        structures=structures,
        data=data,
        model=model,
        train=train,
        corruption=corruption,
        ood=ood,
    )


def load_config(path: Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    raw = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)
