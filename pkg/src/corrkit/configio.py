"""Flat key-value configuration files with a typed schema.

The config format is deliberately primitive so any language can parse it:
UTF-8 text, one ``key = value`` per line, ``#`` comments, no nesting and no
quoting. Every key is declared in the schema below with a type and default;
unknown keys and type mismatches are load errors that name the line.
"""

from __future__ import annotations

from dataclasses import dataclass


class ConfigError(ValueError):
    """A config file violated the schema."""


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    choices: tuple = ()


# One flat namespace; dotted prefixes group related knobs but carry no
# structure. Defaults here are the desk-scale benchmark settings.
SCHEMA: dict = {
    "seed":                     Key(int, 0),
    # synthetic world
    "synth.categories":         Key(int, 6),
    "synth.instances":          Key(int, 14),
    "synth.parts":              Key(int, 10),
    "synth.sym_fraction":       Key(float, 0.6),
    "synth.confusion":          Key(float, 0.8),
    "synth.view_noise_slope":   Key(float, 1.0),
    "synth.channels":           Key(int, 40),
    "synth.grid":               Key(int, 24),
    "synth.unmatchable_prob":   Key(float, 0.1),
    "synth.blob":               Key(int, 3),
    "synth.inst_sigma":         Key(float, 0.1),
    "synth.offset_gain":        Key(float, 0.55),
    "synth.side_gain":          Key(float, 1.0),
    "synth.background_sigma":   Key(float, 0.05),
    "synth.elevation_deg":      Key(float, 65.0),
    # label generation
    "labels.count_per_category": Key(int, 60),
    "labels.filter":            Key(str, "relaxed", ("none", "exact", "relaxed")),
    "labels.r_max":             Key(float, 1.5),
    "chain.k":                  Key(int, 4),
    "chain.count_per_category": Key(int, 30),
    # sphere prior
    "sphere.theta_th":          Key(float, 0.15 * 3.141592653589793),
    "sphere.mode":              Key(str, "oracle", ("oracle", "mapper")),
    "sphere_train.total_steps": Key(int, 300),
    "sphere_train.peak_lr":     Key(float, 5e-3),
    "sphere_train.weight_decay": Key(float, 0.001),
    "sphere_train.warmup_frac": Key(float, 0.3),
    "sphere_train.batch_pairs": Key(int, 8),
    "sphere_train.max_cells":   Key(int, 48),
    "sphere_train.hidden1":     Key(int, 64),
    "sphere_train.hidden2":     Key(int, 64),
    "sphere_train.hemisphere_weight": Key(float, 0.0),
    "sphere_train.quantize_bins": Key(bool, False),
    # adapter training
    "train.total_steps":        Key(int, 900),
    "train.peak_lr":            Key(float, 5e-3),
    "train.weight_decay":       Key(float, 0.001),
    "train.warmup_frac":        Key(float, 0.3),
    "train.sparse_temperature": Key(float, 0.07),
    "train.dense_window":       Key(int, 5),
    "train.dense_temperature":  Key(float, 0.01),
    "train.noise_sigma":        Key(float, 0.5),
    "train.lambda_sparse":      Key(float, 1.0),
    "train.lambda_dense":       Key(float, 1.0),
    "train.max_matches":        Key(int, 50),
    "train.dtype":              Key(str, "float32", ("float32", "float64")),
    "train.checkpoint_every":   Key(int, 0),
    "train.adapter_hidden":     Key(int, 16),
    "train.adapter_blocks":     Key(int, 4),
    "train.head_channels":      Key(int, 0),   # 0 = no reduction head
    # evaluation
    "eval.alpha":               Key(float, 0.1),
    "eval.mode":                Key(str, "per_img", ("per_kpt", "per_img")),
    "eval.window":              Key(int, 5),
    "eval.temperature":         Key(float, 0.01),
    "eval.per_category":        Key(int, 32),
    "eval.max_keypoints":       Key(int, 60),
    # ablation harness
    "ablate.seeds":             Key(int, 5),
}


def defaults() -> dict:
    return {k: spec.default for k, spec in SCHEMA.items()}


def parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    spec = SCHEMA[key]
    try:
        if spec.type is bool:
            val = _parse_bool(raw)
        else:
            val = spec.type(raw)
    except ValueError:
        raise ConfigError(
            f"key {key!r}: cannot parse {raw!r} as {spec.type.__name__}")
    if spec.choices and val not in spec.choices:
        raise ConfigError(
            f"key {key!r}: {val!r} not one of {list(spec.choices)}")
    return val


def load_config(path) -> dict:
    """Parse a config file on top of the schema defaults."""
    values = defaults()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"line {lineno}: expected 'key = value', "
                                  f"got {line.rstrip()!r}")
            key, raw = body.split("=", 1)
            key, raw = key.strip(), raw.strip()
            try:
                values[key] = parse_value(key, raw)
            except ConfigError as e:
                raise ConfigError(f"line {lineno}: {e}") from None
    return values


def dump_config(values: dict) -> str:
    """Render a config dict in the file format, keys in schema order."""
    lines = []
    for key in SCHEMA:
        if key in values:
            v = values[key]
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def synth_config(values: dict):
    from .synthetic import SynthConfig
    return SynthConfig(
        seed=values["seed"],
        categories=values["synth.categories"],
        instances=values["synth.instances"],
        parts=values["synth.parts"],
        sym_fraction=values["synth.sym_fraction"],
        confusion=values["synth.confusion"],
        view_noise_slope=values["synth.view_noise_slope"],
        channels=values["synth.channels"],
        grid=values["synth.grid"],
        unmatchable_prob=values["synth.unmatchable_prob"],
        blob=values["synth.blob"],
        inst_sigma=values["synth.inst_sigma"],
        offset_gain=values["synth.offset_gain"],
        side_gain=values["synth.side_gain"],
        background_sigma=values["synth.background_sigma"],
        elevation_deg=values["synth.elevation_deg"])


def train_config(values: dict):
    from .trainer import TrainConfig
    head = values["train.head_channels"]
    return TrainConfig(
        total_steps=values["train.total_steps"],
        peak_lr=values["train.peak_lr"],
        weight_decay=values["train.weight_decay"],
        warmup_frac=values["train.warmup_frac"],
        sparse_temperature=values["train.sparse_temperature"],
        dense_window=values["train.dense_window"],
        dense_temperature=values["train.dense_temperature"],
        noise_sigma=values["train.noise_sigma"],
        lambda_sparse=values["train.lambda_sparse"],
        lambda_dense=values["train.lambda_dense"],
        max_matches=values["train.max_matches"],
        seed=values["seed"],
        dtype=values["train.dtype"],
        checkpoint_every=values["train.checkpoint_every"],
        adapter_hidden=values["train.adapter_hidden"],
        adapter_blocks=values["train.adapter_blocks"],
        head_channels=head if head > 0 else None)


def sphere_train_config(values: dict):
    from .pipeline import SphereTrainConfig
    return SphereTrainConfig(
        total_steps=values["sphere_train.total_steps"],
        peak_lr=values["sphere_train.peak_lr"],
        weight_decay=values["sphere_train.weight_decay"],
        warmup_frac=values["sphere_train.warmup_frac"],
        batch_pairs=values["sphere_train.batch_pairs"],
        max_cells=values["sphere_train.max_cells"],
        hidden=(values["sphere_train.hidden1"],
                values["sphere_train.hidden2"]),
        hemisphere_weight=values["sphere_train.hemisphere_weight"],
        quantize_bins=values["sphere_train.quantize_bins"],
        seed=values["seed"])


def ablation_settings(values: dict):
    from .pipeline import AblationSettings
    return AblationSettings(
        naive_count=values["labels.count_per_category"],
        chain_count=values["chain.count_per_category"],
        chain_k=values["chain.k"],
        r_max=values["labels.r_max"],
        theta_th=values["sphere.theta_th"],
        eval_per_category=values["eval.per_category"],
        eval_alpha=values["eval.alpha"],
        eval_mode=values["eval.mode"],
        eval_window=values["eval.window"],
        eval_temperature=values["eval.temperature"],
        sphere_mode=values["sphere.mode"],
        train=train_config(values))
