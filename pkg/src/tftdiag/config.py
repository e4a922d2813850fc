"""Run configuration: profiles, ``key = value`` files and command-line overrides."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .model import ModelConfig
from .signals import DatasetSpec
from .training import TrainConfig


@dataclass(frozen=True)
class Field:
    key: str
    kind: type
    desk: object
    paper: object
    help: str


def _split3(text: str) -> tuple:
    return tuple(float(v) for v in str(text).split(","))


FIELDS: tuple[Field, ...] = (
    # dataset
    Field("classes", int, 4, 7, "number of health conditions"),
    Field("per_class", int, 32, 2000, "samples generated per class"),
    Field("sample_rate", float, 12800.0, 12800.0, "sampling frequency in Hz"),
    Field("length", int, 1024, 1024, "samples per vibration record"),
    Field("rpm", float, 1050.0, 1050.0, "shaft speed"),
    Field("channels", int, 1, 1, "sensor channels stacked into the TFR"),
    Field("out_t", int, 32, 224, "TFR rows after resize (time, = n_t)"),
    Field("out_f", int, 32, 224, "TFR columns after resize (frequency, = n_f)"),
    Field("squeeze_bins", int, 128, 256, "synchrosqueezing frequency bins before resize"),
    Field("omega0", float, 6.0, 6.0, "Morlet centre frequency"),
    Field("voices", int, 16, 16, "wavelet scales per octave"),
    Field("gamma_rel", float, 1e-8, 1e-8, "squeeze threshold relative to max |W|"),
    Field("normalize", bool, True, True, "scale each TFR to unit maximum"),
    Field("gen_snr_db", float, math.inf, math.inf, "noise added at generation (inf = none)"),
    Field("seed", int, 0, 0, "master seed"),
    # model
    Field("d_model", int, 32, 64, "embedding dimension"),
    Field("d_ff", int, 64, 256, "feed-forward / classifier hidden dimension"),
    Field("heads", int, 4, 8, "attention heads"),
    Field("blocks", int, 2, 6, "encoder blocks"),
    Field("dropout", float, 0.1, 0.1, "dropout rate"),
    Field("pos_encoding", str, "1d", "1d", "position encoding: none, 1d or 2d"),
    Field("gelu", str, "erf", "erf", "GeLU form: erf (exact) or tanh"),
    Field("qkv_bias", bool, True, True, "bias on query/key/value projections"),
    # training
    Field("batch_size", int, 16, 32, "mini-batch size"),
    Field("epochs", int, 40, 100, "maximum epochs"),
    Field("lr", float, 1e-3, 5e-5, "Adam learning rate"),
    Field("label_smoothing", float, 0.1, 0.1, "label smoothing rate"),
    Field("beta1", float, 0.9, 0.9, "Adam beta1"),
    Field("beta2", float, 0.999, 0.999, "Adam beta2"),
    Field("adam_eps", float, 1e-8, 1e-8, "Adam epsilon"),
    Field("patience", int, 0, 0, "early-stop patience in epochs (0 = off)"),
    Field("split", str, "0.6,0.2,0.2", "0.6,0.2,0.2", "train,val,test fractions"),
    # evaluation
    Field("snr_list", str, "20,10,5,0,-5", "20,10,5,0,-5", "SNR points in dB for the sweep"),
    Field("block", str, "last", "last", "attention block: first, last or 1-based index"),
    Field("sample", int, 0, 0, "test-set sample index for attention dumps"),
    # paths
    Field("data_dir", str, "data", "data", "dataset directory (generate writes, others read)"),
    Field("run_dir", str, "run", "run", "training outputs: checkpoint, history, splits, reports"),
)

# keys fixed by the dataset on disk; consumers read them from its provenance file
DATASET_KEYS = tuple(f.key for f in FIELDS[:15])

FIELD_MAP = {f.key: f for f in FIELDS}
PROFILES = ("desk", "paper")


class ConfigFileError(ValueError):
    pass


def convert(field: Field, value):
    if isinstance(value, field.kind) and not (field.kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    if field.kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigFileError(f"{field.key}: expected a boolean, got {text!r}")
    try:
        return field.kind(text)
    except ValueError:
        raise ConfigFileError(f"{field.key}: cannot parse {text!r} as {field.kind.__name__}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{origin}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_MAP:
            raise ConfigFileError(f"{origin}:{n}: unknown key {key!r}")
        out[key] = convert(FIELD_MAP[key], value)
    return out


def load_config_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config file {p}: {exc}") from exc
    return parse_config_text(text, str(p))


def resolve(profile: str = "desk", file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Profile defaults, then file values, then command-line overrides."""
    if profile not in PROFILES:
        raise ConfigFileError(f"unknown profile {profile!r}; choose from {PROFILES}")
    values = {f.key: getattr(f, profile) for f in FIELDS}
    for src in (file_values or {}, overrides or {}):
        for k, v in src.items():
            if v is not None:
                values[k] = convert(FIELD_MAP[k], v)
    return values


def to_text(values: dict) -> str:
    lines = []
    for f in FIELDS:
        v = values[f.key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.key} = {v}")
    return "\n".join(lines) + "\n"


def dataset_spec(values: dict) -> DatasetSpec:
    return DatasetSpec(
        n_classes=values["classes"], per_class=values["per_class"], sample_rate=values["sample_rate"],
        length=values["length"], rpm=values["rpm"], channels=values["channels"],
        out_shape=(values["out_t"], values["out_f"]), squeeze_bins=values["squeeze_bins"],
        omega0=values["omega0"], voices=values["voices"], gamma_rel=values["gamma_rel"],
        normalize=values["normalize"], snr_db=values["gen_snr_db"], seed=values["seed"],
    )


def model_config(values: dict) -> ModelConfig:
    return ModelConfig(
        n_t=values["out_t"], n_f=values["out_f"], c=values["channels"], d_model=values["d_model"],
        d_ff=values["d_ff"], h=values["heads"], n_blocks=values["blocks"], r_dp=values["dropout"],
        pos_mode=values["pos_encoding"], n_cla=values["classes"], gelu_mode=values["gelu"],
        qkv_bias=values["qkv_bias"],
    )


def train_config(values: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=values["batch_size"], max_epochs=values["epochs"], lr=values["lr"],
        label_smoothing=values["label_smoothing"], beta1=values["beta1"], beta2=values["beta2"],
        adam_eps=values["adam_eps"], seed=values["seed"], patience=values["patience"],
    )


def split_fractions(values: dict) -> tuple:
    fr = _split3(values["split"])
    if len(fr) != 3:
        raise ConfigFileError("split needs three comma-separated fractions")
    return fr


def snr_points(values: dict) -> list[float]:
    pts = [float(v) for v in str(values["snr_list"]).split(",") if v.strip()]
    if not pts:
        raise ConfigFileError("snr_list is empty")
    return pts
