"""``mmode-ssl`` command line: synthetic data, extraction, pretraining, downstream training, evaluation.

All stages share one output directory::

    OUT/data/            synthetic clips and manifests          (synth)
    OUT/extract/         ranked M-modes per split               (extract)
    OUT/pretrain/<tag>/  checkpoint, loss history, run manifest (pretrain)
    OUT/downstream/<tag>/  same, plus evaluation reports        (probe, finetune, evaluate, saliency)
    OUT/sweep/           label-fraction sweep table             (sweep)

Settings come from a ``key=value`` file (``--config``) overridden by flags.
Keys prefixed ``aug.`` and ``synth.`` configure augmentation and the
synthetic generator.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import PIPELINES, AugmentationConfig, augmentation_config_from_mapping, parse_key_values
from .errors import ConfigError, DataError, MModeSSLError
from .evaluation import (
    MetricsReport,
    evaluate,
    grad_cam,
    region_means,
    write_predictions_csv,
    write_report_csv,
    write_saliency,
    write_summary,
)
from .extracted import extract_manifest, read_extracted, write_extracted
from .fileio import read_arrays, read_manifest, write_arrays, write_csv
from .model import DESK_ENCODER, INIT_SCHEMES, EncoderSpec, ModelParameters, attach_head, initialize
from .objectives import METHODS, SslLossConfig
from .synthetic import SynthConfig, write_dataset
from .training import TrainConfig, pretrain, train_downstream

log = logging.getLogger("mmode_ssl")

ENCODERS = {"desk": DESK_ENCODER, "standard": EncoderSpec()}
DATA_CHOICES = ("train", "train+unlabeled")
SPLITS = ("train", "val", "test", "unlabeled")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs"
    method: str = "barlow_twins"
    init: str = "random"
    augs: str = "mmode"
    mode: str = "finetune"
    data: str = "train+unlabeled"
    label_fraction: float = 1.0
    label_fractions: str = "0.1,0.25,0.5,1.0"
    encoder: str = "desk"
    pretrain_epochs: int = 100
    downstream_epochs: int = 40
    pretrain_batch_size: int = 128
    batch_size: int = 128
    lr0: float = 1e-4
    decay: float = 0.03
    pretrain_lr: float = 1e-3
    temperature: float = 0.1
    bt_lambda: float = 0.005
    threshold: float = 0.5
    eval_sets: str = "test"
    saliency_count: int = 8
    checkpoint: str = ""
    data_dir: str = ""
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.method not in METHODS + ("none",):
            raise ConfigError(f"method must be one of {METHODS + ('none',)}")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"init must be one of {INIT_SCHEMES}")
        if self.augs not in PIPELINES:
            raise ConfigError(f"augs must be one of {PIPELINES}")
        if self.mode not in ("linear", "finetune"):
            raise ConfigError("mode must be linear or finetune")
        if self.data not in DATA_CHOICES:
            raise ConfigError(f"data must be one of {DATA_CHOICES}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {sorted(ENCODERS)}")
        self.fractions()
        self.datasets()

    def fractions(self) -> list[float]:
        try:
            values = [float(v) for v in self.label_fractions.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"label_fractions: cannot parse {self.label_fractions!r}") from None
        if not values or any(not 0 < v <= 1 for v in values):
            raise ConfigError("label fractions must lie in (0, 1]")
        return values

    def datasets(self) -> list[str]:
        names = [v.strip() for v in self.eval_sets.split(",") if v.strip()]
        if not names or any(n not in SPLITS[:3] for n in names):
            raise ConfigError("eval_sets must list some of train, val, test")
        return names

    # derived paths
    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.out_dir / "data"

    def pretrain_tag(self) -> str:
        return f"{self.method}_{self.augs}_{self.data}_{self.init}"

    def downstream_tag(self, mode: str | None = None, fraction: float | None = None) -> str:
        fraction = self.label_fraction if fraction is None else fraction
        source = f"supervised_{self.init}" if self.method == "none" else self.pretrain_tag()
        return f"{mode or self.mode}_{source}_f{fraction:g}"

    def echo(self) -> str:
        """Every setting as ``key=value``; feeding it back via --config reproduces the run."""
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in ("aug", "synth"):
                for sub in dataclasses.fields(value):
                    lines.append(f"{f.name}.{sub.name}={getattr(value, sub.name)}\n")
            else:
                lines.append(f"{f.name}={value}\n")
        return "".join(lines)


def _coerce(kind, key: str, raw: str):
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (bool, "bool"):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def build_run_config(values: dict[str, str]) -> RunConfig:
    """Merge string settings into a RunConfig; unknown keys are an error."""
    top = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name not in ("aug", "synth")}
    plain, aug, synth = {}, {}, {}
    for key, raw in values.items():
        if key.startswith("aug."):
            aug[key[4:]] = raw
        elif key.startswith("synth."):
            synth[key[6:]] = raw
        elif key in top:
            plain[key] = _coerce(top[key], key, raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    synth_types = {f.name: f.type for f in dataclasses.fields(SynthConfig)}
    unknown = sorted(set(synth) - set(synth_types))
    if unknown:
        raise ConfigError(f"unknown synth keys: {', '.join(unknown)}")
    try:
        synth_cfg = SynthConfig(**{k: _coerce(synth_types[k], "synth." + k, v) for k, v in synth.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(**plain, aug=augmentation_config_from_mapping(aug), synth=synth_cfg)


# ---------------------------------------------------------------- helpers


def git_fingerprint(text: str) -> str:
    """Content hash in the format git uses for blobs."""
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _train_config(cfg: RunConfig, mode: str, fraction: float | None = None) -> TrainConfig:
    if mode == "pretrain":
        return TrainConfig(
            mode="pretrain",
            epochs=cfg.pretrain_epochs,
            batch_size=cfg.pretrain_batch_size,
            pretrain_lr=cfg.pretrain_lr,
            seed=cfg.seed,
            ssl=SslLossConfig(cfg.method, temperature=cfg.temperature, bt_lambda=cfg.bt_lambda),
            augmentation=cfg.aug.replace(pipeline=cfg.augs),
        )
    return TrainConfig(
        mode=mode,
        epochs=cfg.downstream_epochs,
        batch_size=cfg.batch_size,
        lr0=cfg.lr0,
        decay=cfg.decay,
        seed=cfg.seed,
        augmentation=cfg.aug,
        label_fraction=cfg.label_fraction if fraction is None else fraction,
    )


def _write_run(run_dir: Path, cfg: RunConfig, checkpoint, extra: str = "") -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    write_arrays(run_dir / "checkpoint.mmsl", checkpoint.params.to_arrays())
    write_csv(
        run_dir / "loss_history.csv",
        ["epoch", "train_loss", "val_loss", "lr"],
        [[h["epoch"], h["train_loss"], "" if h["val_loss"] is None else h["val_loss"], h["lr"]] for h in checkpoint.history],
    )
    echo = cfg.echo()
    body = (
        f"{echo}"
        f"best_epoch={checkpoint.epoch}\n"
        f"best_val_loss={'' if checkpoint.val_loss is None else repr(checkpoint.val_loss)}\n"
        f"train_config_fingerprint={checkpoint.fingerprint}\n"
        f"{extra}"
    )
    (run_dir / "run_manifest.txt").write_text(body + f"fingerprint={git_fingerprint(body)}\n")


def _load_split(cfg: RunConfig, name: str):
    return read_extracted(cfg.out_dir / "extract" / name)


def _load_params(path: Path) -> ModelParameters:
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    return ModelParameters.from_arrays(read_arrays(path))


def _downstream_start(cfg: RunConfig) -> ModelParameters:
    if cfg.checkpoint:
        params = _load_params(Path(cfg.checkpoint))
    elif cfg.method == "none":
        params = initialize(cfg.seed, cfg.init, ENCODERS[cfg.encoder], projector=None)
    else:
        params = _load_params(cfg.out_dir / "pretrain" / cfg.pretrain_tag() / "checkpoint.mmsl")
    return attach_head(params, cfg.seed, cfg.init)


# ---------------------------------------------------------------- stages


def run_synth(cfg: RunConfig) -> Path:
    # the run seed drives the generator so one --seed pins the whole pipeline
    paths = write_dataset(cfg.data_path, dataclasses.replace(cfg.synth, seed=cfg.seed))
    log.info("wrote synthetic data to %s", cfg.data_path)
    return paths["all"].parent


def run_extract(cfg: RunConfig) -> list[Path]:
    out = cfg.out_dir / "extract"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in SPLITS:
        manifest = cfg.data_path / f"{name}.tsv"
        if not manifest.exists():
            if name == "unlabeled":
                continue
            raise DataError(f"manifest {manifest} not found")
        data = extract_manifest(read_manifest(manifest))
        written.extend(write_extracted(out / name, data))
        log.info("extracted %d segments from %s", len(data), manifest)
    return written


def run_pretrain(cfg: RunConfig) -> Path:
    if cfg.method == "none":
        raise ConfigError("pretraining needs a method other than none")
    dataset = _load_split(cfg, "train").pretrain_set()
    if cfg.data == "train+unlabeled":
        dataset = dataset.concat(_load_split(cfg, "unlabeled").pretrain_set())
    params = initialize(cfg.seed, cfg.init, ENCODERS[cfg.encoder])
    checkpoint = pretrain(_train_config(cfg, "pretrain"), dataset, params)
    run_dir = cfg.out_dir / "pretrain" / cfg.pretrain_tag()
    _write_run(run_dir, cfg, checkpoint, f"pretrain_clips={len(dataset)}\n")
    return run_dir


def run_downstream(cfg: RunConfig, mode: str | None = None, fraction: float | None = None) -> Path:
    mode = mode or cfg.mode
    train = _load_split(cfg, "train").labeled_set()
    val = _load_split(cfg, "val").labeled_set()
    checkpoint = train_downstream(_train_config(cfg, mode, fraction), _downstream_start(cfg), train, val)
    run_dir = cfg.out_dir / "downstream" / cfg.downstream_tag(mode, fraction)
    _write_run(run_dir, cfg, checkpoint)
    return run_dir


def run_evaluate(cfg: RunConfig, run_dir: Path | None = None) -> list[MetricsReport]:
    run_dir = run_dir or cfg.out_dir / "downstream" / cfg.downstream_tag()
    params = _load_params(Path(cfg.checkpoint) if cfg.checkpoint else run_dir / "checkpoint.mmsl")
    if "head.w" not in params:
        raise DataError("checkpoint has no classifier head; run probe or finetune first")
    run_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for name in cfg.datasets():
        data = _load_split(cfg, name).labeled_set()
        scores, report = evaluate(params, data.primary_images(), data.labels, name, cfg.threshold)
        write_predictions_csv(run_dir / f"predictions_{name}.csv", data.video_ids, scores, data.labels)
        reports.append(report)
    write_report_csv(run_dir / "report.csv", reports)
    write_summary(run_dir / "summary.txt", reports)
    return reports


def _pleural_rows(cfg: RunConfig) -> dict[str, int]:
    truth = cfg.data_path / "truth.tsv"
    if not truth.exists():
        return {}
    rows = {}
    for line in truth.read_text().splitlines()[1:]:
        vid, _, row, _ = line.split("\t")
        rows[vid] = int(row)
    return rows


def run_saliency(cfg: RunConfig, run_dir: Path | None = None) -> Path:
    """Grad-CAM for correctly classified positive test images (falls back to any test image if none)."""
    run_dir = run_dir or cfg.out_dir / "downstream" / cfg.downstream_tag()
    params = _load_params(Path(cfg.checkpoint) if cfg.checkpoint else run_dir / "checkpoint.mmsl")
    test = _load_split(cfg, "test")
    data = test.labeled_set()
    images = data.primary_images()
    scores, _ = evaluate(params, images, data.labels, "test", cfg.threshold)
    chosen = [i for i in range(len(data)) if data.labels[i] == 1 and scores[i] >= cfg.threshold]
    if not chosen:
        chosen = list(range(len(data)))
    chosen = chosen[: cfg.saliency_count]
    out = run_dir / "saliency"
    out.mkdir(parents=True, exist_ok=True)
    truth = _pleural_rows(cfg)
    rows = []
    for i in chosen:
        vid = data.video_ids[i]
        sal = grad_cam(params, images[i], vid)
        stem = vid.replace("#", "_")
        write_saliency(out, sal, images[i], stem)
        source = vid.split("#", 1)[0]
        above = below = boundary = ""
        if source in truth:
            boundary = pleural_image_row(truth[source], cfg.synth.height, images.shape[1])
            above, below = region_means(sal.heat, boundary)
        rows.append([vid, int(data.labels[i]), sal.probability, boundary, above, below])
    write_csv(out / "saliency.csv", ["video_id", "label", "probability", "pleural_image_row", "heat_above", "heat_below"], rows)
    return out


def pleural_image_row(pleural_row: int, source_height: int, image_height: int = 128) -> int:
    """First resized-image row at or below the pleural band (align-corners mapping)."""
    return int(np.ceil(pleural_row * (image_height - 1) / (source_height - 1)))


def run_sweep(cfg: RunConfig) -> Path:
    """Downstream runs over label fractions for the pretrained method and the supervised baseline."""
    arms = [cfg] if cfg.method == "none" else [cfg, dataclasses.replace(cfg, method="none")]
    rows = []
    for arm in arms:
        for fraction in cfg.fractions():
            run_dir = run_downstream(arm, fraction=fraction)
            report = run_evaluate(dataclasses.replace(arm, checkpoint=""), run_dir)[0]
            rows.append([arm.method, arm.init, cfg.mode, fraction, report.dataset_id, report.auc, report.sensitivity, report.specificity, report.accuracy])
    out = cfg.out_dir / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"sweep_{cfg.mode}_{cfg.init}.csv", ["method", "init", "mode", "label_fraction", "dataset", "auc", "sensitivity", "specificity", "accuracy"], rows)
    return out


# ---------------------------------------------------------------- argument parsing


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmode-ssl", description="Self-supervised pretraining on M-mode images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "synth": "generate synthetic clips and manifests",
        "extract": "extract ranked M-modes from every split",
        "pretrain": "self-supervised pretraining",
        "probe": "train a linear probe on a frozen extractor",
        "finetune": "fine-tune everything past the first block",
        "evaluate": "score a downstream checkpoint",
        "saliency": "Grad-CAM maps for test images",
        "sweep": "label-fraction sweep, pretrained vs supervised",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--method", choices=METHODS + ("none",))
        p.add_argument("--init", choices=INIT_SCHEMES)
        p.add_argument("--augs", choices=PIPELINES)
        p.add_argument("--mode", choices=("linear", "finetune"))
        p.add_argument("--label-fractions", dest="label_fractions")
        p.add_argument("--label-fraction", dest="label_fraction")
        p.add_argument("--data", choices=DATA_CHOICES)
        p.add_argument("--checkpoint")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra setting, repeatable")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_key_values(path.read_text(), str(path)))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key in ("seed", "out", "method", "init", "augs", "mode", "label_fractions", "label_fraction", "data", "checkpoint"):
        value = getattr(args, key)
        if value is not None:
            values[key] = str(value)
    return build_run_config(values)


def dispatch(command: str, cfg: RunConfig):
    if command == "synth":
        return run_synth(cfg)
    if command == "extract":
        return run_extract(cfg)
    if command == "pretrain":
        return run_pretrain(cfg)
    if command == "probe":
        return run_downstream(cfg, "linear")
    if command == "finetune":
        return run_downstream(cfg, "finetune")
    if command == "evaluate":
        return run_evaluate(cfg)
    if command == "saliency":
        return run_saliency(cfg)
    if command == "sweep":
        return run_sweep(cfg)
    raise ConfigError(f"unknown command {command!r}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        (cfg.out_dir / f"config_{args.command}.txt").write_text(cfg.echo())
        result = dispatch(args.command, cfg)
    except MModeSSLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    if isinstance(result, list) and result and isinstance(result[0], MetricsReport):
        for r in result:
            print(f"{r.dataset_id}: auc={r.auc:.4f} accuracy={r.accuracy:.4f}")
    elif result is not None:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
