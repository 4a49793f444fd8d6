"""Experiment harness: ``condsim <command> --config <file> [overrides]``.

Commands
  gen       synthesize a world and write train/val/test triplet files
  train     fit a variant on a generated dataset, write checkpoint + log
  eval      align embeddings to conditions and report GR/OT accuracy
  reversed  acceptance rates of original vs reversed triplets per checkpoint
  sweep     train+eval over a lambda or embedding-count grid
  report    pretty-print a saved evaluation report

Configuration is a flat key=value file; command-line flags override file
values. Every command writes its fully resolved configuration next to its
outputs, and identical config+seed reruns produce byte-identical files.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 I/O error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from condsim import aligneval, training
from condsim.checkpoint import load_checkpoint, save_checkpoint
from condsim.datagen import gen_world, load_dataset, sample_triplets, save_dataset
from condsim.errors import CondsimError, ConfigError, DataError
from condsim.training import TrainConfig, fit

DEFAULTS = {
    "n_instances": "2000",
    "conditions": "4",
    "values": "4",
    "free": "0",
    "noise": "0.1",
    "train_per_condition": "2000",
    "val_per_condition": "400",
    "test_per_condition": "400",
    "label_train": "true",
    "variant": "disc_set",
    "loss": "margin",
    "margin": "1.0",
    "lambda": "0.001",
    "lr": "0.01",
    "epochs": "90",
    "lr_decay": "0.1",
    "decay_every": "30",
    "batch_size": "64",
    "optimizer": "adam",
    "dim": "64",
    "hidden": "",
    "temperature": "1.0",
    "gate_mode": "fused",
    "n_embeddings": "",
    "alignment": "val",
    "seed": "0",
}

LAMBDA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 0.1)
K_GRID = (2, 4, 6, 8, 10)

TRAIN_LOG_MAGIC = "#condsim-train-log v1"


class RunConfig:
    """Defaults, overridden by a config file, overridden by CLI flags."""

    def __init__(self):
        self.values = dict(DEFAULTS)
        self.explicit = set()

    @classmethod
    def resolve(cls, path, overrides):
        cfg = cls()
        if path is not None:
            cfg.read_file(path)
        for key, val in overrides.items():
            if val is not None:
                cfg.set(key, str(val))
        return cfg

    def read_file(self, path):
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(
                    f"{path}:{lineno}: expected key=value, got {stripped!r}"
                )
            key, _, val = stripped.partition("=")
            self.set(key.strip(), val.strip())

    def set(self, key, val):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key: {key!r}")
        self.values[key] = val
        self.explicit.add(key)

    def get(self, key):
        return self.values[key]

    def get_int(self, key):
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(
                f"configuration key {key!r} must be an integer, "
                f"got {self.values[key]!r}"
            ) from None

    def get_float(self, key):
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(
                f"configuration key {key!r} must be a number, "
                f"got {self.values[key]!r}"
            ) from None

    def get_bool(self, key):
        val = self.values[key].lower()
        if val in ("true", "1", "yes"):
            return True
        if val in ("false", "0", "no"):
            return False
        raise ConfigError(f"configuration key {key!r} must be true/false")

    def get_opt_int(self, key):
        return None if self.values[key] == "" else self.get_int(key)

    def write_resolved(self, out_dir, command):
        lines = [f"# resolved configuration for 'condsim {command}'"]
        for key in sorted(self.values):
            lines.append(f"{key}={self.values[key]}")
        path = Path(out_dir) / f"{command}.resolved.cfg"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train_config(cfg):
    return TrainConfig(
        variant=cfg.get("variant"),
        loss=cfg.get("loss"),
        margin=cfg.get_float("margin"),
        reg_weight=cfg.get_float("lambda"),
        lr=cfg.get_float("lr"),
        epochs=cfg.get_int("epochs"),
        lr_decay=cfg.get_float("lr_decay"),
        decay_every=cfg.get_int("decay_every"),
        batch_size=cfg.get_int("batch_size"),
        seed=cfg.get_int("seed"),
        optimizer=cfg.get("optimizer"),
        dim=cfg.get_int("dim"),
        hidden=cfg.get_opt_int("hidden"),
        temperature=cfg.get_float("temperature"),
        gate_mode=cfg.get("gate_mode"),
        n_embeddings=cfg.get_opt_int("n_embeddings"),
    )


def cmd_gen(cfg, out_dir):
    seed = cfg.get_int("seed")
    world = gen_world(
        n_instances=cfg.get_int("n_instances"),
        n_conditions=cfg.get_int("conditions"),
        n_values=cfg.get_int("values"),
        n_free=cfg.get_int("free"),
        noise=cfg.get_float("noise"),
        seed=seed,
    )
    splits = [
        ("train", cfg.get_int("train_per_condition"), cfg.get_bool("label_train")),
        ("val", cfg.get_int("val_per_condition"), True),
        ("test", cfg.get_int("test_per_condition"), True),
    ]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (split, per_cond, labeled) in enumerate(splits, start=1):
        ds = sample_triplets(world, per_cond, seed + i, split=split, labeled=labeled)
        save_dataset(ds, out / f"{split}.txt")
    cfg.write_resolved(out, "gen")
    print(f"wrote {out}/train.txt {out}/val.txt {out}/test.txt")


def _write_train_log(records, path):
    lines = [TRAIN_LOG_MAGIC]
    for r in records:
        gr = "-" if r.val_gr is None else aligneval.fmt17(r.val_gr)
        ot = "-" if r.val_ot is None else aligneval.fmt17(r.val_ot)
        lines.append(
            f"E {r.epoch} {aligneval.fmt17(r.loss)} {aligneval.fmt17(r.main)}"
            f" {aligneval.fmt17(r.reg)} {r.gated} {aligneval.fmt17(r.lr)}"
            f" {gr} {ot}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(cfg, out_dir, data_dir):
    data = Path(data_dir)
    train_ds = load_dataset(data / "train.txt")
    val_path = data / "val.txt"
    val_ds = load_dataset(val_path) if val_path.exists() else None
    tconf = _train_config(cfg)
    model, records = fit(train_ds, tconf, val_ds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    _write_train_log(records, out / "train_log.txt")
    cfg.write_resolved(out, "train")
    if records:
        last = records[-1]
        print(
            f"trained {tconf.variant}: final loss {last.loss:.6f}"
            + (f", best val OT {max(r.val_ot for r in records):.4f}"
               if last.val_ot is not None else "")
        )
    print(f"wrote {out}/model.ckpt")


def build_report(model, align_ds, test_ds, source):
    """Alignment maps from ``align_ds``, accuracies and rates on ``test_ds``.

    The supervised variant keeps its native identity mapping, which is what
    makes its greedy and OT accuracies coincide by construction.
    """
    cost_test = aligneval.cost_matrix(model, test_ds)
    if model.variant == "supervised":
        n_true = cost_test.shape[0]
        if model.n_conditions != n_true:
            raise ConfigError(
                f"supervised checkpoint has {model.n_conditions} embeddings "
                f"but the data has {n_true} conditions"
            )
        gmap = omap = np.arange(n_true, dtype=np.intp)
        plan = np.eye(n_true) / n_true
        cost_align = cost_test if source == "test" else aligneval.cost_matrix(
            model, align_ds
        )
        source = "identity"
    else:
        cost_align = cost_test if source == "test" else aligneval.cost_matrix(
            model, align_ds
        )
        gmap = aligneval.greedy_align(cost_align)
        omap, plan = aligneval.ot_align(cost_align)
    rows = np.arange(cost_test.shape[0])
    report = aligneval.EvalReport(
        variant=model.variant,
        n_conditions=cost_test.shape[0],
        n_embeddings=cost_test.shape[1],
        alignment_source=source,
        gr_accuracy=aligneval.supervised_accuracy(model, test_ds, gmap),
        ot_accuracy=aligneval.supervised_accuracy(model, test_ds, omap),
        greedy_map=gmap,
        ot_map=omap,
        per_condition_gr=1.0 - cost_test[rows, gmap],
        per_condition_ot=1.0 - cost_test[rows, omap],
        cost=cost_align,
        plan=plan,
    )
    if model.encoder is not None:
        report.weak_rates = aligneval.reversed_experiment(model, test_ds, "weak")
    report.aligned_rates = aligneval.reversed_experiment(
        model, test_ds, "supervised", align_map=omap
    )
    return report


def cmd_eval(cfg, out_dir, data_dir, model_path):
    model = load_checkpoint(model_path)
    requested_k = cfg.get_opt_int("n_embeddings")
    if requested_k is not None and requested_k != model.n_conditions:
        raise ConfigError(
            f"config requests {requested_k} embeddings but the checkpoint "
            f"has {model.n_conditions}"
        )
    data = Path(data_dir)
    test_ds = load_dataset(data / "test.txt")
    source = cfg.get("alignment")
    if source not in ("val", "test"):
        raise ConfigError(f"alignment must be 'val' or 'test', got {source!r}")
    align_ds = test_ds if source == "test" else load_dataset(data / "val.txt")
    report = build_report(model, align_ds, test_ds, source)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.txt")
    cfg.write_resolved(out, "eval")
    print(
        f"{model.variant}: GR accuracy {report.gr_accuracy:.4f}, "
        f"OT accuracy {report.ot_accuracy:.4f} ({report.alignment_source} alignment)"
    )


def cmd_reversed(cfg, out_dir, data_dir, model_paths):
    if not model_paths:
        raise ConfigError("reversed requires at least one --model checkpoint")
    data = Path(data_dir)
    test_ds = load_dataset(data / "test.txt")
    rows = []
    for path in model_paths:
        model = load_checkpoint(path)
        if model.encoder is None:
            mode = "supervised"
            rates = aligneval.reversed_experiment(
                model,
                test_ds,
                "supervised",
                align_map=np.arange(model.n_conditions, dtype=np.intp),
            )
        else:
            mode = "weak"
            rates = aligneval.reversed_experiment(model, test_ds, "weak")
        rows.append((model.variant, mode, rates))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["variant,mode,orig_valid_rate,rev_valid_rate,both_valid_rate"]
    for variant, mode, rates in rows:
        lines.append(
            f"{variant},{mode},{rates.orig:.6f},{rates.rev:.6f},{rates.both:.6f}"
        )
    (out / "reversed.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    cfg.write_resolved(out, "reversed")
    for line in lines:
        print(line)


def _parse_grid(text, param):
    values = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            values.append(int(tok) if param == "K" else float(tok))
        except ValueError:
            raise ConfigError(f"bad grid value {tok!r} for {param} sweep") from None
    if not values:
        raise ConfigError("sweep grid is empty")
    return values


def cmd_sweep(cfg, out_dir, data_dir, param, grid_text):
    if param == "lambda" and "variant" not in cfg.explicit:
        # the regularizer weight only matters for the regularized variant
        cfg.values["variant"] = "disc_reg"
    if grid_text is not None:
        grid = _parse_grid(grid_text, param)
    else:
        grid = list(K_GRID if param == "K" else LAMBDA_GRID)
    data = Path(data_dir)
    train_ds = load_dataset(data / "train.txt")
    val_ds = load_dataset(data / "val.txt")
    test_ds = load_dataset(data / "test.txt")
    source = cfg.get("alignment")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in grid:
        tconf = _train_config(cfg)
        if param == "lambda":
            tconf.reg_weight = float(value)
            tag = f"lambda_{value:g}"
        else:
            tconf.n_embeddings = int(value)
            tag = f"K_{value}"
        sub = out / tag
        sub.mkdir(parents=True, exist_ok=True)
        model, records = fit(train_ds, tconf, val_ds)
        save_checkpoint(model, sub / "model.ckpt")
        _write_train_log(records, sub / "train_log.txt")
        align_ds = test_ds if source == "test" else val_ds
        report = build_report(model, align_ds, test_ds, source)
        report.save(sub / "report.txt")
        rows.append((value, report.gr_accuracy, report.ot_accuracy))
        print(f"{param}={value:g}: GR {report.gr_accuracy:.4f} OT {report.ot_accuracy:.4f}")
    lines = [f"{param},gr_accuracy,ot_accuracy"]
    for value, gr, ot in rows:
        lines.append(f"{value:g},{gr:.6f},{ot:.6f}")
    (out / f"sweep_{param}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    cfg.write_resolved(out, "sweep")


def cmd_report(path):
    report = aligneval.load_report(path)
    print(f"variant:           {report.variant}")
    print(f"alignment source:  {report.alignment_source}")
    print(f"conditions:        {report.n_conditions}")
    print(f"embeddings:        {report.n_embeddings}")
    print(f"GR accuracy:       {report.gr_accuracy:.4f}")
    print(f"OT accuracy:       {report.ot_accuracy:.4f}")
    print(f"greedy map:        {list(map(int, report.greedy_map))}")
    print(f"OT map:            {list(map(int, report.ot_map))}")
    per_gr = ", ".join(f"{a:.4f}" for a in report.per_condition_gr)
    per_ot = ", ".join(f"{a:.4f}" for a in report.per_condition_ot)
    print(f"per-condition GR:  [{per_gr}]")
    print(f"per-condition OT:  [{per_ot}]")
    for name, rates in (("weak", report.weak_rates), ("aligned", report.aligned_rates)):
        if rates is not None:
            print(
                f"{name} rates:       orig {rates.orig:.4f}  rev {rates.rev:.4f}"
                f"  both {rates.both:.4f}"
            )
    print("cost matrix:")
    for row in report.cost:
        print("  " + " ".join(f"{v:.4f}" for v in row))


def _add_common(parser, need_out=True, need_data=False):
    parser.add_argument("--config", help="flat key=value configuration file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    if need_out:
        parser.add_argument("--out", required=True, help="output directory")
    if need_data:
        parser.add_argument(
            "--data", required=True, help="directory holding train/val/test files"
        )


def make_parser():
    parser = argparse.ArgumentParser(
        prog="condsim",
        description="conditional similarity learning and alignment evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic triplet dataset")
    _add_common(p)
    for key in ("n_instances", "conditions", "values", "free"):
        p.add_argument(f"--{key}", type=int, dest=key)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", help="train one model variant")
    _add_common(p, need_data=True)
    p.add_argument("--variant", choices=training.VARIANTS)
    p.add_argument("--loss", choices=training.LOSSES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda", type=float, dest="lambda_")
    p.add_argument("--n-embeddings", type=int, dest="n_embeddings")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p, need_data=True)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--alignment", choices=("val", "test"))

    p = sub.add_parser("reversed", help="original vs reversed acceptance rates")
    _add_common(p, need_data=True)
    p.add_argument(
        "--model",
        action="append",
        dest="models",
        required=True,
        help="checkpoint path (repeatable)",
    )

    p = sub.add_parser("sweep", help="train+eval over a parameter grid")
    _add_common(p, need_data=True)
    p.add_argument("--param", required=True, choices=("lambda", "K"))
    p.add_argument("--grid", help="comma-separated grid override")
    p.add_argument("--variant", choices=training.VARIANTS)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("report", help="pretty-print a saved report")
    p.add_argument("--input", required=True, help="report file path")
    return parser


def run(argv):
    args = make_parser().parse_args(argv)
    if args.command == "report":
        cmd_report(args.input)
        return 0

    overrides = {"seed": getattr(args, "seed", None)}
    for key in (
        "n_instances",
        "conditions",
        "values",
        "free",
        "noise",
        "variant",
        "loss",
        "epochs",
        "alignment",
        "n_embeddings",
    ):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if getattr(args, "lambda_", None) is not None:
        overrides["lambda"] = args.lambda_
    cfg = RunConfig.resolve(args.config, overrides)

    if args.command == "gen":
        cmd_gen(cfg, args.out)
    elif args.command == "train":
        cmd_train(cfg, args.out, args.data)
    elif args.command == "eval":
        cmd_eval(cfg, args.out, args.data, args.model)
    elif args.command == "reversed":
        cmd_reversed(cfg, args.out, args.data, args.models)
    elif args.command == "sweep":
        cmd_sweep(cfg, args.out, args.data, args.param, args.grid)
    return 0


def main(argv=None):
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except CondsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
