"""Command-line front end: data generation, training, attacks, evaluation.

Every command echoes its effective configuration (all defaults and seeds
resolved) so a run can be reproduced from its log. Options come from an
optional JSON config file plus flags; flags win. Output files are written
atomically (temp + rename).

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
"""

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import attacks as A
from . import data as DATA
from . import detector as DET
from . import evaluation as EV
from ._backend import HAVE_NUMBA, backend_name
from .errors import ParseError, TrainingDivergedError, ValidationError

CONFIG_SECTIONS = ("scene", "detector", "attack", "universal", "train")

TRAIN_KEYS = {"epochs", "learning_rate", "batch_size", "momentum", "max_grad_norm"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _atomic_write(path, payload, mode="wb"):
    tmp = f"{path}.tmp"
    with open(tmp, mode) as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _atomic_file(path, writer):
    tmp = f"{path}.tmp"
    writer(tmp)
    os.replace(tmp, path)


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config root must be an object")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValidationError(f"{path}: unknown config sections: {sorted(unknown)}")
    if "train" in doc:
        bad = set(doc["train"]) - TRAIN_KEYS
        if bad:
            raise ValidationError(f"{path}: unknown 'train' keys: {sorted(bad)}")
    return doc


def _merge(section, overrides):
    merged = dict(section)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _echo_config(command, payload):
    print(f"effective-config: {json.dumps({'command': command, **payload}, sort_keys=True)}")


def _scene_spec(cfg_file, args):
    section = cfg_file.get("scene", {})
    overrides = {"seed": getattr(args, "seed", None),
                 "image_size": getattr(args, "image_size", None),
                 "noise_std": getattr(args, "noise_std", None)}
    return DATA.SceneSpec.from_dict(_merge(section, overrides))


def _detector_config(cfg_file, args):
    section = cfg_file.get("detector", {})
    overrides = {"seed": getattr(args, "seed", None)}
    return DET.DetectorConfig.from_dict(_merge(section, overrides))


def _attack_config(cfg_file, args):
    section = cfg_file.get("attack", {})
    overrides = {
        "variant": getattr(args, "variant", None),
        "epsilon": getattr(args, "epsilon", None),
        "step_size": getattr(args, "alpha", None),
        "max_iterations": getattr(args, "iterations", None),
    }
    merged = _merge(section, overrides)
    known = set(A.AttackConfig.__dataclass_fields__)
    unknown = set(merged) - known
    if unknown:
        raise ValidationError(f"unknown attack config keys: {sorted(unknown)}")
    cfg = A.AttackConfig(**merged)
    cfg.validate()
    return cfg


def _universal_config(cfg_file, args):
    section = cfg_file.get("universal", {})
    overrides = {
        "epsilon": getattr(args, "epsilon", None),
        "step_size": getattr(args, "alpha", None),
        "epochs": getattr(args, "epochs", None),
        "kappa": getattr(args, "kappa", None),
        "training_set_size": getattr(args, "train_size", None),
        "seed": getattr(args, "seed", None),
    }
    merged = _merge(section, overrides)
    known = set(A.UniversalConfig.__dataclass_fields__)
    unknown = set(merged) - known
    if unknown:
        raise ValidationError(f"unknown universal config keys: {sorted(unknown)}")
    cfg = A.UniversalConfig(**merged)
    cfg.validate()
    return cfg


# ----------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg_file = _load_config_file(args.config)
    spec = _scene_spec(cfg_file, args)
    _echo_config("gen-data", {"scene": spec.to_dict(), "train": args.train,
                              "test": args.test, "out": args.out})
    manifest = DATA.generate_dataset(spec, args.train, args.test, args.out)
    print(f"wrote {args.train} train + {args.test} test scenes (seed {spec.seed})")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args):
    cfg_file = _load_config_file(args.config)
    config = _detector_config(cfg_file, args)
    tsec = dict(cfg_file.get("train", {}))
    epochs = args.epochs if args.epochs is not None else tsec.get("epochs", 30)
    lr = args.lr if args.lr is not None else tsec.get("learning_rate", 0.01)
    batch = args.batch_size if args.batch_size is not None else tsec.get("batch_size", 8)
    momentum = tsec.get("momentum", 0.9)
    clip = tsec.get("max_grad_norm", 10.0)
    _echo_config("train", {"detector": config.to_dict(),
                           "train": {"epochs": epochs, "learning_rate": lr,
                                     "batch_size": batch, "momentum": momentum,
                                     "max_grad_norm": clip},
                           "data": args.data})
    dataset = DATA.load_dataset(args.data, "train")
    t0 = time.perf_counter()
    weights, history = DET.train(config, dataset, epochs, lr, batch_size=batch,
                                 momentum=momentum, max_grad_norm=clip)
    elapsed = time.perf_counter() - t0
    for i, loss in enumerate(history, 1):
        print(f"epoch {i}: mean loss {loss:.6f}")
    print(f"trained {epochs} epochs on {len(dataset)} scenes in {elapsed:.1f}s")
    _atomic_file(args.out, lambda p: DET.save_weights(weights, p))
    print(f"checkpoint: {args.out}")
    if not args.no_eval:
        test = DATA.load_dataset(args.data, "test")
        if test:
            report = EV.evaluate(weights, test)
            print(f"benign test mAP: {report.mean_ap:.4f}")
    return 0


def _load_split(args, split=None):
    return DATA.load_dataset(args.data, split or args.split)


def cmd_attack(args):
    cfg_file = _load_config_file(args.config)
    attack = _attack_config(cfg_file, args)
    if attack.variant == "universal_apply":
        raise ValidationError("use the 'universal' command to train and 'eval --eta' to apply")
    weights = DET.load_weights(args.ckpt)
    _echo_config("attack", {"attack": {"variant": attack.variant,
                                       "epsilon": attack.epsilon,
                                       "step_size": attack.step_size,
                                       "max_iterations": attack.max_iterations},
                            "ckpt": args.ckpt, "data": args.data, "split": args.split})
    dataset = _load_split(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    vanish_cfg = replace(attack, variant="vanishing")
    for idx, (image, _) in enumerate(dataset):
        cfg = attack
        try:
            target = A.build_target(weights, image, attack.variant)
        except A.EmptyDetectionsError:
            target = A.build_target(weights, image, "vanishing")
            cfg = vanish_cfg
        result = A.tog_attack(weights, image, cfg, target=target)
        out_rel = f"adv_{idx:05d}.ppm"
        _atomic_file(os.path.join(args.out, out_rel),
                     lambda p, img=result.adversarial: DATA.save_image(img, p))
        rows.append({
            "image_id": idx,
            "variant": cfg.variant,
            "success": str(result.success).lower(),
            "stalled": str(result.stalled).lower(),
            "iterations": result.iterations,
            "final_detections": result.log[-1]["detections"] if result.log else 0,
            "linf": f"{np.max(np.abs(result.adversarial - image)):.6f}",
            "adversarial_image": out_rel,
        })
    rows.sort(key=lambda r: r["image_id"])
    log_path = os.path.join(args.out, "attack_log.csv")

    def _write_log(path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)

    if rows:
        _atomic_file(log_path, _write_log)
    n_success = sum(r["success"] == "true" for r in rows)
    print(f"attacked {len(rows)} images, success on {n_success} "
          f"({100.0 * n_success / max(len(rows), 1):.1f}%)")
    print(f"log: {log_path}")
    return 0


def cmd_universal(args):
    cfg_file = _load_config_file(args.config)
    ucfg = _universal_config(cfg_file, args)
    weights = DET.load_weights(args.ckpt)
    _echo_config("universal", {"universal": {
        "epsilon": ucfg.epsilon, "step_size": ucfg.step_size, "epochs": ucfg.epochs,
        "kappa": ucfg.kappa, "training_set_size": ucfg.training_set_size,
        "seed": ucfg.seed}, "ckpt": args.ckpt, "data": args.data})
    dataset = DATA.load_dataset(args.data, "train", limit=ucfg.training_set_size)
    eta, history = A.train_universal(weights, dataset, ucfg)
    _atomic_file(args.out, lambda p: A.save_perturbation(eta, p))
    for row in history:
        print(f"epoch {row['epoch']}: vanish rate {row['vanish_rate']:.4f}")
    log_path = args.out + ".log.csv"

    def _write_log(path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "vanish_rate"])
            writer.writeheader()
            for row in history:
                writer.writerow({"epoch": row["epoch"],
                                 "vanish_rate": f"{row['vanish_rate']:.6f}"})

    _atomic_file(log_path, _write_log)
    print(f"perturbation: {args.out} (max |eta| = {np.max(np.abs(eta.delta)):.6f})")
    return 0


def cmd_eval(args):
    cfg_file = _load_config_file(args.config)
    weights = DET.load_weights(args.ckpt)
    dataset = _load_split(args)
    reports = [EV.evaluate(weights, dataset)]
    attack = None
    eta = None
    if args.attack is not None:
        attack = _attack_config(cfg_file, args)
        attack = replace(attack, variant=args.attack)
        attack.validate()
        if args.attack == "universal_apply":
            if args.eta is None:
                raise ValidationError("--attack universal_apply needs --eta FILE")
            eta = A.load_perturbation(args.eta)
        reports.append(EV.evaluate(weights, dataset, attack, eta))
    _echo_config("eval", {"ckpt": args.ckpt, "data": args.data, "split": args.split,
                          "attack": args.attack, "eta": args.eta})
    for rep in reports:
        extra = ""
        if rep.attack_metrics:
            extra = (f" vanish_rate={rep.attack_metrics['vanish_rate']:.3f}"
                     f" linf_max={rep.attack_metrics['linf_distortion_max']:.6f}")
        print(f"{rep.condition}: mAP={rep.mean_ap:.4f} precision={rep.precision:.4f} "
              f"recall={rep.recall:.4f} dets/img={rep.detection_count_mean:.2f}{extra}")
    if args.out_csv:
        _atomic_file(args.out_csv, lambda p: EV.write_eval_csv(reports, p))
        print(f"csv: {args.out_csv}")
    if args.out_md:
        _atomic_file(args.out_md,
                     lambda p: EV.write_markdown_report(reports, p, DATA.CLASS_NAMES))
        print(f"markdown: {args.out_md}")
    return 0


def cmd_transfer(args):
    cfg_file = _load_config_file(args.config)
    attack = _attack_config(cfg_file, args)
    detectors = [DET.load_weights(p) for p in args.ckpts]
    variants = args.variants or ["vanishing"]
    for v in variants:
        if v not in A.VARIANTS or v == "universal_apply":
            raise ValidationError(f"transfer supports per-input variants, got {v!r}")
    _echo_config("transfer", {"ckpts": args.ckpts, "variants": variants,
                              "data": args.data, "split": args.split,
                              "attack": {"epsilon": attack.epsilon,
                                         "step_size": attack.step_size,
                                         "max_iterations": attack.max_iterations}})
    dataset = _load_split(args)
    cells = EV.transfer_matrix(detectors, variants, dataset, attack)
    for cell in cells:
        print(f"source {cell.source_id} -> target {cell.target_id} [{cell.variant}]: "
              f"benign mAP {cell.benign_map:.4f}, adversarial mAP {cell.adversarial_map:.4f}, "
              f"{'transfers' if cell.transfers else 'does not transfer'}")
    if args.out_csv:
        _atomic_file(args.out_csv, lambda p: EV.write_transfer_csv(cells, p))
        print(f"csv: {args.out_csv}")
    return 0


def cmd_report(args):
    conditions = {}
    order = []
    for path in args.csv:
        for row in EV.read_eval_csv(path):
            cond = row["condition"]
            if cond not in conditions:
                conditions[cond] = {"per_class": {}, "map": None}
                order.append(cond)
            if row["class_id"] == "all":
                conditions[cond]["map"] = float(row["map"])
            else:
                conditions[cond]["per_class"][int(row["class_id"])] = float(row["ap"])
    reports = [
        EV.EvalReport(condition=c, per_class_ap=conditions[c]["per_class"],
                      mean_ap=conditions[c]["map"] or 0.0, detection_count_mean=0.0,
                      precision=0.0, recall=0.0)
        for c in order
    ]
    _echo_config("report", {"csv": list(args.csv), "out": args.out})
    _atomic_file(args.out, lambda p: EV.write_markdown_report(reports, p, DATA.CLASS_NAMES))
    print(f"markdown: {args.out}")
    return 0


def cmd_bench(args):
    from .bench import run_benchmark
    _echo_config("bench", {"size": args.size, "repeats": args.repeats})
    run_benchmark(size=args.size, repeats=args.repeats)
    return 0


# ------------------------------------------------------------------- parser

def build_parser():
    parser = _Parser(prog="microtog", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, help="root seed for this command")

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    common(p)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the detector on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="manifest.json path")
    p.add_argument("--out", required=True, help="checkpoint output path (.togw)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--no-eval", action="store_true", help="skip the test-split mAP")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="per-input attacks over a dataset split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--variant", choices=[v for v in A.VARIANTS if v != "universal_apply"],
                   default="vanishing")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", required=True, help="directory for adversarial images + log")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("universal", help="train a universal vanishing perturbation")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="perturbation output path (.togp)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--kappa", type=float)
    p.add_argument("--train-size", type=int, dest="train_size")
    p.set_defaults(fn=cmd_universal)

    p = sub.add_parser("eval", help="benign (and optionally adversarial) metrics")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--attack", choices=A.VARIANTS)
    p.add_argument("--eta", help="perturbation file for --attack universal_apply")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out-csv", dest="out_csv")
    p.add_argument("--out-md", dest="out_md")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("transfer", help="cross-detector transferability matrix")
    common(p)
    p.add_argument("--ckpts", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--variants", nargs="+")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out-csv", dest="out_csv")
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("report", help="combine eval CSVs into a markdown table")
    p.add_argument("--csv", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("bench", help="compare the numba and numpy kernel backends")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeats", type=int, default=20)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, ParseError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
