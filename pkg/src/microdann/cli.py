"""Command-line interface: ``microdann gen-data | train | eval | explain``.

Every command reads one nested JSON config (defaults below, then
``--config``, then ``--set a.b=value`` overrides, then dedicated flags) and
echoes the fully resolved result next to its outputs.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .data.folder import load_image_folder, to_uint8, write_image_folder, write_manifest
from .data.splits import SplitSpec, sample_few_shot, split_source, split_target
from .data.synth import DEFAULT_DOMAINS, DEFAULT_SPECIES, SPECIES_NAMES, DomainTransform, SpeciesSpec, generate_domain
from .errors import InvalidConfig, MicroDannError
from .evaluation import confusion_matrix, domain_probe, grad_cam
from .model import BackboneConfig, load_checkpoint
from .training import TrainConfig, TrainData, fit, predict
from .tsne import tsne

logger = logging.getLogger("microdann")

CONFIG_NAME = "config.json"
CHECKPOINT_NAME = "checkpoint.adsh"
METRICS_NAME = "metrics.csv"


def default_config() -> dict:
    train = {f.name: f.default for f in fields(TrainConfig) if f.name not in ("seed", "checkpoint_path")}
    return {
        "seed": 0,
        "data": {
            "root": "data",
            "image_size": 32,
            "source_per_class": 100,
            "target_per_class": 20,
            "pool_per_class": 5,
            "domains": {name: [t.to_dict() for t in steps] for name, steps in DEFAULT_DOMAINS.items()},
            "species": [asdict(s) for s in DEFAULT_SPECIES],
        },
        "split": {"test_fraction": 0.15, "val_fraction": 0.30},
        "backbone": {k: v for k, v in BackboneConfig().to_dict().items() if k != "num_domains"},
        "train": {**train, "targets": [], "shots": 5},
        "eval": {"domains": []},
        "explain": {"kind": "gradcam", "num_images": 8, "perplexity": 30.0, "iterations": 1000, "stage": None},
    }


# ---------------------------------------------------------------------------
# config handling

def merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        dotted = f"{path}{key}"
        if key not in out:
            raise InvalidConfig(f"unknown config key {dotted!r}")
        if isinstance(out[key], dict) and out[key] and isinstance(value, dict) and dotted != "data.domains":
            out[key] = merge(out[key], value, dotted + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(config: dict, dotted: str, value) -> None:
    """Assign ``value`` at ``a.b.c``; list elements are addressed by index."""
    parts = dotted.split(".")
    node = config
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part)
                node[idx]
            except (ValueError, IndexError):
                raise InvalidConfig(f"bad list index {part!r} in {dotted!r}") from None
            if last:
                node[idx] = value
            else:
                node = node[idx]
        elif isinstance(node, dict):
            # domain names are free-form, so new ones may be added
            if part not in node and not (parts[:i] == ["data", "domains"]):
                raise InvalidConfig(f"unknown config key {dotted!r}")
            if last:
                node[part] = value
            else:
                node = node.setdefault(part, {})
        else:
            raise InvalidConfig(f"cannot index into {'.'.join(parts[:i])!r}")


def resolve_config(args) -> dict:
    config = default_config()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise InvalidConfig(f"{args.config}: top level must be an object")
        config = merge(config, loaded)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfig(f"--set expects key=value, got {item!r}")
        set_dotted(config, key.strip(), _parse_value(value))
    if args.seed is not None:
        config["seed"] = args.seed
    for flag, key in (("data", ("data", "root")), ("mode", ("train", "mode")), ("shots", ("train", "shots")),
                      ("epochs", ("train", "epochs")), ("kind", ("explain", "kind"))):
        value = getattr(args, flag, None)
        if value is not None:
            config[key[0]][key[1]] = value
    if getattr(args, "target", None):
        config["train"]["targets"] = [args.target]
    if getattr(args, "targets", None):
        config["train"]["targets"] = [t for t in args.targets.split(",") if t]
    if getattr(args, "domains", None):
        config["eval"]["domains"] = [d for d in args.domains.split(",") if d]
    return config


def dump_config(config: dict) -> str:
    return json.dumps(config, sort_keys=True, indent=2) + "\n"


def species_specs(config: dict) -> list[SpeciesSpec]:
    try:
        return [SpeciesSpec(**{**s, "blob_count_range": tuple(s["blob_count_range"]),
                               "blob_radius_range": tuple(s["blob_radius_range"]),
                               "eccentricity_range": tuple(s["eccentricity_range"])})
                for s in config["data"]["species"]]
    except (TypeError, KeyError) as exc:
        raise InvalidConfig(f"bad species entry: {exc}") from exc


def domain_steps(config: dict, name: str) -> tuple[DomainTransform, ...]:
    domains = config["data"]["domains"]
    if name not in domains:
        raise InvalidConfig(f"unknown domain {name!r}; configured: {sorted(domains)}")
    try:
        return tuple(DomainTransform(**step) for step in domains[name])
    except TypeError as exc:
        raise InvalidConfig(f"bad transform for domain {name!r}: {exc}") from exc


def train_config(config: dict, checkpoint_path=None) -> TrainConfig:
    t = {k: v for k, v in config["train"].items() if k not in ("targets", "shots")}
    try:
        return TrainConfig(**t, seed=config["seed"], checkpoint_path=checkpoint_path)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def backbone_config(config: dict) -> BackboneConfig:
    m = max(2, 1 + len(config["train"]["targets"]))
    return BackboneConfig.from_dict({**config["backbone"], "num_domains": m})


def split_spec(config: dict) -> SplitSpec:
    return SplitSpec(seed=config["seed"], **config["split"])


# ---------------------------------------------------------------------------
# dataset access

def domain_dir(config: dict, name: str) -> Path:
    path = Path(config["data"]["root"]) / name
    if not path.is_dir():
        raise InvalidConfig(f"domain directory {path} does not exist")
    return path


def relative_id(path: str, config: dict) -> str:
    try:
        return Path(path).relative_to(config["data"]["root"]).as_posix()
    except ValueError:
        return Path(path).as_posix()


def load_source(config: dict):
    samples = load_image_folder(domain_dir(config, "source"), domain_label=0)
    return split_source(samples, split_spec(config))


def load_target(config: dict, name: str, label: int):
    samples = load_image_folder(domain_dir(config, name), domain_label=label)
    return split_target(samples, config["data"]["pool_per_class"], config["seed"])


def test_sets(config: dict, domains: list[str]) -> dict[str, list]:
    targets = config["train"]["targets"]
    out = {}
    for name in domains:
        if name == "source":
            out[name] = load_source(config)[2]
        else:
            label = targets.index(name) + 1 if name in targets else 0
            out[name] = load_target(config, name, label)[1]
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(config: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    size = config["data"]["image_size"]
    species = species_specs(config)
    names = [SPECIES_NAMES[s.species_id] for s in species]
    manifest = {"seed": config["seed"], "image_size": size, "species": config["data"]["species"], "domains": {}}
    for d, name in enumerate(config["data"]["domains"]):
        n = config["data"]["source_per_class"] if name == "source" else config["data"]["target_per_class"]
        samples = generate_domain(domain_steps(config, name), n, size, seed=config["seed"] + 7919 * d,
                                  domain_label=d, species=species, tag=name)
        write_image_folder(samples, out, name, class_names=SPECIES_NAMES)
        manifest["domains"][name] = {
            "transforms": config["data"]["domains"][name],
            "counts": {sp: n for sp in names},
        }
        logger.info("wrote %d images for %s", len(samples), name)
    digest = write_manifest(out, manifest)
    print(f"manifest {out / 'manifest.json'} sha256 {digest}")
    return 0


def cmd_train(config: dict, out: Path) -> int:
    mode = config["train"]["mode"]
    targets = config["train"]["targets"]
    if mode == "dann" and len(targets) != 1:
        raise InvalidConfig("dann mode needs exactly one target (--target)")
    if mode == "mdann" and len(targets) < 2:
        raise InvalidConfig("mdann mode needs at least two targets (--targets a,b)")
    if mode == "source_only":
        config["train"]["targets"] = targets = []
    shots = config["train"]["shots"]
    if shots not in (1, 3, 5):
        raise InvalidConfig(f"shots must be 1, 3 or 5, got {shots}")
    train, val, _ = load_source(config)
    few = []
    for d, name in enumerate(targets, start=1):
        pool, _ = load_target(config, name, d)
        few.extend(sample_few_shot(pool, shots, config["seed"]))
    backbone = backbone_config(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(dump_config(config))
    tc = train_config(config, out / CHECKPOINT_NAME)
    data = TrainData(train, val, few, backbone.num_domains)
    result = fit(tc, data, backbone)
    (out / METRICS_NAME).write_text(result.metrics_csv())
    print(f"best epoch {result.meta.epoch} val_loss {result.meta.validation_loss:.6f} "
          f"val_acc {result.meta.validation_accuracy:.4f}")
    return 0


def _load_model(config: dict, out: Path, checkpoint: str | None):
    path = Path(checkpoint) if checkpoint else out / CHECKPOINT_NAME
    params, header = load_checkpoint(path)
    expected = backbone_config(config).config_hash()
    if header["config_hash"] != expected:
        raise InvalidConfig(f"checkpoint {path} has config hash {header['config_hash']}, "
                            f"configuration gives {expected}")
    return params


def _run_config(args, out: Path) -> dict:
    """Config for eval/explain: the run's echoed config unless --config is given."""
    if not args.config and (out / CONFIG_NAME).exists():
        args.config = str(out / CONFIG_NAME)
    return resolve_config(args)


def cmd_eval(config: dict, out: Path, checkpoint: str | None) -> int:
    params = _load_model(config, out, checkpoint)
    domains = config["eval"]["domains"] or ["source"] + config["train"]["targets"]
    sets = test_sets(config, domains)
    edir = out / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "n", "accuracy"])
    for name, samples in sets.items():
        cm = confusion_matrix(params, samples, SPECIES_NAMES[:params.config.num_classes])
        (edir / f"confusion_{name}.json").write_text(cm.to_json() + "\n")
        w.writerow([name, len(samples), f"{cm.accuracy:.9g}"])
        print(f"{name:>16} n={len(samples):4d} accuracy={cm.accuracy:.4f}")
    (edir / "accuracy.csv").write_text(buf.getvalue())
    return 0


def _pooled(config: dict):
    names = ["source"] + config["train"]["targets"]
    sets = test_sets(config, names)
    samples = [s for name in names for s in sets[name]]
    domains = [d for d, name in enumerate(names) for _ in sets[name]]
    return samples, np.array(domains)


def cmd_explain(config: dict, out: Path, checkpoint: str | None) -> int:
    params = _load_model(config, out, checkpoint)
    opts = config["explain"]
    xdir = out / "explain"
    xdir.mkdir(parents=True, exist_ok=True)
    kind = opts["kind"]
    if kind == "gradcam":
        test = test_sets(config, ["source"])["source"]
        rng = np.random.default_rng(config["seed"])
        chosen = rng.permutation(len(test))[: opts["num_images"]]
        gdir = xdir / "gradcam"
        gdir.mkdir(exist_ok=True)
        for i in sorted(chosen):
            sample = test[i]
            logits, _ = predict(params, [sample])
            pred = int(np.argmax(logits[0]))
            cam = grad_cam(params, sample, pred, opts["stage"])
            stem = relative_id(sample.source_path, config).replace("/", "_").rsplit(".", 1)[0]
            Image.fromarray(to_uint8(cam.values), mode="L").save(gdir / f"{stem}.png")
            sidecar = {
                "image_id": relative_id(sample.source_path, config),
                "class_label": sample.class_label,
                "target_class": pred,
                "raw_max": cam.raw_max,
                "mean": float(cam.values.mean()),
                "shape": list(cam.values.shape),
            }
            (gdir / f"{stem}.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
        print(f"wrote {len(chosen)} heatmaps to {gdir}")
    elif kind == "tsne":
        samples, domains = _pooled(config)
        _, emb = predict(params, samples)
        res = tsne(emb, opts["perplexity"], opts["iterations"], config["seed"])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "x", "y", "class", "domain"])
        for s, (x, y), d in zip(samples, res.coords, domains):
            w.writerow([relative_id(s.source_path, config), f"{x:.9g}", f"{y:.9g}", s.class_label, int(d)])
        (xdir / "tsne.csv").write_text(buf.getvalue())
        print(f"t-SNE over {len(samples)} points, KL {res.kl_initial:.4f} -> {res.kl_final:.4f}")
    elif kind == "probe":
        samples, domains = _pooled(config)
        _, emb = predict(params, samples)
        score = domain_probe(emb, domains)
        (xdir / "probe.json").write_text(json.dumps({"probe": score, "n": len(samples)}, sort_keys=True) + "\n")
        print(f"domain probe (1-NN accuracy): {score:.4f}")
    else:
        raise InvalidConfig(f"unknown explain kind {kind!r}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # global flags work before or after the command; the copy attached to
        # each command must not overwrite values given before it
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--config", help="JSON config file", **kw)
        p.add_argument("--seed", type=int, help="global seed", **kw)
        p.add_argument("--out", help="dataset root for gen-data, run directory otherwise", **kw)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override, repeatable", **kw)
        p.add_argument("-v", "--verbose", action="store_true", **kw)
        return p

    common = global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="microdann", description=__doc__.splitlines()[0],
                                     parents=[global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic domains")

    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--data", help="dataset root")
    tr.add_argument("--mode", choices=("source_only", "dann", "mdann"))
    tr.add_argument("--target")
    tr.add_argument("--targets", help="comma-separated target domains")
    tr.add_argument("--shots", type=int)
    tr.add_argument("--epochs", type=int)

    for name, text in (("eval", "per-domain accuracy and confusion matrices"),
                       ("explain", "Grad-CAM, t-SNE or domain probe")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", help="dataset root")
        p.add_argument("--checkpoint", help="defaults to <out>/checkpoint.adsh")
        if name == "eval":
            p.add_argument("--domains", help="comma-separated domains")
        else:
            p.add_argument("--kind", choices=("gradcam", "tsne", "probe"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            config = resolve_config(args)
            return cmd_gen_data(config, Path(args.out or config["data"]["root"]))
        out = Path(args.out or "run")
        if args.command == "train":
            return cmd_train(resolve_config(args), out)
        config = _run_config(args, out)
        if args.command == "eval":
            return cmd_eval(config, out, args.checkpoint)
        return cmd_explain(config, out, args.checkpoint)
    except InvalidConfig as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MicroDannError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
