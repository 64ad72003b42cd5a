"""Command-line entry point: gen-data, train, infer, eval, confusion, sweep-bins, grad-check.

Experiments are described by a flat ``key = value`` config file whose keys
are listed in :data:`SCHEMA`; ``--set key=value`` overrides single keys.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gradcheck, metrics, pnm, synth
from . import net as hnet
from . import trainer
from .depth_bins import make_binning
from .tensor_core import NonFiniteError

log = logging.getLogger("hfdepth")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


_T, _S = trainer.TrainConfig, synth.SceneSpec
_A = hnet.NetArch

# key: (parser, default, description)
SCHEMA = {
    # scene generation
    "data_seed": (int, _S.seed, "seed of the first scene; scene i uses data_seed + i"),
    "count": (int, 512, "number of base scenes written by gen-data"),
    "height": (int, _S.height, "scene height in pixels"),
    "width": (int, _S.width, "scene width in pixels"),
    "d_near": (float, _S.d_near, "nearest scene depth (m)"),
    "d_far": (float, _S.d_far, "farthest scene depth (m)"),
    "objects_min": (int, _S.objects[0], "fewest objects per scene"),
    "objects_max": (int, _S.objects[1], "most objects per scene"),
    "haze": (float, _S.haze, "haze extinction coefficient per metre"),
    "albedo_tint": (float, _S.albedo_tint, "per-channel albedo variation"),
    "invalid_fraction": (float, _S.invalid_fraction, "fraction of pixels marked invalid"),
    "focal": (float, _S.focal, "apparent size scale of objects"),
    "texture": (float, _S.texture, "texture contrast on objects"),
    "flat_background": (_bool, _S.flat_background, "constant-depth background instead of a ground ramp"),
    "augment": (_choice("none", "offline"), "none", "offline: write 4 augmented copies of each scene"),
    # depth bins
    "d_min": (float, 1.5, "lower end of the binned depth range (m)"),
    "d_max": (float, 12.0, "upper end of the binned depth range (m)"),
    "K": (int, _A.K, "number of depth bins"),
    # network
    "stem_width": (int, _A.stem_width, "stem channels"),
    "widths": (_ints, _A.widths, "four comma-separated stage widths"),
    "blocks": (int, _A.blocks, "residual blocks per stage"),
    "no_dilation": (_bool, False, "ablation: undilated late stages with pooling"),
    "no_concat": (_bool, False, "ablation: score from the last stage only"),
    # optimisation
    "seed": (int, _T.seed, "seed for initialisation, sample order and augmentation"),
    "base_lr": (float, _T.base_lr, "learning rate before decay"),
    "momentum": (float, _T.momentum, "SGD momentum"),
    "weight_decay": (float, _T.weight_decay, "L2 coefficient (not applied to BN scale/shift)"),
    "accum_steps": (int, _T.accum_steps, "passes averaged per optimizer step"),
    "total_iters": (int, _T.total_iters, "forward/backward passes"),
    "fixed_iters": (int, _T.fixed_iters, "passes at base_lr before decay starts"),
    "decay_every": (int, _T.decay_every, "passes between learning-rate decays"),
    "decay_factor": (float, _T.decay_factor, "multiplier applied at each decay"),
    "online_augment": (_bool, _T.augment, "augment every training pass"),
    "fill_invalid": (_bool, _T.fill_invalid, "fill invalid depth with the nearest valid value"),
    "bn_mode": (_choice("train", "eval"), _T.bn_mode, "batch-norm statistics used while training"),
    "dtype": (_choice("float32", "float64"), _T.dtype, "training precision"),
    "log_every": (int, _T.log_every, "passes per log-CSV row"),
    # evaluation
    "rule": (_choice("soft", "hard"), "soft", "inference rule"),
    "cap": (_opt_float, None, "evaluate only ground truth <= cap (none = no cap)"),
    "merge": (int, 1, "adjacent bins merged per confusion-matrix cell"),
    "sweep_K": (_ints, (10, 20, 40, 80), "bin counts trained by sweep-bins"),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: v[1] for k, v in SCHEMA.items()})

    def set(self, key: str, text: str, where: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown config key {key!r} (valid keys are listed in hfdepth.cli.SCHEMA)")
        try:
            self.values[key] = SCHEMA[key][0](text)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls.defaults()
        if path is not None:
            for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (t.strip() for t in line.split("=", 1))
                cfg.set(key, value, f"{path}:{lineno}")
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set {item!r}: expected key=value")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value.strip(), f"--set {key.strip()}")
        return cfg

    def scene(self) -> synth.SceneSpec:
        v = self.values
        return synth.SceneSpec(
            seed=v["data_seed"], height=v["height"], width=v["width"], d_near=v["d_near"],
            d_far=v["d_far"], objects=(v["objects_min"], v["objects_max"]), haze=v["haze"],
            albedo_tint=v["albedo_tint"], invalid_fraction=v["invalid_fraction"], focal=v["focal"],
            texture=v["texture"], flat_background=v["flat_background"],
        )

    def binning(self):
        return make_binning(self["d_min"], self["d_max"], self["K"])

    def arch(self) -> hnet.NetArch:
        v = self.values
        return hnet.NetArch(K=v["K"], stem_width=v["stem_width"], widths=tuple(v["widths"]),
                            blocks=v["blocks"], dilated=not v["no_dilation"], concat=not v["no_concat"])

    def train_config(self) -> trainer.TrainConfig:
        v = self.values
        return trainer.TrainConfig(
            base_lr=v["base_lr"], momentum=v["momentum"], weight_decay=v["weight_decay"],
            accum_steps=v["accum_steps"], total_iters=v["total_iters"], fixed_iters=v["fixed_iters"],
            decay_every=v["decay_every"], decay_factor=v["decay_factor"], seed=v["seed"],
            binning=self.binning(), arch=self.arch(), augment=v["online_augment"],
            fill_invalid=v["fill_invalid"], log_every=v["log_every"], bn_mode=v["bn_mode"], dtype=v["dtype"],
        )


# -- commands -------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out_dir) -> int:
    samples = synth.generate_dataset(cfg.scene(), cfg["count"])
    if cfg["augment"] == "offline":
        samples = synth.expand_offline(samples, cfg["data_seed"])
    synth.write_dataset(samples, out_dir)
    print(f"wrote {len(samples)} samples to {out_dir}")
    return 0


def cmd_train(cfg: RunConfig, data_dir, out_checkpoint, log_csv=None, resume=None) -> int:
    tcfg = cfg.train_config()
    dataset = synth.read_dataset(data_dir)
    params = state = None
    if resume is not None:
        params, state, _ = trainer.load_training_checkpoint(resume, np.dtype(tcfg.dtype))
    try:
        params, state, tlog = trainer.train(dataset, tcfg, params, state)
    except (trainer.TrainingDiverged, NonFiniteError) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    trainer.save_training_checkpoint(out_checkpoint, params, state, tcfg.binning)
    log_csv = log_csv or f"{out_checkpoint}.log.csv"
    tlog.write_csv(log_csv)
    last = tlog.rows[-1][2] if tlog.rows else float("nan")
    print(f"trained to pass {state.iteration}, last logged loss {last:.4f}; wrote {out_checkpoint} and {log_csv}")
    return 0


def _load_model(checkpoint, cfg: RunConfig):
    params, _, binning = trainer.load_training_checkpoint(checkpoint, np.float64)
    return params, binning or cfg.binning()


def cmd_infer(cfg: RunConfig, checkpoint, image, out, rule=None, scores_csv=None, pixels=()) -> int:
    params, binning = _load_model(checkpoint, cfg)
    rgb = pnm.read_ppm(image).transpose(2, 0, 1)[None]
    x = trainer.normalize_image(rgb)
    depth = hnet.predict_depth(x, params, binning, rule or cfg["rule"])
    pnm.write_pfm(out, depth[0, 0])
    if scores_csv:
        from .loss import softmax

        probs = softmax(hnet.forward(x, params, "eval")[0].astype(np.float64))[0]
        with open(scores_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["y", "x", "bin", "w", "probability"])
            for py, px in pixels:
                if not (0 <= py < probs.shape[1] and 0 <= px < probs.shape[2]):
                    raise ValueError(f"pixel ({py}, {px}) outside the {probs.shape[1]}x{probs.shape[2]} output")
                for i in range(binning.K):
                    w.writerow([py, px, i, repr(float(binning.w[i])), repr(float(probs[i, py, px]))])
    print(f"wrote {out}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint, data_dir, out, rule=None) -> int:
    params, binning = _load_model(checkpoint, cfg)
    samples = synth.read_dataset(data_dir)
    ev = metrics.run_model(params, samples, binning)
    rule = rule or cfg["rule"]
    m = metrics.compute_metrics(ev.soft if rule == "soft" else ev.hard, ev.gt, cap=cfg["cap"])
    metrics.write_metrics_csv(out, [(rule, m)])
    print(f"{rule}: rel {m.rel:.4f} rms {m.rms:.4f} delta1 {m.delta1:.4f} over {m.count} pixels")
    return 0


def cmd_confusion(cfg: RunConfig, checkpoint, data_dir, out) -> int:
    params, binning = _load_model(checkpoint, cfg)
    ev = metrics.run_model(params, synth.read_dataset(data_dir), binning)
    C = metrics.confusion(ev.pred_labels, ev.gt_labels, binning.K, cfg["merge"])
    C.write_csv(out)
    print(f"band(+-2) mass {C.band_mass(2):.3f}, asymmetry {C.asymmetry():.3f}")
    return 0


def cmd_sweep_bins(cfg: RunConfig, train_dir, test_dir, out) -> int:
    rows = metrics.bins_sweep(synth.read_dataset(train_dir), synth.read_dataset(test_dir),
                              cfg["sweep_K"], cfg.train_config())
    metrics.write_sweep_csv(out, rows)
    for K, acc, rel in rows:
        print(f"K={K}: pixel accuracy {acc:.4f}, rel {rel:.4f}")
    return 0


def cmd_grad_check(seed: int = 0) -> int:
    results = gradcheck.run_suite(seed)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


# -- argument parsing -------------------------------------------------------------


def _pixel(text: str):
    y, x = text.split(",")
    return int(y), int(x)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hfdepth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="write a synthetic dataset"))
    sp.add_argument("--out", required=True)

    sp = with_config(sub.add_parser("train", help="train a model"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = with_config(sub.add_parser("infer", help="predict depth for one PPM image"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="output PFM")
    sp.add_argument("--rule", choices=("soft", "hard"))
    sp.add_argument("--scores", help="CSV of per-bin probabilities at --pixel locations")
    sp.add_argument("--pixel", action="append", type=_pixel, default=[], metavar="Y,X")

    for name, helptext in (("eval", "depth metrics over a dataset"), ("confusion", "label confusion matrix")):
        sp = with_config(sub.add_parser(name, help=helptext))
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        if name == "eval":
            sp.add_argument("--rule", choices=("soft", "hard"))

    sp = with_config(sub.add_parser("sweep-bins", help="train and evaluate one model per bin count"))
    sp.add_argument("--train-data", required=True)
    sp.add_argument("--test-data", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("grad-check", help="finite-difference gradient checks")
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "grad-check":
            return cmd_grad_check(args.seed)
        cfg = RunConfig.load(args.config, args.set)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.data, args.out, args.log, args.resume)
        if args.command == "infer":
            return cmd_infer(cfg, args.checkpoint, args.image, args.out, args.rule, args.scores, args.pixel)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.data, args.out, args.rule)
        if args.command == "confusion":
            return cmd_confusion(cfg, args.checkpoint, args.data, args.out)
        return cmd_sweep_bins(cfg, args.train_data, args.test_data, args.out)
    except (ConfigError, synth.DatasetError, pnm.FormatError, hnet.CheckpointError, ValueError, OSError) as exc:
        print(f"hfdepth {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
