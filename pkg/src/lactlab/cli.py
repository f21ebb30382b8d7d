"""Command-line entry point: ``lactlab <subcommand> [options]``."""
import argparse
import logging
import sys

import numpy as np

from . import clcm, experiments, tomo, vqvae
from . import io as lio
from .errors import InvalidArgument, InvalidState
from .experiments import ExperimentConfig
from .metrics import evaluate_case, write_report_csv
from .optim import TrainingDiverged

log = logging.getLogger("lactlab")


def _common(p):
    p.add_argument("--config", help="key=value experiment config file")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")


def build_parser():
    ap = argparse.ArgumentParser(prog="lactlab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="generate phantoms and simulate LACT volumes")
    _common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--angles", help="comma-separated theta_r list (default: trained + unseen of the setting)")

    p = sub.add_parser("simulate", help="simulate a limited-angle reconstruction of one volume")
    _common(p)
    p.add_argument("--theta-r", type=float, required=True)
    p.add_argument("--theta-s", type=float)
    p.add_argument("--delta-theta", type=float, default=0.5)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-vqvae", help="train the VQ-VAE on a dataset's reference slices")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--mode", choices=("single_view", "multi_view"))

    p = sub.add_parser("train-clcm", help="train the latent consistency denoiser")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--vqvae", required=True, help="VQ-VAE checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--angles", help="comma-separated training theta_r list (default: theta_r)")

    p = sub.add_parser("infer", help="one-step synthetic CT from a LACT volume")
    _common(p)
    p.add_argument("--lact", required=True)
    p.add_argument("--vqvae", required=True)
    p.add_argument("--clcm", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="MAE/SSIM of a volume against a reference")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--csv", help="also write a one-row CSV report here")
    p.add_argument("--case-id", help="case id for the CSV row (default: from the volume header)")

    for name, text in (("ablate-view", "single-view vs multi-view encoding"),
                       ("ablate-slices", "number of guidance slices N"),
                       ("angle-sweep", "mixed-angle training and unseen-angle evaluation")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--out", help="run directory (overrides the config)")
        if name == "angle-sweep":
            p.add_argument("--setting", choices=("la", "extreme", "all"))
        if name == "ablate-slices":
            p.add_argument("--n-list", help="comma-separated odd N values")
    return ap


def _config(args, **overrides):
    overrides.setdefault("seed", args.seed)
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def _angles(text):
    return [float(a) for a in text.split(",")] if text else None


def cmd_build_dataset(args):
    cfg = _config(args)
    trained, unseen = experiments.angle_sets(cfg.setting)
    angles = _angles(args.angles) or sorted(set(trained + unseen) | {cfg.theta_r}, reverse=True)
    manifest = experiments.build_dataset(args.out, cfg.split, angles, cfg.size, cfg.depth,
                                         cfg.delta_theta, cfg.workers)
    print(f"manifest={manifest}")


def cmd_simulate(args):
    vol = lio.read_volume(args.inp)
    if vol.value_domain == "HU":
        vol = tomo.normalize_hu(vol)
    spec = tomo.AngleSpec(args.theta_r, args.delta_theta, args.theta_s)
    out = lio.write_volume(args.out, tomo.simulate_lact(vol, spec))
    print(f"wrote {out} angles={spec.as_text()}")


def cmd_train_vqvae(args):
    cfg = _config(args)
    ds = experiments.Dataset.load(args.data)
    train = np.concatenate([ds.ref(c).voxels for c in ds.cases("train")])
    val = np.concatenate([ds.ref(c).voxels for c in ds.cases("val")])
    model, tlog = vqvae.train_vqvae(train, val, cfg.encoder_config(args.mode), cfg.vq_epochs,
                                    cfg.vq_batch, cfg.vq_lr, cfg.seed)
    digest = vqvae.save_vqvae(args.out, model, {"selected_epoch": tlog.best_epoch,
                                                "val_mae_hu": ",".join(f"{v:.4f}" for v in tlog.val_mae_hu)})
    print(f"checkpoint={args.out} sha256={digest} selected_epoch={tlog.best_epoch} "
          f"val_mae={tlog.val_mae_hu[tlog.best_epoch]:.3f}")


def cmd_train_clcm(args):
    cfg = _config(args)
    ds = experiments.Dataset.load(args.data)
    vq, _ = vqvae.load_vqvae(args.vqvae)
    codec = experiments.make_codec(ds, vq)
    angles = _angles(args.angles) or [cfg.theta_r]
    pairs = {s: [(ds.ref(c).voxels, ds.lact(c, a).voxels) for c in ds.cases(s) for a in angles]
             for s in ("train", "val")}
    model, tlog = clcm.train_clcm(pairs["train"], pairs["val"], codec, cfg.denoiser_config(),
                                  cfg.clcm_epochs, cfg.clcm_batch, cfg.clcm_lr, cfg.seed,
                                  cfg.steps_per_epoch or None)
    digest = clcm.save_clcm(args.out, model, codec, lio.sha256_file(args.vqvae), vq.cfg.hash(),
                            {"selected_epoch": tlog.best_epoch})
    print(f"checkpoint={args.out} sha256={digest} selected_epoch={tlog.best_epoch} "
          f"val_mae={tlog.val_mae_hu[tlog.best_epoch]:.3f}")


def cmd_infer(args):
    seed = args.seed if args.seed is not None else 0
    vq, _ = vqvae.load_vqvae(args.vqvae)
    model, codec, _ = clcm.load_clcm(args.clcm, vq, lio.sha256_file(args.vqvae))
    lact = lio.read_volume(args.lact)
    if lact.value_domain == "HU":
        lact = tomo.normalize_hu(lact)
    sct = clcm.infer_volume(lact, codec, model, clcm.build_schedule(model.cfg.T), seed=seed)
    lio.write_volume(args.out, sct)
    print(f"wrote {args.out} denoiser_evaluations={model.eval_count}")


def cmd_evaluate(args):
    pred, ref = lio.read_volume(args.pred), lio.read_volume(args.ref)
    pred = tomo.normalize_hu(pred) if pred.value_domain == "HU" else pred
    ref = tomo.normalize_hu(ref) if ref.value_domain == "HU" else ref
    rep = evaluate_case(pred, ref)
    theta = pred.meta.get("angles", ",,").split(",")[1] or ""
    if args.csv:
        case_id = args.case_id or pred.meta.get("case_id", "0")
        write_report_csv(args.csv, [rep.row(case_id, theta)])
    print(f"mae={rep.mae_hu} ssim={rep.ssim} mae_roi={rep.mae_roi_hu} ssim_roi={rep.ssim_roi}")


def _print_arms(arms):
    for a in arms.values():
        print(f"{a.name}: mae={a.median('mae'):.3f} ssim={a.median('ssim'):.4f} "
              f"mae_roi={a.median('mae_roi'):.3f} ssim_roi={a.median('ssim_roi'):.4f}")


def cmd_ablate_view(args):
    _print_arms(experiments.run_ablation_multiview(_config(args, out=args.out)))


def cmd_ablate_slices(args):
    cfg = _config(args, out=args.out, n_list=args.n_list)
    _print_arms(experiments.run_ablation_slices(cfg))


def cmd_angle_sweep(args):
    cfg = _config(args, out=args.out, setting=args.setting)
    res = experiments.run_angle_generalization(cfg)
    for a in res.angles:
        kind = "trained" if a in res.trained else "unseen"
        print(f"theta_r={a:g} ({kind}): mae={res.median_mae(a):.3f} "
              f"ssim={res.median_mae(a, 'ssim'):.4f}")


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "simulate": cmd_simulate,
    "train-vqvae": cmd_train_vqvae,
    "train-clcm": cmd_train_clcm,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "ablate-view": cmd_ablate_view,
    "ablate-slices": cmd_ablate_slices,
    "angle-sweep": cmd_angle_sweep,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (FileNotFoundError, InvalidArgument, InvalidState, TrainingDiverged, KeyError,
            OSError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"lactlab {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
