"""Dataset construction and the experiment grid at desk scale.

A run directory holds one or more datasets (``data-<hash>/``) and trained
stages (``stages/<kind>-<hash>.ckpt`` plus a ``.record`` file). Stage hashes
cover the stage's own settings and the hashes of the data it consumed, so a
repeated call with identical inputs reloads the stored result instead of
retraining; with fixed seeds that is bit-identical to training again.
"""
import logging
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import clcm
from . import io as lio
from . import tomo
from . import vqvae
from .errors import InvalidArgument
from .metrics import evaluate_case, write_report_csv

log = logging.getLogger(__name__)

LA_ANGLES = (120.0, 90.0, 60.0)
EXTREME_ANGLES = (45.0, 30.0, 15.0)
UNSEEN_ANGLES = {"la": (105.0, 75.0), "extreme": (37.5, 22.5)}
DATASET_FORMAT = "lactlab-dataset-1"


def angle_sets(setting):
    """(trained, unseen) angle tuples for a named setting."""
    if setting == "la":
        return LA_ANGLES, UNSEEN_ANGLES["la"]
    if setting == "extreme":
        return EXTREME_ANGLES, UNSEEN_ANGLES["extreme"]
    if setting == "all":
        return LA_ANGLES + EXTREME_ANGLES, UNSEEN_ANGLES["la"] + UNSEEN_ANGLES["extreme"]
    raise InvalidArgument(f"unknown angle setting {setting!r} (expected la, extreme or all)")


def _angle_tag(theta):
    return f"{float(theta):g}"


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int = 0

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sum(len(s) for s in sets) != len(set().union(*sets)):
            raise InvalidArgument("train/val/test case ids must be disjoint")
        if not self.train or not self.val or not self.test:
            raise InvalidArgument("every split needs at least one case")

    @classmethod
    def from_counts(cls, n_train=24, n_val=2, n_test=4, seed=0):
        ids = list(range(n_train + n_val + n_test))
        return cls(ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:], seed)

    def split_of(self, case_id):
        for name in ("train", "val", "test"):
            if case_id in getattr(self, name):
                return name
        raise KeyError(case_id)

    @property
    def all_cases(self):
        return self.train + self.val + self.test


@dataclass
class ExperimentConfig:
    out: str = "runs/default"
    seed: int = 0
    # data
    n_train: int = 24
    n_val: int = 2
    n_test: int = 4
    size: int = 64
    depth: int = 16
    delta_theta: float = 0.5
    theta_r: float = 60.0
    setting: str = "la"
    workers: int = 1
    # vq-vae
    encoder_mode: str = "multi_view"
    vq_epochs: int = 40
    vq_batch: int = 8
    vq_lr: float = 1e-3
    vq_width_full: int = 16
    vq_width_low: int = 32
    vq_res_blocks: int = 2
    codebook_size: int = 128
    # clcm
    n_slices: int = 3
    n_list: str = "1,3,5,7"
    clcm_epochs: int = 40
    clcm_batch: int = 8
    clcm_lr: float = 1e-3
    clcm_widths: str = "32,64,64"
    lambda_cst: float = 0.1
    T: int = 1000
    steps_per_epoch: int = 0

    def __post_init__(self):
        angle_sets(self.setting)
        if self.n_slices % 2 == 0:
            raise InvalidArgument("n_slices must be odd")

    @classmethod
    def from_kv(cls, kv, **overrides):
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for k, v in kv.items():
            if k not in types:
                raise InvalidArgument(f"unknown config key {k!r}")
            t = types[k]
            t = t if isinstance(t, type) else {"int": int, "float": float, "str": str}[t]
            args[k] = t(v)
        args.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**args)

    @classmethod
    def from_file(cls, path, **overrides):
        return cls.from_kv(lio.read_kv(path), **overrides)

    def to_kv(self):
        return OrderedDict((f.name, str(getattr(self, f.name))) for f in fields(self))

    def hash(self):
        return lio.config_hash(self.to_kv())

    @property
    def split(self):
        return DatasetSplit.from_counts(self.n_train, self.n_val, self.n_test, self.seed)

    @property
    def n_values(self):
        return [int(n) for n in self.n_list.split(",")]

    def encoder_config(self, mode=None):
        return vqvae.EncoderConfig(mode=mode or self.encoder_mode, size=self.size,
                                   width_full=self.vq_width_full, width_low=self.vq_width_low,
                                   n_res_blocks=self.vq_res_blocks,
                                   codebook_size=self.codebook_size, seed=self.seed)

    def denoiser_config(self, n=None):
        return clcm.DenoiserConfig(latent_size=self.size // 4, n_slices=n or self.n_slices,
                                   widths=tuple(int(w) for w in self.clcm_widths.split(",")),
                                   T=self.T, lambda_cst=self.lambda_cst, seed=self.seed)


@dataclass
class RunRecord:
    """Everything needed to reproduce and audit one training stage."""
    kind: str
    config_hash: str
    checkpoint: str
    data_hash: str
    seed: int
    val_mae_hu: list
    selected_epoch: int
    epoch_seconds: list
    epoch_loss: list
    extra: dict = field(default_factory=dict)

    def reselect(self):
        """Checkpoint choice re-derived from the logged validation curve."""
        return int(np.argmin(self.val_mae_hu))

    def to_kv(self):
        kv = OrderedDict(kind=self.kind, config_hash=self.config_hash,
                         checkpoint=self.checkpoint, data_hash=self.data_hash, seed=str(self.seed),
                         val_mae_hu=",".join(repr(v) for v in self.val_mae_hu),
                         selected_epoch=str(self.selected_epoch),
                         epoch_seconds=",".join(f"{v:.3f}" for v in self.epoch_seconds),
                         epoch_loss=",".join(repr(v) for v in self.epoch_loss))
        kv.update({f"extra.{k}": str(v) for k, v in self.extra.items()})
        return kv

    def write(self, path):
        Path(path).write_text(lio.format_kv(self.to_kv()))

    @classmethod
    def read(cls, path):
        kv = lio.read_kv(path)

        def floats(s):
            return [float(v) for v in s.split(",")] if s else []
        return cls(kv["kind"], kv["config_hash"], kv["checkpoint"], kv["data_hash"],
                   int(kv["seed"]), floats(kv["val_mae_hu"]), int(kv["selected_epoch"]),
                   floats(kv["epoch_seconds"]), floats(kv["epoch_loss"]),
                   {k[6:]: v for k, v in kv.items() if k.startswith("extra.")})


# ----------------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------------

def _simulate_case(args):
    case_id, seed, size, depth, angles, delta_theta, case_dir = args
    ref = tomo.normalize_hu(tomo.generate_phantom(
        tomo.PhantomSpec(seed=seed * 100003 + case_id, size=size, n_slices=depth)))
    ref.meta["case_id"] = str(case_id)
    ref.meta["source"] = "synthetic-phantom"
    entries = []
    path = lio.write_volume(Path(case_dir) / "ct.vol", ref)
    entries.append(("ref", path))
    for theta in angles:
        lact = tomo.simulate_lact(ref, tomo.AngleSpec(theta, delta_theta))
        path = lio.write_volume(Path(case_dir) / f"lact_{_angle_tag(theta)}.vol", lact)
        entries.append((_angle_tag(theta), path))
    return case_id, entries


def build_dataset(out_dir, split, angles, size=64, depth=16, delta_theta=0.5, workers=1):
    """Generate phantoms, simulate LACT per angle and write volumes plus a manifest.

    Returns the manifest path. Phantom seeds derive from ``split.seed`` and
    the case id, so rebuilding with the same arguments reproduces every file.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    jobs = [(c, split.seed, size, depth, tuple(angles), delta_theta, out_dir / f"case_{c:03d}")
            for c in split.all_cases]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_simulate_case, jobs))
    else:
        results = [_simulate_case(j) for j in jobs]
    lines = [f"# {DATASET_FORMAT}",
             "# source=synthetic-phantom (not patient data; metric magnitudes are desk-scale)",
             f"# seed={split.seed} size={size} depth={depth} delta_theta={delta_theta:g} "
             f"angles={','.join(_angle_tag(a) for a in angles)}"]
    for case_id, entries in sorted(results):
        for theta, path in entries:
            rel = path.relative_to(out_dir).as_posix()
            lines.append(f"case_id={case_id} split={split.split_of(case_id)} theta_r={theta} "
                         f"path={rel} sha256={lio.sha256_file(path)}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@dataclass
class Dataset:
    root: Path
    entries: list        # dicts with case_id, split, theta_r, path, sha256

    @classmethod
    def load(cls, root, verify=True):
        root = Path(root)
        manifest = root / "manifest.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"dataset manifest not found: {manifest}")
        entries = []
        for line in manifest.read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            e = dict(tok.split("=", 1) for tok in line.split())
            e["case_id"] = int(e["case_id"])
            if verify and lio.sha256_file(root / e["path"]) != e["sha256"]:
                raise InvalidArgument(f"{root / e['path']}: hash does not match manifest")
            entries.append(e)
        return cls(root, entries)

    def cases(self, split):
        return sorted({e["case_id"] for e in self.entries if e["split"] == split})

    def _entry(self, case_id, tag):
        for e in self.entries:
            if e["case_id"] == case_id and e["theta_r"] == tag:
                return e
        raise KeyError(f"case {case_id} has no volume for theta_r={tag}")

    def ref(self, case_id):
        return lio.read_volume(self.root / self._entry(case_id, "ref")["path"])

    def lact(self, case_id, theta):
        return lio.read_volume(self.root / self._entry(case_id, _angle_tag(theta))["path"])

    def data_hash(self, tags=None, splits=None):
        """Hash over the manifest digests of the selected (theta, split) entries."""
        keep = [e for e in self.entries
                if (tags is None or e["theta_r"] in tags) and (splits is None or e["split"] in splits)]
        return lio.config_hash({f"{e['case_id']}:{e['theta_r']}": e["sha256"] for e in keep})


def ensure_dataset(cfg, angles):
    """Load the dataset for ``cfg`` and ``angles`` from the run directory, building it if absent."""
    key = OrderedDict(seed=cfg.seed, n_train=cfg.n_train, n_val=cfg.n_val, n_test=cfg.n_test,
                      size=cfg.size, depth=cfg.depth, delta_theta=cfg.delta_theta,
                      angles=",".join(_angle_tag(a) for a in sorted(angles)))
    root = Path(cfg.out) / f"data-{lio.config_hash(key)}"
    if not (root / "manifest.txt").exists():
        log.info("building dataset %s", root)
        build_dataset(root, cfg.split, sorted(angles, reverse=True), cfg.size, cfg.depth,
                      cfg.delta_theta, cfg.workers)
    return Dataset.load(root)


def _stack(vols):
    return np.concatenate([v.voxels for v in vols], axis=0)


# ----------------------------------------------------------------------------
# training stages
# ----------------------------------------------------------------------------

def _stage_paths(cfg, kind, key):
    base = Path(cfg.out) / "stages" / f"{kind}-{lio.config_hash(key)}"
    return Path(str(base) + ".ckpt"), Path(str(base) + ".record")


def train_vqvae_stage(ds, cfg, mode=None):
    """Train (or reload) the VQ-VAE on reference slices. Returns (model, RunRecord)."""
    ecfg = cfg.encoder_config(mode)
    data_hash = ds.data_hash(tags={"ref"}, splits={"train", "val"})
    key = ecfg.to_kv()
    key.update(epochs=cfg.vq_epochs, batch=cfg.vq_batch, lr=cfg.vq_lr, data=data_hash)
    ckpt, rec_path = _stage_paths(cfg, "vqvae", key)
    if ckpt.exists() and rec_path.exists():
        model, _ = vqvae.load_vqvae(ckpt)
        return model, RunRecord.read(rec_path)
    train = _stack([ds.ref(c) for c in ds.cases("train")])
    val = _stack([ds.ref(c) for c in ds.cases("val")])
    model, tlog = vqvae.train_vqvae(train, val, ecfg, epochs=cfg.vq_epochs,
                                    batch_size=cfg.vq_batch, lr=cfg.vq_lr, seed=cfg.seed)
    digest = vqvae.save_vqvae(ckpt, model)
    record = RunRecord("vqvae", lio.config_hash(key), str(ckpt), data_hash, cfg.seed,
                       tlog.val_mae_hu, tlog.best_epoch, tlog.epoch_seconds, tlog.epoch_loss,
                       {"mode": ecfg.mode, "blob_sha256": digest})
    record.write(rec_path)
    return model, record


def make_codec(ds, vq):
    ct = _stack([ds.ref(c) for c in ds.cases("train")])
    scale, shift = clcm.latent_scale_for(vq, ct)
    return clcm.LatentCodec(vq, scale, shift)


def _pairs(ds, cases, angles):
    return [(ds.ref(c).voxels, ds.lact(c, a).voxels) for c in cases for a in angles]


def train_clcm_stage(ds, cfg, codec, vq_record, angles, n=None):
    """Train (or reload) the denoiser on (case, angle) pairs. Returns (model, RunRecord)."""
    dcfg = cfg.denoiser_config(n)
    tags = {_angle_tag(a) for a in angles} | {"ref"}
    data_hash = ds.data_hash(tags=tags, splits={"train", "val"})
    key = dcfg.to_kv()
    key.update(epochs=cfg.clcm_epochs, batch=cfg.clcm_batch, lr=cfg.clcm_lr,
               steps=cfg.steps_per_epoch, data=data_hash, vqvae=vq_record.config_hash,
               angles=",".join(sorted(tags)))
    ckpt, rec_path = _stage_paths(cfg, "clcm", key)
    if ckpt.exists() and rec_path.exists():
        model, _, _ = clcm.load_clcm(ckpt)
        return model, RunRecord.read(rec_path)
    model, tlog = clcm.train_clcm(_pairs(ds, ds.cases("train"), angles),
                                  _pairs(ds, ds.cases("val"), angles), codec, dcfg,
                                  epochs=cfg.clcm_epochs, batch_size=cfg.clcm_batch,
                                  lr=cfg.clcm_lr, seed=cfg.seed,
                                  steps_per_epoch=cfg.steps_per_epoch or None)
    clcm.save_clcm(ckpt, model, codec, vq_record.extra.get("blob_sha256", ""),
                   codec.vqvae.cfg.hash())
    record = RunRecord("clcm", lio.config_hash(key), str(ckpt), data_hash, cfg.seed,
                       tlog.val_mae_hu, tlog.best_epoch, tlog.epoch_seconds, tlog.epoch_loss,
                       {"n_slices": dcfg.n_slices, "vqvae": vq_record.checkpoint,
                        "angles": ",".join(_angle_tag(a) for a in angles)})
    record.write(rec_path)
    log.info("clcm[N=%d] mean epoch wall time %.2fs", dcfg.n_slices, np.mean(tlog.epoch_seconds))
    return model, record


# ----------------------------------------------------------------------------
# evaluation and experiments
# ----------------------------------------------------------------------------

def evaluate_model(ds, codec, model, angles, seed=0, cases=None):
    """Metric rows for the synthetic CT of every test case and angle."""
    sched = clcm.build_schedule(model.cfg.T)
    rows = []
    for c in cases if cases is not None else ds.cases("test"):
        ref = ds.ref(c)
        for a in angles:
            sct = clcm.infer_volume(ds.lact(c, a), codec, model, sched, seed=seed + c)
            rows.append(evaluate_case(sct, ref).row(c, float(a)))
    return rows


def evaluate_lact(ds, angles, cases=None):
    """Metric rows for the raw limited-angle reconstructions (the input baseline)."""
    rows = []
    for c in cases if cases is not None else ds.cases("test"):
        ref = ds.ref(c)
        for a in angles:
            rows.append(evaluate_case(ds.lact(c, a), ref).row(c, float(a)))
    return rows


def median_of(rows, key, theta=None):
    vals = [r[key] for r in rows if theta is None or r["theta_r"] == float(theta)]
    return float(np.median(vals))


@dataclass
class ArmResult:
    name: str
    rows: list
    records: list

    def median(self, key="mae_roi", theta=None):
        return median_of(self.rows, key, theta)


def run_pipeline(cfg):
    """Single-angle pipeline at ``cfg.theta_r``: returns (sCT arm, LACT baseline arm)."""
    ds = ensure_dataset(cfg, [cfg.theta_r])
    vq, vrec = train_vqvae_stage(ds, cfg)
    codec = make_codec(ds, vq)
    model, crec = train_clcm_stage(ds, cfg, codec, vrec, [cfg.theta_r])
    out = Path(cfg.out) / "pipeline"
    sct = ArmResult("sct", evaluate_model(ds, codec, model, [cfg.theta_r], cfg.seed), [vrec, crec])
    base = ArmResult("lact", evaluate_lact(ds, [cfg.theta_r]), [])
    write_report_csv(out / "sct.csv", sct.rows)
    write_report_csv(out / "lact.csv", base.rows)
    return sct, base


def _write_summary(path, arms):
    lines = ["arm,mae,ssim,mae_roi,ssim_roi,mean_epoch_seconds"]
    for a in arms.values():
        secs = [s for r in a.records if r.kind == "clcm" for s in r.epoch_seconds]
        lines.append(f"{a.name},{a.median('mae'):.6g},{a.median('ssim'):.6g},"
                     f"{a.median('mae_roi'):.6g},{a.median('ssim_roi'):.6g},"
                     f"{np.mean(secs) if secs else float('nan'):.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def run_ablation_multiview(cfg):
    """Single-view vs multi-view encoding under identical seeds and budgets."""
    ds = ensure_dataset(cfg, [cfg.theta_r])
    out = Path(cfg.out) / "ablate_view"
    arms = OrderedDict()
    for mode in ("single_view", "multi_view"):
        vq, vrec = train_vqvae_stage(ds, cfg, mode)
        codec = make_codec(ds, vq)
        model, crec = train_clcm_stage(ds, cfg, codec, vrec, [cfg.theta_r])
        arms[mode] = ArmResult(mode, evaluate_model(ds, codec, model, [cfg.theta_r], cfg.seed),
                               [vrec, crec])
        write_report_csv(out / f"{mode}.csv", arms[mode].rows)
    _write_summary(out / "summary.csv", arms)
    return arms


def run_ablation_slices(cfg, n_list=None):
    """Multi-view encoding with N neighbouring guidance slices, one arm per N."""
    ds = ensure_dataset(cfg, [cfg.theta_r])
    out = Path(cfg.out) / "ablate_slices"
    vq, vrec = train_vqvae_stage(ds, cfg, "multi_view")
    codec = make_codec(ds, vq)
    arms = OrderedDict()
    for n in n_list or cfg.n_values:
        model, crec = train_clcm_stage(ds, cfg, codec, vrec, [cfg.theta_r], n)
        name = f"N={n}"
        arms[name] = ArmResult(name, evaluate_model(ds, codec, model, [cfg.theta_r], cfg.seed),
                               [vrec, crec])
        log.info("%s: ROI-MAE %.2f HU, %.2fs per epoch", name, arms[name].median("mae_roi"),
                 np.mean(crec.epoch_seconds))
        write_report_csv(out / f"n{n}.csv", arms[name].rows)
    _write_summary(out / "summary.csv", arms)
    return arms


@dataclass
class SweepResult:
    setting: str
    trained: tuple
    unseen: tuple
    rows: list
    lact_rows: list
    records: list

    @property
    def angles(self):
        return tuple(sorted(self.trained + self.unseen, reverse=True))

    def median_mae(self, theta, key="mae"):
        return median_of(self.rows, key, theta)


def plot_sweep(result, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, key, label in ((axes[0], "mae", "MAE (HU)"), (axes[1], "ssim", "SSIM")):
        xs = list(result.angles)
        ax.plot(xs, [result.median_mae(a, key) for a in xs], "-", color="0.6")
        for group, marker in ((result.trained, "o"), (result.unseen, "s")):
            ax.plot(group, [result.median_mae(a, key) for a in group], marker, linestyle="none")
        ax.set_xlabel("theta_r (deg)")
        ax.set_ylabel(label)
        ax.invert_xaxis()
    axes[0].legend(["sweep", "trained", "unseen"], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def run_angle_generalization(cfg, setting=None):
    """Train one model on a three-angle mixture; evaluate on trained and unseen angles."""
    setting = setting or cfg.setting
    trained, unseen = angle_sets(setting)
    ds = ensure_dataset(cfg, trained + unseen)
    vq, vrec = train_vqvae_stage(ds, cfg, "multi_view")
    codec = make_codec(ds, vq)
    model, crec = train_clcm_stage(ds, cfg, codec, vrec, trained)
    angles = sorted(trained + unseen, reverse=True)
    result = SweepResult(setting, trained, unseen,
                         evaluate_model(ds, codec, model, angles, cfg.seed),
                         evaluate_lact(ds, angles), [vrec, crec])
    out = Path(cfg.out) / "angle_sweep"
    write_report_csv(out / f"{setting}.csv", result.rows)
    write_report_csv(out / f"{setting}_lact.csv", result.lact_rows)
    plot_sweep(result, out / f"{setting}.png")
    return result

