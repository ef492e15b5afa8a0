"""Episodic meta-training, evaluation, ablations and sweeps.

The two feature learners stay frozen here: every episode extracts dual-stream
features, builds dual prototypes, aligns and fuses them, and only the
alignment parameters receive gradient. Evaluation accumulates a global
confusion matrix over test-split episodes and reports foreground mean IoU.
The ablation harness rewires the pipeline per variant (call counters make the
wiring auditable), and the sweep harnesses reproduce the push-pull/iteration
and N-way grids.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import TrainingError, UndefinedMetricError, InvalidSpecError
from .data import SceneManifest, augment, sample_episode
from .intrinsic import ILParams, il_forward, load_il
from .diffusion import DLParams, dl_features, load_dl
from .prototypes import proto_gen, assemble
from .pam import PAMConfig, PAMParams, assimilate, fuse, pam_init, resample_rows
from .losses import episode_loss, seg_predict
from .checkpoint import params_digest

REPORT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _check_keys(doc: dict, allowed: set, where: str):
    unknown = set(doc) - allowed
    if unknown:
        raise InvalidSpecError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    decay_factor: float = 0.5
    decay_interval: int = 500


@dataclass
class LossConfig:
    lam: float = 1.0
    temperature: float = 1.0


@dataclass
class RunConfig:
    data: str = ""
    out_dir: str = "runs"
    n_way: int = 2
    k_shot: int = 1
    split: str = "S0"              # split held out for meta-testing
    episodes: int = 2000
    eval_episodes: int = 100
    seeds: tuple = (0, 1, 2)
    n_points: int = 512
    fps_seeds: int = 5
    augment_train: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pam: PAMConfig = field(default_factory=PAMConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    il_ckpt: str = ""
    dl_ckpt: str = ""

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        doc.pop("schema_version", None)
        _check_keys(doc, {"data", "out_dir", "n_way", "k_shot", "split", "episodes",
                          "eval_episodes", "seeds", "n_points", "fps_seeds",
                          "augment_train", "optimizer", "pam", "loss",
                          "checkpoints"}, "config")
        opt = doc.pop("optimizer", {})
        _check_keys(opt, {"lr", "decay_factor", "decay_interval"}, "config.optimizer")
        pam = doc.pop("pam", {})
        _check_keys(pam, {"iterations", "variant", "share_weights", "width",
                          "mlp_hidden"}, "config.pam")
        loss = doc.pop("loss", {})
        _check_keys(loss, {"lambda", "temperature"}, "config.loss")
        ckpt = doc.pop("checkpoints", {})
        _check_keys(ckpt, {"il", "dl"}, "config.checkpoints")
        seeds = tuple(doc.pop("seeds", (0, 1, 2)))
        return cls(seeds=seeds,
                   optimizer=OptimizerConfig(**opt),
                   pam=PAMConfig(**pam),
                   loss=LossConfig(lam=loss.get("lambda", 1.0),
                                   temperature=loss.get("temperature", 1.0)),
                   il_ckpt=ckpt.get("il", ""), dl_ckpt=ckpt.get("dl", ""),
                   **doc)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "data": self.data, "out_dir": self.out_dir, "n_way": self.n_way,
            "k_shot": self.k_shot, "split": self.split, "episodes": self.episodes,
            "eval_episodes": self.eval_episodes, "seeds": list(self.seeds),
            "n_points": self.n_points, "fps_seeds": self.fps_seeds,
            "augment_train": self.augment_train,
            "optimizer": asdict(self.optimizer),
            "pam": asdict(self.pam),
            "loss": {"lambda": self.loss.lam, "temperature": self.loss.temperature},
            "checkpoints": {"il": self.il_ckpt, "dl": self.dl_ckpt},
        }

    def digest(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ModuleFlags:
    """Which pipeline pieces are active (ablation variants A..F)."""

    use_dl: bool = True
    use_pam: bool = True
    use_pcm: bool = True

    VARIANTS = {
        "A": (False, True, True),
        "B": (True, False, True),
        "C": (True, True, False),
        "D": (False, False, True),
        "E": (False, True, False),
        "F": (True, True, True),
    }

    @classmethod
    def from_variant(cls, variant: str) -> "ModuleFlags":
        if variant not in cls.VARIANTS:
            raise InvalidSpecError(f"unknown ablation variant {variant!r}, "
                                   f"expected one of {sorted(cls.VARIANTS)}")
        dl, pam, pcm = cls.VARIANTS[variant]
        return cls(use_dl=dl, use_pam=pam, use_pcm=pcm)


def lr_at(step: int, opt: OptimizerConfig) -> float:
    """Stepwise decay: lr * decay_factor ** floor(step / decay_interval)."""
    return opt.lr * opt.decay_factor ** (step // opt.decay_interval)


# ---------------------------------------------------------------------------
# feature extraction seam (with call counters for wiring audits)
# ---------------------------------------------------------------------------

class FeatureExtractor:
    """Frozen dual-stream feature provider; counts calls per stream.

    Parameters are copied to float32 once: the learners are frozen here, and
    single-precision inference is considerably faster at identical behavior
    downstream (prototypes and the loss graph stay float64).
    """

    def __init__(self, il: ILParams, dl: DLParams | None, dtype=np.float32):
        from dataclasses import replace

        def cast(params):
            return {k: ad.Tensor(v.data.astype(dtype)) for k, v in params.items()}

        self.il = ILParams(config=il.config, params=cast(il.params))
        self.dl = None if dl is None else replace(dl, params=cast(dl.params))
        self.calls = {"il": 0, "dl": 0}

    def intrinsic(self, pc) -> np.ndarray:
        self.calls["il"] += 1
        return il_forward(pc, self.il).features

    def diffusion(self, pc) -> np.ndarray:
        if self.dl is None:
            raise TrainingError("diffusion stream requested but not loaded")
        self.calls["dl"] += 1
        return dl_features(pc, self.dl).features


@dataclass
class EpisodeTensors:
    """Constant inputs of one episode's differentiable head."""

    p_i: np.ndarray
    p_d: np.ndarray | None
    f_qi: np.ndarray
    f_qd: np.ndarray | None
    f_si_att: np.ndarray          # support intrinsic, resampled to n_query
    f_sd_att: np.ndarray | None   # support diffusion, resampled to n_query
    f_si_full: np.ndarray         # all support rows (calibration)
    y_support: np.ndarray         # labels 0..C (background = C) per support row
    y_query: np.ndarray


def _resample_indices(coords: np.ndarray, n_target: int) -> np.ndarray:
    from .prototypes import fps

    n = len(coords)
    if n == n_target:
        return np.arange(n)
    if n > n_target:
        return fps(coords, n_target)
    return np.arange(n_target) % n


def episode_tensors(ep, fx: FeatureExtractor, flags: ModuleFlags,
                    fps_seeds: int) -> EpisodeTensors:
    """Extract frozen features and initial prototypes for one episode."""
    feats_i, feats_d, masks, coords = [], [], [], []
    si_rows, sd_rows, coord_rows, label_rows = [], [], [], []
    for c, shots in enumerate(ep.support):
        fi_c, fd_c, m_c, x_c = [], [], [], []
        for pc, mask in shots:
            fi = fx.intrinsic(pc)
            fi_c.append(fi)
            m_c.append(mask)
            x_c.append(pc.points)
            si_rows.append(fi)
            coord_rows.append(pc.points)
            y = np.full(len(pc), ep.n_way, dtype=np.int64)
            y[mask] = c
            label_rows.append(y)
            if flags.use_dl:
                fd = fx.diffusion(pc)
                fd_c.append(fd)
                sd_rows.append(fd)
        feats_i.append(fi_c)
        feats_d.append(fd_c)
        masks.append(m_c)
        coords.append(x_c)

    fg_i, bg_i = proto_gen(feats_i, masks, coords, s=fps_seeds)
    p_i = assemble(fg_i, bg_i, source="intrinsic").matrix
    p_d = None
    if flags.use_dl:
        fg_d, bg_d = proto_gen(feats_d, masks, coords, s=fps_seeds)
        p_d = assemble(fg_d, bg_d, source="diffusion").matrix

    f_qi = fx.intrinsic(ep.query)
    f_qd = fx.diffusion(ep.query) if flags.use_dl else None

    f_si_full = np.vstack(si_rows)
    s_coords = np.vstack(coord_rows)
    y_support = np.concatenate(label_rows)
    n_q = len(ep.query)
    # one index set serves both streams: the rows share support coordinates
    idx = _resample_indices(s_coords, n_q)
    f_si_att = f_si_full[idx]
    f_sd_att = np.vstack(sd_rows)[idx] if flags.use_dl else None
    return EpisodeTensors(p_i=p_i, p_d=p_d, f_qi=f_qi, f_qd=f_qd,
                          f_si_att=f_si_att, f_sd_att=f_sd_att,
                          f_si_full=f_si_full, y_support=y_support,
                          y_query=ep.query_labels.astype(np.int64))


def fused_prototypes(t: EpisodeTensors, flags: ModuleFlags, pam: PAMParams | None):
    """Run alignment (when active) and fuse; returns the prototype Tensor."""
    if flags.use_pam:
        if pam is None:
            raise TrainingError("PAM active but no parameters supplied")
        if flags.use_dl:
            pi, pd = assimilate(t.p_i, t.p_d, t.f_qi, t.f_si_att,
                                t.f_qd, t.f_sd_att, pam)
        else:
            pi, pd = assimilate(t.p_i, None, t.f_qi, t.f_si_att, None, None, pam)
        return fuse(pi, pd)
    return fuse(ad.astensor(t.p_i), None if t.p_d is None else ad.astensor(t.p_d))


# ---------------------------------------------------------------------------
# meta-training
# ---------------------------------------------------------------------------

def _episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def meta_train(config: RunConfig, manifest: SceneManifest, il: ILParams,
               dl: DLParams | None, flags: ModuleFlags = ModuleFlags(),
               seed: int = 0):
    """Train alignment parameters on train-split episodes with frozen learners.

    Returns (PAMParams or None when the variant has no trainable parameters,
    per-episode log, feature-call counters).
    """
    fx = FeatureExtractor(il, dl if flags.use_dl else None)
    log = []
    if not flags.use_pam:
        return None, log, fx.calls

    il_digest = params_digest({k: v.data for k, v in il.params.items()})
    pam = pam_init(PAMConfig(**{**asdict(config.pam)}), seed=seed)
    opt = ad.Adam(pam.params, lr=config.optimizer.lr)
    lam = config.loss.lam if flags.use_pcm else 0.0

    for e in range(config.episodes):
        ep = sample_episode(manifest, config.n_way, config.k_shot, "train",
                            seed=_episode_seed(seed, e), n_points=config.n_points,
                            test_split=config.split)
        if config.augment_train:
            ep = _augment_episode(ep, _episode_seed(seed, 10_000_000 + e))
        t = episode_tensors(ep, fx, flags, config.fps_seeds)
        protos = fused_prototypes(t, flags, pam)
        total, record = episode_loss(t.f_qi, t.y_query, t.f_si_full, t.y_support,
                                     protos, lam=lam,
                                     temperature=config.loss.temperature)
        if not np.isfinite(total.item()):
            raise TrainingError(f"non-finite loss at episode {e}")
        opt.zero_grad()
        total.backward()
        opt.step(lr=lr_at(e, config.optimizer))
        log.append({"episode": e, "lr": lr_at(e, config.optimizer),
                    "seg": record.seg_loss, "cal": record.cal_loss,
                    "total": record.total})

    if params_digest({k: v.data for k, v in il.params.items()}) != il_digest:
        raise TrainingError("frozen learner mutated during meta-training")
    return pam, log, fx.calls


def _augment_episode(ep, seed: int):
    from .data import Episode

    rng = np.random.default_rng(seed)
    support = []
    for shots in ep.support:
        new_shots = []
        for pc, mask in shots:
            new_shots.append((augment(pc, seed=int(rng.integers(2 ** 31))), mask))
        support.append(new_shots)
    query = augment(ep.query, seed=int(rng.integers(2 ** 31)))
    return Episode(n_way=ep.n_way, k_shot=ep.k_shot, support=support, query=query,
                   query_labels=ep.query_labels, class_map=ep.class_map,
                   support_refs=ep.support_refs, query_ref=ep.query_ref)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def miou(confusion: np.ndarray):
    """Per-class IoU and foreground mean from a (C+1)x(C+1) confusion matrix.

    Rows are ground truth, columns predictions, class C is background. Classes
    with zero union are reported as None and excluded from the mean, which
    runs over foreground classes only.
    """
    conf = np.asarray(confusion)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ValueError(f"confusion must be square, got {conf.shape}")
    if (conf < 0).any():
        raise ValueError("confusion counts must be non-negative")
    if conf.sum() == 0:
        raise UndefinedMetricError("all-zero confusion matrix")
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = [float(tp[c] / union[c]) if union[c] > 0 else None
                 for c in range(conf.shape[0])]
    fg = [per_class[c] for c in range(conf.shape[0] - 1) if per_class[c] is not None]
    if not fg:
        raise UndefinedMetricError("no foreground class has nonzero union")
    return per_class, float(np.mean(fg))


@dataclass
class EvalReport:
    schema_version: int
    variant: str
    n_way: int
    k_shot: int
    split: str
    episodes: int
    seeds: list
    per_class_iou: list
    mean_iou: float
    config_digest: str
    modules: dict
    feature_calls: dict
    wall_clock_s: float

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        doc = asdict(self)
        if not include_wall_clock:
            doc.pop("wall_clock_s")
        return doc

    def canonical_bytes(self, include_wall_clock: bool = False) -> bytes:
        return json.dumps(self.to_dict(include_wall_clock), sort_keys=True,
                          separators=(",", ":")).encode()


def evaluate(config: RunConfig, manifest: SceneManifest, il: ILParams,
             dl: DLParams | None, pam: PAMParams | None,
             flags: ModuleFlags = ModuleFlags(), seeds=None,
             episodes: int | None = None, variant: str = "F") -> EvalReport:
    """Run test-split episodes and report the pooled-confusion mean IoU."""
    seeds = list(config.seeds if seeds is None else seeds)
    episodes = config.eval_episodes if episodes is None else episodes
    fx = FeatureExtractor(il, dl if flags.use_dl else None)
    started = time.perf_counter()
    conf = np.zeros((config.n_way + 1, config.n_way + 1), dtype=np.int64)
    for s in seeds:
        for e in range(episodes):
            ep = sample_episode(manifest, config.n_way, config.k_shot, "test",
                                seed=_episode_seed(s, e), n_points=config.n_points,
                                test_split=config.split)
            t = episode_tensors(ep, fx, flags, config.fps_seeds)
            with ad.no_grad():
                protos = fused_prototypes(t, flags, pam)
            _, pred = seg_predict(t.f_qi, protos.data,
                                  temperature=config.loss.temperature)
            np.add.at(conf, (t.y_query, pred), 1)
    per_class, mean = miou(conf)
    return EvalReport(schema_version=REPORT_SCHEMA_VERSION, variant=variant,
                      n_way=config.n_way, k_shot=config.k_shot, split=config.split,
                      episodes=episodes, seeds=seeds, per_class_iou=per_class,
                      mean_iou=mean, config_digest=config.digest(),
                      modules=asdict(flags), feature_calls=dict(fx.calls),
                      wall_clock_s=round(time.perf_counter() - started, 3))


# ---------------------------------------------------------------------------
# results store
# ---------------------------------------------------------------------------

def write_report(report: EvalReport, out_dir, name: str) -> Path:
    """One JSON file per report plus an append-with-lock index line."""
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    path = out / "reports" / f"{name}.json"
    path.write_bytes(report.canonical_bytes(include_wall_clock=True))
    line = json.dumps({"name": name, "variant": report.variant,
                       "n_way": report.n_way, "k_shot": report.k_shot,
                       "mean_iou": report.mean_iou}, sort_keys=True)
    index = out / "index.jsonl"
    with open(index, "a") as fh:
        try:
            import fcntl

            fcntl.flock(fh, fcntl.LOCK_EX)
            fh.write(line + "\n")
            fcntl.flock(fh, fcntl.LOCK_UN)
        except ImportError:  # non-POSIX fallback
            fh.write(line + "\n")
    return path


# ---------------------------------------------------------------------------
# ablations and sweeps
# ---------------------------------------------------------------------------

@dataclass
class AblationResult:
    variant: str
    reports: list
    seed_mean_iou: float


def _load_learners(config: RunConfig):
    il = load_il(config.il_ckpt)
    dl = load_dl(config.dl_ckpt) if config.dl_ckpt else None
    return il, dl


def run_variant(variant: str, config: RunConfig, manifest: SceneManifest,
                il: ILParams, dl: DLParams | None,
                store: bool = True) -> AblationResult:
    """Train (when trainable) and evaluate one ablation variant over all seeds."""
    flags = ModuleFlags.from_variant(variant)
    if flags.use_dl and dl is None:
        raise TrainingError(f"variant {variant} needs the diffusion checkpoint")
    reports = []
    for s in config.seeds:
        pam, _, _ = meta_train(config, manifest, il, dl, flags=flags, seed=s)
        rep = evaluate(config, manifest, il, dl, pam, flags=flags, seeds=[s],
                       variant=variant)
        if store:
            write_report(rep, config.out_dir, f"variant_{variant}_seed{s}")
        reports.append(rep)
    return AblationResult(variant=variant,
                          reports=reports,
                          seed_mean_iou=float(np.mean([r.mean_iou for r in reports])))


def ablate(variant: str, config: RunConfig, manifest: SceneManifest | None = None,
           il: ILParams | None = None, dl: DLParams | None = None) -> AblationResult:
    """Ablation entry point: variant in A..F, trained and evaluated per seed."""
    if manifest is None:
        manifest = SceneManifest.load(config.data)
    if il is None:
        il, dl = _load_learners(config)
    return run_variant(variant, config, manifest, il, dl)


def pam_variant_sweep(config: RunConfig, manifest: SceneManifest | None = None,
                      il: ILParams | None = None, dl: DLParams | None = None,
                      store: bool = True) -> dict:
    """Structure of the push-pull and iteration-count tables: 3 + 3 reports."""
    if manifest is None:
        manifest = SceneManifest.load(config.data)
    if il is None:
        il, dl = _load_learners(config)
    results = {}
    for variant_name in ("push_only", "pull_only", "pushpull"):
        cfg = _with_pam(config, variant=variant_name)
        results[f"structure/{variant_name}"] = _sweep_cell(cfg, manifest, il, dl,
                                                           store)
    for m in (1, 2, 3):
        cfg = _with_pam(config, iterations=m)
        results[f"iterations/M{m}"] = _sweep_cell(cfg, manifest, il, dl, store)
    return results


def _with_pam(config: RunConfig, **overrides) -> RunConfig:
    doc = config.to_dict()
    doc["pam"] = {**doc["pam"], **overrides}
    return RunConfig.from_dict(doc)


def _sweep_cell(cfg: RunConfig, manifest, il, dl, store: bool) -> AblationResult:
    res = run_variant("F", cfg, manifest, il, dl, store=False)
    res = AblationResult(variant=f"{cfg.pam.variant}/M{cfg.pam.iterations}",
                         reports=res.reports, seed_mean_iou=res.seed_mean_iou)
    if store:
        for rep, s in zip(res.reports, cfg.seeds):
            write_report(rep, cfg.out_dir,
                         f"pam_{cfg.pam.variant}_M{cfg.pam.iterations}_seed{s}")
    return res


def nway_sweep(config: RunConfig, n_values=(2, 3, 4, 5, 6), k_values=(1, 5),
               manifest: SceneManifest | None = None, il: ILParams | None = None,
               dl: DLParams | None = None, store: bool = True) -> list:
    """Evaluate trained parameters across the (N, K) grid.

    Alignment parameters are channel maps independent of the class count, so
    one training per seed (at the config's own N/K) serves every grid cell.
    Emits one report per cell plus a CSV table and a PNG chart.
    """
    if manifest is None:
        manifest = SceneManifest.load(config.data)
    if il is None:
        il, dl = _load_learners(config)
    test_classes = manifest.class_split(config.split).test_classes
    if max(n_values) > len(test_classes):
        raise InvalidSpecError(f"N={max(n_values)} exceeds the {len(test_classes)} "
                               f"test classes of split {config.split}")
    flags = ModuleFlags.from_variant("F")
    trained = {s: meta_train(config, manifest, il, dl, flags=flags, seed=s)[0]
               for s in config.seeds}
    reports = []
    for n in n_values:
        for k in k_values:
            doc = config.to_dict()
            doc["n_way"], doc["k_shot"] = int(n), int(k)
            cfg = RunConfig.from_dict(doc)
            for s in config.seeds:
                rep = evaluate(cfg, manifest, il, dl, trained[s], flags=flags,
                               seeds=[s], variant="F")
                if store:
                    write_report(rep, cfg.out_dir, f"nway_N{n}_K{k}_seed{s}")
                reports.append(rep)
    if store:
        _emit_nway_artifacts(reports, Path(config.out_dir))
    return reports


def _emit_nway_artifacts(reports, out: Path):
    import csv

    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for r in reports:
        rows.setdefault((r.n_way, r.k_shot), []).append(r.mean_iou)
    with open(out / "nway_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_way", "k_shot", "mean_iou", "n_seeds"])
        for (n, k), vals in sorted(rows.items()):
            w.writerow([n, k, f"{np.mean(vals):.6f}", len(vals)])
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.2))
        for k in sorted({kk for _, kk in rows}):
            ns = sorted({nn for nn, kk in rows if kk == k})
            ax.plot(ns, [np.mean(rows[(n, k)]) * 100 for n in ns], marker="o",
                    label=f"{k}-shot")
        ax.set_xlabel("N-way")
        ax.set_ylabel("mean IoU (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "nway_sweep.png", dpi=120)
        plt.close(fig)
    except Exception:  # plotting must never fail the sweep
        pass


# ---------------------------------------------------------------------------
# numerical verification
# ---------------------------------------------------------------------------

def grad_check(loss_closure, params: dict, eps: float = 1e-6):
    """Central finite differences vs backward() over every scalar parameter.

    Returns (max_relative_error, offending_parameter_name). The relative
    error denominator is max(|analytic|, |numeric|, 1e-3) so exact zeros do
    not blow up the ratio.
    """
    for p in params.values():
        p.grad = None
    loss = loss_closure()
    if not np.isfinite(loss.item()):
        raise TrainingError("non-finite loss in grad_check closure")
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}
    worst, worst_name = 0.0, ""
    for name, p in params.items():
        for i in range(p.data.size):
            orig = p.data.flat[i]
            p.data.flat[i] = orig + eps
            up = loss_closure().item()
            p.data.flat[i] = orig - eps
            dn = loss_closure().item()
            p.data.flat[i] = orig
            num = (up - dn) / (2 * eps)
            ana = analytic[name].flat[i]
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-3)
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    return worst, worst_name
