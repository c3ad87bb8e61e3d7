"""End-to-end orchestration: data, Stage-I training, discriminator, refinement stages, simulation, evaluation.

Every phase reads and writes a run directory::

    config.json  checkpoints/  samples/  metrics/  logs/events.jsonl  data/

and is resumable: a finished phase is detected by its output files, and an
interrupted training phase restarts from its last checkpoint. All randomness
is drawn from generators keyed by (seed, purpose, index), so a resumed run is
bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Callable, get_args, get_origin, get_type_hints

import numpy as np

from . import discriminator as disc
from .denoiser import Denoiser, DenoiserConfig, encode_condition, predict_noise, widen_condition
from .diffusion import DiffusionBatch, check_weights, ddim_sample, make_schedule, stage1_loss, stage2_loss
from .geometry.camera import DepthMap
from .geometry.fusion import GridConfig, fuse_to_points
from .geometry.io import load_depth, save_depth, write_ply
from .geometry.metrics import cloud_metrics
from .geometry.patches import GENERATED, REAL, split_patches
from .numerics import GradTape, NonFiniteGradient, OptimizerState, Tensor, adamw_step, backward
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .scenegen import (R_MAX, Dataset, NoiseOracleParams, SceneConfig, SimulationSample, apply_oracle_noise,
                       load_dataset, make_dataset, normalize_depth, normalize_residual, rng_for,
                       save_dataset)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class StageOrderError(RuntimeError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 2000
    views_per_scene: int = 1
    resolution: int = 64
    focal: float = 64.0
    max_objects: int = 2
    view_tilt_deg: float = 12.0
    oracle: NoiseOracleParams = field(default_factory=NoiseOracleParams)

    def scene_config(self) -> SceneConfig:
        return SceneConfig(self.resolution, self.focal, self.max_objects, self.views_per_scene, self.view_tilt_deg)


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    lr: float = 3e-5
    weight_decay: float = 0.0
    ckpt_every: int = 1000
    regen_every: int = 0     # refinement stages: steps between regenerations of the previous stage's output
    ema_decay: float = 0.0   # 0 keeps the raw weights; otherwise the saved stage weights are this EMA
    lr_schedule: str = "constant"   # or "cosine": decays to zero at the last step

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1.0 + np.cos(np.pi * step / max(self.steps, 1)))
        return self.lr


@dataclass(frozen=True)
class SamplingConfig:
    ddim_steps: int = 50
    spacing: str = "logsnr"
    eta: float = 0.0
    batch_size: int = 32


@dataclass(frozen=True)
class EvalConfig:
    depth_buckets: int = 4
    split: str = "val"
    retrain_disc: bool = True
    shuffled_control: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    stage1: TrainConfig = field(default_factory=TrainConfig)
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(steps=10000))
    disc: disc.DiscriminatorConfig = field(default_factory=disc.DiscriminatorConfig)
    disc_epochs: int = 20
    omega: float = 0.5
    lam: float = 1.5
    stages: int = 2
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an explicit integer, got {self.seed!r}")
        try:
            check_weights(self.omega, self.lam)
        except ValueError:
            raise ConfigError(
                f"loss re-weighting constraint violated: lambda ({self.lam}) must be greater than "
                f"omega ({self.omega})") from None
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.denoiser.resolution != self.data.resolution:
            raise ConfigError(f"denoiser resolution {self.denoiser.resolution} != data resolution {self.data.resolution}")
        if self.denoiser.cond_channels != 1:
            raise ConfigError("the configured denoiser is the Stage-I net and takes one condition channel")
        if self.data.resolution % self.disc.patch_px:
            raise ConfigError(f"patch size {self.disc.patch_px} must divide resolution {self.data.resolution}")
        if self.sampling.spacing not in ("logsnr", "uniform"):
            raise ConfigError(f"unknown DDIM spacing {self.sampling.spacing!r}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_dict(cls, d, "")


def _from_dict(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(path + k for k in unknown))
    kw = {}
    for k, v in d.items():
        tp = hints[k]
        if is_dataclass(tp):
            kw[k] = _from_dict(tp, v, f"{path}{k}.")
        elif get_origin(tp) is tuple:
            kw[k] = tuple(v)
        elif tp is float and isinstance(v, int) and not isinstance(v, bool):
            kw[k] = float(v)
        else:
            if tp in (int, float, str, bool) and not isinstance(v, tp):
                raise ConfigError(f"{path}{k} must be {tp.__name__}, got {v!r}")
            kw[k] = v
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values parse as JSON, else as plain strings."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = val
    return d


def desk_config(seed: int = 0) -> RunConfig:
    """Reduced settings for a single CPU core: roughly 1.5 h for the full pipeline."""
    return RunConfig(
        seed=seed,
        data=DataConfig(n_scenes=100, views_per_scene=4, resolution=32, focal=32.0),
        denoiser=DenoiserConfig(resolution=32, widths=(16, 32, 64), blocks_per_level=1, time_dim=32),
        stage1=TrainConfig(steps=3000, batch_size=16, lr=1e-3, ckpt_every=250, lr_schedule="cosine"),
        stage2=TrainConfig(steps=1500, batch_size=16, lr=1e-3, ckpt_every=250, regen_every=500,
                           lr_schedule="cosine"),
        disc=disc.DiscriminatorConfig(patch_px=8, n_points=64, min_points=16, lr=1e-4),
        disc_epochs=100,
        grid=GridConfig(resolution=48),
        sampling=SamplingConfig(ddim_steps=200, eta=1.0),
    )


def smoke_config(seed: int = 0) -> RunConfig:
    """Tiny end-to-end configuration for tests and reproducibility checks."""
    return RunConfig(
        seed=seed,
        data=DataConfig(n_scenes=10, views_per_scene=2, resolution=16, focal=16.0),
        denoiser=DenoiserConfig(resolution=16, widths=(8, 16), blocks_per_level=1, time_dim=16, groups=4),
        stage1=TrainConfig(steps=6, batch_size=4, lr=1e-3, ckpt_every=3, ema_decay=0.9, lr_schedule="cosine"),
        stage2=TrainConfig(steps=4, batch_size=4, lr=1e-3, ckpt_every=2, regen_every=2),
        disc=disc.DiscriminatorConfig(widths=(16, 16), cad_width=16, head_width=16, patch_px=8,
                                      n_points=32, min_points=16, batch_size=16),
        disc_epochs=2,
        sampling=SamplingConfig(ddim_steps=4, batch_size=8),
        grid=GridConfig(resolution=24),
        eval=EvalConfig(depth_buckets=2),
    )


PRESETS = {"default": RunConfig, "desk": desk_config, "smoke": smoke_config}


# ---------------------------------------------------------------- run directory

class RunDir:
    def __init__(self, root, emit: Callable[[dict], None] | None = None):
        self.root = Path(root)
        self.emit = emit

    def make(self) -> "RunDir":
        for sub in ("checkpoints", "samples", "metrics", "logs"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    def ckpt(self, name: str) -> Path:
        return self.root / "checkpoints" / name

    def metric(self, name: str) -> Path:
        return self.root / "metrics" / name

    def event(self, kind: str, **payload) -> None:
        rec = {"event": kind, **payload}
        line = json.dumps(rec, sort_keys=True, default=float)
        logs = self.root / "logs"
        if logs.is_dir():
            with open(logs / "events.jsonl", "a") as fh:
                fh.write(line + "\n")
        if self.emit:
            self.emit(rec)

    def write_config(self, cfg: RunConfig) -> None:
        self.config_path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")

    def read_config(self) -> RunConfig:
        return RunConfig.from_dict(json.loads(self.config_path.read_text()))


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    _write_text_atomic(Path(path), buf.getvalue())


# ---------------------------------------------------------------- data

def dataset_for(cfg: RunConfig, run: RunDir | None = None) -> Dataset:
    """Generate the dataset, or load it from ``run/data`` when already present."""
    if run is not None and (run.root / "data" / "index.json").exists():
        return load_dataset(run.root / "data")
    ds = make_dataset(cfg.data.n_scenes, cfg.data.oracle, cfg.seed, cfg.data.scene_config())
    if run is not None:
        save_dataset(ds, run.root / "data")
        run.event("dataset", n_samples=len(ds.samples), **ds.audit)
    return ds


def stack_condition(samples: list[SimulationSample], extra: np.ndarray | None = None) -> np.ndarray:
    c = np.stack([normalize_depth(s.S.depth, s.S.mask)[None] for s in samples])
    return c if extra is None else np.concatenate([c, extra.astype(np.float32)], axis=1)


def stack_targets(samples: list[SimulationSample]) -> tuple[np.ndarray, np.ndarray]:
    x0 = np.stack([normalize_residual(s.residual)[None] for s in samples])
    valid = np.stack([s.mask[None] for s in samples])
    return x0, valid


# ---------------------------------------------------------------- training

def _opt_to_arrays(state: OptimizerState) -> dict[str, np.ndarray]:
    out = {f"m/{k}": v for k, v in state.m.items()}
    out.update({f"v/{k}": v for k, v in state.v.items()})
    out["meta/step"] = np.array([state.step], dtype=np.float32)
    return out


def save_training_state(path: Path, net: Denoiser, state: OptimizerState, curve: list[list[float]],
                        ema: dict[str, np.ndarray] | None = None) -> None:
    arrays = {f"w/{k}": v for k, v in net.state_dict().items()}
    arrays.update({f"e/{k}": v for k, v in (ema or {}).items()})
    arrays.update(_opt_to_arrays(state))
    arrays["meta/curve"] = np.asarray(curve, dtype=np.float32).reshape(-1, 4)
    save_checkpoint(path, arrays)


def load_training_state(path: Path, net: Denoiser, state: OptimizerState,
                        ema: dict[str, np.ndarray] | None = None) -> tuple[OptimizerState, list[list[float]]]:
    raw = load_checkpoint(path)
    if ema is not None:
        ema.update({k[2:]: v for k, v in raw.items() if k.startswith("e/")})
    net.load_state_dict({k[2:]: v for k, v in raw.items() if k.startswith("w/")})
    state.step = int(raw["meta/step"][0])
    state.m = {k[2:]: v.astype(np.float32) for k, v in raw.items() if k.startswith("m/")}
    state.v = {k[2:]: v.astype(np.float32) for k, v in raw.items() if k.startswith("v/")}
    curve = raw["meta/curve"].astype(np.float64).tolist()
    return state, curve


def load_denoiser(path: Path, cfg: RunConfig, cond_channels: int = 1) -> Denoiser:
    if not Path(path).exists():
        raise StageOrderError(f"missing checkpoint {path}; run the earlier stage first")
    net = Denoiser(replace_cond(cfg.denoiser, cond_channels), alpha_bar=schedule_for(cfg).alpha_bar)
    net.load_state_dict(load_checkpoint(path))
    return net


def train_denoiser(net: Denoiser, x0: np.ndarray, valid: np.ndarray,
                   epoch_data: Callable[[int], tuple[np.ndarray, np.ndarray | None]],
                   tc: TrainConfig, cfg: RunConfig, stream: int, tag: str, run: RunDir | None,
                   omega: float | None = None, lam: float | None = None) -> tuple[Denoiser, list[list[float]]]:
    """Generic noise-prediction training loop with checkpoint/resume.

    ``epoch_data(e)`` returns the condition array and the optional per-pixel
    weight mask for regeneration epoch ``e``. The loss curve rows are
    (step, loss, loss on lambda pixels, loss on omega pixels).
    """
    sched = schedule_for(cfg)
    state = OptimizerState(lr=tc.lr, weight_decay=tc.weight_decay)
    curve: list[list[float]] = []
    last = run.ckpt(f"{tag}_last.ckpt") if run else None
    ema = {k: v.copy() for k, v in net.state_dict().items()} if tc.ema_decay > 0 else None
    if last is not None and last.exists():
        state, curve = load_training_state(last, net, state, ema)
        run.event("resume", stage=tag, step=state.step)
    n = len(x0)
    period = tc.regen_every if tc.regen_every > 0 else max(tc.steps, 1)
    cached_epoch, cond, wmask = None, None, None
    t0 = time.time()
    while state.step < tc.steps:
        step = state.step
        epoch = step // period
        if epoch != cached_epoch:
            cond, wmask = epoch_data(epoch)
            cached_epoch = epoch
        rng = rng_for(cfg.seed, stream, step)
        state.lr = tc.lr_at(step)
        idx = rng.integers(0, n, tc.batch_size)
        t = rng.integers(0, sched.T, tc.batch_size)
        eps = rng.standard_normal(x0[idx].shape).astype(np.float32)
        w = None if wmask is None else wmask[idx]
        batch = DiffusionBatch(x0[idx], cond[idx], t, eps, valid[idx], w)
        seen = {}

        def fn(x_t, tt, c):
            out = net(x_t, tt, c)
            seen["pred"] = out.data
            return out

        try:
            with GradTape() as tape:
                loss = stage1_loss(batch, fn, sched) if w is None else stage2_loss(batch, fn, sched, omega, lam)
            if not np.isfinite(loss.item()):
                raise FloatingPointError("non-finite loss")
            params = dict(net.params)
            grads = backward(loss, tape, list(params.values()))
            new, state = adamw_step(params, {k: grads[v] for k, v in params.items()}, state)
        except (FloatingPointError, NonFiniteGradient) as e:
            where = str(last) if last is not None and last.exists() else "none"
            raise TrainingDiverged(f"{tag} diverged at step {step} ({e}); last good checkpoint: {where}") from e
        net.params = new
        if ema is not None:
            d = np.float32(min(tc.ema_decay, (1.0 + step) / (10.0 + step)))
            for k, p in new.items():
                ema[k] = d * ema[k] + (np.float32(1) - d) * p.data
        err = (seen["pred"].astype(np.float64) - eps) ** 2 * batch.valid
        if w is None:
            l_lam = l_om = float("nan")
        else:
            lm, om = w == lam, w == omega
            l_lam = float(err[lm].sum() / max(batch.valid[lm].sum(), 1)) if lm.any() else float("nan")
            l_om = float(err[om].sum() / max(batch.valid[om].sum(), 1)) if om.any() else float("nan")
        curve.append([float(step), loss.item(), l_lam, l_om])
        if run and (state.step % tc.ckpt_every == 0 or state.step == tc.steps):
            save_training_state(last, net, state, curve, ema)
            run.event("checkpoint", stage=tag, step=state.step, loss=float(np.mean([c[1] for c in curve[-50:]])),
                      elapsed=round(time.time() - t0, 1))
    if ema is not None:
        net.load_state_dict(ema)
    if run:
        save_checkpoint(run.ckpt(f"{tag}.ckpt"), net.state_dict())
        write_csv(run.metric(f"{tag}_loss.csv"), ["step", "loss", "loss_lambda", "loss_omega"],
                  [[int(c[0])] + [float(x) for x in c[1:]] for c in curve])
    return net, curve


def schedule_for(cfg: RunConfig):
    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end, s.kind)


def train_stage1(cfg: RunConfig, ds: Dataset, run: RunDir | None = None) -> Denoiser:
    """Stage I: residual target, synthetic-depth condition."""
    if run and run.ckpt("stage1.ckpt").exists():
        return load_denoiser(run.ckpt("stage1.ckpt"), cfg)
    train = ds.split("train")
    x0, valid = stack_targets(train)
    cond = stack_condition(train)
    net = Denoiser.create(cfg.denoiser, cfg.seed, alpha_bar=schedule_for(cfg).alpha_bar)
    net, _ = train_denoiser(net, x0, valid, lambda e: (cond, None), cfg.stage1, cfg, 101, "stage1", run)
    return net


# ---------------------------------------------------------------- simulation

def sample_residuals(net: Denoiser, cond: np.ndarray, keys: list[tuple[int, int]], cfg: RunConfig,
                     stream: int) -> np.ndarray:
    """Batched DDIM sampling of normalized residuals, clamped to [-1, 1].

    The starting noise of each map is keyed by its (scene, view) id, so with
    eta = 0 a map's sample does not depend on which batch it was drawn in.
    With eta > 0 the per-step noise is keyed by batch position instead.
    """
    sched = schedule_for(cfg)
    sc = cfg.sampling
    h, w = cond.shape[2:]
    out = np.zeros((len(cond), 1, h, w), dtype=np.float32)
    for i in range(0, len(cond), sc.batch_size):
        sl = slice(i, i + sc.batch_size)
        x_T = np.stack([rng_for(cfg.seed, stream, *k).standard_normal((1, h, w)) for k in keys[sl]]).astype(np.float32)
        feats = encode_condition(cond[sl], net.params, net.config)

        def eps_fn(x, t):
            return predict_noise(Tensor._wrap(np.asarray(x, np.float32)), t, feats, net.params, net.config,
                                 net.alpha_bar).data

        noise_rng = rng_for(cfg.seed, stream + 1, i) if sc.eta > 0 else None
        x = ddim_sample(eps_fn, x_T, sched, sc.ddim_steps, sc.spacing, sc.eta, noise_rng)
        out[sl] = np.clip(x, -1.0, 1.0)
    return out


def residual_to_depth(S: DepthMap, res_norm: np.ndarray) -> DepthMap:
    """D = S + r_max * residual on the valid pixels of S; invalid pixels stay invalid."""
    d = S.depth.astype(np.float64) + R_MAX * res_norm.reshape(S.depth.shape).astype(np.float64)
    return S.with_depth(np.where(S.mask, d, 0.0).astype(np.float32), S.mask.copy())


def simulate_stage1(samples: list[SimulationSample], net: Denoiser, cfg: RunConfig,
                    stream: int = 301) -> tuple[list[DepthMap], np.ndarray]:
    keys = [(s.scene_id, s.view_id) for s in samples]
    res = sample_residuals(net, stack_condition(samples), keys, cfg, stream)
    return [residual_to_depth(s.S, r) for s, r in zip(samples, res)], res


def simulate_chain(samples: list[SimulationSample], nets: list[Denoiser], cfg: RunConfig,
                   epoch: int | None = None) -> list[tuple[list[DepthMap], np.ndarray]]:
    """Run stages 1..len(nets); stage j is conditioned on S and stage j-1's residual."""
    keys = [(s.scene_id, s.view_id) for s in samples]
    out = []
    prev = None
    for j, net in enumerate(nets, start=1):
        stream = 300 + 10 * j if epoch is None else 1000 + 100 * epoch + 10 * j
        cond = stack_condition(samples, prev)
        res = sample_residuals(net, cond, keys, cfg, stream)
        out.append(([residual_to_depth(s.S, r) for s, r in zip(samples, res)], res))
        prev = res
    return out


def simulate_two_stage(samples, stage1: Denoiser, stage2: Denoiser, cfg: RunConfig):
    """Returns (D^II maps, D^I maps)."""
    (d1, _), (d2, _) = simulate_chain(samples, [stage1, stage2], cfg)
    return d2, d1


# ---------------------------------------------------------------- discriminator

def masked(d: DepthMap, mask: np.ndarray) -> DepthMap:
    return d.with_depth(d.depth, d.mask & mask)


def labelled_patches(samples: list[SimulationSample], generated: list[DepthMap], dc: disc.DiscriminatorConfig):
    """Real (R) and generated patches over identical windows, with S as the CAD map.

    All three maps share the joint validity mask, so holes carry no label
    information.
    """
    real, gen = [], []
    for s, g in zip(samples, generated):
        m = s.mask & g.mask
        cad = masked(s.S, m)
        real += split_patches(masked(s.R, m), cad, dc.patch_px, dc.min_points, REAL)
        gen += split_patches(masked(g, m), cad, dc.patch_px, dc.min_points, GENERATED)
    return real, gen


def train_disc(cfg: RunConfig, ds: Dataset, stage1: Denoiser, run: RunDir | None = None):
    if run and run.ckpt("disc.ckpt").exists():
        return disc.load_weights(run.ckpt("disc.ckpt"), cfg.disc)
    train = ds.split("train")
    d1, _ = simulate_stage1(train, stage1, cfg, stream=401)
    real, gen = labelled_patches(train, d1, cfg.disc)
    w, rep = disc.train_discriminator(real + gen, cfg.disc_epochs, cfg.seed, cfg.disc)
    if run:
        disc.save_weights(run.ckpt("disc.ckpt"), w)
        rep.write_csv(run.metric("disc_curve.csv"))
        run.event("discriminator", val_accuracy=rep.val_accuracy, n_train=rep.n_train, n_val=rep.n_val)
    if cfg.eval.shuffled_control:
        # same patches, same recipe, labels permuted: held-out accuracy must sit at chance
        labels = rng_for(cfg.seed, 61).permutation([p.label for p in real + gen])
        shuffled = [replace(p, label=int(l)) for p, l in zip(real + gen, labels)]
        _, ctrl = disc.train_discriminator(shuffled, cfg.disc_epochs, cfg.seed, cfg.disc)
        if run:
            ctrl.write_csv(run.metric("disc_control.csv"))
            run.event("discriminator_control", val_accuracy=ctrl.val_accuracy)
    return w


def weight_masks(samples, generated: list[DepthMap], w, cfg: RunConfig) -> np.ndarray:
    masks = []
    for s, g in zip(samples, generated):
        m = s.mask & g.mask
        masks.append(disc.build_weight_mask(masked(g, m), masked(s.S, m), w, cfg.disc, cfg.omega, cfg.lam)[None])
    return np.stack(masks)


# ---------------------------------------------------------------- refinement stages

def train_refinement(cfg: RunConfig, ds: Dataset, prev_nets: list[Denoiser], dw, run: RunDir | None = None,
                     stage: int = 2) -> Denoiser:
    """Stage j >= 2: condition (S, previous residual), loss weighted by the discriminator mask.

    The previous stage's outputs and the masks are regenerated every
    ``regen_every`` steps with epoch-derived seeds.
    """
    tag = f"stage{stage}"
    if run and run.ckpt(f"{tag}.ckpt").exists():
        return load_denoiser(run.ckpt(f"{tag}.ckpt"), cfg, 2)
    if dw is None or not prev_nets:
        raise StageOrderError(f"{tag} needs the earlier stages and a trained discriminator")
    train = ds.split("train")
    x0, valid = stack_targets(train)

    def epoch_data(e: int):
        chain = simulate_chain(train, prev_nets, cfg, epoch=e)
        maps, res = chain[-1]
        wm = weight_masks(train, maps, dw, cfg)
        if run:
            run.event("regenerate", stage=tag, epoch=e, lambda_fraction=float(np.mean(wm == cfg.lam)))
        return stack_condition(train, res), wm

    base = prev_nets[-1]
    cfg2 = replace_cond(cfg.denoiser, 2)
    params = base.params if base.config.cond_channels == 2 else widen_condition(base.params, base.config, 2)
    net = Denoiser(cfg2, {k: Tensor(v.data, requires_grad=True, name=k) for k, v in params.items()}, base.alpha_bar)
    net, _ = train_denoiser(net, x0, valid, epoch_data, cfg.stage2, cfg, 100 + stage, tag, run,
                            cfg.omega, cfg.lam)
    return net


def replace_cond(c: DenoiserConfig, channels: int) -> DenoiserConfig:
    d = asdict(c)
    d["cond_channels"] = channels
    return DenoiserConfig(**d)


def train_all_refinements(cfg, ds, stage1, dw, run=None) -> list[Denoiser]:
    nets = [stage1]
    for j in range(2, cfg.stages + 1):
        nets.append(train_refinement(cfg, ds, nets, dw, run, j))
    return nets


# ---------------------------------------------------------------- evaluation

METRIC_HEADER = ["sample_id", "chamfer_l2_x1000", "f_score", "voxel_iou"]


def group_by_scene(samples, maps) -> dict[int, list[DepthMap]]:
    out: dict[int, list[DepthMap]] = {}
    for s, m in zip(samples, maps):
        out.setdefault(s.scene_id, []).append(m)
    return out


def evaluate_simulation(sim: dict[int, list[DepthMap]], real: dict[int, list[DepthMap]],
                        grid: GridConfig) -> list[list]:
    """Per-scene fused-cloud metrics against the fused real cloud, plus a mean row."""
    if sorted(sim) != sorted(real) or any(len(sim[k]) != len(real[k]) for k in sim):
        raise ValueError("simulated and real map sets do not match scene for scene")
    rows = []
    for sid in sorted(sim):
        pr = fuse_to_points(real[sid], grid)
        ps = fuse_to_points(sim[sid], grid)
        if len(pr) == 0 or len(ps) == 0:
            rows.append([sid, float("nan"), float("nan"), float("nan")])
            continue
        m = cloud_metrics(ps, pr)
        rows.append([sid, m["chamfer_l2_x1000"], m["f_score"], m["voxel_iou"]])
    vals = np.array([r[1:] for r in rows], dtype=np.float64)
    rows.append(["mean"] + [float(v) for v in np.nanmean(vals, axis=0)])
    return rows


def read_metrics_csv(path) -> dict[str, dict[str, float]]:
    with open(path) as fh:
        return {r["sample_id"]: {k: float(v) for k, v in r.items() if k != "sample_id"} for r in csv.DictReader(fh)}


def depth_profile(samples, maps: list[DepthMap], buckets: int, params: NoiseOracleParams) -> list[dict]:
    """Residual mean and variance per depth bucket, model vs realized oracle vs analytic."""
    z_all = np.concatenate([s.S.depth[s.mask] for s in samples]).astype(np.float64)
    edges = np.quantile(z_all, np.linspace(0, 1, buckets + 1))
    edges[-1] += 1e-6
    rows = []
    for b in range(buckets):
        zm, om, zs = [], [], []
        for s, d in zip(samples, maps):
            sel = s.mask & (s.S.depth >= edges[b]) & (s.S.depth < edges[b + 1])
            zm.append(d.depth[sel].astype(np.float64) - s.S.depth[sel])
            om.append(s.residual[sel].astype(np.float64))
            zs.append(s.S.depth[sel].astype(np.float64))
        zm, om, zs = np.concatenate(zm), np.concatenate(om), np.concatenate(zs)
        vm, vo = float(zm.var()), float(om.var())
        se = float(np.sqrt(vm / max(len(zm), 1) + vo / max(len(om), 1)))
        rows.append({
            "bucket": b, "z_lo": float(edges[b]), "z_hi": float(edges[b + 1]), "n": int(len(zm)),
            "model_mean": float(zm.mean()), "oracle_mean": float(om.mean()), "mean_se": se,
            "model_var": vm, "oracle_var": vo, "analytic_var": float(np.mean(params.sigma(zs) ** 2)),
            "var_rel_err": abs(vm - vo) / vo if vo > 0 else float("inf"),
        })
    return rows


def residual_rms(samples, maps: list[DepthMap]) -> float:
    r = np.concatenate([(d.depth[s.S.mask].astype(np.float64) - s.S.depth[s.S.mask]) for s, d in zip(samples, maps)])
    return float(np.sqrt(np.mean(r ** 2)))


def generated_accuracy(samples, maps, w, dc) -> tuple[float, float, int]:
    """Fraction of generated patches the discriminator flags, and balanced accuracy with real patches."""
    real, gen = labelled_patches(samples, maps, dc)
    pg = disc.predict_proba(gen, w, dc)
    pr = disc.predict_proba(real, w, dc)
    acc_gen = float(np.mean(pg > dc.threshold)) if len(pg) else float("nan")
    acc_real = float(np.mean(pr <= dc.threshold)) if len(pr) else float("nan")
    return acc_gen, 0.5 * (acc_gen + acc_real), len(gen)


def patch_delta_audit(samples, d1: list[DepthMap], d2: list[DepthMap], w, dc) -> dict:
    """Mean |D^II - D^I| inside windows judged real-like vs judged generated (on D^I)."""
    like, gen = [], []
    for s, a, b in zip(samples, d1, d2):
        m = s.mask & a.mask
        probs = disc.patch_probabilities(masked(a, m), masked(s.S, m), w, dc)
        for (r, c), p in probs.items():
            win = (slice(r, r + dc.patch_px), slice(c, c + dc.patch_px))
            mm = m[win]
            delta = float(np.mean(np.abs(b.depth[win][mm].astype(np.float64) - a.depth[win][mm])))
            (gen if p > dc.threshold else like).append(delta)
    return {"delta_real_like": float(np.mean(like)) if like else float("nan"),
            "delta_generated": float(np.mean(gen)) if gen else float("nan"),
            "n_real_like": len(like), "n_generated": len(gen)}


def save_maps(run: RunDir, name: str, samples, maps: list[DepthMap]) -> None:
    root = run.root / "samples" / name
    root.mkdir(parents=True, exist_ok=True)
    for s, m in zip(samples, maps):
        save_depth(root / f"{s.scene_id:05d}_{s.view_id:02d}", m)


def load_maps(run: RunDir, name: str, samples) -> list[DepthMap]:
    root = run.root / "samples" / name
    if not root.is_dir():
        raise StageOrderError(f"no simulated maps under {root}; run simulate first")
    return [load_depth(root / f"{s.scene_id:05d}_{s.view_id:02d}")[0] for s in samples]


def fuse_run(run: RunDir, cfg: RunConfig, ds: Dataset, names: list[str]) -> None:
    samples = ds.split(cfg.eval.split)
    for name in names:
        maps = load_maps(run, name, samples)
        out = run.root / "samples" / "ply" / name
        out.mkdir(parents=True, exist_ok=True)
        for sid, group in group_by_scene(samples, maps).items():
            write_ply(out / f"{sid:05d}.ply", fuse_to_points(group, cfg.grid))


def simulate_run(run: RunDir, cfg: RunConfig, ds: Dataset, nets: list[Denoiser]) -> list[str]:
    """Simulate the evaluation split with every trained stage; also store S and R."""
    samples = ds.split(cfg.eval.split)
    names = ["S", "R"] + [f"D{j}" for j in range(1, len(nets) + 1)]
    if all((run.root / "samples" / n).is_dir() for n in names):
        return names
    chain = simulate_chain(samples, nets, cfg)
    save_maps(run, "S", samples, [s.S for s in samples])
    save_maps(run, "R", samples, [s.R for s in samples])
    for j, (maps, _) in enumerate(chain, start=1):
        save_maps(run, f"D{j}", samples, maps)
    run.event("simulate", n_maps=len(samples), stages=len(nets))
    return names


def eval_run(run: RunDir, cfg: RunConfig, ds: Dataset, dw=None) -> dict:
    """Metrics CSVs for every simulated map set vs R, and the summary diagnostics."""
    samples = ds.split(cfg.eval.split)
    names = [p.name for p in sorted((run.root / "samples").iterdir()) if p.is_dir() and p.name not in ("R", "ply")]
    real = group_by_scene(samples, load_maps(run, "R", samples))
    summary: dict = {"split": cfg.eval.split, "n_maps": len(samples), "metrics": {}}
    for name in names:
        maps = load_maps(run, name, samples)
        rows = evaluate_simulation(group_by_scene(samples, maps), real, cfg.grid)
        write_csv(run.metric(f"eval_{name}.csv"), METRIC_HEADER, rows)
        summary["metrics"][name] = dict(zip(METRIC_HEADER[1:], rows[-1][1:]))
    # an independent second capture of the same scenes: the floor two noisy captures can reach
    r2 = [apply_oracle_noise(s.S, ds.params, rng_for(cfg.seed, 9, s.scene_id, s.view_id)) for s in samples]
    rows = evaluate_simulation(group_by_scene(samples, r2), real, cfg.grid)
    write_csv(run.metric("eval_R2.csv"), METRIC_HEADER, rows)
    summary["metrics"]["R2"] = dict(zip(METRIC_HEADER[1:], rows[-1][1:]))

    d1 = load_maps(run, "D1", samples) if "D1" in names else None
    if d1 is not None:
        summary["stage1_residual_rms"] = residual_rms(samples, d1)
        summary["profile"] = depth_profile(samples, d1, cfg.eval.depth_buckets, ds.params)
    last = max((n for n in names if n.startswith("D")), default=None)
    if dw is not None and d1 is not None:
        acc = {}
        for name in sorted(n for n in names if n.startswith("D")):
            g, bal, n = generated_accuracy(samples, load_maps(run, name, samples), dw, cfg.disc)
            acc[name] = {"generated_accuracy": g, "balanced_accuracy": bal, "n_patches": n}
        summary["disc_frozen"] = acc
        if last and last != "D1":
            dl = load_maps(run, last, samples)
            summary["patch_delta"] = patch_delta_audit(samples, d1, dl, dw, cfg.disc)
            if cfg.eval.retrain_disc:
                real_p, gen_p = labelled_patches(samples, dl, cfg.disc)
                try:
                    _, rep = disc.train_discriminator(real_p + gen_p, cfg.disc_epochs, cfg.seed + 1, cfg.disc)
                    summary["disc_retrained_accuracy"] = rep.val_accuracy
                except ValueError as e:
                    summary["disc_retrained_accuracy"] = None
                    summary["disc_retrained_note"] = str(e)
    control = run.metric("disc_control.csv")
    if control.exists():
        summary["disc_shuffled_control_accuracy"] = float(control.read_text().splitlines()[-1].split(",")[2])
    _write_text_atomic(run.metric("summary.json"), json.dumps(summary, indent=1, sort_keys=True) + "\n")
    run.event("eval", **{k: v["chamfer_l2_x1000"] for k, v in summary["metrics"].items()})
    return summary


def run_pipeline(cfg: RunConfig, run: RunDir) -> dict:
    """All phases in order; finished phases are skipped on re-invocation."""
    run.make()
    if not run.config_path.exists():
        run.write_config(cfg)
    ds = dataset_for(cfg, run)
    stage1 = train_stage1(cfg, ds, run)
    dw = train_disc(cfg, ds, stage1, run) if cfg.stages >= 2 else None
    nets = train_all_refinements(cfg, ds, stage1, dw, run) if cfg.stages >= 2 else [stage1]
    simulate_run(run, cfg, ds, nets)
    return eval_run(run, cfg, ds, dw)
