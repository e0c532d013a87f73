"""
core/evaluation.py — Metric drivers behind `eval` and its single-metric
shortcuts (quantize-sweep, exposure, flatness, surface, attack).

Every metric reads the checkpoint, writes its CSV/JSON files under the output
directory and contributes summary rows (metric, respacing, bits, value,
delta_vs_fp32) to `eval_summary.json`, which `report` later merges.  All
randomness comes from the config's fixed evaluation seed, so two models
evaluated with the same config see the same data, noise and directions.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import torch
from tqdm import tqdm

from config import settings
from core.datasets import ToyDataset
from core.diffusion import (
    NoiseDraw,
    NoiseSchedule,
    RespacingMap,
    ddpm_sample,
    draw_noise,
    noise_regression_loss,
    schedule_from_config,
)
from core.errors import ConfigurationError, UsageError
from core.flatness import diffusion_objective, loss_surface_grid, lpf, perturbation_curve
from core.networks import EpsModel
from core.numerics import ParamVector, Rng
from core.optim import CheckpointSeries, posthoc_ema
from core.robustness import (
    distance,
    distance_stream,
    exposure_profile,
    latent_attack,
    latent_objective,
    robustness_sweep,
    sampler_stream,
)
from models.reports import AttackReport
from models.run_config import ModelConfig, RunConfig, parse_run_config
from storage.checkpoint import Checkpoint, load_checkpoint
from storage.files import Provenance, RunPaths, read_json, write_csv, write_json, write_samples_csv

logger = logging.getLogger(__name__)

WEIGHT_SUFFIX = {"live": "", "ema": "+EMA", "swa": "+SWA"}


def algorithm_label(scheme: str, weights: str) -> str:
    """Row label: baseline, +EMA, +SWA, +IP, +IP+EMA, … from scheme and weight kind."""
    suffix = WEIGHT_SUFFIX.get(weights, "")
    if scheme == "baseline":
        return suffix or "baseline"
    return scheme + suffix


def fixed_evaluation_draw(cfg: RunConfig, sched: NoiseSchedule, dataset: ToyDataset) -> NoiseDraw:
    """The evaluation batch shared by every model compared under this config."""
    rng = Rng(cfg.eval.seed)
    x0 = dataset.sample(cfg.eval.batch, rng.child("eval", "data"))
    return draw_noise(x0, sched, rng.child("eval", "noise"))


def evaluation_loss(model: EpsModel, params: ParamVector, draw: NoiseDraw, sched: NoiseSchedule) -> float:
    with torch.no_grad():
        return float(noise_regression_loss(model.bind(params), draw, sched))


def dataset_for(cfg: RunConfig) -> ToyDataset:
    return ToyDataset(cfg.data.kind, cfg.model.dim, cfg.data.scale)


# ─── Context ──────────────────────────────────────────────────────────────────

@dataclass
class EvalContext:
    cfg: RunConfig
    ckpt: Checkpoint
    ckpt_path: Path
    model: EpsModel
    sched: NoiseSchedule
    dataset: ToyDataset
    out: Path
    rows: list[dict[str, Any]] = field(default_factory=list)

    @property
    def params(self) -> ParamVector:
        return self.ckpt.params

    @property
    def provenance(self) -> Provenance:
        return Provenance(self.ckpt.config_hash, self.ckpt.seed)

    @property
    def weights(self) -> str:
        return str(self.ckpt.extras.get("weights", "live"))

    @property
    def algorithm(self) -> str:
        return algorithm_label(str(self.ckpt.extras.get("scheme", self.cfg.optim.scheme)), self.weights)

    @property
    def rng(self) -> Rng:
        return Rng(self.cfg.eval.seed)

    def respacings(self) -> list[RespacingMap]:
        return [RespacingMap.resolve(r, self.sched.T) for r in self.cfg.eval.respacings]

    def target(self) -> torch.Tensor:
        return self.dataset.sample(self.cfg.eval.samples, self.rng.child("eval", "target"))

    def objective(self):
        return diffusion_objective(self.model, fixed_evaluation_draw(self.cfg, self.sched, self.dataset), self.sched)

    def add_row(self, metric: str, value: Optional[float], respacing: str = "-", bits: int = 32,
                delta_vs_fp32: Optional[float] = None) -> None:
        self.rows.append({"metric": metric, "respacing": respacing, "bits": bits,
                          "value": value, "delta_vs_fp32": delta_vs_fp32})


def open_evaluation(ckpt_path: Path, out: Optional[Path] = None, eval_override: Optional[RunConfig] = None) -> EvalContext:
    """
    Load a checkpoint and the run config stored in it.  `eval_override`
    replaces only the `eval` section; training settings always come from the
    checkpoint.
    """
    ckpt_path = Path(ckpt_path)
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.config is None:
        raise ConfigurationError(f"{ckpt_path} carries no run config; cannot evaluate it.")
    cfg = parse_run_config(ckpt.config)
    if eval_override is not None:
        cfg = cfg.model_copy(update={"eval": eval_override.eval})

    model = EpsModel(ModelConfig.model_validate(ckpt.architecture))
    model.params().check_layout(ckpt.params)
    out = Path(out) if out is not None else ckpt_path.parent / "reports" / ckpt_path.stem
    return EvalContext(cfg=cfg, ckpt=ckpt, ckpt_path=ckpt_path, model=model,
                       sched=schedule_from_config(cfg.schedule), dataset=dataset_for(cfg), out=out)


# ─── Metrics ──────────────────────────────────────────────────────────────────

def _sample(ctx: EvalContext, params: ParamVector, respacing: RespacingMap, latents: Optional[torch.Tensor] = None):
    return ddpm_sample(ctx.model.bind(params), ctx.cfg.eval.samples, ctx.sched, respacing,
                       sampler_stream(ctx.rng, respacing.label), dim=ctx.cfg.model.dim, x_T=latents)


def metric_loss(ctx: EvalContext) -> None:
    value = evaluation_loss(ctx.model, ctx.params, fixed_evaluation_draw(ctx.cfg, ctx.sched, ctx.dataset), ctx.sched)
    write_json(ctx.out / "loss.json", {"loss": value, "step": ctx.ckpt.step}, ctx.provenance)
    ctx.add_row("loss", value)


def metric_samples(ctx: EvalContext) -> None:
    for respacing in ctx.respacings():
        write_samples_csv(ctx.out / f"samples_{respacing.label}.csv", _sample(ctx, ctx.params, respacing),
                          ctx.provenance)


def metric_distance(ctx: EvalContext) -> None:
    target = ctx.target()
    rows = []
    for respacing in ctx.respacings():
        samples = _sample(ctx, ctx.params, respacing)
        report = distance(samples, target, ctx.cfg.eval.distance, distance_stream(ctx.rng))
        rows.append([respacing.label, report.kind, report.value, report.n_a, report.n_b])
        ctx.add_row("distance", report.value, respacing.label)
    write_csv(ctx.out / "distance.csv", ["respacing", "kind", "value", "n_a", "n_b"], rows, ctx.provenance)


def metric_lpf(ctx: EvalContext) -> None:
    record = lpf(ctx.objective(), ctx.params, ctx.cfg.eval.lpf, ctx.rng.child("lpf"))
    write_json(ctx.out / "lpf.json", record, ctx.provenance)
    ctx.add_row("lpf", record.value)


def metric_curve(ctx: EvalContext) -> None:
    curve = perturbation_curve(ctx.objective(), ctx.params, ctx.cfg.eval.curve.radii, ctx.cfg.eval.curve.k,
                               ctx.rng.child("curve"))
    write_csv(ctx.out / "curve.csv", ["radius", "mean_loss", "std_loss", "k"],
              ([p.radius, p.mean_loss, p.std_loss, p.k] for p in curve), ctx.provenance)
    for point in curve:
        ctx.add_row(f"curve_r{point.radius:g}", point.mean_loss)


def metric_surface(ctx: EvalContext) -> None:
    cfg = ctx.cfg.eval.surface
    grid = loss_surface_grid(ctx.objective(), ctx.params, cfg.extent, cfg.resolution, ctx.rng.child("surface"))
    rows = (
        [i, j, u, v, grid.losses[i][j]]
        for i, u in enumerate(grid.coords)
        for j, v in enumerate(grid.coords)
    )
    write_csv(ctx.out / "surface.csv", ["i", "j", "u_coord", "v_coord", "loss"], rows, ctx.provenance)
    write_json(ctx.out / "surface.json",
               {"extent": grid.extent, "resolution": grid.resolution, "direction_seeds": grid.direction_seeds,
                "exclusions": grid.exclusions},
               ctx.provenance)


def metric_exposure(ctx: EvalContext) -> None:
    data = ctx.dataset.sample(ctx.cfg.eval.samples, ctx.rng.child("exposure", "data"))
    summary = {}
    for respacing in ctx.respacings():
        profile = exposure_profile(ctx.model.bind(ctx.params), data, ctx.sched, respacing, ctx.rng)
        write_csv(
            ctx.out / f"profile_{respacing.label}.csv",
            ["step_index", "timestep", "reference_sq_norm", "sampling_sq_norm"],
            zip(profile.step_index, profile.timestep, profile.reference_sq_norm, profile.sampling_sq_norm),
            ctx.provenance,
        )
        summary[respacing.label] = {"gap": profile.gap, "gap_stderr": profile.gap_stderr,
                                    "end_signed_gap": profile.end_signed_gap}
        ctx.add_row("eps_gap", profile.gap, respacing.label)
    write_json(ctx.out / "exposure.json", {"profiles": summary}, ctx.provenance)


def metric_quantize(ctx: EvalContext) -> None:
    rows = robustness_sweep(ctx.model, {ctx.algorithm: ctx.params}, ctx.cfg.eval.bits, ctx.cfg.eval.respacings,
                            ctx.sched, ctx.target(), ctx.cfg.eval.samples, ctx.cfg.eval.distance,
                            ctx.rng)
    write_csv(ctx.out / "sweep.csv", ["variant", "bits", "respacing", "metric", "value", "delta_vs_fp32"],
              ([r.variant, r.bits, r.respacing, r.metric, r.value, r.delta_vs_fp32] for r in rows),
              ctx.provenance)
    for r in rows:
        if r.status == "ok":
            ctx.add_row("quantized_distance", r.value, r.respacing, r.bits, r.delta_vs_fp32)


def metric_attack(ctx: EvalContext) -> None:
    cfg = ctx.cfg.eval.attack
    predictor = ctx.model.bind(ctx.params)
    latents = ctx.rng.child("attack", "latents").normal((ctx.cfg.eval.samples, ctx.cfg.model.dim))
    attacked = latent_attack(predictor, ctx.sched, latents, cfg.strength, cfg.steps, cfg.amplify)
    with torch.no_grad():
        loss_clean = float(latent_objective(predictor, latents, ctx.sched.T).mean())
        loss_attacked = float(latent_objective(predictor, attacked, ctx.sched.T).mean())
    target = ctx.target()
    reports = []
    for respacing in ctx.respacings():
        clean = distance(_sample(ctx, ctx.params, respacing, latents), target, ctx.cfg.eval.distance,
                         ctx.rng.child("distance")).value
        adv = distance(_sample(ctx, ctx.params, respacing, attacked), target, ctx.cfg.eval.distance,
                       ctx.rng.child("distance")).value
        reports.append(AttackReport(strength=cfg.strength, amplify=cfg.amplify, steps=cfg.steps,
                                    respacing=respacing.label, loss_clean=loss_clean, loss_attacked=loss_attacked,
                                    distance_clean=clean, distance_attacked=adv, degradation=adv - clean))
        ctx.add_row("attack_degradation", adv - clean, respacing.label)
    write_csv(ctx.out / "attack.csv",
              ["respacing", "strength", "amplify", "loss_clean", "loss_attacked",
               "distance_clean", "distance_attacked", "degradation"],
              ([r.respacing, r.strength, r.amplify, r.loss_clean, r.loss_attacked,
                r.distance_clean, r.distance_attacked, r.degradation] for r in reports),
              ctx.provenance)


def snapshot_series(run_dir: Path) -> CheckpointSeries:
    """Saved snapshots of a run; the step-0 initialisation is left out when later ones exist."""
    series = CheckpointSeries()
    files = RunPaths(run_dir).snapshot_files()
    for path in files:
        ckpt = load_checkpoint(path)
        if ckpt.step == 0 and len(files) > 1:
            continue
        series.append(ckpt.step, ckpt.params)
    return series


def metric_posthoc_ema(ctx: EvalContext) -> None:
    series = snapshot_series(ctx.ckpt_path.parent)
    if not len(series):
        raise ConfigurationError(f"No snapshots under {ctx.ckpt_path.parent}; post-hoc EMA needs a series.")
    target = ctx.target()
    rows = []
    for gamma in ctx.cfg.eval.posthoc_gammas:
        params = posthoc_ema(series, gamma).to(torch.float32)
        for respacing in ctx.respacings():
            value = distance(_sample(ctx, params, respacing), target, ctx.cfg.eval.distance,
                             ctx.rng.child("distance")).value
            rows.append([gamma, respacing.label, value, len(series)])
            ctx.add_row(f"posthoc_ema_g{gamma:g}", value, respacing.label)
    write_csv(ctx.out / "posthoc_ema.csv", ["gamma", "respacing", "value", "n_checkpoints"], rows, ctx.provenance)


METRICS: dict[str, Callable[[EvalContext], None]] = {
    "loss": metric_loss,
    "samples": metric_samples,
    "distance": metric_distance,
    "lpf": metric_lpf,
    "curve": metric_curve,
    "surface": metric_surface,
    "exposure": metric_exposure,
    "quantize": metric_quantize,
    "attack": metric_attack,
    "posthoc-ema": metric_posthoc_ema,
}


def parse_metrics(spec: str | Sequence[str]) -> list[str]:
    names = [m.strip() for m in spec.split(",")] if isinstance(spec, str) else list(spec)
    names = [m for m in names if m]
    unknown = [m for m in names if m not in METRICS]
    if unknown or not names:
        raise UsageError(f"Unknown metric(s) {unknown or names}; valid metrics: {', '.join(METRICS)}.")
    return names


def run_evaluation(ctx: EvalContext, metrics: Sequence[str]) -> Path:
    """Run the metrics in order and write eval_summary.json; returns the output directory."""
    names = parse_metrics(metrics)
    ctx.out.mkdir(parents=True, exist_ok=True)
    logger.info("Evaluating %s (%s, step %d) → %s", ctx.ckpt_path, ctx.algorithm, ctx.ckpt.step, ctx.out)
    for name in tqdm(names, desc="metrics", disable=not settings.progress_bar):
        logger.info("Metric %s", name)
        first = len(ctx.rows)
        METRICS[name](ctx)
        for row in ctx.rows[first:]:
            row["source"] = name

    # Rows of metrics not rerun survive from an earlier evaluation of the same checkpoint.
    summary_path = ctx.out / "eval_summary.json"
    kept_rows: list[dict[str, Any]] = []
    kept_metrics: list[str] = []
    if summary_path.exists():
        previous = read_json(summary_path)
        if (previous.get("config_hash"), previous.get("seed"), previous.get("step")) == (
            ctx.provenance.config_hash, ctx.provenance.seed, ctx.ckpt.step
        ):
            kept_rows = [r for r in previous.get("rows", []) if r.get("source") not in names]
            kept_metrics = [m for m in previous.get("metrics", []) if m not in names]
    write_json(summary_path,
               {"algorithm": ctx.algorithm, "weights": ctx.weights, "step": ctx.ckpt.step,
                "checkpoint": str(ctx.ckpt_path), "metrics": kept_metrics + names,
                "rows": kept_rows + ctx.rows},
               ctx.provenance)
    return ctx.out
