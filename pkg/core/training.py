"""
core/training.py — The `train` engine.

One call trains one scheme (baseline, +IP, +SAM or +IP+SAM) and yields three
evaluable weight sets: the live parameters (final.ckpt), the EMA accumulator
(ema.ckpt) and the SWA mean (swa.ckpt).  Every random draw of step s comes
from `Rng(seed).child("step", s, …)`, so resuming from the snapshot of step k
and training to N reproduces an uninterrupted run bitwise.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from tqdm import tqdm

from config import settings
from core.diffusion import draw_noise, noise_regression_loss, schedule_from_config
from core.errors import ConfigurationError, NumericFailureError
from core.evaluation import dataset_for, evaluation_loss, fixed_evaluation_draw
from core.flatness import diffusion_objective, lpf
from core.networks import EpsModel
from core.numerics import ParamVector, Rng
from core.optim import AveragerState, OptimizerState, ema_update, sam_step, swa_update
from models.run_config import LpfEvalConfig, RunConfig
from storage.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from storage.files import Provenance, RunLock, RunPaths, write_json

logger = logging.getLogger(__name__)

METRICS_HEADER = ["step", "loss", "lpf_spot", "wall_time"]


# ─── Metrics log ──────────────────────────────────────────────────────────────

class MetricsLog:
    """Append-only `step,loss,lpf_spot,wall_time` CSV, flushed after every row."""

    def __init__(self, path: Path, provenance: Provenance, keep_until: Optional[int] = None) -> None:
        self.path = Path(path)
        kept: list[list[str]] = []
        if keep_until is not None and self.path.exists():
            with self.path.open(newline="", encoding="utf-8") as fh:
                body = [line for line in fh.read().splitlines() if not line.startswith("#")]
            kept = [row for row in csv.reader(body[1:]) if row and int(row[0]) <= keep_until]
        self._fh = self.path.open("w", newline="", encoding="utf-8")
        self._fh.write(provenance.comment() + "\n")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(METRICS_HEADER)
        self._writer.writerows(kept)
        self._fh.flush()
        self.last_step = int(kept[-1][0]) if kept else -1

    def append(self, step: int, loss: float, lpf_spot: Optional[float], wall_time: float) -> None:
        if step <= self.last_step:
            raise ConfigurationError(f"Metrics log steps must increase: {step} after {self.last_step}.")
        self._writer.writerow([step, repr(loss), "" if lpf_spot is None else repr(lpf_spot), f"{wall_time:.3f}"])
        self._fh.flush()
        self.last_step = step

    def close(self) -> None:
        self._fh.close()


# ─── Training ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TrainSummary:
    run_dir: Path
    steps: int
    final_loss: float
    ema_loss: float
    swa_loss: float
    swa_models: int
    sam_skips: int


def _checkpoint(cfg: RunConfig, model: EpsModel, step: int, params: ParamVector, weights: str,
                averagers: Optional[AveragerState] = None, state: Optional[OptimizerState] = None) -> Checkpoint:
    extras = {"weights": weights, "scheme": cfg.optim.scheme}
    if state is not None:
        extras["sam_skips"] = state.sam_skips
    return Checkpoint(
        architecture=model.spec.model_dump(mode="json"),
        schedule=cfg.schedule.model_dump(mode="json"),
        step=step,
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
        params=params.to(params.dtype),
        config=cfg.model_dump(mode="json"),
        averagers=averagers,
        adam=state.adam_moments() if state is not None else None,
        extras=extras,
    )


def train_run(cfg: RunConfig, out: Path, resume: Optional[Path] = None) -> TrainSummary:
    """
    Train `cfg` into run directory `out`.  With `resume`, continue from that
    snapshot (its config hash must match `cfg`).  A numeric failure aborts the
    run; snapshots already written stay on disk.
    """
    paths = RunPaths(Path(out))
    paths.root.mkdir(parents=True, exist_ok=True)
    provenance = Provenance(cfg.config_hash(), cfg.seed)

    with RunLock(paths.lock):
        rng = Rng(cfg.seed)
        model = EpsModel.initialised(cfg.model, rng.child("init"))
        optim_cfg = cfg.effective_optim()
        sched = schedule_from_config(cfg.schedule)
        dataset = dataset_for(cfg)
        eval_draw = fixed_evaluation_draw(cfg, sched, dataset)
        spot_cfg = LpfEvalConfig(sigma_rel=cfg.eval.lpf.sigma_rel, sigma=cfg.eval.lpf.sigma,
                                 samples=cfg.train.lpf_spot_samples)

        params = model.params()
        state = OptimizerState(optim_cfg, params)
        averagers = AveragerState.start(params)
        start = 0
        if resume is not None:
            ckpt = load_checkpoint(resume)
            if ckpt.config_hash != provenance.config_hash:
                raise ConfigurationError(
                    f"Checkpoint {resume} was written by config {ckpt.config_hash}, not {provenance.config_hash}."
                )
            model.params().check_layout(ckpt.params)
            params, start = ckpt.params, ckpt.step
            averagers = ckpt.averagers or AveragerState.start(params)
            if ckpt.adam is not None:
                state.load_adam_moments(ckpt.adam["step"], ckpt.adam["exp_avg"], ckpt.adam["exp_avg_sq"])
            state.sam_skips = int(ckpt.extras.get("sam_skips", 0))
            if not paths.config.exists():
                write_json(paths.config, cfg.model_dump(mode="json"), provenance)
            logger.info("Resuming %s from step %d", paths.root, start)
        else:
            write_json(paths.config, cfg.model_dump(mode="json"), provenance)
            save_checkpoint(paths.snapshot(0), _checkpoint(cfg, model, 0, params, "live", averagers, state))

        logger.info("Training %s [%s] for %d steps (seed %d, config %s)",
                    paths.root, optim_cfg.scheme, cfg.train.steps, cfg.seed, provenance.config_hash)
        log = MetricsLog(paths.metrics, provenance, keep_until=start if resume is not None else None)
        started = time.perf_counter()
        try:
            for step in tqdm(range(start + 1, cfg.train.steps + 1), desc="train",
                             disable=not settings.progress_bar):
                step_rng = rng.child("step", step)
                batch = dataset.sample(cfg.train.batch_size, step_rng.child("data"))
                draw = draw_noise(batch, sched, step_rng.child("noise"))

                def batch_loss(p: ParamVector, draw=draw):
                    return noise_regression_loss(model.bind(p), draw, sched, optim_cfg.ip.strength)

                params = sam_step(batch_loss, params, optim_cfg, state, step)
                averagers = swa_update(averagers, params, step, optim_cfg.swa)
                averagers = ema_update(averagers, params, optim_cfg.ema)

                spot_due = cfg.train.lpf_spot_every and step % cfg.train.lpf_spot_every == 0
                if step % cfg.train.log_every == 0 or spot_due:
                    spot = None
                    if spot_due:
                        objective = diffusion_objective(model, eval_draw, sched)
                        spot = lpf(objective, params, spot_cfg, rng.child("lpf-spot", step)).value
                    log.append(step, state.last_loss, spot, time.perf_counter() - started)
                if step % cfg.train.snapshot_every == 0:
                    save_checkpoint(paths.snapshot(step),
                                    _checkpoint(cfg, model, step, params, "live", averagers, state))
        except NumericFailureError:
            logger.critical("Run %s aborted by a numeric failure; last snapshot kept", paths.root)
            raise
        finally:
            log.close()

        final_step = max(start, cfg.train.steps)
        if averagers.n_models == 0:
            logger.warning("SWA absorbed no snapshots (start=%d); swa.ckpt holds the live weights",
                           optim_cfg.swa.start)
        swa_params = averagers.swa_params() if averagers.n_models else params
        ema_params = averagers.ema_params()

        save_checkpoint(paths.final, _checkpoint(cfg, model, final_step, params, "live", averagers, state))
        save_checkpoint(paths.ema, _checkpoint(cfg, model, final_step, ema_params, "ema"))
        save_checkpoint(paths.swa, _checkpoint(cfg, model, final_step, swa_params, "swa"))

        summary = TrainSummary(
            run_dir=paths.root,
            steps=final_step,
            final_loss=evaluation_loss(model, params, eval_draw, sched),
            ema_loss=evaluation_loss(model, ema_params, eval_draw, sched),
            swa_loss=evaluation_loss(model, swa_params, eval_draw, sched),
            swa_models=averagers.n_models,
            sam_skips=state.sam_skips,
        )
        if not math.isfinite(summary.final_loss):
            raise NumericFailureError(f"Final evaluation loss is not finite for {paths.root}.")
        write_json(paths.summary, {
            "steps": summary.steps,
            "scheme": optim_cfg.scheme,
            "final_loss": summary.final_loss,
            "ema_loss": summary.ema_loss,
            "swa_loss": summary.swa_loss,
            "swa_models": summary.swa_models,
            "sam_skips": summary.sam_skips,
            "wall_time": round(time.perf_counter() - started, 3),
        }, provenance)
        logger.info("Finished %s: eval loss %.6f (EMA %.6f, SWA %.6f)",
                    paths.root, summary.final_loss, summary.ema_loss, summary.swa_loss)
        return summary
