"""Loss assembly and the optimization loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from abrdf.dataset.scene import RayBatch, SceneDataset, sample_ray_batch
from abrdf.diffcore import tape as T
from abrdf.diffcore.checkpoint import save_checkpoint
from abrdf.diffcore.optim import OptimizerState, optimizer_step
from abrdf.diffcore.params import ParameterBlock
from abrdf.errors import NumericError
from abrdf.fields import ModelConfig
from abrdf.renderer import (RaySamples, RenderConfig, hierarchical_samples, render_pass,
                            stratified_samples, tonemap_apply)

log = logging.getLogger(__name__)

empty_foreground_count = 0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    iterations: int = 200_000
    lambda_sil: float = 0.1
    sil_warmup: int = 0   # steps over which the silhouette weight ramps linearly up to lambda_sil
    appearance_hold: float = 0.0   # leading fraction of the run in which BRDF and shadow outputs get no gradient
    seed: int = 0
    fg_fraction: float = 0.5
    lr: float = 5e-4
    lr_final: float | None = None   # exponential decay from lr to lr_final over the run; None keeps lr
    checkpoint_every: int = 0
    log_every: int = 1

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**{"batch_size": 256, "iterations": 5000, "lr": 2e-3, "lr_final": 1e-4,
                      "appearance_hold": 0.2, **kw})


def silhouette_weight(tcfg: TrainConfig, step: int) -> float:
    """Silhouette weight for the update that produces ``step + 1``."""
    if tcfg.sil_warmup <= 0:
        return tcfg.lambda_sil
    return tcfg.lambda_sil * min(1.0, (step + 1) / tcfg.sil_warmup)


def learning_rate(tcfg: TrainConfig, step: int) -> float:
    """Rate for the update that produces ``step + 1``."""
    if tcfg.lr_final is None or tcfg.iterations <= 1:
        return tcfg.lr
    return tcfg.lr * (tcfg.lr_final / tcfg.lr) ** (step / (tcfg.iterations - 1))


@dataclass
class LossTerms:
    total: T.Var
    appearance: T.Var
    silhouette: T.Var
    appearance_coarse: T.Var
    appearance_fine: T.Var
    samples: tuple[RaySamples, RaySamples]

    def metrics(self) -> dict:
        return {
            "L_app": float(self.appearance.value),
            "L_sil": float(self.silhouette.value),
            "total": float(self.total.value),
        }


def appearance_term(rgb_linear: T.Var, gt: np.ndarray, gamma: float = 2.2) -> T.Var:
    """Sum over rays of the squared LDR error ``|rgb^(1/gamma) - gt|^2``."""
    diff = tonemap_apply(rgb_linear, gamma) - gt
    return (diff * diff).sum()


def _density_noise(rcfg: RenderConfig, rng, samples: RaySamples):
    if not rcfg.density_noise or rng is None:
        return None
    return rng.normal(0.0, rcfg.density_noise, samples.t.shape)


def batch_loss(p, cfg: ModelConfig, batch: RayBatch, rcfg: RenderConfig, lambda_sil: float,
               rng=None, samples: tuple[RaySamples, RaySamples] | None = None,
               hold_appearance: bool = False) -> LossTerms:
    """Coarse and fine losses for one batch on the tape behind ``p``.

    Fine sample positions come from the coarse weights as constants. Pass
    ``samples`` to pin both sample sets (e.g. for finite-difference checks).
    """
    global empty_foreground_count
    tape = next(iter(p.values())).tape
    fg = np.asarray(batch.is_foreground, dtype=bool)
    bg = ~fg
    sampler = rng if rcfg.perturb else None
    if samples is None:
        coarse = stratified_samples(batch.t_near, batch.t_far, rcfg.n_coarse, sampler, rcfg.last_delta)
    else:
        coarse = samples[0]
    c_out = render_pass(p, cfg, "coarse", batch.origins, batch.directions, coarse,
                        batch.light_dir, shade_mask=fg, sigma_noise=_density_noise(rcfg, sampler, coarse),
                        hold_appearance=hold_appearance)
    if samples is None:
        if rcfg.n_fine > 0:
            fine = hierarchical_samples(c_out.weights.value, coarse.edges, rcfg.n_fine, sampler,
                                        coarse_t=coarse.t, t_far=batch.t_far, last_delta=rcfg.last_delta)
        else:
            fine = coarse
    else:
        fine = samples[1]
    f_out = render_pass(p, cfg, "fine", batch.origins, batch.directions, fine,
                        batch.light_dir, shade_mask=fg, sigma_noise=_density_noise(rcfg, sampler, fine),
                        hold_appearance=hold_appearance)

    zero = tape.constant(0.0)
    if fg.any():
        gt = batch.gt_rgb[fg]
        app_c = appearance_term(c_out.rgb, gt, rcfg.gamma)
        app_f = appearance_term(f_out.rgb, gt, rcfg.gamma)
        app = app_c + app_f
    else:
        empty_foreground_count += 1
        log.warning("batch without foreground rays; appearance loss is 0")
        app_c = app_f = app = zero
    if bg.any():
        sil = c_out.sigma[bg].sum() + f_out.sigma[bg].sum()
    else:
        sil = zero
    total = app + lambda_sil * sil if lambda_sil else app + 0.0 * sil
    return LossTerms(total, app, sil, app_c, app_f, (coarse, fine))


def _inference_terms(params, cfg, batch, rcfg, lambda_sil, rng=None, samples=None) -> LossTerms:
    tape = T.Tape(record=False)
    return batch_loss(tape.watch(params), cfg, batch, rcfg, lambda_sil, rng, samples)


def appearance_loss(batch: RayBatch, params: ParameterBlock, cfg: ModelConfig,
                    rcfg: RenderConfig = RenderConfig.desk(perturb=False), rng=None) -> float:
    return float(_inference_terms(params, cfg, batch, rcfg, 0.0, rng).appearance.value)


def silhouette_loss(batch: RayBatch, params: ParameterBlock, cfg: ModelConfig,
                    rcfg: RenderConfig = RenderConfig.desk(perturb=False), rng=None) -> float:
    return float(_inference_terms(params, cfg, batch, rcfg, 0.0, rng).silhouette.value)


def loss_and_grad(params: ParameterBlock, cfg: ModelConfig, batch: RayBatch, rcfg: RenderConfig,
                  lambda_sil: float, rng=None, samples=None,
                  hold_appearance: bool = False) -> tuple[LossTerms, np.ndarray]:
    tape = T.Tape()
    terms = batch_loss(tape.watch(params), cfg, batch, rcfg, lambda_sil, rng, samples, hold_appearance)
    return terms, tape.backward(terms.total)


def _dump_batch(batch: RayBatch, out_dir, step: int) -> Path:
    path = Path(out_dir or ".") / f"nonfinite_batch_step{step:06d}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(batch.to_dict()))
    return path


def train_step(dataset: SceneDataset, params: ParameterBlock, opt_state: OptimizerState,
               cfg: ModelConfig, rcfg: RenderConfig, tcfg: TrainConfig, rng: np.random.Generator,
               dump_dir=None, batch: RayBatch | None = None):
    """Sample a batch, backpropagate ``L_app + lambda_sil * L_sil``, take one optimizer step."""
    if batch is None:
        batch = sample_ray_batch(dataset, tcfg.batch_size, tcfg.fg_fraction, rng)
    lam = silhouette_weight(tcfg, opt_state.step_count)
    hold = opt_state.step_count < tcfg.appearance_hold * tcfg.iterations
    terms, grads = loss_and_grad(params, cfg, batch, rcfg, lam, rng, hold_appearance=hold)
    if not np.isfinite(terms.total.value) or not np.all(np.isfinite(grads)):
        path = _dump_batch(batch, dump_dir, opt_state.step_count)
        raise NumericError(f"non-finite loss or gradient at step {opt_state.step_count}; batch saved to {path}")
    opt_state = replace(opt_state, lr=learning_rate(tcfg, opt_state.step_count))
    new_params, new_state = optimizer_step(params, grads, opt_state)
    metrics = {"step": new_state.step_count, **terms.metrics(),
               "fg_rays": int(batch.is_foreground.sum()), "bg_rays": int((~batch.is_foreground).sum())}
    return new_params, new_state, metrics


def train(dataset: SceneDataset, cfg: ModelConfig, rcfg: RenderConfig, tcfg: TrainConfig,
          out_dir=None, params: ParameterBlock | None = None, opt_state: OptimizerState | None = None,
          progress=None):
    """Run ``tcfg.iterations`` steps.

    With ``out_dir`` set, writes ``metrics.jsonl`` (step, L_app, L_sil, total;
    deterministic for a fixed seed), ``timing.jsonl`` (step, wall_time) and
    ``checkpoint.abrdf``. Returns ``(params, opt_state, history)``.
    """
    rng = np.random.default_rng(tcfg.seed)
    if params is None:
        params = cfg.init_params(rng)
    if opt_state is None:
        opt_state = OptimizerState.create(len(params), lr=tcfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = timing_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
        timing_fh = open(out / "timing.jsonl", "w")
    extra = {"model": cfg.to_dict(), "render": asdict(rcfg), "train": asdict(tcfg)}
    history = []
    t0 = time.perf_counter()
    try:
        for _ in range(tcfg.iterations):
            params, opt_state, m = train_step(dataset, params, opt_state, cfg, rcfg, tcfg, rng, out)
            history.append(m)
            step = m["step"]
            if metrics_fh and (step % tcfg.log_every == 0 or step == tcfg.iterations):
                rec = {k: m[k] for k in ("step", "L_app", "L_sil", "total")}
                metrics_fh.write(json.dumps(rec) + "\n")
                timing_fh.write(json.dumps({"step": step, "wall_time": time.perf_counter() - t0}) + "\n")
            if out is not None and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint.abrdf", params, opt_state,
                                dataset.transform.to_dict(), extra)
            if progress is not None:
                progress(m)
    finally:
        if metrics_fh:
            metrics_fh.close()
            timing_fh.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.abrdf", params, opt_state, dataset.transform.to_dict(), extra)
    return params, opt_state, history
