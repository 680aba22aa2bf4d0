"""Multi-stage self-teaching.

Stage 0 fits the human MOS labels ``r``. Stage ``s`` fits the blended target

    alpha_0 * r + sum_i alpha_{i+1} * prediction_i      (i = 0 .. s-1)

where ``prediction_i`` is stage ``i``'s eval-mode output on the training set
and the alphas are non-negative and sum to one. Every stage uses the same
architecture and starts from a fresh initialization.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dnsmos.errors import AlphaSumViolation, LengthMismatch, SpecShapeError
from dnsmos.nnet import TABLE1, Architecture, DnsmosModel, FitConfig, fit, init_model, predict_batch, save_model
from dnsmos.nnet import write_loss_history

log = logging.getLogger(__name__)

ALPHA_SUM_TOL = 1e-9
MAX_STAGE = 2


@dataclass(frozen=True)
class BlendSpec:
    """Weights (alpha_0 for human labels, then one per earlier stage)."""

    alphas: tuple
    allow_deep: bool = False

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        if not alphas:
            raise SpecShapeError("a blend needs at least one weight")
        if not self.allow_deep and len(alphas) - 1 > MAX_STAGE:
            raise SpecShapeError(f"stage {len(alphas) - 1} exceeds {MAX_STAGE}; pass allow_deep=True")
        if any(not math.isfinite(a) or a < 0 for a in alphas):
            raise AlphaSumViolation(f"weights must be finite and non-negative: {alphas}")
        total = math.fsum(alphas)
        if abs(total - 1.0) > ALPHA_SUM_TOL:
            raise AlphaSumViolation(f"weights sum to {total!r}, not 1")

    @property
    def stage(self) -> int:
        return len(self.alphas) - 1

    def __str__(self):
        return ",".join(repr(a) for a in self.alphas)


def parse_alphas(text: str, allow_deep: bool = False) -> list:
    """``"1.0;0.8,0.2"`` -> one BlendSpec per stage (';' between stages, ',' within)."""
    stages = [s.strip() for s in text.split(";") if s.strip()]
    if not stages:
        raise SpecShapeError("empty alpha string")
    try:
        return [BlendSpec(tuple(float(a) for a in s.split(",")), allow_deep=allow_deep) for s in stages]
    except ValueError as exc:
        raise SpecShapeError(f"cannot parse alpha string {text!r}: {exc}") from exc


def blend_targets(r, teacher_preds, spec: BlendSpec) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if len(teacher_preds) != len(spec.alphas) - 1:
        raise LengthMismatch(f"{len(teacher_preds)} teacher vectors for a {len(spec.alphas)}-weight blend")
    out = spec.alphas[0] * r
    for alpha, pred in zip(spec.alphas[1:], teacher_preds):
        pred = np.asarray(pred, dtype=np.float64)
        if pred.shape != r.shape:
            raise LengthMismatch(f"teacher vector of shape {pred.shape} vs labels {r.shape}")
        out = out + alpha * pred
    return out


@dataclass
class Stage:
    model: DnsmosModel
    spec: BlendSpec
    seed: int
    history: list
    teacher_hashes: tuple
    model_hash: str
    targets: np.ndarray = field(repr=False, default=None)


@dataclass
class StageEnsemble:
    stages: list
    labels: np.ndarray = field(repr=False, default=None)
    dataset_hash: str = ""

    @property
    def final(self) -> DnsmosModel:
        return self.stages[-1].model


def dataset_hash(x: np.ndarray, r: np.ndarray) -> str:
    h = hashlib.sha256(np.ascontiguousarray(x, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(r, dtype="<f8").tobytes())
    return h.hexdigest()


def train_pipeline(dataset, stage_specs, fit_config: FitConfig | None = None,
                   arch: Architecture = TABLE1, stage_seeds=None, progress=None) -> StageEnsemble:
    """Train M_0 .. M_s sequentially; ``dataset`` is ``(X, r)``.

    Each stage is initialized fresh from ``stage_seeds[k]`` (default: the
    fit seed for every stage, so stages differ only in their targets).
    """
    fit_config = fit_config or FitConfig()
    x, r = dataset
    r = np.asarray(r, dtype=np.float64)
    specs = [s if isinstance(s, BlendSpec) else BlendSpec(tuple(s)) for s in stage_specs]
    if not specs or specs[0].alphas != (1.0,):
        raise SpecShapeError("stage 0 must use the blend [1.0]")
    for k, spec in enumerate(specs):
        if spec.stage != k:
            raise SpecShapeError(f"stage {k} needs {k + 1} weights, got {len(spec.alphas)}")
    if stage_seeds is None:
        stage_seeds = [fit_config.seed] * len(specs)
    if len(stage_seeds) != len(specs):
        raise SpecShapeError("one seed per stage is required")

    ensemble = StageEnsemble([], r, dataset_hash(x, r))
    teacher_preds = []
    for k, spec in enumerate(specs):
        targets = r if k == 0 else blend_targets(r, teacher_preds, spec)
        seed = int(stage_seeds[k])
        model = init_model(arch, seed=seed)
        stage_progress = (lambda e, loss, k=k: progress(k, e, loss)) if progress else None
        model, history = fit(model, (x, targets), replace(fit_config, seed=seed), progress=stage_progress)
        log.info("stage %d (%s): %d epochs, final loss %.5f", k, spec, len(history),
                 history[-1] if history else float("nan"))
        ensemble.stages.append(Stage(
            model=model, spec=spec, seed=seed, history=history,
            teacher_hashes=tuple(s.model_hash for s in ensemble.stages),
            model_hash=model.content_hash(), targets=targets,
        ))
        if k + 1 < len(specs):
            teacher_preds.append(predict_batch(model, x))
    return ensemble


def save_ensemble(ensemble: StageEnsemble, out_dir, fit_config: FitConfig | None = None) -> Path:
    """One model file and loss history per stage plus ``pipeline.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = []
    for k, st in enumerate(ensemble.stages):
        model_file = f"stage{k}.model"
        save_model(st.model, out_dir / model_file)
        write_loss_history(st.history, out_dir / f"stage{k}.loss.csv")
        stages.append({
            "stage": k,
            "alphas": list(st.spec.alphas),
            "seed": st.seed,
            "epochs_run": len(st.history),
            "final_loss": st.history[-1] if st.history else None,
            "model_file": model_file,
            "model_hash": st.model_hash,
            "teacher_hashes": list(st.teacher_hashes),
            "arch_version": st.model.arch_version,
        })
    manifest = {"dataset_hash": ensemble.dataset_hash, "stages": stages}
    if fit_config is not None:
        cfg = vars(fit_config).copy()
        cfg.pop("seed", None)
        manifest["fit_config"] = cfg
    path = out_dir / "pipeline.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
