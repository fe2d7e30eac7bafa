"""Teacher-student self-training loop.

Every iteration runs, in order: EMA update of the teacher, supervised source
pass, teacher pseudo-labelling of the target crop (no gradients), cross-domain
class mixing, and masked target training. Losses of all stages are summed
into one optimizer step unless ``per_stage_steps`` is set.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import config as cfgmod
from .data import Dataset, SegSample, sample_training_pair
from .evaluation import ConfusionMatrix, EvalReport, accumulate, iou
from .losses import (ContrastiveConfig, LossReport, NumericError, combine, contrastive_loss,
                     cross_entropy, downsample_labels, pseudo_label)
from .masking import apply_mask, generate_patch_mask
from .mixing import apply_mix, build_mix_mask, dump_mix_strip, prior_guided_select, select_classes
from .model import (ModelBundle, ema_update, forward_features, load_checkpoint, project, save_checkpoint,
                    segment)
from .taxonomy import ClassTaxonomy

log = logging.getLogger(__name__)

STREAMS = ("data", "mix", "mask", "contrastive")
STAGES = ("ema", "source", "pseudo_label", "mix", "mask")


class UDAContractError(AssertionError):
    pass


def make_streams(seed: int) -> Dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def learning_rate(it: int, cfg: cfgmod.OptimConfig, max_iterations: int) -> float:
    """Linear warmup followed by polynomial decay to zero."""
    if cfg.warmup_iters and it < cfg.warmup_iters:
        k = it / cfg.warmup_iters
        return cfg.lr * (cfg.warmup_ratio + (1.0 - cfg.warmup_ratio) * k)
    if max_iterations <= 0:
        return cfg.lr
    frac = min(1.0, it / max_iterations)
    return cfg.lr * (1.0 - frac) ** cfg.poly_power


@dataclass
class TrainState:
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    config: cfgmod.TrainConfig
    taxonomy: ClassTaxonomy
    iteration: int = 0
    rng_streams: Dict[str, np.random.Generator] = field(default_factory=dict)
    stage_trace: List[str] = field(default_factory=list)
    teacher_grad_touches: int = 0

    @property
    def config_hash(self) -> str:
        return cfgmod.config_hash(self.config)

    @property
    def ema_alpha(self) -> float:
        return self.config.ema.alpha

    def rng_states(self) -> dict:
        return {k: g.bit_generator.state for k, g in self.rng_streams.items()}


def taxonomy_for(config: cfgmod.TrainConfig, taxonomy: ClassTaxonomy) -> ClassTaxonomy:
    if config.mix.active_groups is not None:
        return taxonomy.with_active_groups(config.mix.active_groups)
    return taxonomy


def init_state(config: cfgmod.TrainConfig, taxonomy: ClassTaxonomy) -> TrainState:
    config.validate()
    torch.use_deterministic_algorithms(True)
    bundle = ModelBundle.create(config.model.architecture, taxonomy.num_classes,
                                config.model.embed_dim, seed=config.seed)
    opt = torch.optim.AdamW(bundle.student.parameters(), lr=config.optim.lr,
                            betas=(config.optim.beta1, config.optim.beta2),
                            weight_decay=config.optim.weight_decay)
    return TrainState(bundle, opt, config, taxonomy_for(config, taxonomy),
                      rng_streams=make_streams(config.seed))


def _to_batch(images: List[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous().float()


def ema_alpha_at(it: int, cfg: cfgmod.EmaConfig) -> float:
    if cfg.ramp:
        return min(cfg.alpha, 1.0 - 1.0 / (it + 1))
    return cfg.alpha


def _contrastive_term(state: TrainState, em: torch.Tensor, labels: List[np.ndarray]):
    """Average of per-image contrastive losses; None when no image has a positive pair."""
    cc = state.config.contrastive
    ccfg = ContrastiveConfig(cc.temperature, cc.max_anchors_per_class, cc.max_pixels_total,
                             frozenset(cc.stages))
    terms = []
    for b, lbl in enumerate(labels):
        small = downsample_labels(lbl, tuple(em.shape[-2:]))
        loss, n_pos = contrastive_loss(em[b], small, ccfg, state.rng_streams["contrastive"],
                                       state.taxonomy.ignore_id, return_valid=True)
        if n_pos:
            terms.append(loss)
    if not terms:
        return None
    return torch.stack(terms).mean()


def _pixel_weights(state: TrainState, confidences: List[float], source_masks=None) -> np.ndarray:
    """Per-pixel loss weights for pseudo-labelled pixels.

    Pixels pasted from the source keep weight 1; pseudo-labelled pixels get
    the teacher's confidence when confidence weighting is on.
    """
    c = state.config.crop
    w = np.ones((len(confidences), c, c), dtype=np.float32)
    if state.config.pseudo.confidence_weighting:
        for b, q in enumerate(confidences):
            w[b] = q
            if source_masks is not None:
                w[b][source_masks[b].astype(bool)] = 1.0
    return w


class _Trace:
    def __init__(self, state):
        self.state = state

    def __call__(self, stage):
        self.state.stage_trace.append(stage)


def train_iteration(state: TrainState, batch: List[Tuple[SegSample, SegSample]],
                    dump_dir: Optional[Path] = None) -> LossReport:
    """Advance ``state`` by one iteration on a list of (source, target) pairs.

    Target labels are never consulted. Mutates ``state`` in place and returns
    the loss report of the iteration.
    """
    cfg = state.config
    bundle = state.bundle
    student, teacher = bundle.student, bundle.teacher
    tax = state.taxonomy
    ignore = tax.ignore_id
    mark = _Trace(state)
    it = state.iteration
    lr = learning_rate(it, cfg.optim, cfg.max_iterations)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    adapting = cfg.adapt and it >= cfg.adapt_start
    contrast_on = cfg.contrastive.enabled and cfg.model.embed_dim > 0
    stages = set(cfg.contrastive.stages) if contrast_on else set()

    for _, tgt in batch:
        if not (tgt.label == ignore).all():
            raise UDAContractError("target sample carries labels into training")

    student.train()
    mark("ema")
    if cfg.adapt:
        ema_update(teacher, student, ema_alpha_at(it, cfg.ema))

    x_s = [s.image for s, _ in batch]
    y_s = [s.label for s, _ in batch]
    x_t = [t.image for _, t in batch]
    crop_hw = y_s[0].shape

    # stage 1: source supervision
    mark("source")
    terms: Dict[str, torch.Tensor] = {}
    pix_terms: List[torch.Tensor] = []
    jobs = []  # (name, images, labels, weights, contrastive labels or None)
    jobs.append(("l_src", x_s, y_s, None, y_s if "source" in stages else None))

    confidence = float("nan")
    if adapting:
        # stage 2: pseudo-labels from the teacher, without gradient bookkeeping
        mark("pseudo_label")
        with torch.no_grad():
            t_logits = segment(teacher, forward_features(teacher, _to_batch(x_t)))
        assert not t_logits.requires_grad
        pls = [pseudo_label(t_logits[b:b + 1], cfg.pseudo.threshold) for b in range(len(batch))]
        y_t = [p.label for p in pls]
        confs = [p.confidence for p in pls]
        confidence = float(np.mean(confs))

        # stage 3: cross-domain mixing
        mark("mix")
        if cfg.mix.enabled:
            x_mix, y_mix, masks = [], [], []
            for b in range(len(batch)):
                if cfg.mix.prior_guided:
                    c = prior_guided_select(y_s[b], tax, cfg.mix.fraction, state.rng_streams["mix"])
                else:
                    c = select_classes(y_s[b], cfg.mix.fraction, state.rng_streams["mix"], ignore)
                m = build_mix_mask(y_s[b], c, ignore)
                xm, ym = apply_mix(x_s[b], y_s[b], x_t[b], y_t[b], m)
                x_mix.append(xm.astype(np.float32))
                y_mix.append(ym)
                masks.append(m.mask)
                if dump_dir is not None:
                    dump_mix_strip(Path(dump_dir) / f"mix_{it:06d}_{b}.png", x_s[b], x_t[b], xm, m)
            jobs.append(("l_mix", x_mix, y_mix, _pixel_weights(state, confs, masks),
                         y_mix if "mix" in stages else None))
        else:
            jobs.append(("l_mix", x_t, y_t, _pixel_weights(state, confs), None))

        # stage 4: masked target images supervised by the pseudo-labels
        mark("mask")
        # ratio 0 keeps every patch: the stage would duplicate the unmasked target loss
        if cfg.mask.enabled and cfg.mask.ratio > 0:
            x_ma = []
            for b in range(len(batch)):
                pm = generate_patch_mask(crop_hw[0], crop_hw[1], cfg.mask.patch_size,
                                         cfg.mask.ratio, state.rng_streams["mask"])
                x_ma.append(apply_mask(x_t[b], pm))
            jobs.append(("l_masked", x_ma, y_t, _pixel_weights(state, confs),
                         y_t if "masked" in stages else None))

    def combine_at(parts):
        try:
            return combine(parts, cfg.contrastive.lambda_pix)
        except NumericError as e:
            raise NumericError(f"iteration {it}: {e}") from None

    def run(job_list):
        """Forward the student on the stacked images of several jobs at once."""
        images = [im for j in job_list for im in j[1]]
        feats = forward_features(student, _to_batch(images))
        logits = segment(student, feats)
        em = project(student, feats) if any(j[4] is not None for j in job_list) else None
        out, pix = {}, []
        off = 0
        for name, ims, labels, weights, clabels in job_list:
            n = len(ims)
            sl = slice(off, off + n)
            off += n
            y = np.stack(labels)
            out[name] = cross_entropy(logits[sl], y, weights, ignore)
            if clabels is not None:
                t = _contrastive_term(state, em[sl], clabels)
                if t is not None:
                    pix.append(t)
        return out, pix

    if cfg.per_stage_steps:
        reports = []
        for job in jobs:
            out, pix = run([job])
            parts = dict(out)
            if pix:
                parts["l_pix"] = pix[0]
            rep = combine_at(parts)
            _step(state, rep, it)
            terms.update(out)
            pix_terms += pix
            reports.append(rep)
        vals = {k: v.detach() for k, v in terms.items()}
        if pix_terms:
            vals["l_pix"] = torch.stack([p.detach() for p in pix_terms]).mean()
        report = combine_at(vals)
    else:
        out, pix = run(jobs)
        parts = dict(out)
        if pix:
            parts["l_pix"] = torch.stack(pix).mean()
        report = combine_at(parts)
        _step(state, report, it)

    report.confidence = confidence
    report.lr = lr
    state.iteration += 1
    return report


def _step(state: TrainState, report: LossReport, it: int):
    opt = state.optimizer
    opt.zero_grad(set_to_none=True)
    if report.total_tensor is not None:
        if not torch.isfinite(report.total_tensor):
            raise NumericError(f"non-finite total loss at iteration {it}")
        report.total_tensor.backward()
        opt.step()
    state.teacher_grad_touches += state.bundle.teacher_grad_touches()
    report.total_tensor = None


# ---------------------------------------------------------------------------
# evaluation

@torch.no_grad()
def predict(model, image: np.ndarray) -> np.ndarray:
    model.eval()
    logits = segment(model, forward_features(model, _to_batch([image])))
    return logits[0].argmax(dim=0).numpy().astype(np.int64)


def evaluate_model(model, dataset: Dataset, limit: Optional[int] = None) -> EvalReport:
    """Full-resolution evaluation against the dataset's ground truth."""
    tax = dataset.taxonomy
    cm = ConfusionMatrix.empty(tax.num_classes)
    n = len(dataset) if limit is None else min(limit, len(dataset))
    was_training = model.training
    for i in range(n):
        s = dataset[i]
        cm = accumulate(cm, predict(model, s.image), s.label, tax.ignore_id)
    model.train(was_training)
    return iou(cm, n, list(tax.names))


# ---------------------------------------------------------------------------
# full runs

def _fmt_record(rec: dict) -> str:
    return json.dumps(rec, allow_nan=True)


def _state_checkpoint(state: TrainState, path: Path):
    save_checkpoint(path, state.bundle, state.optimizer.state_dict(), state.iteration,
                    state.rng_states(),
                    extra={"config": cfgmod.to_dict(state.config),
                           "config_hash": state.config_hash,
                           "teacher_grad_touches": state.teacher_grad_touches})


def restore_state(path, config: cfgmod.TrainConfig, taxonomy: ClassTaxonomy) -> TrainState:
    bundle, payload = load_checkpoint(path)
    state = init_state(config, taxonomy)
    state.bundle.student.load_state_dict(bundle.student.state_dict())
    state.bundle.teacher.load_state_dict(bundle.teacher.state_dict())
    if payload.get("optimizer"):
        state.optimizer.load_state_dict(payload["optimizer"])
    state.iteration = int(payload["iteration"])
    for name, st in payload.get("rng_states", {}).items():
        state.rng_streams[name].bit_generator.state = st
    state.teacher_grad_touches = int(payload.get("extra", {}).get("teacher_grad_touches", 0))
    return state


@dataclass
class RunResult:
    checkpoint: Path
    state: TrainState
    final_report: Optional[EvalReport]
    target_label_reads: int


def train(config: cfgmod.TrainConfig, source: Dataset, target: Dataset, run_dir,
          val: Optional[Dataset] = None, resume_from=None, dump_every: int = 0,
          progress: bool = False) -> RunResult:
    """Run ``config.max_iterations`` iterations and write logs and checkpoints.

    Writes ``metrics.log`` (one JSON record per iteration), ``eval.log``,
    ``ckpt/iter_XXXXXX.pt`` and ``ckpt/last.pt`` under ``run_dir``. ``val`` is
    a held-out labelled target split used only for evaluation.
    """
    if source.taxonomy.num_classes != target.taxonomy.num_classes:
        raise ValueError("source and target datasets use different taxonomies")
    if source.domain_tag != "source" or target.domain_tag != "target":
        raise ValueError("expected a source-tagged and a target-tagged dataset")
    if not source.has_labels:
        raise ValueError("source dataset has no labels")
    run_dir = Path(run_dir)
    (run_dir / "ckpt").mkdir(parents=True, exist_ok=True)
    taxonomy = source.taxonomy
    if resume_from is not None:
        state = restore_state(resume_from, config, taxonomy)
    else:
        state = init_state(config, taxonomy)
    reads_before = target.label_reads

    metrics_path = run_dir / "metrics.log"
    eval_path = run_dir / "eval.log"
    # metrics records carry the index of the iteration that produced them,
    # eval records the number of completed iterations
    for path, keep_upto in ((metrics_path, state.iteration - 1), (eval_path, state.iteration)):
        kept = []
        if resume_from is not None and path.exists():
            for line in path.read_text().splitlines():
                if json.loads(line)["iteration"] <= keep_upto:
                    kept.append(line + "\n")
        path.write_text("".join(kept))

    dump_dir = run_dir / "debug" if dump_every else None
    with open(metrics_path, "a") as mlog, open(eval_path, "a") as elog:
        while state.iteration < config.max_iterations:
            it = state.iteration
            batch = [sample_training_pair(source, target, config.crop, state.rng_streams["data"],
                                          config.flip_prob) for _ in range(config.batch_size)]
            dump = dump_dir if dump_every and it % dump_every == 0 else None
            report = train_iteration(state, batch, dump)
            if target.label_reads != reads_before:
                raise UDAContractError("target ground truth was read during training")
            rec = {"iteration": it, **report.as_dict(), "confidence": report.confidence,
                   "lr": report.lr}
            mlog.write(_fmt_record(rec) + "\n")
            if state.iteration % config.eval_interval == 0 and val is not None:
                ev = evaluate_model(state.bundle.student, val)
                elog.write(_fmt_record({"iteration": state.iteration, "miou": ev.miou}) + "\n")
                elog.flush()
                if progress:
                    log.info("iter %d  total %.4f  target mIoU %.2f", state.iteration,
                             report.total, 100 * ev.miou)
            if state.iteration % config.checkpoint_interval == 0:
                mlog.flush()
                _state_checkpoint(state, run_dir / "ckpt" / f"iter_{state.iteration:06d}.pt")

    final = run_dir / "ckpt" / "last.pt"
    _state_checkpoint(state, final)
    reads = target.label_reads - reads_before
    if reads:
        raise UDAContractError(f"target ground truth read {reads} times during training")
    if state.teacher_grad_touches:
        raise UDAContractError(f"teacher parameters received {state.teacher_grad_touches} gradients")
    report = evaluate_model(state.bundle.student, val) if val is not None else None
    return RunResult(final, state, report, reads)
