"""Executes parsed configurations: single runs, transfer runs and sweeps."""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import json
import logging
import math
import os
from pathlib import Path

import numpy as np

from . import data as D
from .config import DatasetSection, RunConfig, SweepConfig, effective_config, write_effective_config
from .model import count_forward_flops, count_params, init_model
from .scaling import (RunRecord, allocation_fit_json, compute_cost, fit_allocation, fit_power_law,
                      pareto_frontier, read_runs_csv, write_runs_csv)
from .report import scaling_plot_svg, write_svg
from .tensor import make_rng
from .train import (TrainConfig, append_metrics_csv, evaluate, fine_tune, linear_probe, load_checkpoint,
                    save_checkpoint, set_norm_stats, train)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MLPSCALE_OUTPUT_ROOT"


def resolve_output(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


@contextlib.contextmanager
def thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def load_datasets(section: DatasetSection) -> tuple[D.Dataset, D.Dataset]:
    if section.kind == "synth":
        tr_spec, te_spec = section.synth.specs()
        train_ds = D.synth_dataset(tr_spec, section.synth.seed, "train")
        test_ds = D.synth_dataset(te_spec, section.synth.seed + 1, "test")
    elif section.kind == "cifar10":
        train_ds, test_ds = D.load_cifar10_dir(section.path)
    else:
        train_ds, test_ds = D.load_mlds(section.path, "train"), D.load_mlds(section.test_path, "test")
    if section.resize:
        train_ds, test_ds = D.resize_dataset(train_ds, section.resize), D.resize_dataset(test_ds, section.resize)
    return train_ds, test_ds


def run_training(cfg: RunConfig) -> dict:
    """Scratch or pre-training run; writes metrics.csv, model.ckpt and the effective config."""
    out = resolve_output(cfg.output_dir)
    write_effective_config(cfg, out)
    train_ds, test_ds = load_datasets(cfg.dataset)
    mcfg = cfg.model.build(train_ds.image_shape, train_ds.num_classes)
    tcfg = cfg.train_config()
    model = init_model(mcfg, make_rng(cfg.seed))
    set_norm_stats(model, train_ds)
    metrics = out / "metrics.csv"
    metrics.unlink(missing_ok=True)

    def on_epoch(rec, m, opt):
        append_metrics_csv([rec], metrics)
        log.info("epoch %d loss %.4f train_err %.4f test_err %.4f", rec.epoch, rec.train_loss, rec.train_err,
                 rec.test_err)

    with thread_limit(cfg.threads):
        records, opt = train(model, train_ds, tcfg, test_ds, on_epoch=on_epoch)
    save_checkpoint(model, opt, out / "model.ckpt", epoch=tcfg.epochs)
    return {"test_err": records[-1].test_err, "output_dir": str(out)}


def run_transfer(cfg: RunConfig) -> dict:
    """Fine-tune or linearly probe a pretrained checkpoint on the configured dataset."""
    out = resolve_output(cfg.output_dir)
    write_effective_config(cfg, out)
    ckpt = load_checkpoint(cfg.pretrained)
    train_ds, test_ds = load_datasets(cfg.dataset)
    tcfg = cfg.train_config()
    with thread_limit(cfg.threads):
        if cfg.mode == "finetune":
            model, err = fine_tune(ckpt.model, train_ds, tcfg, test_ds)
            save_checkpoint(model, None, out / "model.ckpt", epoch=tcfg.epochs)
        else:
            head, err = linear_probe(ckpt.model, train_ds, tcfg, test_ds)
            np.savez(out / "probe_head.npz", **head)
    result = {"mode": cfg.mode, "test_err": err}
    (out / "result.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


# ---------------------------------------------------------------------------
# sweeps


def cell_id(cfg: SweepConfig, model_idx: int, fraction: float, epochs: int) -> str:
    eff = effective_config(cfg)
    for key in ("output_dir", "threads", "sweep", "epochs"):
        eff.pop(key, None)
    cell = {"base": eff, "model": cfg.sweep.models[model_idx].model_dump(), "fraction": fraction,
            "epochs": epochs, "probe": cfg.sweep.probe.model_dump(mode="json") if cfg.sweep.probe else None}
    blob = json.dumps(cell, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@contextlib.contextmanager
def _locked(path: Path):
    with open(path.with_suffix(".lock"), "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _done_ids(csv_path: Path) -> set[str]:
    if not csv_path.exists():
        return set()
    return {r.run_id for r in read_runs_csv(csv_path)}


def run_sweep(cfg: SweepConfig) -> int:
    """Train every (model, fraction) pair and log a RunRecord at each epoch budget.

    Cells already present in ``runs.csv`` are skipped; a partially finished
    pair resumes from the checkpoint of its largest completed budget.
    Returns a process exit status (1 if any cell failed).
    """
    out = resolve_output(cfg.output_dir)
    write_effective_config(cfg, out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    csv_path = out / "runs.csv"
    train_full, test_ds = load_datasets(cfg.dataset)
    probe = cfg.sweep.probe
    if probe is not None:
        probe_train, probe_test = load_datasets(probe.dataset or cfg.dataset)
        probe_cfg = TrainConfig.for_mode("probe", epochs=probe.epochs, lr=probe.lr, batch_size=probe.batch_size,
                                         seed=cfg.seed, auto_resize=cfg.auto_resize)
    budgets = cfg.sweep.epochs
    failures = 0
    with thread_limit(cfg.threads):
        for fi, fraction in enumerate(cfg.sweep.fractions):
            subset = D.class_proportional_subsample(train_full, fraction, make_rng(cfg.seed, 1, fi))
            for mi, msec in enumerate(cfg.sweep.models):
                ids = {t: cell_id(cfg, mi, fraction, t) for t in budgets}
                done = _done_ids(csv_path)
                todo = [t for t in budgets if ids[t] not in done]
                if not todo:
                    log.info("skip %s fraction %g: all cells done", msec, fraction)
                    continue
                try:
                    _run_pair(cfg, msec, subset, test_ds, budgets, ids, done, ckpt_dir, csv_path,
                              (probe_train, probe_test, probe_cfg) if probe is not None else None)
                except Exception:
                    failures += 1
                    log.exception("sweep cell group failed: model %d fraction %g", mi, fraction)
    return 1 if failures else 0


def _run_pair(cfg, msec, subset, test_ds, budgets, ids, done, ckpt_dir, csv_path, probe):
    mcfg = msec.build(subset.image_shape, subset.num_classes)
    flops = count_forward_flops(mcfg)
    n_params = count_params(mcfg)
    tcfg = cfg.train_config()
    tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "epochs": max(t for t in budgets if ids[t] not in done)})

    resume = [t for t in budgets if ids[t] in done and (ckpt_dir / f"{ids[t]}.ckpt").exists()]
    resume = [t for t in resume if t < tcfg.epochs]
    if resume:
        ck = load_checkpoint(ckpt_dir / f"{ids[max(resume)]}.ckpt")
        model, opt, start = ck.model, ck.optimizer, ck.epoch
        cum = compute_cost(flops, len(subset), start)
    else:
        model = init_model(mcfg, make_rng(cfg.seed))
        set_norm_stats(model, subset)
        opt, start, cum = None, 0, 0

    def on_epoch(rec, m, state):
        t = rec.epoch
        if t not in ids or ids[t] in done:
            return
        upstream = evaluate(m, test_ds)
        probe_err = math.nan
        if probe is not None:
            _, probe_err = linear_probe(m, probe[0], probe[2], probe[1])
        save_checkpoint(m, state, ckpt_dir / f"{ids[t]}.ckpt", epoch=t, extra={"run_id": ids[t]})
        run = RunRecord(run_id=ids[t], depth=mcfg.depth, width=mcfg.width, expansion=mcfg.expansion,
                        params=n_params, flops_fwd=flops, dataset_size=len(subset), epochs=t,
                        batch=min(tcfg.batch_size, len(subset)), compute_flops=compute_cost(flops, len(subset), t),
                        upstream_err=upstream, probe_err=probe_err)
        with _locked(csv_path):
            write_runs_csv([run], csv_path, append=True)
        log.info("cell %s %s N=%d T=%d upstream_err=%.4f probe_err=%.4f", ids[t], mcfg.notation,
                 len(subset), t, upstream, probe_err)

    train(model, subset, tcfg, opt_state=opt, start_epoch=start, cum_flops=cum, on_epoch=on_epoch)


# ---------------------------------------------------------------------------
# scaling analysis


def fit_scaling(runs_csv, error_field: str, out_dir, alloc_epochs: int | None = None) -> dict:
    """Frontier, power-law fit, allocation exponents, SVG chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = read_runs_csv(runs_csv)
    front = pareto_frontier(runs, error_field)
    if not front:
        raise ValueError(f"no runs carry a value for {error_field}")
    fit = fit_power_law([r.compute_flops for r in front], [r.error(error_field) for r in front])
    result = json.loads(fit.to_json())
    result["error_field"] = error_field
    result["frontier"] = [r.run_id for r in front]
    try:
        result["allocation"] = allocation_fit_json(*fit_allocation(front, error_field, alloc_epochs))
    except ValueError as exc:
        result["allocation"] = None
        log.warning("allocation fit skipped: %s", exc)
    (out / "fit.json").write_text(json.dumps(result, indent=2) + "\n")
    write_runs_csv(front, out / "frontier.csv")
    write_svg(scaling_plot_svg(runs, fit, error_field, title=f"{error_field} vs compute"), out / "scaling.svg")
    return result
