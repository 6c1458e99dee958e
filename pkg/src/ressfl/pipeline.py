"""Experiment pipelines behind the command line: pretrain, transfer, attack, compare-defenses, end-to-end."""
from __future__ import annotations

import logging
import traceback
import warnings
from pathlib import Path

import numpy as np

from .attack import AttackConfig, AttackReport, attack_schedule, evaluate_resistance, train_inversion_model
from .checkpoint import Checkpoint, atomic_write_bytes, load_checkpoint, save_checkpoint
from .config import DatasetSpec, ExperimentConfig, dump_config
from .data import Dataset, load_idx_dataset, synth_dataset, train_val_split
from .defense import (AttackerAwareHooks, AwareTrainConfig, DistCorrHooks, PerturbConfig, attacker_aware_pretrain,
                      make_perturbation, resistance_transfer)
from .models import BottleneckConfig, SplitModel, build_split_classifier, insert_bottleneck
from .report import RunRecord, RunReport, emit_report, epochs_csv, safe_name
from .sfl import NO_DEFENSE, DefenseHooks, RunHistory, SFLConfig, evaluate_accuracy, run_sfl

log = logging.getLogger(__name__)

# the baseline grid of the comparison sweep
DEFENSE_GRID = (
    ("laplacian", (0.05, 0.08, 0.10)),
    ("dropout", (0.15, 0.20, 0.25)),
    ("topk", (50.0, 60.0, 70.0)),
    ("advnoise", (0.05, 0.08, 0.10)),
    ("distcorr", (1.0, 1.5, 2.0)),
)
_SYMBOL = {"laplacian": "b", "dropout": "p", "topk": "k", "advnoise": "eps", "distcorr": "alpha"}
_NAME = {"laplacian": "Laplacian", "dropout": "Dropout", "topk": "TopkPrune", "advnoise": "AdvNoise",
         "distcorr": "DistCorr"}


def setting_label(method: str, value: float) -> str:
    return f"{_NAME[method]}({_SYMBOL[method]}={value:g})"


def load_dataset(spec: DatasetSpec, seed: int) -> tuple[Dataset, Dataset]:
    """(train, validation) split; validation doubles as the attacker's auxiliary set."""
    if spec.kind == "synthetic":
        ds = synth_dataset(spec.num_samples, spec.num_classes, tuple(spec.image_shape), seed + spec.seed_offset)
    else:
        ds = load_idx_dataset(spec.images, spec.labels)
        if spec.limit is not None:
            ds = ds.subset(np.arange(min(spec.limit, len(ds))))
    return train_val_split(ds, spec.val_fraction, seed + spec.seed_offset)


class _Run:
    """Shared state of one experiment: config, output directory, collected runs."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.report = RunReport()
        self.ckpt_dir = out_dir / "checkpoints"

    # -- helpers ---------------------------------------------------------

    def sfl_config(self, epochs: int | None = None) -> SFLConfig:
        s = self.cfg.sfl
        return SFLConfig(num_clients=s.num_clients, epochs=s.epochs if epochs is None else epochs,
                         batch_size=s.batch_size, client_lr=s.client_lr, server_lr=s.server_lr,
                         momentum=s.momentum, sampling_rate=s.sampling_rate, lr_decay=s.lr_decay,
                         clip_norm=s.clip_norm)

    def attack_config(self, epochs) -> AttackConfig:
        a = self.cfg.attack
        total = max(epochs) if epochs else 1
        bad = [e for e in epochs if not 1 <= e <= total]
        if bad:
            raise ValueError(f"attack epochs {bad} outside the run")
        return AttackConfig(tiers=tuple(a.tiers), attack_epochs=tuple(epochs), inversion_epochs=a.inversion_epochs,
                            batch_size=a.batch_size)

    def schedule(self, total: int) -> list[int]:
        epochs = self.cfg.attack_epochs(total)
        bad = [e for e in epochs if not 1 <= e <= total]
        if bad:
            raise ValueError(f"$.attack.epochs: {bad} outside [1, {total}]")
        return epochs

    def start(self, name: str) -> RunRecord:
        rec = RunRecord(name)
        self.report.runs.append(rec)
        return rec

    def progress(self, rec: RunRecord):
        def cb(res):
            rec.epochs.append(res)
            # partial results survive a crash
            atomic_write_bytes(self.out / "epochs.csv", epochs_csv(self.report.runs))
        return cb

    def save_snapshots(self, name: str, history: RunHistory, extra_meta: dict | None = None) -> None:
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        for t in sorted(history.snapshots):
            tensors = {f"client.{k}": v for k, v in history.snapshots[t].items()}
            tensors.update({f"server.{k}": v for k, v in history.server_snapshots[t].items()})
            meta = {"run": name, "epoch": t, **(extra_meta or {})}
            save_checkpoint(self.ckpt_dir / f"{safe_name(name)}-epoch{t}.rsfl", Checkpoint(tensors, meta))

    def attack(self, rec: RunRecord, history: RunHistory, client_template, train: Dataset, aux: Dataset,
               epochs) -> AttackReport:
        if not epochs:
            return rec.attack
        cfg = self.attack_config(epochs)
        rec.attack = attack_schedule(history, client_template, train.images, aux.images, cfg, self.cfg.seed,
                                     max_private=self.cfg.attack.max_private, threads=self.cfg.threads)
        return rec.attack

    def model_meta(self, model: SplitModel) -> dict:
        return {"arch": model.arch, "cut_layer": model.cut_layer,
                "bottleneck": str(model.bottleneck) if model.bottleneck else None}

    # -- stages ----------------------------------------------------------

    def plain_sfl(self, name: str, train: Dataset, val: Dataset, bottleneck: BottleneckConfig | None = None,
                  hooks: DefenseHooks = NO_DEFENSE, epochs=None):
        c = self.cfg
        model = build_split_classifier(c.model.arch, c.model.cut_layer, train.image_shape, train.num_classes, c.seed)
        if bottleneck is not None:
            model = insert_bottleneck(model, bottleneck, c.seed + 1)
        sfl = self.sfl_config()
        record = self.schedule(sfl.epochs) if epochs is None else epochs
        rec = self.start(name)
        history, clients, server = run_sfl(model, train, val, sfl, c.seed, hooks, record, c.threads,
                                           progress=self.progress(rec))
        self.save_snapshots(name, history, self.model_meta(model))
        return rec, history, model, clients, server

    def pretrain(self, train: Dataset, val: Dataset, name: str = "pretrain", attack: bool = True):
        c, p = self.cfg, self.cfg.pretrain
        bn = BottleneckConfig.parse(p.bottleneck) if p.bottleneck else None
        aware = AwareTrainConfig(lam=p.lam, sim_tier=p.sim_tier, update_freq=p.update_freq,
                                 client_lr=c.sfl.client_lr, other_lr=c.sfl.server_lr)
        rec = self.start(name)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore" if bn is None else "default")
            result = attacker_aware_pretrain(train, val, c.model.arch, c.model.cut_layer, bn, aware, p.epochs,
                                             c.sfl.batch_size, c.seed, c.threads, progress=self.progress(rec))
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.ckpt_dir / "pretrained.rsfl", result.checkpoint)
        if attack:
            # attack the final pretrained model at inference time
            row = evaluate_resistance(result.model.client, _private(train, c.attack.max_private), val.images,
                                      self.attack_config([p.epochs]), c.seed, p.epochs, threads=c.threads)
            rec.attack = AttackReport([row])
        return result

    def transfer(self, ckpt: Checkpoint, train: Dataset, val: Dataset, name: str | None = None):
        c, t = self.cfg, self.cfg.transfer
        name = name or t.strategy
        record = self.schedule(t.epochs)
        rec = self.start(name)
        history, clients, server, model = resistance_transfer(
            ckpt, train, val, t.strategy, c.sfl.num_clients, t.epochs, c.sfl.batch_size, c.seed, t.lam, record,
            c.threads, c.sfl.sampling_rate, progress=self.progress(rec))
        self.save_snapshots(name, history, self.model_meta(model))
        self.attack(rec, history, model.client, train, val, record)
        return rec

    def finish(self) -> RunReport:
        primary = self.report.primary
        if primary is not None and primary.attack.rows:
            row = max(primary.attack.rows, key=lambda r: r.epoch)
            self.report.truth, self.report.recon = row.images, row.best.recon
        self.report.extra.setdefault("meta", {})["summary"] = [
            dict(zip(("setting", "accuracy", "mse_l0", "mse_best", "verdict"), _jsonable(r)))
            for r in self.report.summary_rows()]
        emit_report(self.report, self.out)
        return self.report


def _jsonable(row):
    return [None if isinstance(v, float) and np.isnan(v) else v for v in row]


def _private(train: Dataset, limit: int | None) -> np.ndarray:
    return train.images if limit is None else train.images[:limit]


# -- modes -----------------------------------------------------------------

def _mode_pretrain(run: _Run) -> None:
    train, val = load_dataset(run.cfg.dataset, run.cfg.seed)
    run.pretrain(train, val)


def _mode_transfer(run: _Run) -> None:
    train, val = load_dataset(run.cfg.dataset, run.cfg.seed)
    run.transfer(load_checkpoint(run.cfg.transfer.checkpoint), train, val)


def _mode_attack(run: _Run) -> None:
    """Plain SFL (optionally with one baseline defense) attacked on its schedule."""
    c = run.cfg
    train, val = load_dataset(c.dataset, c.seed)
    method, value = c.defense.method, c.defense.value
    if method == "distcorr":
        rec, history, model, _, _ = run.plain_sfl(setting_label(method, value), train, val,
                                                  hooks=DistCorrHooks(value))
        run.attack(rec, history, model.client, train, val, run.schedule(c.sfl.epochs))
        return
    if method == "none":
        rec, history, model, _, _ = run.plain_sfl("undefended", train, val)
        run.attack(rec, history, model.client, train, val, run.schedule(c.sfl.epochs))
        return
    _perturbation_runs(run, train, val, [(method, value)])


def _perturbation_runs(run: _Run, train: Dataset, val: Dataset, settings, base=None) -> None:
    """Perturbation defenses applied to an already trained undefended model."""
    c = run.cfg
    if base is None:
        rec, history, model, _, server = run.plain_sfl("undefended", train, val, epochs=[c.sfl.epochs])
        run.report.runs.remove(rec)
    else:
        rec, history, model, server = base
    client = model.client
    client.load_state(history.snapshots[c.sfl.epochs])
    server_model = server.model
    surrogate = None
    private = _private(train, c.attack.max_private)
    acfg = run.attack_config([c.sfl.epochs])
    for method, value in settings:
        pcfg = PerturbConfig(method, value)
        if method == "advnoise" and surrogate is None:
            # the client's own L3 simulator of the attacker, trained on its private data
            surrogate = train_inversion_model(client, "L3", train.images, c.attack.surrogate_epochs,
                                              seed=c.seed + 7, cfg=acfg).net
        perturb = make_perturbation(pcfg, surrogate)
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 6]))
        acc = evaluate_accuracy(client, server_model, val, transform=lambda a, x: perturb(a, x, rng))
        prec = run.start(setting_label(method, value))
        prec.epochs = [type(rec.epochs[-1])(c.sfl.epochs, rec.epochs[-1].train_loss, acc, 0)]
        row = evaluate_resistance(client, private, val.images, acfg, c.seed, c.sfl.epochs, perturb=perturb,
                                  threads=c.threads)
        prec.attack = AttackReport([row])


def _ressfl_end_to_end(run: _Run, name: str = "ResSFL"):
    c = run.cfg
    src_train, src_val = load_dataset(c.source_dataset, c.seed)
    train, val = load_dataset(c.dataset, c.seed)
    pre = run.pretrain(src_train, src_val, name=f"{name}-pretrain", attack=False)
    run.report.runs = [r for r in run.report.runs if r.name != f"{name}-pretrain"]
    return run.transfer(pre.checkpoint, train, val, name=name)


def _mode_end_to_end(run: _Run) -> None:
    _ressfl_end_to_end(run)


def _mode_compare(run: _Run) -> None:
    c = run.cfg
    train, val = load_dataset(c.dataset, c.seed)
    final = [c.sfl.epochs]
    und, history, model, _, server = run.plain_sfl("undefended", train, val, epochs=final)
    run.attack(und, history, model.client, train, val, final)
    reference = [und]
    run.report.runs.remove(und)

    perturb_settings = [(m, v) for m, values in DEFENSE_GRID if m != "distcorr" for v in values]
    _perturbation_runs(run, train, val, perturb_settings, base=(und, history, model, server))
    for alpha in dict(DEFENSE_GRID)["distcorr"]:
        rec, h, m, _, _ = run.plain_sfl(setting_label("distcorr", alpha), train, val, hooks=DistCorrHooks(alpha),
                                        epochs=final)
        run.attack(rec, h, m.client, train, val, final)

    bn = BottleneckConfig.parse(c.pretrain.bottleneck or "C4-S1")
    rec, h, m, _, _ = run.plain_sfl(f"Bottleneck-only({bn})", train, val, bottleneck=bn, epochs=final)
    run.attack(rec, h, m.client, train, val, final)
    run.report.runs.remove(rec)
    reference.append(rec)

    saved_epochs = c.attack.epochs
    c.attack.epochs = [c.transfer.epochs]
    try:
        _ressfl_end_to_end(run, name=f"ResSFL(lambda={c.pretrain.lam:g} bottleneck={c.pretrain.bottleneck})")
    finally:
        c.attack.epochs = saved_epochs
    # reference rows stay out of the 16-row comparison table
    run.report.runs = reference + run.report.runs
    run.report.extra["tables"] = {"reference.csv": [r.summary() for r in reference]}
    run.report.extra["reference"] = [r.name for r in reference]


MODE_FUNCS = {
    "pretrain": _mode_pretrain,
    "transfer": _mode_transfer,
    "attack": _mode_attack,
    "compare-defenses": _mode_compare,
    "end-to-end": _mode_end_to_end,
}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunReport:
    """Run ``cfg.mode`` and write every report file into ``out_dir`` (default ``cfg.output_dir``).

    On failure the epochs seen so far stay in ``epochs.csv`` and the traceback
    goes to ``error.txt`` before the exception propagates.
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    err = out / "error.txt"
    if err.exists():
        err.unlink()
    atomic_write_bytes(out / "resolved_config.json", dump_config(cfg).encode("utf-8"))
    run = _Run(cfg, out)
    try:
        MODE_FUNCS[cfg.mode](run)
        return run.finish()
    except Exception:
        atomic_write_bytes(err, traceback.format_exc().encode("utf-8"))
        atomic_write_bytes(out / "epochs.csv", epochs_csv(run.report.runs))
        raise
