"""Stage functions behind the command line: one function per subcommand.

Every stage reads its prerequisites from the output directory, checks that
they were produced under the same configuration hash, and writes its own
artifact with that hash embedded.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config
from .errors import ArtifactError, CondLocError
from .evaluation import (
    EvalReport,
    PoseError,
    emit_report,
    evaluate_errors,
    pose_error,
    random_pose_accuracy,
    report_csv,
)
from .geometry import CameraPose
from .mining import build_training_tuples, read_tuples, write_tuples
from .model import ModelParams, NetworkConfig
from .retrieval import (
    DescriptorIndex,
    RetrievalConfig,
    WhitenTransform,
    build_index,
    learn_whitening,
    load_index,
    query_descriptors,
    query_topk,
    save_index,
)
from .synthworld import Dataset, generate_dataset, load_dataset, save_dataset
from .training import load_checkpoint, save_checkpoint, train, write_loss_history

log = logging.getLogger(__name__)

DATASET_DIR = "dataset"
TUPLES_FILE = "tuples.jsonl"
CHECKPOINT_FILE = "model.ckpt"
LOSS_FILE = "loss_history.csv"
INDEX_FILE = "index.cdsc"
PREDICTIONS_FILE = "predictions.csv"
REPORT_DIR = "report"
PREDICTION_COLUMNS = ["query_id", "tx", "ty", "tz", "qw", "qx", "qy", "qz", "top1_id", "top1_sim"]


def check_hash(found: str, expected: str, what, force: bool) -> None:
    if found == expected:
        return
    msg = f"{what} was produced with config hash {found or '<none>'}, current config is {expected}"
    if not force:
        raise ArtifactError(msg + " (rerun the stage or pass --force)")
    log.warning("%s; continuing because of --force", msg)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing {path}; run `{stage}` first")
    return path


def _hash_comment(text: str) -> str:
    first = text.split("\n", 1)[0]
    return first.split("=", 1)[1].strip() if first.startswith("# config_hash=") else ""


# in-process building blocks --------------------------------------------------


def make_dataset(cfg: RunConfig) -> Dataset:
    return generate_dataset(cfg.world, cfg.dataset, cfg.seed, cfg.condition_profiles)


def whitening_pairs(ds: Dataset, cfg: RunConfig) -> tuple[list[str], list[tuple[int, int]]]:
    """Image ids and (query, positive) index pairs mined over the full reference split."""
    refs = [r.image_id for r in ds.split("reference")]
    tuples = build_training_tuples(ds, cfg.mining, cfg.training.epochs, cfg.seed, None, refs)
    ids = sorted({i for t in tuples for i in (t.query, *t.positives)})
    pos = {i: k for k, i in enumerate(ids)}
    pairs = [(pos[t.query], pos[p]) for t in tuples for p in t.positives]
    return ids, pairs


def fit_whitening(ds: Dataset, params: ModelParams, net: NetworkConfig, cfg: RunConfig) -> WhitenTransform:
    ids, pairs = whitening_pairs(ds, cfg)
    ims = [ds.by_id[i] for i in ids]
    d = query_descriptors(params, net, np.stack([im.pixels for im in ims]), [im.condition for im in ims], cfg.retrieval)
    return learn_whitening(d.astype(np.float64), pairs, cfg.retrieval.whitening_eps)


def make_index(ds: Dataset, params: ModelParams, net: NetworkConfig, cfg: RunConfig, config_hash: str = "") -> DescriptorIndex:
    whitening = fit_whitening(ds, params, net, cfg) if cfg.retrieval.whitening else None
    return build_index(
        ds.split("reference"), params, net, cfg.retrieval, whitening, ds.reference_condition, config_hash
    )


@dataclass(frozen=True)
class Prediction:
    query_id: str
    pose: CameraPose
    top1_id: str
    top1_sim: float


def localize_queries(ds: Dataset, index: DescriptorIndex, params, net, options: RetrievalConfig) -> list[Prediction]:
    queries = ds.split("query")
    if not queries:
        raise ArtifactError("the dataset has no query images")
    d = query_descriptors(
        params, net, np.stack([q.pixels for q in queries]), [q.condition for q in queries], options, index.whitening
    )
    out = []
    for q, desc in zip(queries, d):
        top = query_topk(index, desc, 1)[0]
        out.append(Prediction(q.image_id, top.pose, top.image_id, top.similarity))
    return out


def errors_by_condition(ds: Dataset, predictions) -> dict[str, list[PoseError]]:
    groups: dict[str, list[PoseError]] = {}
    for p in predictions:
        if p.query_id not in ds.by_id:
            raise ArtifactError(f"prediction for unknown image {p.query_id!r}")
        q = ds.by_id[p.query_id]
        groups.setdefault(q.condition, []).append(pose_error(p.pose, q.pose))
    return groups


def random_baseline(ds: Dataset, bins) -> list[float]:
    return random_pose_accuracy([q.pose for q in ds.split("query")], [r.pose for r in ds.split("reference")], bins)


# prediction file -------------------------------------------------------------


def format_predictions(predictions, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_COLUMNS)
    for p in predictions:
        w.writerow([p.query_id, *(repr(float(x)) for x in p.pose.translation),
                    *(repr(float(x)) for x in p.pose.rotation), p.top1_id, repr(float(p.top1_sim))])
    return buf.getvalue()


def parse_predictions(text: str) -> tuple[str, list[Prediction]]:
    h = _hash_comment(text)
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or rows[0] != PREDICTION_COLUMNS:
        raise ArtifactError(f"predictions must have columns {','.join(PREDICTION_COLUMNS)}")
    out = []
    for n, r in enumerate(rows[1:], start=2):
        try:
            t = tuple(float(x) for x in r[1:4])
            q = np.array([float(x) for x in r[4:8]])
            out.append(Prediction(r[0], CameraPose(tuple(q / np.linalg.norm(q)), t), r[8], float(r[9])))
        except (ValueError, IndexError) as exc:
            raise ArtifactError(f"predictions row {n}: {exc}") from None
    return h, out


# stages ----------------------------------------------------------------------


def run_generate(cfg: RunConfig, out: Path, force: bool = False) -> Path:
    """Render the synthetic dataset and write it with its manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    ds = make_dataset(cfg)
    path = save_dataset(ds, out / DATASET_DIR, cfg.hash())
    log.info("dataset: %s", ds.counts())
    return path


def _load_dataset(cfg: RunConfig, out: Path, force: bool) -> Dataset:
    path = _require(out / DATASET_DIR / "manifest.json", "generate")
    ds = load_dataset(path.parent)
    check_hash(ds.config_hash, cfg.hash(), path, force)
    return ds


def run_mine(cfg: RunConfig, out: Path, force: bool = False) -> Path:
    """Dump the epoch-0 tuples (uniform negatives; hard mining needs a model)."""
    out = Path(out)
    ds = _load_dataset(cfg, out, force)
    tuples = build_training_tuples(ds, cfg.mining, 0, cfg.seed)
    header = {"config_hash": cfg.hash(), "epoch": 0, "seed": cfg.seed, "count": len(tuples)}
    return write_tuples(tuples, out / TUPLES_FILE, header)


def run_train(cfg: RunConfig, out: Path, force: bool = False, resume: bool = False) -> Path:
    """Train the descriptor network and write the checkpoint and loss curve."""
    out = Path(out)
    ds = _load_dataset(cfg, out, force)
    tuples_path = _require(out / TUPLES_FILE, "mine")
    header, _ = read_tuples(tuples_path)
    check_hash(header.get("config_hash", ""), cfg.hash(), tuples_path, force)
    ckpt = out / CHECKPOINT_FILE
    state = None
    if resume and ckpt.exists():
        state, _, h = load_checkpoint(ckpt)
        check_hash(h.get("config_hash", ""), cfg.hash(), ckpt, force)
        log.info("resuming after epoch %d", state.epoch)
    state = train(ds, cfg.network, cfg.training, cfg.mining, cfg.seed, resume=state)
    save_checkpoint(state, cfg.network, ckpt, cfg.hash())
    write_loss_history(state.history, out / LOSS_FILE, cfg.hash())
    return ckpt


def _load_model(cfg: RunConfig, out: Path, force: bool):
    ckpt = _require(out / CHECKPOINT_FILE, "train")
    state, net, header = load_checkpoint(ckpt)
    check_hash(header.get("config_hash", ""), cfg.hash(), ckpt, force)
    return state.params, net


def run_index(cfg: RunConfig, out: Path, force: bool = False) -> Path:
    """Describe every reference image with the trained model."""
    out = Path(out)
    ds = _load_dataset(cfg, out, force)
    params, net = _load_model(cfg, out, force)
    index = make_index(ds, params, net, cfg, cfg.hash())
    return save_index(index, out / INDEX_FILE)


def run_localize(cfg: RunConfig, out: Path, force: bool = False) -> Path:
    """Retrieve the top-1 reference for each query and write predictions."""
    out = Path(out)
    index_path = _require(out / INDEX_FILE, "index")
    ds = _load_dataset(cfg, out, force)
    params, net = _load_model(cfg, out, force)
    index = load_index(index_path)
    check_hash(index.config_hash, cfg.hash(), index_path, force)
    preds = localize_queries(ds, index, params, net, cfg.retrieval)
    path = out / PREDICTIONS_FILE
    with open(path, "w", newline="\n") as fh:
        fh.write(format_predictions(preds, cfg.hash()))
    return path


def run_evaluate(cfg: RunConfig, out: Path, force: bool = False) -> list[Path]:
    """Score predictions against ground truth and write the report."""
    out = Path(out)
    pred_path = _require(out / PREDICTIONS_FILE, "localize")
    ds = _load_dataset(cfg, out, force)
    found, preds = parse_predictions(pred_path.read_text())
    check_hash(found, cfg.hash(), pred_path, force)
    bins = cfg.evaluation.bins
    meta = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "N_S": cfg.network.N_S,
        "multiscale": cfg.retrieval.multiscale,
        "whitening": cfg.retrieval.whitening,
        "random_pose_accuracy": random_baseline(ds, bins),
    }
    report = evaluate_errors(f"ns{cfg.network.N_S}{'_ms' if cfg.retrieval.multiscale else ''}",
                             errors_by_condition(ds, preds), bins, meta, pooled_row=True)
    written = emit_report([report], out / REPORT_DIR)
    summary = out / REPORT_DIR / "summary.json"
    summary.write_text(json.dumps({"metadata": meta, "accuracies": report.accuracies}, indent=2, sort_keys=True) + "\n")
    return written + [summary]


# ablation --------------------------------------------------------------------

ABLATION_NS = (0, 2, 3, 4)


def ablation_reports(cfg: RunConfig, ds: Dataset, n_s_values=ABLATION_NS) -> list[EvalReport]:
    """Train once per N_S, then evaluate single- and multi-scale retrieval."""
    reports = []
    for n_s in n_s_values:
        sub = cfg.with_overrides(network={"N_S": n_s})
        state = train(ds, sub.network, sub.training, sub.mining, sub.seed)
        for ms in (False, True):
            run = sub.with_overrides(retrieval={"multiscale": ms})
            index = make_index(ds, state.params, run.network, run, run.hash())
            preds = localize_queries(ds, index, state.params, run.network, run.retrieval)
            meta = {"config_hash": run.hash(), "seed": run.seed, "N_S": n_s, "multiscale": ms}
            run_id = f"ns{n_s}{'_ms' if ms else ''}"
            errors = errors_by_condition(ds, preds)
            reports.append(evaluate_errors(run_id, errors, run.evaluation.bins, meta, pooled_row=True))
            log.info("ablation %s: %s", run_id, reports[-1].accuracies)
    return reports


def run_ablate(cfg: RunConfig, out: Path, force: bool = False, n_s_values=ABLATION_NS) -> Path:
    """Train and score every N_S in the grid, single- and multi-scale."""
    out = Path(out)
    if (out / DATASET_DIR / "manifest.json").exists():
        ds = _load_dataset(cfg, out, force)
    else:
        ds = make_dataset(cfg)
    reports = ablation_reports(cfg, ds, n_s_values)
    emit_report(reports, out / REPORT_DIR / "ablation")
    path = out / "ablation.csv"
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n")
        fh.write(report_csv(reports))
    base = random_baseline(ds, cfg.evaluation.bins)
    log.info("random-pose baseline: %s", base)
    return path


STAGES = {
    "generate": run_generate,
    "mine": run_mine,
    "train": run_train,
    "index": run_index,
    "localize": run_localize,
    "evaluate": run_evaluate,
    "ablate": run_ablate,
}

__all__ = [*STAGES, "CondLocError"]
