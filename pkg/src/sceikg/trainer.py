"""Training loop: alternating graph-completion and prediction phases.

Each epoch runs (1) minibatched pairwise ranking steps over broken
triples, (2) an attention refresh of the propagation matrix from the
updated tables, then (3) sequential per-patient forward/backward passes
over padded visit batches. Validation recall@20 drives checkpointing and
premature stopping.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, config_hash, config_to_dict
from .encoder import attention_update, kge_pairwise_loss
from .kgstore import (
    CooccurrenceStats,
    InteractionGraph,
    WeightMatrix,
    compute_npmi_adjacency,
    herb_compatibility_block,
    normalize_laplacian,
    sample_broken_triples,
)
from .metrics import EvalReport, evaluate
from .model import PaddedBatch, SceikgModel, VisitOutputs, pad_batch
from .objective import VisitLossParts, loss_compat, loss_mse, loss_state, total_loss
from .patient import PatientHistory

log = logging.getLogger("sceikg.trainer")


class TrainingDiverged(RuntimeError):
    def __init__(self, breakdown):
        super().__init__(f"non-finite loss; breakdown: {breakdown.to_json()}")
        self.breakdown = breakdown


@dataclass
class TrainResult:
    ckpt_dir: Path
    log_path: Path
    best_epoch: int
    best_val_recall: float
    epochs_run: int
    test_report: EvalReport | None


def setup_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def split_patients(patients: list[PatientHistory], ratios: tuple[float, float, float],
                   seed: int) -> tuple[list, list, list]:
    """Seeded patient-level shuffle into train/val/test slices."""
    order = np.random.default_rng([seed, 17]).permutation(len(patients))
    n = len(patients)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    shuffled = [patients[i] for i in order]
    return (shuffled[:n_train], shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


def early_stop(val_history: list[float], patience: int) -> bool:
    """True when the trailing `patience` entries never exceeded the running best."""
    if len(val_history) <= patience:
        return False
    best_idx = 0
    best = val_history[0]
    for i, v in enumerate(val_history):
        if v > best:
            best, best_idx = v, i
    return (len(val_history) - 1 - best_idx) >= patience


def visit_loss_parts(batch: PaddedBatch, outputs: VisitOutputs, compat: torch.Tensor,
                     variant: str) -> VisitLossParts:
    """Per-visit loss tensors; ablation switches zero whole terms."""
    B, T = batch.mask.shape
    mse = loss_mse(batch.herbs, outputs.herb_scores)
    zeros = torch.zeros(B, T, dtype=mse.dtype)
    if variant in ("no_state", "no_sequence"):
        state = zeros
    else:
        state = zeros.clone()
        if T > 1:
            state[:, :-1] = loss_state(outputs.patient_vecs[:, 1:], outputs.post_states[:, :-1])
    compat_part = zeros if variant == "no_R" else loss_compat(outputs.herb_scores, compat)
    return VisitLossParts(mse=mse, state=state, compat=compat_part, mask=batch.mask)


def model_scores(model: SceikgModel, patients: list[PatientHistory],
                 transition_input: str | None = None) -> list[list[np.ndarray]]:
    """Per-patient, per-visit herb score vectors under the current parameters."""
    model.eval()
    with torch.no_grad():
        codes = model.encode_entities()
        batch = pad_batch(patients, model.num_symptoms, model.num_herbs)
        out = model.forward_visits(batch, codes,
                                   sequence=model.config.variant != "no_sequence",
                                   transition_input=transition_input)
    scores = []
    for b, patient in enumerate(patients):
        scores.append([out.herb_scores[b, t].numpy().copy() for t in range(len(patient))])
    model.train()
    return scores


def truth_vectors(patients: list[PatientHistory], num_symptoms: int, num_herbs: int
                  ) -> list[list[np.ndarray]]:
    out = []
    for p in patients:
        rows = []
        for v in p.visits:
            hot = np.zeros(num_herbs)
            for h in v.herbs:
                hot[h - num_symptoms] = 1.0
            rows.append(hot)
        out.append(rows)
    return out


def evaluate_split(model: SceikgModel, patients: list[PatientHistory],
                   k_values) -> EvalReport:
    scores = model_scores(model, patients)
    truths = truth_vectors(patients, model.num_symptoms, model.num_herbs)
    return evaluate(scores, truths, k_values)


def _metric_line(epoch: int, split: str, report: EvalReport | None, breakdown) -> str:
    obj: dict = {"epoch": epoch, "split": split}
    if report is not None:
        for k in report.k_values:
            obj[f"p@{k}"] = round(report.precision[k], 10)
            obj[f"r@{k}"] = round(report.recall[k], 10)
            obj[f"f1@{k}"] = round(report.f1[k], 10)
    if breakdown is not None:
        obj["loss"] = {"mse": breakdown.mse, "state": breakdown.state,
                       "compat": breakdown.compat, "ikg": breakdown.ikg,
                       "l2": breakdown.l2, "total": breakdown.total}
    return json.dumps(obj)


def prepare_weights(graph: InteractionGraph) -> tuple[WeightMatrix, np.ndarray]:
    """NPMI adjacency -> normalized propagation seed and its herb block."""
    stats = CooccurrenceStats.from_graph(graph)
    npmi = compute_npmi_adjacency(graph, stats)
    laplacian = normalize_laplacian(npmi)
    compat = herb_compatibility_block(laplacian, graph.num_symptoms, graph.num_herbs)
    return laplacian, compat


def sparse_tensor_from_weight_matrix(wm: WeightMatrix) -> torch.Tensor:
    coo = wm.matrix.tocoo()
    idx = torch.tensor(np.vstack([coo.row, coo.col]), dtype=torch.int64)
    vals = torch.tensor(coo.data, dtype=torch.float64)
    return torch.sparse_coo_tensor(idx, vals, coo.shape, check_invariants=False).coalesce()


def save_checkpoint(model: SceikgModel, ckpt_dir: Path, epoch: int,
                    val_recall: float, keep_previous: Path | None) -> Path:
    epoch_dir = ckpt_dir / f"epoch_{epoch}"
    epoch_dir.mkdir(parents=True, exist_ok=True)
    payload = model.checkpoint_payload({"epoch": epoch, "val_recall": val_recall})
    torch.save(payload, epoch_dir / "model.pt")
    (epoch_dir / "hash.txt").write_text(payload["state_hash"] + "\n")
    (ckpt_dir / "best").write_text(f"epoch_{epoch}\n")
    if keep_previous is not None and keep_previous != epoch_dir and keep_previous.exists():
        shutil.rmtree(keep_previous)
    return epoch_dir


def load_checkpoint(path: str | Path) -> tuple[SceikgModel, dict]:
    """Load from a model.pt file, an epoch directory, or a ckpt dir with a best marker."""
    p = Path(path)
    if p.is_dir():
        marker = p / "best"
        if marker.exists():
            p = p / marker.read_text().strip() / "model.pt"
        else:
            p = p / "model.pt"
    payload = torch.load(p, weights_only=False)
    model = SceikgModel.from_checkpoint(payload)
    model.eval()
    return model, payload


def train(patients: list[PatientHistory], graph: InteractionGraph, config: TrainConfig,
          out_dir: str | Path, laplacian: WeightMatrix | None = None,
          compat: np.ndarray | None = None) -> TrainResult:
    """Run the full alternating loop and leave checkpoints plus a metric log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "ckpt"
    ckpt_dir.mkdir(exist_ok=True)
    log_path = out / "metrics.jsonl"

    setup_determinism(config.seed, config.deterministic)
    if laplacian is None or compat is None:
        laplacian, compat = prepare_weights(graph)
    compat_t = torch.tensor(compat, dtype=torch.float64)

    train_set, val_set, test_set = split_patients(patients, config.split, config.seed)
    if not train_set:
        raise ValueError("empty training split")
    val_name, val_set_eff = ("val", val_set) if val_set else ("train", train_set)

    model = SceikgModel(graph.num_entities, graph.num_relations, graph.num_symptoms,
                        graph.num_herbs, config)
    model.set_propagation(sparse_tensor_from_weight_matrix(laplacian))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    use_ikg = config.variant != "no_ikg" and len(graph.triples) > 0
    kg_steps = max(1, len(graph.triples) // config.ikg_batch) if use_ikg else 0

    (out / "config.json").write_text(json.dumps(
        {"config": config_to_dict(config), "hash": config_hash(config)}, indent=1))

    best_recall = -1.0
    best_epoch = -1
    best_dir: Path | None = None
    recall_history: list[float] = []
    epochs_run = 0
    k_watch = 20 if 20 in config.top_k else max(config.top_k)

    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(config.epochs):
            epochs_run = epoch + 1
            model.train()
            # Phase I: graph completion on broken triples
            ikg_value = 0.0
            for step in range(kg_steps):
                quads = sample_broken_triples(graph, config.ikg_batch,
                                              seed=derive_seed(config.seed, epoch, step),
                                              corrupt_heads=config.corrupt_heads)
                if not quads:
                    continue
                optimizer.zero_grad(set_to_none=True)
                loss_kg = kge_pairwise_loss(model.tables, torch.tensor(quads),
                                            modulus=config.score_modulus, reduction="mean")
                loss_kg.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                ikg_value += float(loss_kg.detach()) / kg_steps
            if use_ikg:
                model.set_propagation(attention_update(graph, model.tables))

            # Phase II: sequential prediction over patient batches
            order = np.random.default_rng([config.seed, 3, epoch]).permutation(len(train_set))
            breakdown = None
            for start in range(0, len(order), config.patient_batch):
                chunk = [train_set[i] for i in order[start:start + config.patient_batch]]
                batch = pad_batch(chunk, graph.num_symptoms, graph.num_herbs)
                optimizer.zero_grad(set_to_none=True)
                codes = model.encode_entities()
                outputs = model.forward_visits(batch, codes,
                                               sequence=config.variant != "no_sequence")
                parts = visit_loss_parts(batch, outputs, compat_t, config.variant)
                total, breakdown = total_loss(parts, config.lam, config.lam_theta,
                                              list(model.parameters()), ikg=ikg_value)
                if not np.isfinite(breakdown.total):
                    raise TrainingDiverged(breakdown)
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()

            if epoch % config.eval_every == 0 or epoch == config.epochs - 1:
                report = evaluate_split(model, val_set_eff, config.top_k)
                recall = report.recall[k_watch]
                recall_history.append(recall)
                log_fh.write(_metric_line(epoch, val_name, report, breakdown) + "\n")
                log_fh.flush()
                if recall > best_recall:
                    best_recall = recall
                    best_epoch = epoch
                    best_dir = save_checkpoint(model, ckpt_dir, epoch, recall, best_dir)
                if config.stop_at_recall is not None and recall >= config.stop_at_recall:
                    log.info("target recall reached at epoch %d", epoch)
                    break
                if early_stop(recall_history, config.patience):
                    log.info("early stop at epoch %d (best %.4f @ %d)",
                             epoch, best_recall, best_epoch)
                    break

        test_report = None
        if test_set:
            best_model, _ = load_checkpoint(ckpt_dir) if best_dir else (model, None)
            test_report = evaluate_split(best_model, test_set, config.top_k)
            log_fh.write(_metric_line(epochs_run - 1, "test", test_report, None) + "\n")

    return TrainResult(ckpt_dir, log_path, best_epoch, best_recall, epochs_run, test_report)


def ablation_run(variant: str, patients: list[PatientHistory], graph: InteractionGraph,
                 config: TrainConfig, out_dir: str | Path) -> TrainResult:
    """Train one published ablation variant into out_dir/<variant>/."""
    if variant not in TrainConfig.VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {TrainConfig.VARIANTS}")
    cfg = config_to_dict(config)
    cfg["variant"] = variant
    from .config import train_config_from_dict
    run_cfg = train_config_from_dict(cfg)
    return train(patients, graph, run_cfg, Path(out_dir) / variant)
