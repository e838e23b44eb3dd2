"""Leave-one-out ranking metrics and sliced evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, UserSequence, make_eval_example
from .model import TEST_STREAM, VAL_STREAM, Model
from .tensor import no_grad


class EvaluationError(ValueError):
    pass


@dataclass
class RankResult:
    user_index: int
    rank: int
    candidate_count: int


@dataclass
class MetricReport:
    hr_at_k: float
    ndcg_at_k: float
    k: int
    protocol: str
    user_count: int
    excluded_user_count: int
    groups: dict = field(default_factory=dict)


def rank_from_scores(scores: np.ndarray) -> int:
    """1-based rank of index 0; ties count against it."""
    flat = np.asarray(scores).ravel()
    return 1 + int(np.sum(flat[1:] >= flat[0]))


def candidate_scores(model: Model, example, dataset: Dataset) -> np.ndarray:
    with no_grad():
        state, candidates = model.forward_example(example, dataset)
    return candidates.data @ state.data.ravel()


def rank_candidates(model: Model, example, dataset: Dataset) -> RankResult:
    scores = candidate_scores(model, example, dataset)
    return RankResult(example.user_index, rank_from_scores(scores), scores.size)


def hit_rate_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise EvaluationError("hit rate over an empty rank list is undefined")
    return float(np.mean(ranks <= k))


def ndcg_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise EvaluationError("NDCG over an empty rank list is undefined")
    return float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0)))


def protocol_label(protocol) -> str:
    return protocol if protocol == "all_items" else f"sampled({int(protocol)})"


def _negatives_arg(protocol):
    return "all_items" if protocol == "all_items" else int(protocol)


def collect_ranks(model: Model, dataset: Dataset, protocol, seed: int,
                  mode: str = "test", length: int | None = None,
                  sequences: list[UserSequence] | None = None):
    """Rank every evaluable user's held-out target; returns (results, excluded)."""
    stream = TEST_STREAM if mode == "test" else VAL_STREAM
    length = model.seq_length if length is None else length
    negatives = _negatives_arg(protocol)
    results: list[RankResult] = []
    excluded = 0
    for seq in sequences if sequences is not None else dataset.sequences:
        rng = np.random.default_rng([seed, stream, seq.user_index])
        example = make_eval_example(seq, length, mode, negatives, rng, dataset)
        if example is None:
            excluded += 1
            continue
        results.append(rank_candidates(model, example, dataset))
    return results, excluded


def report_from_ranks(results: list[RankResult], excluded: int, k: int,
                      protocol) -> MetricReport:
    ranks = [r.rank for r in results]
    return MetricReport(hit_rate_at_k(ranks, k), ndcg_at_k(ranks, k), k,
                        protocol_label(protocol), len(results), excluded)


def evaluate(model: Model, dataset: Dataset, protocol=100, k: int = 10,
             seed: int = 0, mode: str = "test",
             return_ranks: bool = False):
    results, excluded = collect_ranks(model, dataset, protocol, seed, mode)
    if not results:
        raise EvaluationError("no user is long enough to evaluate")
    report = report_from_ranks(results, excluded, k, protocol)
    return (report, results) if return_ranks else report


def split_top_bottom(sequences: list[UserSequence], quantile: float):
    """Partition by training-sequence length; boundary ties go to Top."""
    if not 0.0 < quantile < 1.0:
        raise EvaluationError(f"quantile must be inside (0, 1), got {quantile}")
    lengths = np.array([seq.train_length for seq in sequences])
    top_size = int(round(quantile * len(sequences)))
    if top_size == 0:
        return [], list(sequences)
    threshold = np.sort(lengths)[::-1][top_size - 1]
    top = [s for s, n in zip(sequences, lengths) if n >= threshold]
    bottom = [s for s, n in zip(sequences, lengths) if n < threshold]
    return top, bottom


def evaluate_groups(model: Model, dataset: Dataset, protocol, k: int,
                    group_rule: str, seed: int = 0) -> MetricReport:
    """Overall report with per-group breakdowns attached.

    ``group_rule`` is either ``top_bottom:<quantile>`` or
    ``seq_length_sweep:<L1,L2,...>``.
    """
    name, _, arg = group_rule.partition(":")
    overall, results = evaluate(model, dataset, protocol, k, seed, return_ranks=True)
    if name == "top_bottom":
        quantile = float(arg) if arg else 0.2
        top, bottom = split_top_bottom(dataset.sequences, quantile)
        by_user = {r.user_index: r for r in results}
        for label, seqs in (("top", top), ("bottom", bottom)):
            members = [by_user[s.user_index] for s in seqs if s.user_index in by_user]
            if members:
                overall.groups[label] = report_from_ranks(
                    members, len(seqs) - len(members), k, protocol)
    elif name == "seq_length_sweep":
        if not arg:
            raise EvaluationError("seq_length_sweep needs lengths, e.g. :10,20,50")
        for length in [int(v) for v in arg.split(",")]:
            results, excluded = collect_ranks(model, dataset, protocol, seed,
                                              length=length)
            if results:
                overall.groups[f"L={length}"] = report_from_ranks(
                    results, excluded, k, protocol)
    else:
        raise EvaluationError(f"unknown group rule {name!r}")
    return overall


def report_rows(report: MetricReport):
    yield ("overall", report)
    for label, sub in report.groups.items():
        yield (label, sub)


def write_metrics_csv(path, report: MetricReport) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "protocol", "k", "hr_at_k", "ndcg_at_k",
                         "users", "excluded"])
        for label, sub in report_rows(report):
            writer.writerow([label, sub.protocol, sub.k, f"{sub.hr_at_k:.6f}",
                             f"{sub.ndcg_at_k:.6f}", sub.user_count,
                             sub.excluded_user_count])


def write_ranks_jsonl(path, results: list[RankResult]) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps({"user_index": r.user_index, "rank": r.rank,
                                 "candidate_count": r.candidate_count}) + "\n")


def format_report(report: MetricReport) -> str:
    lines = [f"{'group':<12} {'protocol':<14} {'HR@%d' % report.k:>8} "
             f"{'NDCG@%d' % report.k:>8} {'users':>7} {'excl':>5}"]
    for label, sub in report_rows(report):
        lines.append(f"{label:<12} {sub.protocol:<14} {sub.hr_at_k:>8.4f} "
                     f"{sub.ndcg_at_k:>8.4f} {sub.user_count:>7} "
                     f"{sub.excluded_user_count:>5}")
    return "\n".join(lines)
