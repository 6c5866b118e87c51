"""Evaluation metrics for any (possibly quantized) checkpoint.

Four headline numbers per model, following the usual unlearning-benchmark
protocol: verbatim memorization (vermem) scores greedy continuations of
forget-set sentences, knowledge memorization (knowmem) scores answers to
forget-set questions, utility preservation is knowmem on the retain set, and
privacy leakage compares a min-k% membership-inference AUC against the
retrained-from-scratch baseline. ROUGE-derived scores are reported x100.

Protocol constants live in MetricProtocol so a report records exactly how it
was produced; everything here is a deterministic function of (checkpoint,
records, protocol).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .corpus import Tokenizer
from .errors import ContractError, MetricError
from .model import greedy_decode, token_log_probs

REPORT_COLUMNS = ("Method", "Precision", "Adapter", "VerMem", "KnowMem",
                  "PrivLeak", "UtilityPres")


@dataclass(frozen=True)
class MetricProtocol:
    k_percent: float = 20.0          # min-k% fraction
    prefix_len: int | None = None    # None: per-sentence ceil(len/2)

    def to_dict(self) -> dict:
        return {"k_percent": self.k_percent, "prefix_len": self.prefix_len}


def lcs_length(a, b) -> int:
    """Longest common subsequence length via the classic DP table."""
    m, n = len(a), len(b)
    prev = [0] * (n + 1)
    for i in range(1, m + 1):
        cur = [0] * (n + 1)
        ai = a[i - 1]
        for j in range(1, n + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[n]


def rouge_l_f1(candidate, reference) -> float:
    """LCS-based F1 in [0, 1]; empty candidate scores 0."""
    if not reference:
        raise ContractError("rouge: reference must be nonempty")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2.0 * p * r / (p + r)


def _prefix_length(n_tokens: int, protocol: MetricProtocol) -> int:
    if protocol.prefix_len is not None:
        return protocol.prefix_len
    return (n_tokens + 1) // 2  # ceil(n/2)


def vermem(ck: Checkpoint, records, tok: Tokenizer,
           protocol: MetricProtocol = MetricProtocol()) -> float:
    """Mean ROUGE-L F1 (x100) of greedy continuations against true suffixes.

    Each sentence is split at its prefix length; the model is prompted with
    bos + prefix and generates exactly the suffix length. Sentences not
    longer than the prefix are skipped with a warning.
    """
    scores = []
    skipped = 0
    for rec in records:
        ids = tok.encode(rec.sentence)
        l = _prefix_length(len(ids), protocol)
        if len(ids) <= l:
            skipped += 1
            continue
        prompt = [tok.bos_id] + ids[:l]
        out = greedy_decode(ck, prompt, len(ids) - l)
        scores.append(rouge_l_f1(out[len(prompt):], ids[l:]))
    if skipped:
        warnings.warn(f"vermem: skipped {skipped} sentence(s) shorter than the prefix")
    if not scores:
        raise ContractError("vermem: no sentence was long enough to score")
    return 100.0 * float(np.mean(scores))


def knowmem(ck: Checkpoint, records, tok: Tokenizer) -> float:
    """Mean ROUGE-L F1 (x100) of greedy answers against ground truth."""
    if not records:
        raise ContractError("knowmem: empty record list")
    scores = []
    for rec in records:
        prompt = [tok.bos_id] + tok.encode(rec.question)
        answer = tok.encode(rec.answer)
        out = greedy_decode(ck, prompt, len(answer))
        scores.append(rouge_l_f1(out[len(prompt):], answer))
    return 100.0 * float(np.mean(scores))


def utilitypres(ck: Checkpoint, retain_records, tok: Tokenizer) -> float:
    """knowmem on the retain set: the utility axis of the trade-off."""
    return knowmem(ck, retain_records, tok)


def min_k_prob(ck: Checkpoint, sequence, k_percent: float) -> float:
    """Mean of the lowest ceil(k% * n) per-token log-probs (member-likeness)."""
    if not 0.0 < k_percent <= 100.0:
        raise ContractError("k_percent must be in (0, 100]")
    seq = list(sequence)
    if len(seq) < 2:
        raise ContractError("min_k_prob: sequence needs at least 2 tokens")
    lp = np.sort(token_log_probs(ck, seq))
    m = int(np.ceil(k_percent / 100.0 * lp.size))
    return float(lp[:m].mean())


def auc_roc(member_scores, nonmember_scores) -> float:
    """Mann-Whitney AUC: P(member > nonmember) with ties counting 1/2."""
    m = np.asarray(member_scores, dtype=np.float64)
    n = np.asarray(nonmember_scores, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        raise ContractError("auc: both score lists must be nonempty")
    diff = m[:, None] - n[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (m.size * n.size))


def _membership_scores(ck: Checkpoint, records, tok: Tokenizer, k_percent: float) -> list:
    return [min_k_prob(ck, tok.frame(rec.sentence), k_percent) for rec in records]


def privleak(f_unlearn: Checkpoint, f_retrain: Checkpoint, forget_records,
             retain_records, tok: Tokenizer, k_percent: float = 20.0) -> float:
    """100 * (AUC_unlearn - AUC_retrain) / AUC_retrain over min-k% scores.

    Members are forget records, nonmembers retain records; the retrain model
    sets the baseline. Negative values mean the attack separates the sets
    less well than on the baseline.
    """
    members_u = _membership_scores(f_unlearn, forget_records, tok, k_percent)
    nonmembers_u = _membership_scores(f_unlearn, retain_records, tok, k_percent)
    members_r = _membership_scores(f_retrain, forget_records, tok, k_percent)
    nonmembers_r = _membership_scores(f_retrain, retain_records, tok, k_percent)
    auc_u = auc_roc(members_u, nonmembers_u)
    auc_r = auc_roc(members_r, nonmembers_r)
    if auc_r == 0.0:
        raise MetricError("privleak undefined: retrain AUC is zero")
    return 100.0 * (auc_u - auc_r) / auc_r


def evaluate_checkpoint(ck: Checkpoint, split, tok: Tokenizer,
                        f_retrain: Checkpoint | None,
                        protocol: MetricProtocol = MetricProtocol()) -> dict:
    """All four metrics for one checkpoint (plus the holdout privleak variant).

    privleak needs the retrain baseline; without one those fields are None.
    """
    cell = {
        "vermem": vermem(ck, split.forget, tok, protocol),
        "knowmem": knowmem(ck, split.forget, tok),
        "utilitypres": utilitypres(ck, split.retain, tok),
        "privleak": None,
        "privleak_holdout": None,
    }
    if f_retrain is not None:
        # A fully separable baseline (retrain AUC 0) leaves the ratio
        # undefined; the cell records the gap instead of failing the run.
        try:
            cell["privleak"] = privleak(ck, f_retrain, split.forget,
                                        split.retain, tok, protocol.k_percent)
        except MetricError:
            cell["privleak"] = None
        try:
            cell["privleak_holdout"] = privleak(ck, f_retrain, split.forget,
                                                split.holdout, tok, protocol.k_percent)
        except MetricError:
            cell["privleak_holdout"] = None
    return cell
