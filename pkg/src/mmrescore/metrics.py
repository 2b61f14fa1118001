"""Word-error-rate scoring.

The aligner is a unit-cost Levenshtein DP over whitespace words. Among
minimum-cost alignments it selects the one with the fewest insertions plus
deletions (equivalently, the most substitutions/matches), which makes the
(S, I, D) decomposition canonical; backtrace ties prefer substitution over
insertion over deletion. Corpus metrics pool error counts over reference
words rather than averaging per-utterance rates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class WerCounts:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / max(self.ref_words, 1)


def align_words(ref: list[str], hyp: list[str]) -> WerCounts:
    """Canonical minimum-cost alignment of two word sequences."""
    m, n = len(ref), len(hyp)
    # Cell = (cost, insertions + deletions); tuple order implements the
    # secondary minimization.
    prev = [(j, j) for j in range(n + 1)]
    table = [prev]
    for i in range(1, m + 1):
        row = [(i, i)] + [None] * n
        for j in range(1, n + 1):
            sub_c, sub_id = prev[j - 1]
            diag = (sub_c + (ref[i - 1] != hyp[j - 1]), sub_id)
            ins_c, ins_id = row[j - 1]
            ins = (ins_c + 1, ins_id + 1)
            del_c, del_id = prev[j]
            dele = (del_c + 1, del_id + 1)
            row[j] = min(diag, ins, dele)
        table.append(row)
        prev = row

    subs = ins = dels = 0
    i, j = m, n
    while i > 0 or j > 0:
        cell = table[i][j]
        if i > 0 and j > 0:
            pc, pid = table[i - 1][j - 1]
            if (pc + (ref[i - 1] != hyp[j - 1]), pid) == cell:
                if ref[i - 1] != hyp[j - 1]:
                    subs += 1
                i, j = i - 1, j - 1
                continue
        if j > 0:
            pc, pid = table[i][j - 1]
            if (pc + 1, pid + 1) == cell:
                ins += 1
                j -= 1
                continue
        dels += 1
        i -= 1
    return WerCounts(subs, ins, dels, m)


def wer(reference: str, hypothesis: str) -> WerCounts:
    """Word error rate over whitespace-split words."""
    return align_words(reference.split(), hypothesis.split())


def cwer(reference: str, hypothesis: str, blocklist: set[str]) -> WerCounts:
    """WER on content words only: blocklisted words are removed from both
    streams first. An all-function-word reference yields rate 0 with zero
    reference words when the hypothesis is also all function words."""
    ref = [w for w in reference.split() if w not in blocklist]
    hyp = [w for w in hypothesis.split() if w not in blocklist]
    return align_words(ref, hyp)


@dataclass
class EvalReport:
    wer: float
    cwer: float
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int
    content_substitutions: int
    content_insertions: int
    content_deletions: int
    content_ref_words: int
    per_utterance: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    def table(self) -> str:
        lines = [
            f"{'utterances':>14}  {len(self.per_utterance)}",
            f"{'ref words':>14}  {self.ref_words}",
            f"{'sub/ins/del':>14}  {self.substitutions}/{self.insertions}/{self.deletions}",
            f"{'WER':>14}  {self.wer:.4f}",
            f"{'CWER':>14}  {self.cwer:.4f}",
        ]
        if self.skipped:
            lines.append(f"{'skipped':>14}  {len(self.skipped)}")
        return "\n".join(lines)


def corpus_report(scored: list[tuple[str, str, str]], blocklist: set[str]) -> EvalReport:
    """Pool error counts over (utterance_id, reference, top_hypothesis) rows."""
    total = WerCounts(0, 0, 0, 0)
    content = WerCounts(0, 0, 0, 0)
    per_utt = []
    for uid, reference, top in scored:
        w = wer(reference, top)
        c = cwer(reference, top, blocklist)
        for acc, x in ((total, w), (content, c)):
            acc.substitutions += x.substitutions
            acc.insertions += x.insertions
            acc.deletions += x.deletions
            acc.ref_words += x.ref_words
        per_utt.append({
            "utterance_id": uid,
            "reference": reference,
            "top": top,
            "substitutions": w.substitutions,
            "insertions": w.insertions,
            "deletions": w.deletions,
            "ref_words": w.ref_words,
            "rate": w.rate,
        })
    return EvalReport(
        wer=total.rate,
        cwer=content.rate,
        substitutions=total.substitutions,
        insertions=total.insertions,
        deletions=total.deletions,
        ref_words=total.ref_words,
        content_substitutions=content.substitutions,
        content_insertions=content.insertions,
        content_deletions=content.deletions,
        content_ref_words=content.ref_words,
        per_utterance=per_utt,
    )
