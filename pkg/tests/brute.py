"""Brute-force ranking metrics, written without numpy sorting."""


def selection_sort_order(scores):
    """Repeatedly pick the highest remaining score; the lowest index wins ties."""
    remaining = list(range(len(scores)))
    order = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        order.append(best)
        remaining.remove(best)
    return order


def gold_rank(scores, label):
    # 1 + number of candidates that beat the gold one under the tie rule
    beaten_by = 0
    for i, s in enumerate(scores):
        if s > scores[label] or (s == scores[label] and i < label):
            beaten_by += 1
    return beaten_by + 1


def recall_at_k(score_rows, labels, k):
    hits = 0
    for scores, label in zip(score_rows, labels):
        if gold_rank(scores, label) <= k:
            hits += 1
    return hits / len(labels)


def mrr(score_rows, labels):
    total = 0.0
    for scores, label in zip(score_rows, labels):
        total += 1.0 / gold_rank(scores, label)
    return total / len(labels)
