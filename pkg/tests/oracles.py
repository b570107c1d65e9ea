"""Per-pixel reference implementations used as test oracles."""


def brute_confusion(pred, truth, threshold):
    tp = tn = fp = fn = 0
    for p, t in zip(pred.reshape(-1), truth.reshape(-1)):
        pos = p >= threshold
        if pos and t == 1:
            tp += 1
        elif pos:
            fp += 1
        elif t == 1:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def brute_metrics(tp, tn, fp, fn):
    div = lambda a, b: a / b if b else 0.0  # noqa: E731
    precision, recall = div(tp, tp + fp), div(tp, tp + fn)
    return {
        "accuracy": (tp + tn) / (tp + tn + fp + fn),
        "precision": precision,
        "recall": recall,
        "f1": div(2 * precision * recall, precision + recall),
        "specificity": div(tn, tn + fp),
    }
