import torch
from torchmetrics import Metric

IGNORE_INDEX = 255


def confusion_matrix(preds, labels, num_classes, ignore_index=IGNORE_INDEX):
    """K x K counts, rows are ground truth and columns predictions; ignored pixels are dropped."""
    assert preds.shape == labels.shape
    preds = preds.reshape(-1).long()
    labels = labels.reshape(-1).long()
    keep = labels != ignore_index
    index = num_classes * labels[keep] + preds[keep]
    return torch.bincount(index, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(confusion):
    """Per-class IoU (NaN where the union is empty) and their mean over the remaining classes."""
    confusion = confusion.to(torch.float64)
    intersection = torch.diag(confusion)
    union = confusion.sum(dim=0) + confusion.sum(dim=1) - intersection
    per_class = torch.where(union > 0, intersection / union.clamp_min(1), torch.full_like(union, float("nan")))
    present = union > 0
    mean = per_class[present].mean() if present.any() else torch.tensor(float("nan"), dtype=torch.float64)
    return per_class, mean


def miou(preds, labels, num_classes, ignore_index=IGNORE_INDEX):
    """Returns (per-class IoU list, mean IoU) for integer id maps."""
    per_class, mean = iou_from_confusion(confusion_matrix(preds, labels, num_classes, ignore_index))
    return per_class.tolist(), float(mean)


class MeanIoU(Metric):
    r"""Streaming mean IoU over a confusion matrix accumulated across batches
    """
    is_differentiable = False
    higher_is_better = True
    full_state_update: bool = False

    def __init__(self, num_classes, ignore_index=IGNORE_INDEX):
        super().__init__()
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.add_state("confusion", default=torch.zeros(num_classes, num_classes, dtype=torch.int64), dist_reduce_fx="sum")

    def update(self, preds: torch.Tensor, target: torch.Tensor):
        self.confusion += confusion_matrix(preds, target, self.num_classes, self.ignore_index).to(self.confusion.device)

    def compute(self):
        return iou_from_confusion(self.confusion)[1]

    def per_class(self):
        return iou_from_confusion(self.confusion)[0]
