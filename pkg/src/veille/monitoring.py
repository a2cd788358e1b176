import logging
import os

from prometheus_client import REGISTRY, Counter, Gauge, write_to_textfile

logger = logging.getLogger(__name__)

metric_training_steps_total = Counter(
    "training_steps_total", "Total number of optimizer steps taken", ["phase"]
)
metric_training_epochs_total = Counter(
    "training_epochs_total", "Total number of completed training epochs", ["phase"]
)
metric_training_epoch_loss = Gauge(
    "training_epoch_loss", "Average training loss of the last completed epoch", ["phase"]
)
metric_training_epoch_accuracy = Gauge(
    "training_epoch_accuracy",
    "Average training accuracy of the last completed epoch",
    ["phase"],
)
metric_training_epoch_seconds = Gauge(
    "training_epoch_seconds", "Wall-clock duration of the last completed epoch", ["phase"]
)
metric_trainable_parameters = Gauge(
    "trainable_parameters", "Number of trainable parameters", ["phase"]
)
metric_evaluation = Gauge(
    "evaluation_metric", "Latest evaluation metric value", ["metric"]
)


def record_epoch(phase: str, loss: float, accuracy: float, seconds: float) -> None:
    metric_training_epochs_total.labels(phase=phase).inc()
    metric_training_epoch_loss.labels(phase=phase).set(loss)
    metric_training_epoch_accuracy.labels(phase=phase).set(accuracy)
    metric_training_epoch_seconds.labels(phase=phase).set(seconds)


def record_evaluation(values) -> None:
    """Publishes every defined metric from a name -> value mapping."""
    for name, value in values.items():
        if value is not None:
            metric_evaluation.labels(metric=name).set(value)


def write_metrics(path: str) -> None:
    """Dumps the default registry in the text exposition format."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_to_textfile(path, REGISTRY)
    logger.debug(f"Wrote Prometheus metrics to {path}")
