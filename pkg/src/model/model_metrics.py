from prometheus_client import Counter, Histogram, Gauge
import logging
import time
from functools import wraps
from typing import Dict, Any

logger = logging.getLogger(__name__)

# Metriken definieren
TRAIN_STEPS_TOTAL = Counter(
    'fanet_train_steps_total',
    'Total number of optimizer steps taken',
)

STEP_TIME = Histogram(
    'fanet_step_duration_seconds',
    'Forward + backward + update time per training step',
    buckets=[0.01, 0.05, 0.1, 0.5, 1.0, 5.0]
)

SAMPLES_SEEN = Counter(
    'fanet_samples_total',
    'Samples processed',
    ['split']
)

EPOCH_LOSS = Gauge(
    'fanet_epoch_loss',
    'Mean loss of the last finished epoch',
    ['split']
)

EPOCH_ACCURACY = Gauge(
    'fanet_epoch_accuracy',
    'Accuracy of the last finished epoch',
    ['split']
)

GRADCHECK_ERROR = Gauge(
    'fanet_gradcheck_max_relative_error',
    'Max relative error of the last gradient check',
    ['op']
)


def track_step_time(func):
    """Record duration and count of a training step."""
    @wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        result = func(*args, **kwargs)
        STEP_TIME.observe(time.perf_counter() - start_time)
        TRAIN_STEPS_TOTAL.inc()
        return result
    return wrapper


def record_epoch(split: str, loss: float, accuracy: float, samples: int) -> None:
    EPOCH_LOSS.labels(split=split).set(loss)
    EPOCH_ACCURACY.labels(split=split).set(accuracy)
    SAMPLES_SEEN.labels(split=split).inc(samples)


def record_gradcheck(op: str, error: float) -> None:
    GRADCHECK_ERROR.labels(op=op).set(error)


def get_training_stats() -> Dict[str, Any]:
    """Current in-process training statistics."""
    return {
        'steps': TRAIN_STEPS_TOTAL._value.get(),
        'average_step_time': STEP_TIME._sum.get() / max(TRAIN_STEPS_TOTAL._value.get(), 1),
        'train_loss': EPOCH_LOSS.labels(split='train')._value.get(),
        'val_loss': EPOCH_LOSS.labels(split='val')._value.get(),
    }
