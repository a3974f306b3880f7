import threading
from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, Histogram, generate_latest, write_to_textfile

NFE_BUCKETS = (1, 2, 4, 6, 8, 12, 16, 24, 32, 48, 64)


class LocalRegistry:
    """ Process-local Prometheus registry, metrics are created lazily on first use """

    def __init__(self, namespace: str = "relay_mdm"):
        self.namespace = namespace
        self._registry = CollectorRegistry()
        self._counters: dict[str, Counter] = {}
        self._histograms: dict[str, Histogram] = {}
        self._lock = threading.Lock()

    @property
    def registry(self) -> CollectorRegistry:
        return self._registry

    def _counter(self, name: str, label_names: tuple[str, ...]) -> Counter:
        if name not in self._counters:
            self._counters[name] = Counter(
                name, f"{name} counter", labelnames=label_names,
                namespace=self.namespace, registry=self._registry,
            )
        return self._counters[name]

    def _histogram(self, name: str, label_names: tuple[str, ...], buckets) -> Histogram:
        if name not in self._histograms:
            self._histograms[name] = Histogram(
                name, f"{name} histogram", labelnames=label_names, buckets=buckets,
                namespace=self.namespace, registry=self._registry,
            )
        return self._histograms[name]

    def inc(self, name: str, labels: dict[str, str] | None = None, value: float = 1):
        labels = labels or {}
        with self._lock:
            counter = self._counter(name, tuple(sorted(labels)))
            (counter.labels(**labels) if labels else counter).inc(value)

    def observe(self, name: str, value: float, labels: dict[str, str] | None = None, buckets=NFE_BUCKETS):
        labels = labels or {}
        with self._lock:
            histogram = self._histogram(name, tuple(sorted(labels)), buckets)
            (histogram.labels(**labels) if labels else histogram).observe(value)

    def value(self, name: str, labels: dict[str, str] | None = None) -> float:
        """ Current counter value, 0 when never incremented """
        sample = self._registry.get_sample_value(f"{self.namespace}_{name}_total", labels or {})
        return sample or 0.0

    def export_prometheus(self) -> str:
        return generate_latest(self._registry).decode("utf-8")

    def write_textfile(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), self._registry)


PrometheusLocalRegistry = LocalRegistry()
