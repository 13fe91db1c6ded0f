"""
OpenTelemetry spans and metrics for generation, training and evaluation runs.

Everything here degrades to a no-op unless OTEL_ENABLED=true is set and the
``telemetry`` extra is installed. Exporters come from the standard
OTEL_EXPORTER_OTLP_* variables; OTEL_CONSOLE_EXPORT prints to the console.
"""

import logging
import os
import time
from contextlib import contextmanager

logger = logging.getLogger(__name__)

# Optional telemetry dependencies - only import if telemetry is enabled
TELEMETRY_AVAILABLE = False

if os.getenv("OTEL_ENABLED", "false").lower() == "true":
    try:
        from opentelemetry import metrics, trace
        from opentelemetry.exporter.otlp.proto.grpc.metric_exporter import (
            OTLPMetricExporter,
        )
        from opentelemetry.exporter.otlp.proto.grpc.trace_exporter import (
            OTLPSpanExporter,
        )
        from opentelemetry.instrumentation.logging import LoggingInstrumentor
        from opentelemetry.sdk.metrics import MeterProvider
        from opentelemetry.sdk.metrics.export import (
            ConsoleMetricExporter,
            PeriodicExportingMetricReader,
        )
        from opentelemetry.sdk.resources import Resource
        from opentelemetry.sdk.trace import TracerProvider
        from opentelemetry.sdk.trace.export import (
            BatchSpanProcessor,
            ConsoleSpanExporter,
        )

        TELEMETRY_AVAILABLE = True
    except ImportError as e:
        logger.warning(f"OTEL_ENABLED=true but telemetry packages are missing: {e}")
        logger.info("Install the 'telemetry' extra to export spans and metrics")

EXPORT_INTERVAL_MS = 30000


def _get_otlp_headers() -> dict[str, str]:
    """Parse OTEL_EXPORTER_OTLP_HEADERS (comma-separated key=value pairs)"""
    raw = os.getenv("OTEL_EXPORTER_OTLP_HEADERS", "")
    return dict(pair.split("=", 1) for pair in raw.split(",") if pair)


def _span_exporters(console: bool) -> list:
    exporters = []
    endpoint = os.getenv("OTEL_EXPORTER_OTLP_TRACES_ENDPOINT")
    if endpoint:
        exporters.append(OTLPSpanExporter(endpoint=endpoint, headers=_get_otlp_headers()))
        logger.info(f"Exporting spans to {endpoint}")
    if console:
        exporters.append(ConsoleSpanExporter())
    return exporters


def _metric_exporters(console: bool) -> list:
    exporters = []
    endpoint = os.getenv("OTEL_EXPORTER_OTLP_METRICS_ENDPOINT")
    if endpoint:
        exporters.append(OTLPMetricExporter(endpoint=endpoint, headers=_get_otlp_headers()))
        logger.info(f"Exporting metrics to {endpoint}")
    if console:
        exporters.append(ConsoleMetricExporter())
    return exporters


def setup_telemetry() -> bool:
    """
    Install tracer and meter providers for this process

    Returns:
        bool: True if providers were installed, False otherwise
    """
    if not TELEMETRY_AVAILABLE:
        logger.debug("OpenTelemetry not available")
        return False

    from config import get_config

    env = get_config()
    if not env.otel_enabled:
        return False

    try:
        resource = Resource.create(
            {"service.name": env.otel_service_name, "service.version": "0.1.0"}
        )

        tracer_provider = TracerProvider(resource=resource)
        for exporter in _span_exporters(env.otel_console_export):
            tracer_provider.add_span_processor(BatchSpanProcessor(exporter))
        trace.set_tracer_provider(tracer_provider)

        readers = [
            PeriodicExportingMetricReader(exporter, export_interval_millis=EXPORT_INTERVAL_MS)
            for exporter in _metric_exporters(env.otel_console_export)
        ]
        if readers:
            metrics.set_meter_provider(MeterProvider(resource=resource, metric_readers=readers))

        # trace ids on log records, without touching the stderr format
        LoggingInstrumentor().instrument(set_logging_format=False)
    except Exception as e:
        logger.error(f"Failed to set up OpenTelemetry: {e}")
        return False

    logger.info(f"OpenTelemetry configured for {env.otel_service_name}")
    return True


class TelemetryContext:
    """Tracer plus the instruments recorded by gen, train and eval"""

    def __init__(self):
        self.tracer = trace.get_tracer(__name__)
        meter = metrics.get_meter(__name__)

        self.stage_duration = meter.create_histogram(
            "stage_duration_seconds", description="Wall time of a traced stage"
        )
        self.step_duration = meter.create_histogram(
            "train_step_duration_seconds", description="Training step wall time"
        )
        self.steps = meter.create_counter("train_steps_total", description="Completed training steps")
        self.loss = meter.create_histogram("train_loss", description="Loss terms per training step")
        self.samples = meter.create_counter(
            "samples_total", description="Samples generated or evaluated"
        )

    def trace_operation(self, operation_name: str, **attributes):
        return self.tracer.start_as_current_span(operation_name, attributes=attributes)

    def record_stage(self, stage: str, seconds: float):
        self.stage_duration.record(seconds, {"stage": stage})

    def record_step(self, step: int, seconds: float, losses: dict[str, float]):
        self.steps.add(1)
        self.step_duration.record(seconds)
        for name, value in losses.items():
            self.loss.record(value, {"component": name})

    def count_samples(self, count: int, stage: str):
        self.samples.add(count, {"stage": stage})


# Global telemetry context
telemetry: TelemetryContext | None = None


def get_telemetry() -> TelemetryContext | None:
    return telemetry


def init_telemetry() -> TelemetryContext | None:
    """Set up exporters once and return the process-wide context"""
    global telemetry

    if telemetry is None and setup_telemetry():
        telemetry = TelemetryContext()
    return telemetry


@contextmanager
def span(name: str, **attributes):
    """Trace and time a block when telemetry is on; otherwise just run it"""
    if telemetry is None:
        yield
        return
    started = time.perf_counter()
    with telemetry.trace_operation(name, **attributes):
        yield
    telemetry.record_stage(name, time.perf_counter() - started)


def record_step(step: int, seconds: float, losses: dict[str, float]):
    if telemetry is not None:
        telemetry.record_step(step, seconds, losses)


def count_samples(count: int, stage: str):
    if telemetry is not None:
        telemetry.count_samples(count, stage)
