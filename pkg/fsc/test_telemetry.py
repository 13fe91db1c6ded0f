"""
Tests for the optional OpenTelemetry layer
"""

import os
from contextlib import nullcontext
from unittest.mock import MagicMock, patch

import telemetry


class TestDisabledTelemetry:
    """Everything is a no-op without OTEL_ENABLED"""

    def test_setup_reports_unavailable(self):
        with patch.dict(os.environ, {}, clear=True):
            assert telemetry.setup_telemetry() is False
            assert telemetry.init_telemetry() is None
        assert telemetry.get_telemetry() is None

    def test_helpers_are_no_ops(self):
        with telemetry.span("gen", meshes=3):
            pass
        telemetry.record_step(1, 0.5, {"total": 1.0})
        telemetry.count_samples(4, "evaluate")


class TestForwarding:
    """Module helpers forward to the active context"""

    def test_span_opens_an_operation(self):
        context = MagicMock()
        context.trace_operation.return_value = nullcontext()
        with patch("telemetry.telemetry", context):
            with telemetry.span("train_step", step=3):
                pass
        context.trace_operation.assert_called_once_with("train_step", step=3)
        stage, seconds = context.record_stage.call_args.args
        assert stage == "train_step"
        assert seconds >= 0

    def test_step_and_sample_counts(self):
        context = MagicMock()
        with patch("telemetry.telemetry", context):
            telemetry.record_step(2, 0.25, {"d1": 0.1})
            telemetry.count_samples(8, "gen")
        context.record_step.assert_called_once_with(2, 0.25, {"d1": 0.1})
        context.count_samples.assert_called_once_with(8, "gen")

    def test_context_records_each_loss_component(self):
        context = telemetry.TelemetryContext.__new__(telemetry.TelemetryContext)
        context.steps, context.step_duration, context.loss = MagicMock(), MagicMock(), MagicMock()
        context.record_step(1, 0.5, {"d1": 0.2, "d2": 0.3})
        context.steps.add.assert_called_once_with(1)
        context.step_duration.record.assert_called_once_with(0.5)
        context.loss.record.assert_any_call(0.2, {"component": "d1"})
        context.loss.record.assert_any_call(0.3, {"component": "d2"})


def test_otlp_headers_are_parsed():
    with patch.dict(os.environ, {"OTEL_EXPORTER_OTLP_HEADERS": "a=1,b=x=y"}, clear=True):
        assert telemetry._get_otlp_headers() == {"a": "1", "b": "x=y"}
    with patch.dict(os.environ, {}, clear=True):
        assert telemetry._get_otlp_headers() == {}
