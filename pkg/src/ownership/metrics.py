"""
Prometheus metrics for the ownership service.
"""
import time
from typing import Any, Callable, Coroutine

from fastapi import FastAPI, Request, Response
from fastapi.routing import APIRoute
from prometheus_client import CONTENT_TYPE_LATEST, Counter, Gauge, Histogram, generate_latest

# Request metrics
REQUEST_COUNT = Counter(
    'ownership_requests_total',
    'Total number of gateway requests',
    ['operation', 'decision']
)

REQUEST_LATENCY = Histogram(
    'ownership_request_duration_seconds',
    'Request latency in seconds',
    ['method', 'endpoint']
)

ACTIVE_REQUESTS = Gauge(
    'ownership_active_requests',
    'Number of active requests',
    ['method', 'endpoint']
)

ERROR_COUNT = Counter(
    'ownership_errors_total',
    'Total number of errors',
    ['method', 'endpoint', 'error_type']
)

# Plane metrics
LEDGER_TRANSACTIONS = Counter(
    'ownership_ledger_transactions_total',
    'Applied ledger transactions',
    ['kind']
)

LEDGER_REJECTIONS = Counter(
    'ownership_ledger_rejections_total',
    'Rejected ledger transactions',
    ['kind']
)

TUMBLE_BATCHES = Counter(
    'ownership_tumble_batches_total',
    'Tumble batches applied by identity stores',
    ['store']
)

RECORD_OPS_DROPPED = Counter(
    'ownership_record_ops_dropped_total',
    'Record-store ops dropped for failing signature verification',
    ['node']
)

RESOLUTIONS = Counter(
    'ownership_resolutions_total',
    'Identity resolution attempts by outcome',
    ['outcome']
)


class MetricsRoute(APIRoute):
    """Custom route class to collect metrics for each endpoint."""

    def get_route_handler(self) -> Callable[[Request], Coroutine[Any, Any, Response]]:
        original_route_handler = super().get_route_handler()

        async def custom_route_handler(request: Request) -> Response:
            method = request.method
            endpoint = request.url.path

            ACTIVE_REQUESTS.labels(method=method, endpoint=endpoint).inc()
            start_time = time.perf_counter()
            try:
                response = await original_route_handler(request)
                REQUEST_LATENCY.labels(method=method, endpoint=endpoint).observe(
                    time.perf_counter() - start_time
                )
                return response
            except Exception as e:
                ERROR_COUNT.labels(
                    method=method,
                    endpoint=endpoint,
                    error_type=type(e).__name__
                ).inc()
                raise
            finally:
                ACTIVE_REQUESTS.labels(method=method, endpoint=endpoint).dec()

        return custom_route_handler


def setup_metrics(app: FastAPI) -> FastAPI:
    """Expose ``/metrics`` and collect per-route latency."""

    @app.get("/metrics", include_in_schema=False)
    async def metrics() -> Response:
        return Response(content=generate_latest(), media_type=CONTENT_TYPE_LATEST)

    app.router.route_class = MetricsRoute
    return app
