"""
FastAPI application for the ownership gateway.

Every module route is ``POST /{module}/{op}`` and is generated from the
gateway operation table, so there is no route that does not go through
``Gateway.handle``. ``/health`` and ``/metrics`` are the only infrastructure
routes.
"""

import socket
from typing import Any, Callable, Dict, Optional

import structlog
import uvicorn
from fastapi import FastAPI, Request, status
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import Settings, load_settings
from ..errors import OwnershipError, RejectedError, ValidationFailure
from ..logging_config import configure_logging
from ..metrics import setup_metrics
from ..system import System
from .envelopes import RequestEnvelope
from .service import OPERATIONS, Gateway

logger = structlog.get_logger(__name__)

INFRASTRUCTURE_ROUTES = frozenset({"/health", "/metrics"})


def _operation_endpoint(name: str) -> Callable[..., Dict[str, Any]]:
    def endpoint(envelope: RequestEnvelope, request: Request) -> Dict[str, Any]:
        if envelope.operation != name:
            raise ValidationFailure(
                f"envelope operation '{envelope.operation}' does not match route '{name}'"
            )
        gateway: Gateway = request.app.state.gateway
        return {"operation": name, "result": gateway.handle(envelope)}

    endpoint.__name__ = name.replace(".", "_")
    endpoint.__doc__ = OPERATIONS[name].description or None
    return endpoint


def create_app(settings: Optional[Settings] = None, system: Optional[System] = None) -> FastAPI:
    """
    Create and configure the FastAPI application.

    Args:
        settings: Deployment settings; loaded from the environment if omitted
        system: Pre-built in-process system (tests, simulations)

    Returns:
        Configured FastAPI application
    """
    settings = settings or (system.settings if system is not None else load_settings())
    system = system or System(settings)
    gateway = Gateway(system)

    app = FastAPI(
        title="Data Ownership Gateway",
        description="Restrictive API over the ownership ledger, identifying stores and record store",
        version=__version__,
        docs_url="/docs" if settings.env != "production" else None,
        redoc_url=None,
        openapi_url="/openapi.json" if settings.env != "production" else None,
    )

    # Store shared objects in app state
    app.state.settings = settings
    app.state.system = system
    app.state.gateway = gateway

    if settings.enable_metrics:
        setup_metrics(app)

    for name in sorted(OPERATIONS):
        operation = OPERATIONS[name]
        app.add_api_route(
            f"/{operation.module}/{operation.op}",
            _operation_endpoint(name),
            methods=["POST"],
            tags=[operation.module],
            name=name,
        )

    @app.exception_handler(OwnershipError)
    async def ownership_exception_handler(request: Request, exc: OwnershipError) -> JSONResponse:
        """Map domain errors to HTTP statuses."""
        return JSONResponse(status_code=exc.http_status, content=jsonable_encoder(exc.to_dict()))

    @app.exception_handler(RequestValidationError)
    async def validation_exception_handler(request: Request, exc: RequestValidationError) -> JSONResponse:
        """Handle request validation errors."""
        return JSONResponse(
            status_code=422,
            content={"error": "validation_error", "detail": jsonable_encoder(exc.errors())},
        )

    @app.exception_handler(Exception)
    async def global_exception_handler(request: Request, exc: Exception) -> JSONResponse:
        """Handle all other exceptions."""
        logger.error("gateway.unhandled", path=request.url.path, error=str(exc), exc_info=True)
        return JSONResponse(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            content={"error": "internal_server_error", "detail": "An unexpected error occurred"},
        )

    @app.get("/health", tags=["health"])
    async def health_check() -> Dict[str, Any]:
        """Liveness plus a few counters; never exposes plane contents."""
        return {
            "status": "ok",
            "version": __version__,
            "time": system.clock.now(),
            "ledger_height": len(system.ledger),
            "nodes": sorted(system.consortium.nodes),
        }

    logger.info(
        "gateway.app_created",
        env=settings.env,
        operations=len(OPERATIONS),
        metrics=settings.enable_metrics,
    )
    return app


def port_available(host: str, port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        try:
            sock.bind((host, port))
        except OSError:
            return False
    return True


def serve(settings: Settings) -> None:
    """Run the service until interrupted."""
    configure_logging(settings.log_level, settings.log_format)
    if not port_available(settings.host, settings.ports.api):
        raise RejectedError(f"port {settings.ports.api} is busy", port=settings.ports.api)
    app = create_app(settings)
    uvicorn.run(app, host=settings.host, port=settings.ports.api, log_config=None)
