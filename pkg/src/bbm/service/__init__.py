from .app import Gateway, QueueSink, create_app
from .config import ServiceConfig, load_service_config
from .origin_app import create_origin_app

__all__ = ["Gateway", "QueueSink", "ServiceConfig", "create_app", "create_origin_app",
           "load_service_config"]
