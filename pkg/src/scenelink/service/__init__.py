from .app import create_app
from .config import ServiceConfig
from .storage import BlobStore, Database

__all__ = ["create_app", "ServiceConfig", "BlobStore", "Database"]
