"""Sidecar serving multilingual NMT checkpoints over the step protocol."""

from .backend import BackendRequestError, CheckpointBackend, StepRequest
from .server import PROTOCOL_VERSION, ServerConfig, create_app, serve

__version__ = "0.1.0"
