"""
store.py - The network served by the HTTP API, loaded once at startup
"""

import logging
from pathlib import Path
from typing import Optional, Union

from fastapi import HTTPException

from interprobust.config import settings
from interprobust.services import network_service
from interprobust.services.network_service import Network

logger = logging.getLogger(__name__)

_served: Optional[Network] = None


def init_model(path: Optional[Union[str, Path]] = None) -> Optional[Network]:
    """Load the checkpoint named by INTERP_SERVE_CHECKPOINT (or `path`)."""
    global _served
    path = path or settings.SERVE_CHECKPOINT
    if not path:
        if _served is None:
            logger.warning("no checkpoint configured; /api endpoints will answer 503")
        return _served
    _served = network_service.load(path)
    print(f"✅ Model loaded: {_served.arch.value} from {path}")
    return _served


def set_model(net: Optional[Network]) -> None:
    global _served
    _served = net


def get_network() -> Network:
    """FastAPI dependency"""
    if _served is None:
        raise HTTPException(status_code=503, detail="No model loaded (set INTERP_SERVE_CHECKPOINT)")
    return _served
