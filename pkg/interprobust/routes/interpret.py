"""
routes/interpret.py - Network description and interpretation maps for posted images
"""

from typing import List, Optional

import numpy as np
from fastapi import APIRouter, Depends, HTTPException
from pydantic import BaseModel

from interprobust.exceptions import InterprobustError
from interprobust.models import InterpreterKind
from interprobust.services.interpret_service import IG_STEPS_EVAL, interpret, to_grid
from interprobust.services.network_service import Network
from interprobust.store import get_network

router = APIRouter()


# === SCHEMAS ===

class NetworkInfo(BaseModel):
    arch: str
    input_shape: List[int]
    num_classes: int
    feature_channels: int
    spatial_units: int


class InterpretRequest(BaseModel):
    image: List[List[List[float]]]  # [C][H][W], values in [0, 1]
    kind: InterpreterKind = InterpreterKind.CAM
    class_label: Optional[int] = None
    ig_steps: int = IG_STEPS_EVAL


class InterpretResponse(BaseModel):
    kind: InterpreterKind
    class_label: Optional[int]
    prediction: int
    logits: List[float]
    grid: List[List[float]]


def image_array(net: Network, image: List[List[List[float]]]) -> np.ndarray:
    x = np.asarray(image, dtype=np.float32)
    if x.shape != net.input_shape:
        raise HTTPException(status_code=400, detail=f"Image shape {x.shape}, expected {net.input_shape}")
    if x.min() < 0 or x.max() > 1:
        raise HTTPException(status_code=400, detail="Pixel values must lie in [0, 1]")
    return x


# === ENDPOINTS ===

@router.get("/network", response_model=NetworkInfo)
async def network_info(net: Network = Depends(get_network)):
    return NetworkInfo(
        arch=net.arch.value,
        input_shape=list(net.input_shape),
        num_classes=net.num_classes,
        feature_channels=net.feature_channels,
        spatial_units=net.spatial_units,
    )


@router.post("/interpret", response_model=InterpretResponse)
async def interpret_image(data: InterpretRequest, net: Network = Depends(get_network)):
    x = image_array(net, data.image)
    logits = net.logits(x[None])[0]
    prediction = int(logits.argmax())
    label = None
    if data.kind != InterpreterKind.REPR:
        label = prediction if data.class_label is None else data.class_label

    try:
        result = interpret(net, x, data.kind, label, ig_steps=data.ig_steps)
    except InterprobustError as e:
        raise HTTPException(status_code=400, detail=str(e))

    return InterpretResponse(
        kind=data.kind,
        class_label=label,
        prediction=prediction,
        logits=logits.astype(float).tolist(),
        grid=to_grid(net, result).astype(float).tolist(),
    )
