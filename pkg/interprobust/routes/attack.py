"""
routes/attack.py - Run PGD or AAI against the served network
"""

from typing import List, Literal, Optional

from fastapi import APIRouter, Depends, HTTPException
from pydantic import BaseModel, Field

from interprobust.exceptions import InterprobustError
from interprobust.models import AaiObjective, AttackConfig
from interprobust.routes.interpret import image_array
from interprobust.services import attack_service
from interprobust.services.discrepancy_service import kendall_tau
from interprobust.services.interpret_service import cam
from interprobust.services.network_service import Network
from interprobust.store import get_network

router = APIRouter()

# keeps a request bounded
MAX_STEPS = 500


# === SCHEMAS ===

class AttackRequest(BaseModel):
    image: List[List[List[float]]]
    label: int
    method: Literal["pgd", "aai"] = "pgd"
    eps: float = Field(0.3, ge=0, le=1)
    steps: int = Field(200, ge=1, le=MAX_STEPS)
    step_size: float = Field(0.01, gt=0)
    target: Optional[int] = None
    lam: float = Field(1.0, ge=0)
    objective: AaiObjective = AaiObjective.L1_ONE_CLASS
    topk: int = Field(attack_service.AAI_TOPK, ge=1)
    seed: int = 0


class AttackResponse(BaseModel):
    success: bool
    prediction: int
    margin: float
    discrepancy: Optional[float] = None
    tau: Optional[float] = None
    topk_displaced: Optional[int] = None
    x_adv: List[List[List[float]]]


# === ENDPOINTS ===

@router.post("/attack", response_model=AttackResponse)
async def run_attack(data: AttackRequest, net: Network = Depends(get_network)):
    x = image_array(net, data.image)
    if not 0 <= data.label < net.num_classes:
        raise HTTPException(status_code=400, detail=f"Label {data.label} outside [0, {net.num_classes})")

    try:
        if data.method == "pgd":
            cfg = AttackConfig(eps=data.eps, steps=data.steps, step_size=data.step_size, target=data.target, seed=data.seed)
            outcome = attack_service.pgd(net, x, data.label, cfg)
            tau = None
        else:
            outcome = attack_service.aai(
                net, x, data.label, data.eps, data.lam, data.objective, data.topk, data.steps, data.step_size, data.seed
            )
            tau = kendall_tau(cam(net, x, data.label), cam(net, outcome.x_adv, data.label))
    except InterprobustError as e:
        raise HTTPException(status_code=400, detail=str(e))

    return AttackResponse(
        success=outcome.success,
        prediction=outcome.prediction,
        margin=outcome.margin,
        discrepancy=outcome.discrepancy,
        tau=tau,
        topk_displaced=outcome.topk_displaced,
        x_adv=outcome.x_adv.astype(float).tolist(),
    )
