import logging

from fastapi import APIRouter, Depends, Query

from app.config import settings
from app.deps import get_checkpoint
from app.models.training import Checkpoint
from app.services import inspect_service

logger = logging.getLogger(__name__)

if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("%(levelname)s:%(name)s:%(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
logger.setLevel(settings.n2uq_log_level)
logger.propagate = False

router = APIRouter(prefix="/api/checkpoints", tags=["checkpoints"])


@router.get("/inspect")
def inspect_checkpoint(
    weights: bool = Query(False, description="include weight-level histograms"),
    ckpt: Checkpoint = Depends(get_checkpoint),
):
    """Learned intervals and cut points (and optionally weight histograms) as JSON records."""
    activations = inspect_service.activation_table(ckpt)
    body = {
        "step": ckpt.step,
        "seed": ckpt.seed,
        "config": ckpt.config.model_dump(mode="json"),
        "activations": activations.to_dict(orient="records"),
    }
    if weights:
        body["weights"] = inspect_service.weight_table(ckpt).to_dict(orient="records")
    logger.info("[inspect] step=%s layers=%s weights=%s", ckpt.step, activations["layer"].nunique(), weights)
    return body
