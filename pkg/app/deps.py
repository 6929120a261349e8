# app/deps.py
import logging
from pathlib import Path

from fastapi import HTTPException, Query

from app.config import settings
from app.errors import FormatError
from app.models.training import Checkpoint
from app.services.checkpoint_service import load_checkpoint

logger = logging.getLogger(__name__)


# ----------------------------
# checkpoint 로딩 (상대 경로는 N2UQ_DATA_DIR 기준)
# ----------------------------
def get_checkpoint(path: str = Query(..., description="checkpoint path")) -> Checkpoint:
    resolved = Path(path)
    if not resolved.is_absolute():
        resolved = settings.n2uq_data_dir / resolved
    try:
        return load_checkpoint(resolved)
    except FileNotFoundError:
        logger.error("[checkpoint] not_found path=%s", resolved)
        raise HTTPException(
            status_code=404,
            detail={
                "message": "checkpoint_not_found",
                "detail": f"No checkpoint at {resolved}",
            },
        )
    except FormatError as e:
        logger.error("[checkpoint] unreadable path=%s offset=%s", resolved, e.offset)
        raise HTTPException(
            status_code=422,
            detail={
                "message": "checkpoint_unreadable",
                "detail": str(e),
            },
        )
