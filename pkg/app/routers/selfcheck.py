import logging

from fastapi import APIRouter, Query
from fastapi.concurrency import run_in_threadpool

from app.config import settings
from app.services.selfcheck_service import run_selfcheck

logger = logging.getLogger(__name__)

if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("%(levelname)s:%(name)s:%(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
logger.setLevel(settings.n2uq_log_level)
logger.propagate = False

router = APIRouter(prefix="/api", tags=["selfcheck"])


@router.post("/selfcheck")
async def selfcheck(
    quick: bool = Query(True, description="reduced trial counts"),
    seed: int = Query(0),
):
    # CPU bound: 이벤트 루프 밖에서 실행
    report = await run_in_threadpool(run_selfcheck, quick, seed)
    logger.info("[selfcheck] quick=%s passed=%s", quick, report.passed)
    return {"passed": report.passed, "suites": report.frame.to_dict(orient="records")}
