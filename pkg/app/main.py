# app/main.py

# ------------------------
# 환경 변수 로드
# ------------------------
from dotenv import load_dotenv
load_dotenv()

# ------------------------
# FastAPI, CORS 미들웨어 import
# ------------------------
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

# ------------------------
# 라우터 import
# ------------------------
from app.routers import checkpoints as checkpoints_router
from app.routers import selfcheck as selfcheck_router

# ------------------------
# 1) FastAPI 앱 생성
# ------------------------
app = FastAPI(title="N2UQ Inspection API")

# ------------------------
# 2) CORS 미들웨어 추가
#    - 읽기 전용 점검 API라 전체 허용
# ------------------------
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=False,
    allow_methods=["*"],
    allow_headers=["*"],
)

# ------------------------
# 3) 라우터 등록
# ------------------------
app.include_router(checkpoints_router.router)
app.include_router(selfcheck_router.router)

# ------------------------
# 4) Root 엔드포인트 (health check)
# ------------------------
@app.get("/")
def root():
    return {"ok": True}
