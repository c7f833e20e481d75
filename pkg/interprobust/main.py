from contextlib import asynccontextmanager

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from interprobust.config import settings
from interprobust.routes import attack, interpret
from interprobust.store import get_network, init_model


@asynccontextmanager
async def lifespan(app: FastAPI):
    init_model()
    print("🚀 Server started!")
    yield
    print("👋 Server shutting down...")


app = FastAPI(title="interprobust", lifespan=lifespan)

app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.ALLOWED_ORIGINS,
    allow_credentials=False,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(interpret.router, prefix="/api", tags=["Interpret"])
app.include_router(attack.router, prefix="/api", tags=["Attack"])


@app.get("/")
async def root():
    try:
        net = get_network()
    except HTTPException:
        return {"status": "ok", "model": None}
    return {"status": "ok", "model": net.arch.value}
