#!/usr/bin/env python3
"""Serve the estimation, bound and sweep endpoints with uvicorn"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from src.config.settings import settings  # noqa: E402
from src.core.logging_config import setup_logging  # noqa: E402


def main():
    setup_logging()

    base = f"http://{settings.api_host}:{settings.api_port}"
    print(f"📡 {settings.app_name} {settings.app_version}")
    print(f"   endpoints: {base}/estimates  {base}/bounds  {base}/sweeps")
    print(f"   docs:      {base}/docs")
    print(f"   sweep cap: {settings.api_max_sweep_trials} trials per request, results in {settings.results_dir}")

    import uvicorn
    uvicorn.run(
        "src.api.main:app",
        host=settings.api_host,
        port=settings.api_port,
        reload=settings.api_reload,
        log_level=settings.log_level.lower(),
    )


if __name__ == "__main__":
    main()
