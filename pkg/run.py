# ===============================
# File: run.py (entry point)
# ===============================
from evizilla.app import main


if __name__ == "__main__":
    raise SystemExit(main())
