"""tools/__init__.py — Standalone scripts run from the repo root (comparison grid)."""
