"""storage/__init__.py — Checkpoint codec and run-directory files."""
