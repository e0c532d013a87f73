"""core/__init__.py — Numerics, diffusion, optimizers, flatness, robustness, theory and the run engines."""
