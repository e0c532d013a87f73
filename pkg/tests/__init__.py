"""tests/__init__.py — pytest suite for flatdiff."""
