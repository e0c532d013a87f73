"""commands/__init__.py — One module per CLI subcommand group, each exposing register(subparsers)."""
