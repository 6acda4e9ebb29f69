"""Entry point for ``python -m aortaseg``."""

from .cli import main

raise SystemExit(main())
